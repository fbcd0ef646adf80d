use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::state::UserId;

/// Independent random streams of one user, keyed by `(seed, user_id)` so that
/// a user's randomness does not depend on who else is in the population.
#[derive(Clone, Debug)]
pub(crate) struct UserStreams {
    /// Arrival time and initial state.
    pub birth: ChaCha8Rng,
    /// One draw per alive period: does the user interact?
    pub interact: ChaCha8Rng,
    /// Outcome and interest transition draws, consumed only on interaction.
    pub outcome: ChaCha8Rng,
    /// Side-information updates, one batch per alive period.
    pub exo: ChaCha8Rng,
}

/// SplitMix64 finalizer.
pub(crate) fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl UserStreams {
    pub fn new(seed: u64, user: UserId) -> Self {
        let key = mix(mix(seed) ^ user.0.wrapping_mul(0xA24B_AED4_963E_E407));
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            rng.set_stream(k);
            rng
        };
        UserStreams {
            birth: stream(0),
            interact: stream(1),
            outcome: stream(2),
            exo: stream(3),
        }
    }
}
