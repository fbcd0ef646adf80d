//! On-policy Q estimation from irregularly timed transition tuples.
//!
//! Targets are `r + gamma^tau * Q_target(s', a')`, or just `r` for tuples
//! that end in the dummy terminal pair, whose value is fixed at zero.

mod buffer;
mod network;
mod tabular;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{ReplayBuffer, DEFAULT_CAPACITY};
pub use network::{MlpQ, StateEncoding, DEFAULT_HIDDEN};
pub use tabular::TabularQ;

use crate::error::{Error, Result};
use crate::policy::QEstimate;
use crate::scalar::{powu, Scalar};
use crate::state::{Action, Period, UserState};

/// `(s, a, r, s', a', tau)`; `next == None` encodes the dummy terminal pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionTuple {
    /// Period of the head interaction `(s, a, r)`.
    pub t: Period,
    pub s: UserState,
    pub a: Action,
    pub r: u8,
    pub next: Option<(UserState, Action)>,
    /// Periods between the head interaction and the next one; 0 when terminal.
    pub tau: u32,
}

impl TransitionTuple {
    pub fn transition(
        t: Period,
        s: UserState,
        a: Action,
        r: u8,
        s_next: UserState,
        a_next: Action,
        tau: u32,
    ) -> Result<Self> {
        if tau == 0 {
            return Err(Error::InvalidTuple("non-terminal tuples need tau >= 1".into()));
        }
        Self::check_reward(r)?;
        Ok(TransitionTuple {
            t,
            s,
            a,
            r,
            next: Some((s_next, a_next)),
            tau,
        })
    }

    pub fn terminal(t: Period, s: UserState, a: Action, r: u8) -> Result<Self> {
        Self::check_reward(r)?;
        Ok(TransitionTuple {
            t,
            s,
            a,
            r,
            next: None,
            tau: 0,
        })
    }

    fn check_reward(r: u8) -> Result<()> {
        if r > 1 {
            return Err(Error::InvalidTuple(format!("reward {r} is not binary")));
        }
        Ok(())
    }

    pub fn is_terminal(&self) -> bool {
        self.next.is_none()
    }
}

/// Q-function with an online parameter vector θ and a frozen copy θ⁻.
pub trait QModel<T: Scalar>: QEstimate<T> {
    fn value(&self, s: &UserState, a: Action) -> Result<T>;

    fn target_value(&self, s: &UserState, a: Action) -> Result<T>;

    /// One semi-gradient step on `(s, a, y)` triples with the targets `y`
    /// held constant: `θ ← θ + step · mean_j (y_j - Q(s_j, a_j)) ∇Q(s_j, a_j)`.
    /// Returns `Σ_j (y_j - Q(s_j, a_j))²` before the update.
    fn apply_semi_gradient(&mut self, batch: &[(&UserState, Action, T)], step: T) -> Result<T>;

    /// θ⁻ ← θ.
    fn sync_target(&mut self);

    fn params(&self) -> &[T];

    fn target_params(&self) -> &[T];

    fn target_params_mut(&mut self) -> &mut [T];

    fn checkpoint(&self) -> Checkpoint;
}

/// `r` for terminal tuples, otherwise `r + gamma^tau * Q_target(s', a')`.
pub fn compute_target<T: Scalar, M: QModel<T> + ?Sized>(d: &TransitionTuple, q: &M, gamma: T) -> Result<T> {
    let r = T::lit(f64::from(d.r));
    match &d.next {
        None => Ok(r),
        Some((s_next, a_next)) => Ok(r + powu(gamma, d.tau) * q.target_value(s_next, *a_next)?),
    }
}

/// `alpha_k = c / (1 + k / k0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub c: f64,
    pub k0: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { c: 0.5, k0: 1000.0 }
    }
}

impl StepSchedule {
    pub fn at(&self, k: u64) -> f64 {
        self.c / (1.0 + k as f64 / self.k0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub step: StepSchedule,
    pub gamma: f64,
    pub target_sync_k: u64,
    pub total_steps: u64,
    pub buffer_capacity: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 32,
            step: StepSchedule::default(),
            gamma: 0.8,
            target_sync_k: 100,
            total_steps: 10_000,
            buffer_capacity: DEFAULT_CAPACITY,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.target_sync_k == 0 {
            return Err(Error::InvalidConfig("target_sync_k must be at least 1".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::InvalidConfig("batch size and buffer capacity must be positive".into()));
        }
        if !(self.step.c > 0.0 && self.step.k0 > 0.0) {
            return Err(Error::InvalidConfig("step-size schedule must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub eval_error: Option<f64>,
}

/// Writes `step,loss,eval_error` rows; the header is emitted only when `header` is set.
pub fn write_curve_csv<W: Write>(w: W, points: &[CurvePoint], header: bool) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        out.write_record(["step", "loss", "eval_error"])?;
    }
    for p in points {
        out.write_record([
            p.step.to_string(),
            format!("{:?}", p.loss),
            p.eval_error.map(|e| format!("{e:?}")).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Stateful driver for the training loop: owns the step counter and the
/// sampling RNG so that training can be resumed across calls.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainerConfig,
    step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { cfg, step: 0, rng })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    /// Number of completed training steps.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Sample a batch, compute targets with θ⁻, take one semi-gradient step,
    /// then sync θ⁻ ← θ when the step index is a multiple of `target_sync_k`.
    pub fn train_step<T: Scalar, M: QModel<T>>(&mut self, buffer: &ReplayBuffer, q: &mut M) -> Result<T> {
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let gamma = T::lit(self.cfg.gamma);
        let batch = buffer.sample(self.cfg.batch_size, &mut self.rng);
        let targets = batch
            .iter()
            .map(|d| compute_target(d, q, gamma))
            .collect::<Result<Vec<T>>>()?;
        let triples: Vec<(&UserState, Action, T)> =
            batch.iter().zip(&targets).map(|(d, y)| (&d.s, d.a, *y)).collect();
        let loss = q.apply_semi_gradient(&triples, T::lit(self.cfg.step.at(self.step)))?;
        if self.step % self.cfg.target_sync_k == 0 {
            q.sync_target();
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs `total_steps` iterations. Before every step `feed` may append
    /// fresh tuples to the buffer; every `eval_every` steps (if nonzero) the
    /// loss and `eval(q)` are recorded.
    pub fn fit<T, M, F, E>(
        &mut self,
        buffer: &mut ReplayBuffer,
        q: &mut M,
        mut feed: F,
        eval_every: u64,
        mut eval: E,
    ) -> Result<Vec<CurvePoint>>
    where
        T: Scalar,
        M: QModel<T>,
        F: FnMut(u64, &mut ReplayBuffer) -> Result<()>,
        E: FnMut(&M) -> Option<f64>,
    {
        let mut curve = Vec::new();
        for t in 0..self.cfg.total_steps {
            feed(t, buffer)?;
            let loss = self.train_step(buffer, q)?;
            if eval_every > 0 && ((t + 1) % eval_every == 0 || t + 1 == self.cfg.total_steps) {
                curve.push(CurvePoint {
                    step: self.step,
                    loss: loss.as_f64(),
                    eval_error: eval(q),
                });
            }
        }
        Ok(curve)
    }
}

/// Versioned text dump of θ and θ⁻ with shape metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub shape: Vec<usize>,
    pub state_encoding: Option<StateEncoding>,
    pub params: Vec<f64>,
    pub target_params: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "ltv-q-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    fn new<T: Scalar>(
        kind: &str,
        shape: Vec<usize>,
        state_encoding: Option<StateEncoding>,
        params: &[T],
        target: &[T],
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            shape,
            state_encoding,
            params: params.iter().map(|v| v.as_f64()).collect(),
            target_params: target.iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Parse(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::UserId;

    fn s(k: usize) -> UserState {
        UserState::tabular(UserId(0), k)
    }

    #[test]
    fn targets() {
        let mut q = TabularQ::<f64>::new(2, 2, 0.0);
        let terminal = TransitionTuple::terminal(0, s(0), Action(1), 1).unwrap();
        assert_eq!(compute_target(&terminal, &q, 0.8).unwrap(), 1.0);

        q.target_params_mut()[3] = 1.0; // Q⁻(1, 1)
        let d = TransitionTuple::transition(0, s(0), Action(1), 1, s(1), Action(1), 3).unwrap();
        assert_eq!(compute_target(&d, &q, 0.8).unwrap(), 1.512);

        let zero = TransitionTuple::transition(0, s(0), Action(1), 0, s(0), Action(0), 1).unwrap();
        assert_eq!(compute_target(&zero, &q, 0.8).unwrap(), 0.0);
    }

    #[test]
    fn tuple_invariants() {
        assert!(TransitionTuple::transition(0, s(0), Action(1), 0, s(1), Action(1), 0).is_err());
        assert!(TransitionTuple::terminal(0, s(0), Action(1), 2).is_err());
        let t = TransitionTuple::terminal(0, s(0), Action(1), 1).unwrap();
        assert!(t.is_terminal() && t.tau == 0);
    }

    #[test]
    fn full_correction_with_unit_step() {
        let mut q = TabularQ::<f64>::new(2, 2, 0.3);
        let mut buf = ReplayBuffer::new(4);
        buf.push(TransitionTuple::terminal(0, s(1), Action(1), 1).unwrap());
        let cfg = TrainerConfig {
            batch_size: 1,
            step: StepSchedule { c: 1.0, k0: 1e12 },
            ..TrainerConfig::default()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        let loss: f64 = trainer.train_step(&buf, &mut q).unwrap();
        assert!((loss - 0.49).abs() < 1e-15);
        assert_eq!(q.get(1, Action(1)), 1.0);
    }

    #[test]
    fn fixed_point_leaves_parameters_unchanged() {
        let mut q = TabularQ::<f64>::new(1, 2, 0.0);
        // Q(0,1) = 1 with a terminal reward of 1: target equals prediction
        q.apply_semi_gradient(&[(&s(0), Action(1), 1.0)], 1.0).unwrap();
        q.sync_target();
        let before = q.params().to_vec();
        let mut buf = ReplayBuffer::new(4);
        buf.push(TransitionTuple::terminal(0, s(0), Action(1), 1).unwrap());
        let mut trainer = Trainer::new(TrainerConfig::default()).unwrap();
        let loss: f64 = trainer.train_step(&buf, &mut q).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(q.params(), before.as_slice());
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let mut q = TabularQ::<f64>::new(1, 1, 0.0);
        let mut trainer = Trainer::new(TrainerConfig::default()).unwrap();
        let r: Result<f64> = trainer.train_step(&ReplayBuffer::new(1), &mut q);
        assert!(matches!(r, Err(Error::EmptyBuffer)));
    }

    #[test]
    fn sync_is_idempotent() {
        let mut q = TabularQ::<f64>::new(2, 2, 0.0);
        q.apply_semi_gradient(&[(&s(0), Action(1), 1.0)], 0.5).unwrap();
        q.sync_target();
        let once = q.target_params().to_vec();
        q.sync_target();
        assert_eq!(q.target_params(), once.as_slice());
        assert_eq!(q.params(), q.target_params());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainerConfig::default();
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        cfg.gamma = 0.8;
        cfg.target_sync_k = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn step_schedule_decays() {
        let s = StepSchedule { c: 1.0, k0: 1000.0 };
        assert_eq!(s.at(0), 1.0);
        assert_eq!(s.at(1000), 0.5);
        assert!(s.at(5000) < s.at(4999));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut q = TabularQ::<f64>::new(3, 2, 0.1);
        q.apply_semi_gradient(&[(&s(2), Action(1), 0.7)], 0.3).unwrap();
        let text = q.checkpoint().to_text().unwrap();
        let back = TabularQ::<f64>::from_checkpoint(&Checkpoint::from_text(&text).unwrap()).unwrap();
        assert_eq!(back, q);

        let net = MlpQ::<f64>::new(StateEncoding::OneHot { n_states: 3 }, 2, &[4], 1);
        let text = net.checkpoint().to_text().unwrap();
        let c = Checkpoint::from_text(&text).unwrap();
        assert_eq!(MlpQ::<f64>::from_checkpoint(&c).unwrap(), net);
        assert!(TabularQ::<f64>::from_checkpoint(&c).is_err());
    }

    #[test]
    fn curve_csv() {
        let mut buf = Vec::new();
        let pts = [CurvePoint { step: 10, loss: 0.5, eval_error: None }];
        write_curve_csv(&mut buf, &pts, true).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,eval_error\n10,0.5,\n");
    }
}
