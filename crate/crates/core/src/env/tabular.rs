use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::UserModel;
use crate::auction::{Eligibility, Scorer, TabularScoring};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::state::{Action, UserId, UserState};

/// Where the transition kernel and conversion probabilities come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Separate random kernels after a conversion and after no conversion;
    /// conversion probabilities uniform on `[0, max_conversion]`.
    Random { seed: u64, max_conversion: f64 },
    /// `s,a,s_next,prob` and `s,a,reward` tables. The successor does not
    /// depend on the outcome.
    Csv { transitions: PathBuf, rewards: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ScoringSpec {
    /// Random bids; eCVR equals the true conversion probability. Each item
    /// is eligible in each state with probability `keep`.
    Random { seed: u64, keep: f64 },
    /// `state_id,item_id,bid,ecvr` rows.
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    pub n_states: usize,
    /// Catalog size, not counting "no recommendation".
    pub n_items: usize,
    /// One probability for every state, or one per state.
    #[serde(default = "default_interaction")]
    pub interaction_prob: Vec<f64>,
    /// Fixed initial state; uniform when absent.
    #[serde(default)]
    pub initial_state: Option<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub kernel: KernelSpec,
    pub scoring: ScoringSpec,
}

fn default_interaction() -> Vec<f64> {
    vec![1.0]
}

fn default_gamma() -> f64 {
    0.8
}

impl TabularConfig {
    /// Random kernels and scoring, every user interacting every period.
    pub fn random(n_states: usize, n_items: usize, seed: u64) -> Self {
        TabularConfig {
            n_states,
            n_items,
            interaction_prob: vec![1.0],
            initial_state: None,
            gamma: 0.8,
            kernel: KernelSpec::Random {
                seed,
                max_conversion: 0.5,
            },
            scoring: ScoringSpec::Random {
                seed: seed ^ 0x5c0,
                keep: 1.0,
            },
        }
    }
}

/// Tabular user model: the state is an index, the successor is drawn from a
/// kernel conditioned on the outcome.
#[derive(Clone, Debug)]
pub struct TabularModel {
    mdp: TabularMdp<f64>,
    /// `[after no conversion, after conversion]` kernels, if outcome-dependent.
    by_outcome: Option<[Vec<f64>; 2]>,
    interaction_prob: Vec<f64>,
    initial_state: Option<usize>,
    scoring: TabularScoring<f64>,
}

fn dirichlet_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

impl TabularModel {
    pub fn from_config(cfg: &TabularConfig) -> Result<Self> {
        let (n_s, n_a) = (cfg.n_states, cfg.n_items + 1);
        if n_s == 0 {
            return Err(Error::InvalidConfig("tabular backend needs at least one state".into()));
        }
        if cfg.interaction_prob.len() != 1 && cfg.interaction_prob.len() != n_s {
            return Err(Error::InvalidConfig("interaction_prob needs 1 or n_states entries".into()));
        }
        if cfg.interaction_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("interaction probabilities must lie in [0, 1]".into()));
        }
        if cfg.initial_state.is_some_and(|s| s >= n_s) {
            return Err(Error::InvalidConfig("initial_state out of range".into()));
        }
        let (mdp, by_outcome) = match &cfg.kernel {
            KernelSpec::Random { seed, max_conversion } => {
                if !(0.0..=1.0).contains(max_conversion) {
                    return Err(Error::InvalidConfig("max_conversion must lie in [0, 1]".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut k0 = Vec::with_capacity(n_s * n_a * n_s);
                let mut k1 = Vec::with_capacity(n_s * n_a * n_s);
                let mut rewards = Vec::with_capacity(n_s * n_a);
                for _s in 0..n_s {
                    for a in 0..n_a {
                        k0.extend(dirichlet_row(&mut rng, n_s));
                        k1.extend(dirichlet_row(&mut rng, n_s));
                        rewards.push(if a == 0 { 0.0 } else { rng.gen::<f64>() * max_conversion });
                    }
                }
                let mut mixed = Vec::with_capacity(k0.len());
                for (k, (p0, p1)) in k0.iter().zip(&k1).enumerate() {
                    let r = rewards[k / n_s];
                    mixed.push(r * p1 + (1.0 - r) * p0);
                }
                let mdp = TabularMdp::new(n_s, n_a, mixed, rewards, cfg.gamma)?;
                (mdp, Some([k0, k1]))
            }
            KernelSpec::Csv { transitions, rewards } => {
                let mdp = TabularMdp::read_csv(
                    std::fs::File::open(transitions)?,
                    std::fs::File::open(rewards)?,
                    cfg.gamma,
                )?;
                if mdp.n_states() != n_s || mdp.n_actions() != n_a {
                    return Err(Error::ShapeMismatch("kernel tables do not match n_states / n_items".into()));
                }
                (mdp, None)
            }
        };
        let scoring = match &cfg.scoring {
            ScoringSpec::Random { seed, keep } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let eligibility = Eligibility::random(&mut rng, n_s, n_a, *keep);
                let bid = (0..n_s * n_a).map(|_| rng.gen_range(0.5..2.0)).collect();
                let ecvr = (0..n_s)
                    .flat_map(|s| (0..n_a).map(move |a| (s, a)))
                    .map(|(s, a)| mdp.reward(s, a))
                    .collect();
                let mut sc = TabularScoring::new(n_s, n_a, bid, ecvr, eligibility)?;
                sc.separate_ties();
                sc
            }
            ScoringSpec::Csv { path } => {
                let sc = TabularScoring::read_csv(std::fs::File::open(path)?)?;
                if sc.n_states() > n_s || sc.n_actions() > n_a {
                    return Err(Error::ShapeMismatch("scoring table exceeds the environment".into()));
                }
                sc
            }
        };
        Ok(TabularModel {
            mdp,
            by_outcome,
            interaction_prob: cfg.interaction_prob.clone(),
            initial_state: cfg.initial_state,
            scoring,
        })
    }

    pub fn mdp(&self) -> &TabularMdp<f64> {
        &self.mdp
    }

    pub fn scoring(&self) -> &TabularScoring<f64> {
        &self.scoring
    }

    /// Whether the scoring table has an entry for `(s, a)`; a table read from
    /// CSV may omit trailing states or items.
    fn scored(&self, s: &UserState, a: Action) -> bool {
        Self::index(s) < self.scoring.n_states() && a.index() < self.scoring.n_actions()
    }

    fn index(s: &UserState) -> usize {
        s.tabular_index().expect("tabular model received a vector state")
    }
}

impl UserModel for TabularModel {
    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn feature_dim(&self) -> Option<usize> {
        None
    }

    fn initial_state(&self, user: UserId, rng: &mut ChaCha8Rng) -> UserState {
        let s = self
            .initial_state
            .unwrap_or_else(|| rng.gen_range(0..self.mdp.n_states()));
        UserState::tabular(user, s)
    }

    fn interaction_prob(&self, s: &UserState) -> f64 {
        if self.interaction_prob.len() == 1 {
            self.interaction_prob[0]
        } else {
            self.interaction_prob[Self::index(s)]
        }
    }

    fn conversion_prob(&self, s: &UserState, a: Action) -> f64 {
        self.mdp.reward(Self::index(s), a.index())
    }

    fn eligible(&self, s: &UserState) -> Vec<Action> {
        self.scoring.eligible(s)
    }

    fn bid(&self, s: &UserState, a: Action) -> f64 {
        if self.scored(s, a) {
            self.scoring.bid(s, a)
        } else {
            0.0
        }
    }

    fn ecvr(&self, s: &UserState, a: Action) -> f64 {
        if self.scored(s, a) {
            self.scoring.ecvr(s, a)
        } else {
            0.0
        }
    }

    fn as_tabular(&self) -> Option<&TabularMdp<f64>> {
        Some(&self.mdp)
    }

    fn transition(&self, s: &UserState, a: Action, converted: bool, rng: &mut ChaCha8Rng) -> UserState {
        let k = Self::index(s);
        let u: f64 = rng.gen();
        let next = match &self.by_outcome {
            Some(kernels) => {
                let n = self.mdp.n_states();
                let start = (k * self.mdp.n_actions() + a.index()) * n;
                let row = &kernels[usize::from(converted)][start..start + n];
                let mut acc = 0.0;
                row.iter()
                    .position(|p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or_else(|| row.iter().rposition(|p| *p > 0.0).unwrap_or(n - 1))
            }
            None => self.mdp.sample_next(k, a.index(), u),
        };
        UserState::tabular(s.user_id, next)
    }
}
