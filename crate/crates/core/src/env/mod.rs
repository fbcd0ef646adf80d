//! Simulated marketplace: a population of users whose states respond to the
//! recommendations they are shown.
//!
//! Each user owns dedicated random streams keyed by `(seed, user_id)`, so a
//! user's trajectory depends only on its own state, actions and outcomes. Two
//! runs with the same seed that serve a user the same actions produce the same
//! trajectory for that user regardless of what happens to anyone else.

pub(crate) mod streams;
pub mod tabular;
pub mod vector;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::Scorer;
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::state::{Action, Period, UserId, UserState};

use streams::UserStreams;
pub use tabular::{KernelSpec, ScoringSpec, TabularConfig, TabularModel};
pub use vector::{VectorConfig, VectorModel};

/// User behavior: initial state, interaction propensity, conversion model and
/// state transition. The history-to-state encoding lives entirely behind this
/// trait.
pub trait UserModel: Send + Sync + std::fmt::Debug {
    /// Number of actions including "no recommendation".
    fn n_actions(&self) -> usize;

    /// Length of `UserState::features`, or `None` for index states.
    fn feature_dim(&self) -> Option<usize>;

    fn initial_state(&self, user: UserId, rng: &mut ChaCha8Rng) -> UserState;

    /// Moves the side information `i`. Called once per alive period, before
    /// the interaction draw.
    fn exogenous_update(&self, _s: &mut UserState, _rng: &mut ChaCha8Rng) {}

    fn interaction_prob(&self, s: &UserState) -> f64;

    fn conversion_prob(&self, s: &UserState, a: Action) -> f64;

    /// Sorted, starting with `NO_RECOMMENDATION`.
    fn eligible(&self, s: &UserState) -> Vec<Action>;

    fn bid(&self, s: &UserState, a: Action) -> f64;

    /// The scoring model's conversion estimate. Defaults to the truth.
    fn ecvr(&self, s: &UserState, a: Action) -> f64 {
        self.conversion_prob(s, a)
    }

    /// Next state after `a` was shown with the given outcome.
    fn transition(&self, s: &UserState, a: Action, converted: bool, rng: &mut ChaCha8Rng) -> UserState;

    /// The part of the state a Q-estimator is given. Defaults to all of it.
    fn q_view(&self, s: &UserState) -> UserState {
        s.clone()
    }

    /// Length of `q_view(s).features()`, or `None` for index states.
    fn q_feature_dim(&self) -> Option<usize> {
        self.feature_dim()
    }

    /// The exact kernel, when the model is tabular.
    fn as_tabular(&self) -> Option<&TabularMdp<f64>> {
        None
    }
}

/// Bid-eCVR scorer backed by a user model.
#[derive(Clone, Debug)]
pub struct ModelScorer {
    model: Arc<dyn UserModel>,
}

impl ModelScorer {
    pub fn new(model: Arc<dyn UserModel>) -> Self {
        ModelScorer { model }
    }
}

impl Scorer<f64> for ModelScorer {
    fn eligible(&self, s: &UserState) -> Vec<Action> {
        self.model.eligible(s)
    }

    fn bid(&self, s: &UserState, a: Action) -> f64 {
        self.model.bid(s, a)
    }

    fn ecvr(&self, s: &UserState, a: Action) -> f64 {
        self.model.ecvr(s, a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    /// Users that ever exist.
    pub n_users: usize,
    /// Share of users alive at period 0.
    #[serde(default = "one")]
    pub initial_fraction: f64,
    /// Per-period probability that a not-yet-arrived user arrives.
    #[serde(default)]
    pub arrival_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl PopulationConfig {
    pub fn new(n_users: usize, seed: u64) -> Self {
        PopulationConfig {
            n_users,
            initial_fraction: 1.0,
            arrival_prob: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::InvalidConfig("population needs at least one user".into()));
        }
        for (name, p) in [("initial_fraction", self.initial_fraction), ("arrival_prob", self.arrival_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BackendConfig {
    Tabular(TabularConfig),
    Vector(VectorConfig),
}

/// Top-level environment configuration, as read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub population: PopulationConfig,
    pub backend: BackendConfig,
}

impl EnvConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn build_model(&self) -> Result<Arc<dyn UserModel>> {
        Ok(match &self.backend {
            BackendConfig::Tabular(c) => Arc::new(TabularModel::from_config(c)?),
            BackendConfig::Vector(c) => Arc::new(VectorModel::from_config(c)?),
        })
    }
}

/// Result of one interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    /// The item the user ended up engaging with through its end behavior, or
    /// `None`.
    pub y: Option<Action>,
    pub converted: bool,
}

impl Outcome {
    pub fn reward(&self) -> u8 {
        u8::from(self.converted)
    }
}

/// One line of the interaction log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: Period,
    pub user_id: u64,
    pub state_repr: String,
    pub item_id: u32,
    pub converted: u8,
}

pub fn write_log_csv<W: Write>(w: W, rows: &[LogRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
struct Slot {
    id: UserId,
    birth: Option<Period>,
    state: UserState,
    streams: UserStreams,
}

fn birth_period(cfg: &PopulationConfig, rng: &mut ChaCha8Rng) -> Option<Period> {
    if rng.gen::<f64>() < cfg.initial_fraction {
        return Some(0);
    }
    if cfg.arrival_prob <= 0.0 {
        return None;
    }
    if cfg.arrival_prob >= 1.0 {
        return Some(1);
    }
    // Geometric number of periods until arrival, by inversion.
    let u: f64 = 1.0 - rng.gen::<f64>();
    let k = (u.ln() / (1.0 - cfg.arrival_prob).ln()).floor();
    (k < f64::from(u32::MAX - 1)).then(|| k as Period + 1)
}

/// A population of users evolving period by period.
///
/// Each period is driven as `active_users(t)` followed by `step(t, actions)`.
#[derive(Clone, Debug)]
pub struct Environment {
    model: Arc<dyn UserModel>,
    slots: Vec<Slot>,
    /// Period whose active set has been drawn but not yet stepped.
    open: Option<(Period, Vec<usize>)>,
    next_period: Period,
    log: Option<Vec<LogRow>>,
}

impl Environment {
    pub fn spawn(population: &PopulationConfig, model: Arc<dyn UserModel>) -> Result<Self> {
        population.validate()?;
        let slots = (0..population.n_users as u64)
            .map(|k| {
                let id = UserId(k);
                let mut streams = UserStreams::new(population.seed, id);
                let birth = birth_period(population, &mut streams.birth);
                let state = model.initial_state(id, &mut streams.birth);
                Slot { id, birth, state, streams }
            })
            .collect();
        Ok(Environment {
            model,
            slots,
            open: None,
            next_period: 0,
            log: None,
        })
    }

    pub fn from_config(cfg: &EnvConfig) -> Result<Self> {
        Self::spawn(&cfg.population, cfg.build_model()?)
    }

    /// Keeps every served interaction for [`Environment::log`].
    pub fn record_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn log(&self) -> &[LogRow] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn model(&self) -> &Arc<dyn UserModel> {
        &self.model
    }

    pub fn scorer(&self) -> ModelScorer {
        ModelScorer::new(self.model.clone())
    }

    pub fn n_users(&self) -> usize {
        self.slots.len()
    }

    /// Users that have arrived by period `t`.
    pub fn alive_count(&self, t: Period) -> usize {
        self.slots.iter().filter(|s| s.birth.is_some_and(|b| b <= t)).count()
    }

    /// Ids of users that have arrived by period `t`.
    pub fn alive_users(&self, t: Period) -> Vec<UserId> {
        self.slots
            .iter()
            .filter(|s| s.birth.is_some_and(|b| b <= t))
            .map(|s| s.id)
            .collect()
    }

    pub fn birth(&self, u: UserId) -> Option<Period> {
        self.slots.get(u.0 as usize).and_then(|s| s.birth)
    }

    pub fn state_of(&self, u: UserId) -> Result<&UserState> {
        self.slots
            .get(u.0 as usize)
            .map(|s| &s.state)
            .ok_or(Error::MissingUser(u))
    }

    /// The kernel that `step` samples from.
    pub fn as_tabular(&self) -> Result<TabularMdp<f64>> {
        self.model.as_tabular().cloned().ok_or(Error::UnsupportedInVectorMode)
    }

    /// Draws the set of users interacting at `t`, sorted by id. Periods must be
    /// visited in order; asking again for the open period returns the same set.
    pub fn active_users(&mut self, t: Period) -> Result<Vec<UserId>> {
        if let Some((open_t, idx)) = &self.open {
            if *open_t == t {
                return Ok(idx.iter().map(|k| self.slots[*k].id).collect());
            }
            return Err(Error::PeriodMismatch { expected: *open_t, got: t });
        }
        if t != self.next_period {
            return Err(Error::PeriodMismatch {
                expected: self.next_period,
                got: t,
            });
        }
        let model = &self.model;
        let mut active = Vec::new();
        for (k, slot) in self.slots.iter_mut().enumerate() {
            if !slot.birth.is_some_and(|b| b <= t) {
                continue;
            }
            model.exogenous_update(&mut slot.state, &mut slot.streams.exo);
            let u: f64 = slot.streams.interact.gen();
            if u < model.interaction_prob(&slot.state) {
                active.push(k);
            }
        }
        let ids = active.iter().map(|k| self.slots[*k].id).collect();
        self.open = Some((t, active));
        Ok(ids)
    }

    /// Serves `actions` to the active users of `t` and advances their states.
    /// The map must contain exactly the active users.
    pub fn step(&mut self, t: Period, actions: &BTreeMap<UserId, Action>) -> Result<BTreeMap<UserId, (Outcome, UserState)>> {
        let active = match &self.open {
            Some((open_t, idx)) if *open_t == t => idx.clone(),
            Some((open_t, _)) => return Err(Error::PeriodMismatch { expected: *open_t, got: t }),
            None => return Err(Error::PeriodMismatch { expected: self.next_period, got: t }),
        };
        if let Some(extra) = actions.keys().find(|u| active.binary_search(&(u.0 as usize)).is_err()) {
            return Err(Error::UnservedUser(*extra));
        }
        // Validate everything before touching any state.
        for k in &active {
            let slot = &self.slots[*k];
            let a = *actions.get(&slot.id).ok_or(Error::MissingUser(slot.id))?;
            if !self.model.eligible(&slot.state).contains(&a) {
                return Err(Error::IneligibleItem {
                    state: slot.state.label(),
                    action: a,
                });
            }
        }
        let mut out = BTreeMap::new();
        for k in active {
            let slot = &mut self.slots[k];
            let a = actions[&slot.id];
            let p = self.model.conversion_prob(&slot.state, a);
            let converted = slot.streams.outcome.gen::<f64>() < p;
            let next = self.model.transition(&slot.state, a, converted, &mut slot.streams.outcome);
            if let Some(log) = &mut self.log {
                log.push(LogRow {
                    t,
                    user_id: slot.id.0,
                    state_repr: slot.state.repr(),
                    item_id: a.0,
                    converted: u8::from(converted),
                });
            }
            let outcome = Outcome {
                y: converted.then_some(a),
                converted,
            };
            slot.state = next.clone();
            out.insert(slot.id, (outcome, next));
        }
        self.open = None;
        self.next_period = t + 1;
        Ok(out)
    }

    /// Convenience driver: draws the active set, asks `policy` for each
    /// user's action and steps.
    pub fn run_period<F>(&mut self, t: Period, mut policy: F) -> Result<Vec<(UserId, UserState, Action, Outcome)>>
    where
        F: FnMut(&UserState) -> Result<Action>,
    {
        let active = self.active_users(t)?;
        let mut actions = BTreeMap::new();
        let mut before = Vec::with_capacity(active.len());
        for u in &active {
            let s = self.state_of(*u)?.clone();
            actions.insert(*u, policy(&s)?);
            before.push(s);
        }
        let result = self.step(t, &actions)?;
        Ok(active
            .into_iter()
            .zip(before)
            .map(|(u, s)| (u, s, actions[&u], result[&u].0))
            .collect())
    }
}
