//! Feature-vector backend with a trust state that items push up or down.
//!
//! State layout: `z = [trust, interest...]`, `x` = static context,
//! `i = [availability flag per item..., noise...]`. An item is eligible iff its
//! availability flag is set. Conversion probability is
//! `cvr * (floor + (1 - floor) * trust) * (1 + affinity <interest, dir>) * (1 + noise_effect * tanh(noise_0))`.
//! Trap items convert better today but drag trust toward a low target;
//! healthy items pull trust toward 1. Bids are set so that trap items score
//! slightly higher under bid x eCVR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::UserModel;
use crate::error::{Error, Result};
use crate::state::{Action, Interest, UserId, UserState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorConfig {
    /// Seed for the item catalog.
    pub catalog_seed: u64,
    pub interest_dim: usize,
    pub context_dim: usize,
    pub noise_dim: usize,
    pub n_healthy: usize,
    pub n_trap: usize,
    pub healthy_cvr_min: f64,
    pub healthy_cvr_max: f64,
    /// Trap cvr relative to a healthy item's.
    pub trap_cvr_ratio: f64,
    /// Relative bid-eCVR advantage of trap items at equal state.
    pub trap_score_edge: f64,
    pub bid_scale: f64,
    /// Every item bids `bid_scale`, so bid x eCVR ranks by eCVR alone.
    pub equal_bids: bool,
    pub trust_floor: f64,
    pub initial_trust: f64,
    pub healthy_trust_rate: f64,
    pub trap_trust_rate: f64,
    pub trap_trust_target: f64,
    pub affinity: f64,
    pub interest_step: f64,
    pub interest_decay: f64,
    /// Per-period probability that an item is available to a user.
    pub availability: f64,
    /// Interaction probability at full trust.
    pub base_interaction: f64,
    /// 0 makes the interaction probability state-independent, which keeps
    /// impression opportunities equal across policies.
    pub interaction_trust_weight: f64,
    pub noise_persistence: f64,
    pub noise_effect: f64,
    /// Whether the Q-estimator sees the availability flags. They are redrawn
    /// every period and do not enter the conversion model, so `Q(s, a)` does
    /// not depend on them; under the base policy they do determine the
    /// logged action, which lets a network attribute value to the flags.
    pub q_sees_availability: bool,
}

impl Default for VectorConfig {
    fn default() -> Self {
        Self::myopic_trap()
    }
}

impl VectorConfig {
    /// Trap items win the auction but erode trust, so the base policy
    /// converts less over time than a policy that avoids them.
    pub fn myopic_trap() -> Self {
        VectorConfig {
            catalog_seed: 11,
            interest_dim: 3,
            context_dim: 2,
            noise_dim: 1,
            n_healthy: 4,
            n_trap: 4,
            healthy_cvr_min: 0.15,
            healthy_cvr_max: 0.25,
            trap_cvr_ratio: 1.6,
            trap_score_edge: 0.03,
            bid_scale: 10.0,
            equal_bids: false,
            trust_floor: 0.2,
            initial_trust: 0.8,
            healthy_trust_rate: 0.15,
            trap_trust_rate: 0.35,
            trap_trust_target: 0.0,
            affinity: 0.3,
            interest_step: 0.3,
            interest_decay: 0.05,
            availability: 0.3,
            base_interaction: 0.8,
            interaction_trust_weight: 0.0,
            noise_persistence: 0.8,
            noise_effect: 0.05,
            q_sees_availability: false,
        }
    }

    /// Conversion probabilities that no recommendation can change, and bids
    /// that make bid x eCVR rank by conversion probability.
    pub fn no_long_term() -> Self {
        VectorConfig {
            trap_score_edge: 0.0,
            equal_bids: true,
            healthy_trust_rate: 0.0,
            trap_trust_rate: 0.0,
            affinity: 0.0,
            noise_effect: 0.0,
            ..Self::myopic_trap()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("healthy_cvr_min", self.healthy_cvr_min),
            ("healthy_cvr_max", self.healthy_cvr_max),
            ("trust_floor", self.trust_floor),
            ("initial_trust", self.initial_trust),
            ("healthy_trust_rate", self.healthy_trust_rate),
            ("trap_trust_rate", self.trap_trust_rate),
            ("trap_trust_target", self.trap_trust_target),
            ("interest_step", self.interest_step),
            ("interest_decay", self.interest_decay),
            ("availability", self.availability),
            ("base_interaction", self.base_interaction),
            ("interaction_trust_weight", self.interaction_trust_weight),
            ("noise_persistence", self.noise_persistence),
        ];
        for (name, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.healthy_cvr_min > self.healthy_cvr_max {
            return Err(Error::InvalidConfig("healthy_cvr_min exceeds healthy_cvr_max".into()));
        }
        if self.n_healthy + self.n_trap == 0 || self.interest_dim == 0 {
            return Err(Error::InvalidConfig("need at least one item and one interest dimension".into()));
        }
        if !(self.bid_scale > 0.0 && self.trap_cvr_ratio > 0.0 && self.trap_score_edge > -1.0) {
            return Err(Error::InvalidConfig("bid_scale and trap_cvr_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.affinity) || !(0.0..1.0).contains(&self.noise_effect) {
            return Err(Error::InvalidConfig("affinity and noise_effect must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Environment-internal parameters of one catalog item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemParams {
    pub item: Action,
    /// Items are owned one-to-one by bidders in this backend.
    pub bidder_id: u32,
    pub trap: bool,
    pub cvr: f64,
    pub bid: f64,
    /// Unit interest direction.
    pub direction: Vec<f64>,
    pub trust_target: f64,
    pub trust_rate: f64,
}

#[derive(Clone, Debug)]
pub struct VectorModel {
    cfg: VectorConfig,
    items: Vec<ItemParams>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl VectorModel {
    pub fn from_config(cfg: &VectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.catalog_seed);
        let n = cfg.n_healthy + cfg.n_trap;
        let mut items = Vec::with_capacity(n);
        for k in 0..n {
            let trap = k >= cfg.n_healthy;
            let base = rng.gen_range(cfg.healthy_cvr_min..=cfg.healthy_cvr_max);
            let cvr = if trap { (base * cfg.trap_cvr_ratio).min(1.0) } else { base };
            // Keeps every item's bid x cvr at the same level up to the trap
            // edge, plus a tiny per-item offset so that scores never tie.
            let jitter = 1.0 + 1e-4 * (k as f64 + 1.0);
            let bid = if cfg.equal_bids {
                cfg.bid_scale * jitter
            } else {
                let edge = if trap { 1.0 + cfg.trap_score_edge } else { 1.0 };
                cfg.bid_scale * 0.2 / cvr * edge * jitter
            };
            items.push(ItemParams {
                item: Action(k as u32 + 1),
                bidder_id: k as u32,
                trap,
                cvr,
                bid,
                direction: unit_vector(&mut rng, cfg.interest_dim),
                trust_target: if trap { cfg.trap_trust_target } else { 1.0 },
                trust_rate: if trap { cfg.trap_trust_rate } else { cfg.healthy_trust_rate },
            });
        }
        Ok(VectorModel { cfg: cfg.clone(), items })
    }

    pub fn config(&self) -> &VectorConfig {
        &self.cfg
    }

    pub fn items(&self) -> &[ItemParams] {
        &self.items
    }

    fn item(&self, a: Action) -> Option<&ItemParams> {
        if a.is_null() {
            None
        } else {
            self.items.get(a.index() - 1)
        }
    }

    fn z<'a>(&self, s: &'a UserState) -> &'a [f64] {
        match &s.z {
            Interest::Vector(z) => z,
            Interest::Index(_) => panic!("vector model received a tabular state"),
        }
    }

    pub fn trust(&self, s: &UserState) -> f64 {
        self.z(s)[0]
    }

    fn noise_term(&self, s: &UserState) -> f64 {
        if self.cfg.noise_dim == 0 {
            return 1.0;
        }
        let noise = s.i[self.items.len()];
        1.0 + self.cfg.noise_effect * noise.tanh()
    }
}

impl UserModel for VectorModel {
    fn n_actions(&self) -> usize {
        self.items.len() + 1
    }

    fn feature_dim(&self) -> Option<usize> {
        Some(1 + self.cfg.interest_dim + self.cfg.context_dim + self.items.len() + self.cfg.noise_dim)
    }

    fn q_view(&self, s: &UserState) -> UserState {
        if self.cfg.q_sees_availability {
            return s.clone();
        }
        UserState {
            i: s.i[self.items.len()..].to_vec(),
            ..s.clone()
        }
    }

    fn q_feature_dim(&self) -> Option<usize> {
        let dim = self.feature_dim()?;
        Some(if self.cfg.q_sees_availability { dim } else { dim - self.items.len() })
    }

    fn initial_state(&self, user: UserId, rng: &mut ChaCha8Rng) -> UserState {
        let trust = (self.cfg.initial_trust + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
        let mut z = vec![trust];
        z.extend(unit_vector(rng, self.cfg.interest_dim).into_iter().map(|v| 0.3 * v));
        let x = (0..self.cfg.context_dim).map(|_| StandardNormal.sample(rng)).collect();
        let mut i: Vec<f64> = (0..self.items.len())
            .map(|_| f64::from(u8::from(rng.gen::<f64>() < self.cfg.availability)))
            .collect();
        i.extend((0..self.cfg.noise_dim).map(|_| -> f64 { StandardNormal.sample(rng) }));
        UserState {
            user_id: user,
            z: Interest::Vector(z),
            x,
            i,
        }
    }

    fn exogenous_update(&self, s: &mut UserState, rng: &mut ChaCha8Rng) {
        let n = self.items.len();
        for flag in &mut s.i[..n] {
            *flag = f64::from(u8::from(rng.gen::<f64>() < self.cfg.availability));
        }
        let rho = self.cfg.noise_persistence;
        let scale = (1.0 - rho * rho).sqrt();
        for v in &mut s.i[n..] {
            let eps: f64 = StandardNormal.sample(rng);
            *v = rho * *v + scale * eps;
        }
    }

    fn interaction_prob(&self, s: &UserState) -> f64 {
        let w = self.cfg.interaction_trust_weight;
        self.cfg.base_interaction * (1.0 - w + w * self.trust(s))
    }

    fn conversion_prob(&self, s: &UserState, a: Action) -> f64 {
        let Some(item) = self.item(a) else { return 0.0 };
        let z = self.z(s);
        let align: f64 = z[1..].iter().zip(&item.direction).map(|(u, v)| u * v).sum();
        let trust = self.cfg.trust_floor + (1.0 - self.cfg.trust_floor) * z[0];
        (item.cvr * trust * (1.0 + self.cfg.affinity * align) * self.noise_term(s)).clamp(0.0, 1.0)
    }

    fn eligible(&self, s: &UserState) -> Vec<Action> {
        let mut out = vec![Action::NO_RECOMMENDATION];
        out.extend(
            self.items
                .iter()
                .zip(&s.i)
                .filter(|(_, flag)| **flag > 0.5)
                .map(|(item, _)| item.item),
        );
        out
    }

    fn bid(&self, _s: &UserState, a: Action) -> f64 {
        self.item(a).map_or(0.0, |item| item.bid)
    }

    fn transition(&self, s: &UserState, a: Action, converted: bool, _rng: &mut ChaCha8Rng) -> UserState {
        let mut next = s.clone();
        let Interest::Vector(z) = &mut next.z else { unreachable!() };
        if let Some(item) = self.item(a) {
            z[0] += item.trust_rate * (item.trust_target - z[0]);
            z[0] = z[0].clamp(0.0, 1.0);
        }
        match (converted, self.item(a)) {
            (true, Some(item)) => {
                let eta = self.cfg.interest_step;
                for (u, v) in z[1..].iter_mut().zip(&item.direction) {
                    *u = (1.0 - eta) * *u + eta * v;
                }
            }
            _ => {
                for u in &mut z[1..] {
                    *u *= 1.0 - self.cfg.interest_decay;
                }
            }
        }
        next
    }
}
