//! Enumerable MDP instances `(S, A, P, r̄, γ)`.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Finite MDP with a dense transition kernel.
///
/// Action index 0 is the "no recommendation" action whenever the instance is
/// produced by this crate's generators or exported from the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp<T> {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transitions: Vec<T>,
    /// Row-major `[s][a]`, expected immediate reward.
    rewards: Vec<T>,
    gamma: T,
}

pub(crate) fn row_tolerance<T: Scalar>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(64.0))
}

impl<T: Scalar> TabularMdp<T> {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<T>,
        rewards: Vec<T>,
        gamma: T,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidConfig("MDP needs at least one state and one action".into()));
        }
        if transitions.len() != n_states * n_actions * n_states {
            return Err(Error::ShapeMismatch(format!(
                "kernel has {} entries, expected {}",
                transitions.len(),
                n_states * n_actions * n_states
            )));
        }
        if rewards.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "reward table has {} entries, expected {}",
                rewards.len(),
                n_states * n_actions
            )));
        }
        if !(gamma >= T::zero() && gamma < T::one()) {
            return Err(Error::InvalidConfig(format!("gamma {gamma} outside [0, 1)")));
        }
        let tol = row_tolerance::<T>();
        for (k, row) in transitions.chunks(n_states).enumerate() {
            if row.iter().any(|p| !(*p >= T::zero())) {
                return Err(Error::InvalidConfig(format!(
                    "negative transition probability in row (s={}, a={})",
                    k / n_actions,
                    k % n_actions
                )));
            }
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs() > tol {
                return Err(Error::InvalidConfig(format!(
                    "row (s={}, a={}) sums to {sum}",
                    k / n_actions,
                    k % n_actions
                )));
            }
        }
        if rewards.iter().any(|r| !(*r >= T::zero() && *r <= T::one())) {
            return Err(Error::InvalidConfig("expected rewards must lie in [0, 1]".into()));
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn with_gamma(mut self, gamma: T) -> Result<Self> {
        if !(gamma >= T::zero() && gamma < T::one()) {
            return Err(Error::InvalidConfig(format!("gamma {gamma} outside [0, 1)")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn row(&self, s: usize, a: usize) -> &[T] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> T {
        self.row(s, a)[next]
    }

    pub fn reward(&self, s: usize, a: usize) -> T {
        self.rewards[s * self.n_actions + a]
    }

    /// Inverse-CDF draw of the successor state from a uniform `u ∈ [0, 1)`.
    pub fn sample_next(&self, s: usize, a: usize, u: f64) -> usize {
        let mut acc = 0.0;
        let row = self.row(s, a);
        for (next, p) in row.iter().enumerate() {
            acc += p.as_f64();
            if u < acc {
                return next;
            }
        }
        // rounding slack: fall back to the last state with positive mass
        row.iter().rposition(|p| *p > T::zero()).unwrap_or(self.n_states - 1)
    }

    /// Samples `(reward, next_state)` for one step from `(s, a)`.
    pub fn sample<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (u8, usize) {
        let r = u8::from(rng.gen::<f64>() < self.reward(s, a).as_f64());
        let next = self.sample_next(s, a, rng.gen());
        (r, next)
    }

    /// Random instance with Dirichlet(1) rows and uniform rewards. Action 0
    /// plays the role of "no recommendation" and earns zero reward.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        gamma: T,
    ) -> Result<Self> {
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let raw: Vec<f64> = (0..n_states)
                .map(|_| -(1.0 - rng.gen::<f64>()).ln())
                .collect();
            transitions.extend(normalize(&raw).into_iter().map(T::lit));
        }
        let mut rewards = Vec::with_capacity(n_states * n_actions);
        for _s in 0..n_states {
            for a in 0..n_actions {
                rewards.push(if a == 0 { T::zero() } else { T::lit(rng.gen::<f64>()) });
            }
        }
        Self::new(n_states, n_actions, transitions, rewards, gamma)
    }

    /// Writes `s,a,s_next,prob` rows (zero entries omitted).
    pub fn write_transitions_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["s", "a", "s_next", "prob"])?;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for (next, p) in self.row(s, a).iter().enumerate() {
                    if *p > T::zero() {
                        out.write_record([
                            s.to_string(),
                            a.to_string(),
                            next.to_string(),
                            format!("{:?}", p.as_f64()),
                        ])?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `s,a,reward` rows.
    pub fn write_rewards_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["s", "a", "reward"])?;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                out.write_record([
                    s.to_string(),
                    a.to_string(),
                    format!("{:?}", self.reward(s, a).as_f64()),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads an instance from the two CSV tables written above. Sizes are
    /// inferred from the largest indices present.
    pub fn read_csv<R1: Read, R2: Read>(transitions: R1, rewards: R2, gamma: T) -> Result<Self> {
        let mut triples = Vec::new();
        let (mut n_s, mut n_a) = (0usize, 0usize);
        for rec in csv::Reader::from_reader(transitions).records() {
            let rec = rec?;
            let s = parse_field::<usize>(&rec, 0)?;
            let a = parse_field::<usize>(&rec, 1)?;
            let next = parse_field::<usize>(&rec, 2)?;
            let p = parse_field::<f64>(&rec, 3)?;
            n_s = n_s.max(s + 1).max(next + 1);
            n_a = n_a.max(a + 1);
            triples.push((s, a, next, p));
        }
        let mut pairs = Vec::new();
        for rec in csv::Reader::from_reader(rewards).records() {
            let rec = rec?;
            let s = parse_field::<usize>(&rec, 0)?;
            let a = parse_field::<usize>(&rec, 1)?;
            let r = parse_field::<f64>(&rec, 2)?;
            n_s = n_s.max(s + 1);
            n_a = n_a.max(a + 1);
            pairs.push((s, a, r));
        }
        let mut kernel = vec![T::zero(); n_s * n_a * n_s];
        for (s, a, next, p) in triples {
            kernel[(s * n_a + a) * n_s + next] = T::lit(p);
        }
        let mut reward = vec![T::zero(); n_s * n_a];
        for (s, a, r) in pairs {
            reward[s * n_a + a] = T::lit(r);
        }
        Self::new(n_s, n_a, kernel, reward, gamma)
    }
}

fn normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // push the rounding residue into the largest entry
    let residue = 1.0 - row.iter().sum::<f64>();
    if let Some(k) = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])) {
        row[k] += residue;
    }
    row
}

pub(crate) fn parse_field<V: std::str::FromStr>(rec: &csv::StringRecord, k: usize) -> Result<V> {
    rec.get(k)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad or missing column {k} in {rec:?}")))
}
