use super::{Checkpoint, QModel};
use crate::error::{Error, Result};
use crate::policy::QEstimate;
use crate::scalar::Scalar;
use crate::state::{Action, UserState};

/// Lookup-table Q-function with a frozen target copy.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularQ<T> {
    n_states: usize,
    n_actions: usize,
    theta: Vec<T>,
    target: Vec<T>,
}

impl<T: Scalar> TabularQ<T> {
    /// All entries start at `init`; the target copy starts identical.
    pub fn new(n_states: usize, n_actions: usize, init: T) -> Self {
        let theta = vec![init; n_states * n_actions];
        TabularQ {
            n_states,
            n_actions,
            target: theta.clone(),
            theta,
        }
    }

    fn index(&self, s: &UserState, a: Action) -> Result<usize> {
        match s.tabular_index() {
            Some(k) if k < self.n_states && a.index() < self.n_actions => Ok(k * self.n_actions + a.index()),
            _ => Err(Error::UndefinedQ {
                state: s.label(),
                action: a,
            }),
        }
    }

    pub fn get(&self, s: usize, a: Action) -> T {
        self.theta[s * self.n_actions + a.index()]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("tabular")?;
        let [n_states, n_actions] = c.shape[..] else {
            return Err(Error::Parse("tabular checkpoint needs a two-element shape".into()));
        };
        if c.params.len() != n_states * n_actions || c.target_params.len() != c.params.len() {
            return Err(Error::ShapeMismatch("checkpoint parameter count".into()));
        }
        Ok(TabularQ {
            n_states,
            n_actions,
            theta: c.params.iter().map(|v| T::lit(*v)).collect(),
            target: c.target_params.iter().map(|v| T::lit(*v)).collect(),
        })
    }
}

impl<T: Scalar> QEstimate<T> for TabularQ<T> {
    fn q(&self, s: &UserState, a: Action) -> Option<T> {
        self.index(s, a).ok().map(|k| self.theta[k])
    }
}

impl<T: Scalar> QModel<T> for TabularQ<T> {
    fn value(&self, s: &UserState, a: Action) -> Result<T> {
        Ok(self.theta[self.index(s, a)?])
    }

    fn target_value(&self, s: &UserState, a: Action) -> Result<T> {
        Ok(self.target[self.index(s, a)?])
    }

    fn apply_semi_gradient(&mut self, batch: &[(&UserState, Action, T)], step: T) -> Result<T> {
        let mut delta = vec![T::zero(); self.theta.len()];
        let mut loss = T::zero();
        for (s, a, y) in batch {
            let k = self.index(s, *a)?;
            let err = *y - self.theta[k];
            loss = loss + err * err;
            delta[k] = delta[k] + err;
        }
        let scale = step / T::lit(batch.len().max(1) as f64);
        for (th, d) in self.theta.iter_mut().zip(delta) {
            *th = *th + scale * d;
        }
        Ok(loss)
    }

    fn sync_target(&mut self) {
        self.target.copy_from_slice(&self.theta);
    }

    fn params(&self) -> &[T] {
        &self.theta
    }

    fn target_params(&self) -> &[T] {
        &self.target
    }

    fn target_params_mut(&mut self) -> &mut [T] {
        &mut self.target
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "tabular",
            vec![self.n_states, self.n_actions],
            None,
            &self.theta,
            &self.target,
        )
    }
}
