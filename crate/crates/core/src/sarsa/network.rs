//! Fully connected Q-network over `(state features, one-hot item)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, QModel};
use crate::error::{Error, Result};
use crate::policy::QEstimate;
use crate::scalar::Scalar;
use crate::state::{Action, Interest, UserState};

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// How a state is turned into the network's state half of the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateEncoding {
    /// Tabular state index as a one-hot vector of this length.
    OneHot { n_states: usize },
    /// Raw `z ++ x ++ i` features of this length.
    Features { dim: usize },
}

impl StateEncoding {
    pub fn dim(&self) -> usize {
        match self {
            StateEncoding::OneHot { n_states } => *n_states,
            StateEncoding::Features { dim } => *dim,
        }
    }
}

/// ReLU network with a scalar output per `(s, a)` input and a target copy.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpQ<T> {
    encoding: StateEncoding,
    n_actions: usize,
    /// Layer widths including input and the scalar output.
    sizes: Vec<usize>,
    params: Vec<T>,
    target: Vec<T>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Scalar> MlpQ<T> {
    /// Uniform `±1/sqrt(fan_in)` initialization from `seed`; the target copy
    /// starts equal to the online parameters.
    pub fn new(encoding: StateEncoding, n_actions: usize, hidden: &[usize], seed: u64) -> Self {
        let mut sizes = vec![encoding.dim() + n_actions];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(&sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(T::lit(rng.gen_range(-bound..bound)));
            }
        }
        MlpQ {
            encoding,
            n_actions,
            sizes,
            target: params.clone(),
            params,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn encoding(&self) -> StateEncoding {
        self.encoding
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Network input for `(s, a)`.
    pub fn encode(&self, s: &UserState, a: Action) -> Result<Vec<T>> {
        let undefined = || Error::UndefinedQ {
            state: s.label(),
            action: a,
        };
        if a.index() >= self.n_actions {
            return Err(undefined());
        }
        let mut x = vec![T::zero(); self.sizes[0]];
        match (&self.encoding, &s.z) {
            (StateEncoding::OneHot { n_states }, Interest::Index(k)) if k < n_states => {
                x[*k] = T::one();
            }
            (StateEncoding::Features { dim }, Interest::Vector(_)) => {
                let feats = s.features().unwrap_or_default();
                if feats.len() != *dim {
                    return Err(undefined());
                }
                for (dst, v) in x.iter_mut().zip(feats) {
                    *dst = T::lit(v);
                }
            }
            _ => return Err(undefined()),
        }
        x[self.encoding.dim() + a.index()] = T::one();
        Ok(x)
    }

    /// Forward pass storing every layer's post-activation in `acts`.
    fn forward_into(&self, params: &[T], input: Vec<T>, acts: &mut Vec<Vec<T>>) -> T {
        acts.clear();
        acts.push(input);
        let mut offset = 0;
        let n_layers = self.sizes.len() - 1;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[offset..offset + n_in * n_out];
            let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let prev = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(prev) {
                    z = z + *wi * *xi;
                }
                out.push(if l + 1 < n_layers { z.max(T::zero()) } else { z });
            }
            acts.push(out);
            offset += n_in * n_out + n_out;
        }
        acts[n_layers][0]
    }

    /// Adds `dout * dQ/dθ` to `grad` given the activations of a forward pass.
    fn accumulate_grad(&self, params: &[T], acts: &[Vec<T>], dout: T, grad: &mut [T]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        let mut delta = vec![dout];
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi = *gi + d * *xi;
                }
                grad[off + n_in * n_out + o] = grad[off + n_in * n_out + o] + d;
            }
            if l > 0 {
                let w = &params[off..off + n_in * n_out];
                let mut prev = vec![T::zero(); n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == T::zero() {
                        continue;
                    }
                    for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p = *p + *wi * d;
                    }
                }
                // ReLU gate: post-activation is positive iff pre-activation is
                for (p, a) in prev.iter_mut().zip(input) {
                    if !(*a > T::zero()) {
                        *p = T::zero();
                    }
                }
                delta = prev;
            }
        }
    }

    fn eval_with(&self, params: &[T], s: &UserState, a: Action) -> Result<T> {
        let mut acts = Vec::with_capacity(self.sizes.len());
        Ok(self.forward_into(params, self.encode(s, a)?, &mut acts))
    }

    /// `ℓ(θ) = Σ_j (y_j - Q_θ(s_j, a_j))²` at the given parameter vector.
    pub fn loss_at(&self, params: &[T], batch: &[(&UserState, Action, T)]) -> Result<T> {
        let mut loss = T::zero();
        for (s, a, y) in batch {
            let err = *y - self.eval_with(params, s, *a)?;
            loss = loss + err * err;
        }
        Ok(loss)
    }

    /// Loss and its gradient with the targets held fixed.
    pub fn loss_and_gradient(&self, batch: &[(&UserState, Action, T)]) -> Result<(T, Vec<T>)> {
        let mut grad = vec![T::zero(); self.params.len()];
        let mut acts = Vec::with_capacity(self.sizes.len());
        let mut loss = T::zero();
        let two = T::lit(2.0);
        for (s, a, y) in batch {
            let q = self.forward_into(&self.params, self.encode(s, *a)?, &mut acts);
            let err = *y - q;
            loss = loss + err * err;
            self.accumulate_grad(&self.params, &acts, -two * err, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("mlp")?;
        let encoding = c
            .state_encoding
            .ok_or_else(|| Error::Parse("network checkpoint lacks a state encoding".into()))?;
        if c.shape.len() < 2 || *c.shape.last().unwrap() != 1 || c.shape[0] < encoding.dim() {
            return Err(Error::ShapeMismatch("network checkpoint shape".into()));
        }
        let n = param_count(&c.shape);
        if c.params.len() != n || c.target_params.len() != n {
            return Err(Error::ShapeMismatch("checkpoint parameter count".into()));
        }
        Ok(MlpQ {
            encoding,
            n_actions: c.shape[0] - encoding.dim(),
            sizes: c.shape.clone(),
            params: c.params.iter().map(|v| T::lit(*v)).collect(),
            target: c.target_params.iter().map(|v| T::lit(*v)).collect(),
        })
    }
}

impl<T: Scalar> QEstimate<T> for MlpQ<T> {
    fn q(&self, s: &UserState, a: Action) -> Option<T> {
        self.eval_with(&self.params, s, a).ok()
    }
}

impl<T: Scalar> QModel<T> for MlpQ<T> {
    fn value(&self, s: &UserState, a: Action) -> Result<T> {
        self.eval_with(&self.params, s, a)
    }

    fn target_value(&self, s: &UserState, a: Action) -> Result<T> {
        self.eval_with(&self.target, s, a)
    }

    /// `θ ← θ - step · ∇ℓ / (2N)`, the batch-mean TD semi-gradient.
    fn apply_semi_gradient(&mut self, batch: &[(&UserState, Action, T)], step: T) -> Result<T> {
        let (loss, grad) = self.loss_and_gradient(batch)?;
        let scale = step / T::lit(2.0 * batch.len().max(1) as f64);
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p = *p - scale * g;
        }
        Ok(loss)
    }

    fn sync_target(&mut self) {
        self.target.copy_from_slice(&self.params);
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn target_params(&self) -> &[T] {
        &self.target
    }

    fn target_params_mut(&mut self) -> &mut [T] {
        &mut self.target
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new("mlp", self.sizes.clone(), Some(self.encoding), &self.params, &self.target)
    }
}
