//! Action selection: the greedy bid-eCVR base policy, the alpha-blended
//! modified policy and the greedy-Q endpoint.

use serde::{Deserialize, Serialize};

use crate::auction::Scorer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::state::{Action, UserState};

/// Anything that can estimate `Q(s, a)`. `None` means the pair is outside
/// the estimator's domain.
pub trait QEstimate<T> {
    fn q(&self, s: &UserState, a: Action) -> Option<T>;
}

impl<T, F> QEstimate<T> for F
where
    F: Fn(&UserState, Action) -> Option<T>,
{
    fn q(&self, s: &UserState, a: Action) -> Option<T> {
        self(s, a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Base,
    Modified,
    GreedyQ,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default)]
    pub alpha: f64,
}

impl PolicyConfig {
    pub fn base() -> Self {
        PolicyConfig {
            kind: PolicyKind::Base,
            alpha: 0.0,
        }
    }

    pub fn modified(alpha: f64) -> Self {
        PolicyConfig {
            kind: PolicyKind::Modified,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    /// Blending weight actually applied: 0 for `base`, 1 for `greedy_q`.
    pub fn effective_alpha(&self) -> f64 {
        match self.kind {
            PolicyKind::Base => 0.0,
            PolicyKind::Modified => self.alpha,
            PolicyKind::GreedyQ => 1.0,
        }
    }

    pub fn act<T: Scalar>(
        &self,
        s: &UserState,
        scorer: &impl Scorer<T>,
        q: &impl QEstimate<T>,
    ) -> Result<Action> {
        match self.kind {
            PolicyKind::Base => Ok(base_select(s, scorer)),
            _ => select(s, scorer, q, T::lit(self.effective_alpha())),
        }
    }
}

/// `(1 - alpha) f + alpha q`.
pub fn blend<T: Scalar>(f: T, q: T, alpha: T) -> T {
    (T::one() - alpha) * f + alpha * q
}

/// First maximiser in id order over `(action, value)` pairs.
pub fn argmax_by_id<T: Scalar>(values: impl IntoIterator<Item = (Action, T)>) -> Option<Action> {
    let mut v: Vec<(Action, T)> = values.into_iter().collect();
    v.sort_by_key(|(a, _)| *a);
    let mut best: Option<(Action, T)> = None;
    for (a, x) in v {
        match best {
            Some((_, bx)) if !(x > bx) => {}
            _ => best = Some((a, x)),
        }
    }
    best.map(|(a, _)| a)
}

/// Argmax of the blended score over `(action, f, q)` candidates.
pub fn select_among<T: Scalar>(candidates: &[(Action, T, T)], alpha: T) -> Option<Action> {
    argmax_by_id(candidates.iter().map(|(a, f, q)| (*a, blend(*f, *q, alpha))))
}

/// Greedy with respect to the bid-eCVR values.
pub fn base_select<T: Scalar>(s: &UserState, scorer: &impl Scorer<T>) -> Action {
    argmax_by_id(scorer.eligible(s).into_iter().map(|a| (a, scorer.raw_score(s, a))))
        .unwrap_or(Action::NO_RECOMMENDATION)
}

fn candidates<T: Scalar>(
    s: &UserState,
    scorer: &impl Scorer<T>,
    q: &impl QEstimate<T>,
) -> Result<Vec<(Action, T, T)>> {
    scorer
        .eligible(s)
        .into_iter()
        .map(|a| {
            let qv = q.q(s, a).ok_or_else(|| Error::UndefinedQ {
                state: s.label(),
                action: a,
            })?;
            Ok((a, scorer.raw_score(s, a), qv))
        })
        .collect()
}

/// The modified policy: argmax over eligible items of `(1 - alpha) f + alpha Q̂`.
pub fn select<T: Scalar>(
    s: &UserState,
    scorer: &impl Scorer<T>,
    q: &impl QEstimate<T>,
    alpha: T,
) -> Result<Action> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(select_among(&candidates(s, scorer, q)?, alpha).unwrap_or(Action::NO_RECOMMENDATION))
}

/// `argmax_a Q̂(s, a)` over the eligible set.
pub fn greedy_q<T: Scalar>(s: &UserState, scorer: &impl Scorer<T>, q: &impl QEstimate<T>) -> Result<Action> {
    select(s, scorer, q, T::one())
}

/// Share of the blended score contributed by the long-run term,
/// `alpha q / ((1 - alpha) f + alpha q)`.
pub fn contribution_fraction_of<T: Scalar>(f: T, q: T, alpha: T) -> Result<T> {
    let denom = blend(f, q, alpha);
    if denom == T::zero() {
        return Err(Error::ZeroDenominator);
    }
    Ok(alpha * q / denom)
}

pub fn contribution_fraction<T: Scalar>(
    s: &UserState,
    a: Action,
    scorer: &impl Scorer<T>,
    q: &impl QEstimate<T>,
    alpha: T,
) -> Result<T> {
    let f = scorer.score(s, a)?;
    let qv = q.q(s, a).ok_or_else(|| Error::UndefinedQ {
        state: s.label(),
        action: a,
    })?;
    contribution_fraction_of(f, qv, alpha)
}

/// Default tuning grid: 0, 0.05, ..., 0.95, then 0.96 through 1.0 in steps of 0.01.
pub fn alpha_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=19).map(|k| k as f64 * 0.05).collect();
    grid.extend([0.96, 0.97, 0.98, 0.99, 1.0]);
    grid
}

/// Mean contribution fraction of the actions the `alpha` policy picks on
/// `states`. States where the blended score of the chosen action is zero are
/// skipped; `None` if every state was skipped.
pub fn mean_contribution<T: Scalar>(
    states: &[UserState],
    scorer: &impl Scorer<T>,
    q: &impl QEstimate<T>,
    alpha: T,
) -> Result<Option<T>> {
    let mut total = T::zero();
    let mut n = 0usize;
    for s in states {
        let cands = candidates(s, scorer, q)?;
        let Some(a) = select_among(&cands, alpha) else { continue };
        let (_, f, qv) = cands.iter().find(|(c, _, _)| *c == a).copied().expect("chosen candidate");
        match contribution_fraction_of(f, qv, alpha) {
            Ok(frac) => {
                total = total + frac;
                n += 1;
            }
            Err(Error::ZeroDenominator) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((n > 0).then(|| total / T::lit(n as f64)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTuning {
    pub alpha: f64,
    /// Mean contribution fraction at the returned alpha.
    pub mean_fraction: f64,
    /// False when no grid point met the cap; `alpha` is then 0.
    pub feasible: bool,
    /// `(alpha, mean fraction)` for every grid point.
    pub curve: Vec<(f64, f64)>,
}

/// Largest grid alpha whose induced policy keeps the mean contribution
/// fraction over `states` at or below `cap`.
pub fn tune_alpha<T: Scalar>(
    states: &[UserState],
    scorer: &impl Scorer<T>,
    q: &impl QEstimate<T>,
    cap: f64,
    grid: &[f64],
) -> Result<AlphaTuning> {
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(Error::InvalidConfig(format!("cap {cap} outside (0, 1]")));
    }
    if states.is_empty() {
        return Err(Error::InvalidConfig("tuning sample is empty".into()));
    }
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &alpha in grid {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("grid alpha {alpha} outside [0, 1]")));
        }
        let mean = mean_contribution(states, scorer, q, T::lit(alpha))?.map_or(0.0, |m| m.as_f64());
        curve.push((alpha, mean));
        if mean <= cap && best.map_or(true, |(b, _)| alpha > b) {
            best = Some((alpha, mean));
        }
    }
    Ok(match best {
        Some((alpha, mean_fraction)) => AlphaTuning {
            alpha,
            mean_fraction,
            feasible: true,
            curve,
        },
        None => AlphaTuning {
            alpha: 0.0,
            mean_fraction: 0.0,
            feasible: false,
            curve,
        },
    })
}
