//! Exact dynamic programming on tabular instances, and the executable check
//! that the blended policy improves on the bid-eCVR base policy.

pub mod suite;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::auction::{Eligibility, TabularScoring};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::policy::{argmax_by_id, select_among, QEstimate};
use crate::scalar::{sup_distance, Scalar};
use crate::state::{Action, UserState};

/// One action per state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeterministicPolicy(pub Vec<Action>);

impl DeterministicPolicy {
    pub fn action(&self, s: usize) -> Action {
        self.0[s]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Dense `Q(s, a)` table.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable<T> {
    n_states: usize,
    n_actions: usize,
    values: Vec<T>,
}

impl<T: Scalar> QTable<T> {
    pub fn get(&self, s: usize, a: Action) -> T {
        self.values[s * self.n_actions + a.index()]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// `argmax_a Q(s, a)` over each state's eligible set.
    pub fn greedy(&self, eligibility: &Eligibility) -> DeterministicPolicy {
        DeterministicPolicy(
            (0..self.n_states)
                .map(|s| {
                    argmax_by_id(eligibility.members(s).iter().map(|a| (*a, self.get(s, *a))))
                        .unwrap_or(Action::NO_RECOMMENDATION)
                })
                .collect(),
        )
    }
}

impl<T: Scalar> QEstimate<T> for QTable<T> {
    fn q(&self, s: &UserState, a: Action) -> Option<T> {
        let k = s.tabular_index()?;
        (k < self.n_states && a.index() < self.n_actions).then(|| self.get(k, a))
    }
}

fn check_policy<T: Scalar>(mdp: &TabularMdp<T>, mu: &DeterministicPolicy) -> Result<()> {
    if mu.len() != mdp.n_states() {
        return Err(Error::ShapeMismatch(format!(
            "policy covers {} states, MDP has {}",
            mu.len(),
            mdp.n_states()
        )));
    }
    if let Some(a) = mu.0.iter().find(|a| a.index() >= mdp.n_actions()) {
        return Err(Error::ShapeMismatch(format!("action {a} outside the MDP's action range")));
    }
    Ok(())
}

/// `(T_mu V)(s) = r̄(s, mu(s)) + gamma * sum_s' P(s' | s, mu(s)) V(s')`.
pub fn bellman_apply<T: Scalar>(mdp: &TabularMdp<T>, mu: &DeterministicPolicy, v: &[T]) -> Result<Vec<T>> {
    check_policy(mdp, mu)?;
    if v.len() != mdp.n_states() {
        return Err(Error::ShapeMismatch(format!(
            "value function has {} entries, MDP has {} states",
            v.len(),
            mdp.n_states()
        )));
    }
    Ok(apply_unchecked(mdp, mu, v))
}

fn backup<T: Scalar>(mdp: &TabularMdp<T>, s: usize, a: usize, v: &[T]) -> T {
    let future: T = mdp.row(s, a).iter().zip(v).map(|(p, x)| *p * *x).sum();
    mdp.reward(s, a) + mdp.gamma() * future
}

fn apply_unchecked<T: Scalar>(mdp: &TabularMdp<T>, mu: &DeterministicPolicy, v: &[T]) -> Vec<T> {
    (0..mdp.n_states())
        .map(|s| backup(mdp, s, mu.action(s).index(), v))
        .collect()
}

const MAX_SWEEPS: usize = 1_000_000;

/// Iterates `T_mu` from zero until the successive sup-norm change drops to
/// `tol * (1 - gamma) / gamma`, which bounds the distance to `V_mu` by `tol`.
pub fn evaluate<T: Scalar>(mdp: &TabularMdp<T>, mu: &DeterministicPolicy, tol: T) -> Result<Vec<T>> {
    check_policy(mdp, mu)?;
    if !(tol > T::zero()) {
        return Err(Error::InvalidConfig("evaluation tolerance must be positive".into()));
    }
    let gamma = mdp.gamma();
    let mut v = vec![T::zero(); mdp.n_states()];
    if gamma == T::zero() {
        return Ok(apply_unchecked(mdp, mu, &v));
    }
    let threshold = tol * (T::one() - gamma) / gamma;
    for _ in 0..MAX_SWEEPS {
        let next = apply_unchecked(mdp, mu, &v);
        let delta = sup_distance(&next, &v);
        v = next;
        // delta == 0 covers tolerances below the floating point floor
        if delta <= threshold || delta == T::zero() {
            break;
        }
    }
    Ok(v)
}

/// Direct solve of `(I - gamma P_mu) V = r̄_mu` by Gaussian elimination with
/// partial pivoting.
pub fn evaluate_linear<T: Scalar>(mdp: &TabularMdp<T>, mu: &DeterministicPolicy) -> Result<Vec<T>> {
    check_policy(mdp, mu)?;
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let mut m = vec![T::zero(); n * (n + 1)];
    for s in 0..n {
        let a = mu.action(s).index();
        for (next, p) in mdp.row(s, a).iter().enumerate() {
            m[s * (n + 1) + next] = -gamma * *p;
        }
        m[s * (n + 1) + s] = m[s * (n + 1) + s] + T::one();
        m[s * (n + 1) + n] = mdp.reward(s, a);
    }
    solve_augmented(&mut m, n)
}

fn solve_augmented<T: Scalar>(m: &mut [T], n: usize) -> Result<Vec<T>> {
    let w = n + 1;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                m[i * w + col]
                    .abs()
                    .partial_cmp(&m[j * w + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("nonempty range");
        if m[pivot * w + col] == T::zero() {
            return Err(Error::ShapeMismatch("singular evaluation system".into()));
        }
        if pivot != col {
            for k in 0..w {
                m.swap(col * w + k, pivot * w + k);
            }
        }
        let p = m[col * w + col];
        for row in col + 1..n {
            let factor = m[row * w + col] / p;
            if factor != T::zero() {
                for k in col..w {
                    m[row * w + k] = m[row * w + k] - factor * m[col * w + k];
                }
            }
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut acc = m[row * w + n];
        for k in row + 1..n {
            acc = acc - m[row * w + k] * x[k];
        }
        x[row] = acc / m[row * w + row];
    }
    Ok(x)
}

/// `Q(s, a) = r̄(s, a) + gamma * sum_s' P(s' | s, a) V(s')` for every pair.
pub fn q_from_v<T: Scalar>(mdp: &TabularMdp<T>, v: &[T]) -> Result<QTable<T>> {
    if v.len() != mdp.n_states() {
        return Err(Error::ShapeMismatch("value function does not match the MDP".into()));
    }
    let (n_states, n_actions) = (mdp.n_states(), mdp.n_actions());
    let mut values = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            values.push(backup(mdp, s, a, v));
        }
    }
    Ok(QTable {
        n_states,
        n_actions,
        values,
    })
}

/// Exact `V_mu` for verification: linear solve up to 200 states, tight
/// iteration beyond.
pub fn exact_values<T: Scalar>(mdp: &TabularMdp<T>, mu: &DeterministicPolicy) -> Result<Vec<T>> {
    if mdp.n_states() <= 200 {
        evaluate_linear(mdp, mu)
    } else {
        evaluate(mdp, mu, T::lit(1e-13))
    }
}

/// Greedy bid-eCVR policy on a tabular scoring table.
pub fn base_policy<T: Scalar>(scoring: &TabularScoring<T>) -> DeterministicPolicy {
    DeterministicPolicy(
        (0..scoring.n_states())
            .map(|s| {
                argmax_by_id(scoring.eligible_at(s).iter().map(|a| (*a, scoring.f(s, *a))))
                    .unwrap_or(Action::NO_RECOMMENDATION)
            })
            .collect(),
    )
}

/// Blended policy `argmax (1 - alpha) f + alpha Q` on a tabular scoring table.
pub fn modified_policy<T: Scalar>(scoring: &TabularScoring<T>, q: &QTable<T>, alpha: T) -> DeterministicPolicy {
    DeterministicPolicy(
        (0..scoring.n_states())
            .map(|s| {
                let cands: Vec<(Action, T, T)> = scoring
                    .eligible_at(s)
                    .iter()
                    .map(|a| (*a, scoring.f(s, *a), q.get(s, *a)))
                    .collect();
                select_among(&cands, alpha).unwrap_or(Action::NO_RECOMMENDATION)
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyIteration<T> {
    pub policy: DeterministicPolicy,
    pub values: Vec<T>,
    pub iterations: usize,
}

/// Howard policy iteration restricted to each state's eligible set. The
/// incumbent action is kept unless another is better by more than a
/// rounding-level margin, so the loop cannot cycle between ties.
pub fn policy_iteration<T: Scalar>(mdp: &TabularMdp<T>, eligibility: &Eligibility) -> Result<PolicyIteration<T>> {
    if eligibility.n_states() != mdp.n_states() {
        return Err(Error::ShapeMismatch("eligibility does not match the MDP".into()));
    }
    let mut policy = DeterministicPolicy(
        (0..mdp.n_states())
            .map(|s| eligibility.members(s)[0])
            .collect(),
    );
    let slack = T::lit(1e-12) / (T::one() - mdp.gamma());
    let mut iterations = 0;
    loop {
        iterations += 1;
        let values = exact_values(mdp, &policy)?;
        let q = q_from_v(mdp, &values)?;
        let mut changed = false;
        let next: Vec<Action> = (0..mdp.n_states())
            .map(|s| {
                let current = policy.action(s);
                let incumbent = q.get(s, current);
                let best = argmax_by_id(eligibility.members(s).iter().map(|a| (*a, q.get(s, *a))))
                    .unwrap_or(current);
                if q.get(s, best) > incumbent + slack {
                    changed = true;
                    best
                } else {
                    current
                }
            })
            .collect();
        if !changed {
            return Ok(PolicyIteration {
                policy,
                values,
                iterations,
            });
        }
        policy = DeterministicPolicy(next);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    /// Allowed shortfall before a weak inequality counts as violated.
    pub tol: f64,
    /// Margin a strict inequality must clear where the policies differ.
    pub strict_tol: f64,
    /// Uniform noise of this half-width is added to `Q_base` before the
    /// modified policy is formed. Margins are still measured with exact values.
    pub q_noise: Option<f64>,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tol: 1e-9,
            strict_tol: 1e-12,
            q_noise: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateMargin {
    pub state: usize,
    pub base_action: Action,
    pub mod_action: Action,
    pub v_base: f64,
    pub v_mod: f64,
    /// `Q_base(s, pi_mod(s)) - Q_base(s, pi_base(s))`, i.e. `Q_base(s, pi_mod(s)) - V_base(s)`.
    pub lemma_margin: f64,
    /// `V_mod(s) - V_base(s)`.
    pub value_margin: f64,
}

impl StateMargin {
    pub fn differs(&self) -> bool {
        self.base_action != self.mod_action
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImprovementReport {
    pub alpha: f64,
    pub margins: Vec<StateMargin>,
    /// States with `Q_base(s, pi_mod(s)) < V_base(s) - tol`.
    pub lemma_violations: usize,
    /// States with `V_mod(s) < V_base(s) - tol`.
    pub value_violations: usize,
    /// States where the actions differ but a margin fails to clear `strict_tol`.
    pub strict_violations: usize,
}

impl ImprovementReport {
    pub fn is_clean(&self) -> bool {
        self.lemma_violations == 0 && self.value_violations == 0 && self.strict_violations == 0
    }

    pub fn changed_states(&self) -> usize {
        self.margins.iter().filter(|m| m.differs()).count()
    }

    /// Per-state margins as CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "alpha",
            "state",
            "base_action",
            "mod_action",
            "v_base",
            "v_mod",
            "lemma_margin",
            "value_margin",
        ])?;
        for m in &self.margins {
            out.write_record([
                format!("{}", self.alpha),
                m.state.to_string(),
                m.base_action.0.to_string(),
                m.mod_action.0.to_string(),
                format!("{:.15e}", m.v_base),
                format!("{:.15e}", m.v_mod),
                format!("{:.15e}", m.lemma_margin),
                format!("{:.15e}", m.value_margin),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn verify_improvement<T: Scalar>(
    mdp: &TabularMdp<T>,
    scoring: &TabularScoring<T>,
    alpha: T,
    tol: T,
) -> Result<ImprovementReport> {
    let opts = VerifyOptions {
        tol: tol.as_f64(),
        ..VerifyOptions::default()
    };
    verify_improvement_with(mdp, scoring, alpha, &opts)
}

/// Builds `pi_base`, the exact `Q_base`, `pi_mod` and `V_mod`, and measures
/// the action-level and value-level improvement margins state by state.
pub fn verify_improvement_with<T: Scalar>(
    mdp: &TabularMdp<T>,
    scoring: &TabularScoring<T>,
    alpha: T,
    opts: &VerifyOptions,
) -> Result<ImprovementReport> {
    if scoring.n_states() != mdp.n_states() || scoring.n_actions() != mdp.n_actions() {
        return Err(Error::ShapeMismatch("scoring table does not match the MDP".into()));
    }
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    for s in 0..mdp.n_states() {
        scoring.check_unique(s)?;
    }
    let base = base_policy(scoring);
    let v_base = exact_values(mdp, &base)?;
    let q_base = q_from_v(mdp, &v_base)?;
    let q_used = match opts.q_noise {
        None => q_base.clone(),
        Some(width) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut noisy = q_base.clone();
            for v in noisy.values.iter_mut() {
                *v = *v + T::lit(rng.gen_range(-width..=width));
            }
            noisy
        }
    };
    let modified = modified_policy(scoring, &q_used, alpha);
    let v_mod = exact_values(mdp, &modified)?;

    let (tol, strict) = (opts.tol, opts.strict_tol);
    let mut report = ImprovementReport {
        alpha: alpha.as_f64(),
        margins: Vec::with_capacity(mdp.n_states()),
        lemma_violations: 0,
        value_violations: 0,
        strict_violations: 0,
    };
    for s in 0..mdp.n_states() {
        let (ab, am) = (base.action(s), modified.action(s));
        let lemma_margin = (q_base.get(s, am) - q_base.get(s, ab)).as_f64();
        let value_margin = (v_mod[s] - v_base[s]).as_f64();
        let m = StateMargin {
            state: s,
            base_action: ab,
            mod_action: am,
            v_base: v_base[s].as_f64(),
            v_mod: v_mod[s].as_f64(),
            lemma_margin,
            value_margin,
        };
        if lemma_margin < -tol {
            report.lemma_violations += 1;
        }
        if value_margin < -tol {
            report.value_violations += 1;
        }
        if m.differs() && !(lemma_margin > strict && value_margin > strict) {
            report.strict_violations += 1;
        }
        report.margins.push(m);
    }
    Ok(report)
}

/// Size ranges and knobs for randomized verification instances.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSpec {
    pub min_states: usize,
    pub max_states: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    pub gamma: f64,
    /// Probability that a catalog item is eligible in a state.
    pub keep: f64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        InstanceSpec {
            min_states: 5,
            max_states: 20,
            min_actions: 2,
            max_actions: 10,
            gamma: 0.8,
            keep: 0.7,
        }
    }
}

/// Random MDP plus a unique-valued scoring table with random eligibility masks.
pub fn random_instance<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    spec: &InstanceSpec,
) -> Result<(TabularMdp<T>, TabularScoring<T>)> {
    let n_states = rng.gen_range(spec.min_states..=spec.max_states);
    let n_actions = rng.gen_range(spec.min_actions..=spec.max_actions);
    let mdp = TabularMdp::random(rng, n_states, n_actions, T::lit(spec.gamma))?;
    let eligibility = Eligibility::random(rng, n_states, n_actions, spec.keep);
    let scoring = TabularScoring::random(rng, n_states, n_actions, eligibility)?;
    Ok((mdp, scoring))
}
