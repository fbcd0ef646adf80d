//! Randomized suites over many instances: improvement margins, endpoint
//! identities, and evaluation/operator properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    base_policy, bellman_apply, evaluate, evaluate_linear, exact_values, modified_policy, policy_iteration, q_from_v,
    random_instance, verify_improvement_with, DeterministicPolicy, ImprovementReport, InstanceSpec, VerifyOptions,
};
use crate::error::Result;
use crate::mdp::TabularMdp;
use crate::scalar::sup_distance;
use crate::state::Action;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub instances: usize,
    pub alphas: Vec<f64>,
    pub min_states: usize,
    pub max_states: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    pub gamma: f64,
    pub keep: f64,
    pub tol: f64,
    pub strict_tol: f64,
    /// Half-width of uniform noise added to `Q_base` before blending.
    pub q_noise: Option<f64>,
    pub seed: u64,
    /// Instances for the iterative-versus-direct evaluation check.
    pub dp_instances: usize,
    pub dp_max_states: usize,
    pub dp_tol: f64,
    /// Random value-function pairs for the operator property checks.
    pub property_pairs: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let spec = InstanceSpec::default();
        SuiteConfig {
            instances: 200,
            alphas: vec![0.25, 0.5, 0.96],
            min_states: spec.min_states,
            max_states: spec.max_states,
            min_actions: spec.min_actions,
            max_actions: spec.max_actions,
            gamma: spec.gamma,
            keep: spec.keep,
            tol: 1e-9,
            strict_tol: 1e-12,
            q_noise: None,
            seed: 0,
            dp_instances: 50,
            dp_max_states: 200,
            dp_tol: 1e-10,
            property_pairs: 1000,
        }
    }
}

impl SuiteConfig {
    pub fn spec(&self) -> InstanceSpec {
        InstanceSpec {
            min_states: self.min_states,
            max_states: self.max_states,
            min_actions: self.min_actions,
            max_actions: self.max_actions,
            gamma: self.gamma,
            keep: self.keep,
        }
    }

    fn instance_rng(&self, k: usize, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt);
        rng.set_stream(k as u64);
        rng
    }
}

/// Outcome of one instance of the improvement suite.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub instance: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub reports: Vec<ImprovementReport>,
    /// `alpha = 0` reproduces the base policy exactly.
    pub alpha0_is_base: bool,
    /// `alpha = 1` is greedy in `Q_base` over the eligible sets.
    pub alpha1_is_greedy: bool,
    /// States where `V* >= V_mod >= V_base` fails beyond `tol`.
    pub ordering_violations: usize,
    pub pi_iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImprovementSuite {
    pub instances: Vec<InstanceResult>,
}

impl ImprovementSuite {
    pub fn value_violations(&self) -> usize {
        self.reports().map(|r| r.value_violations).sum()
    }

    pub fn lemma_violations(&self) -> usize {
        self.reports().map(|r| r.lemma_violations).sum()
    }

    pub fn strict_violations(&self) -> usize {
        self.reports().map(|r| r.strict_violations).sum()
    }

    pub fn changed_states(&self) -> usize {
        self.reports().map(|r| r.changed_states()).sum()
    }

    pub fn endpoint_failures(&self) -> usize {
        self.instances
            .iter()
            .filter(|i| !(i.alpha0_is_base && i.alpha1_is_greedy))
            .count()
    }

    pub fn ordering_violations(&self) -> usize {
        self.instances.iter().map(|i| i.ordering_violations).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.value_violations() == 0
            && self.lemma_violations() == 0
            && self.strict_violations() == 0
            && self.endpoint_failures() == 0
            && self.ordering_violations() == 0
    }

    pub fn reports(&self) -> impl Iterator<Item = &ImprovementReport> {
        self.instances.iter().flat_map(|i| i.reports.iter())
    }

    /// Per-state margins of every instance and alpha.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "instance",
            "alpha",
            "state",
            "base_action",
            "mod_action",
            "v_base",
            "v_mod",
            "lemma_margin",
            "value_margin",
        ])?;
        for inst in &self.instances {
            for rep in &inst.reports {
                for m in &rep.margins {
                    out.write_record([
                        inst.instance.to_string(),
                        rep.alpha.to_string(),
                        m.state.to_string(),
                        m.base_action.0.to_string(),
                        m.mod_action.0.to_string(),
                        format!("{:.15e}", m.v_base),
                        format!("{:.15e}", m.v_mod),
                        format!("{:.15e}", m.lemma_margin),
                        format!("{:.15e}", m.value_margin),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn check_instance(cfg: &SuiteConfig, k: usize) -> Result<InstanceResult> {
    let mut rng = cfg.instance_rng(k, 0x1a2b);
    let (mdp, scoring) = random_instance::<f64, _>(&mut rng, &cfg.spec())?;
    let opts = VerifyOptions {
        tol: cfg.tol,
        strict_tol: cfg.strict_tol,
        q_noise: cfg.q_noise,
        seed: cfg.seed.wrapping_add(k as u64),
    };
    let reports = cfg
        .alphas
        .iter()
        .map(|a| verify_improvement_with(&mdp, &scoring, *a, &opts))
        .collect::<Result<Vec<_>>>()?;

    let base = base_policy(&scoring);
    let v_base = exact_values(&mdp, &base)?;
    let q_base = q_from_v(&mdp, &v_base)?;
    let alpha0_is_base = modified_policy(&scoring, &q_base, 0.0) == base;
    let alpha1_is_greedy = modified_policy(&scoring, &q_base, 1.0) == q_base.greedy(scoring.eligibility());

    let optimal = policy_iteration(&mdp, scoring.eligibility())?;
    let mut ordering_violations = 0;
    for a in &cfg.alphas {
        let v_mod = exact_values(&mdp, &modified_policy(&scoring, &q_base, *a))?;
        ordering_violations += (0..mdp.n_states())
            .filter(|s| !(optimal.values[*s] >= v_mod[*s] - cfg.tol && v_mod[*s] >= v_base[*s] - cfg.tol))
            .count();
    }
    Ok(InstanceResult {
        instance: k,
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        reports,
        alpha0_is_base,
        alpha1_is_greedy,
        ordering_violations,
        pi_iterations: optimal.iterations,
    })
}

/// Action-level and value-level margins on `cfg.instances` random instances per alpha,
/// plus the alpha endpoint identities and the `V* >= V_mod >= V_base` order.
pub fn improvement_suite(cfg: &SuiteConfig) -> Result<ImprovementSuite> {
    let instances = (0..cfg.instances)
        .into_par_iter()
        .map(|k| check_instance(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImprovementSuite { instances })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DpSuite {
    pub instances: usize,
    /// Largest sup-norm gap between iterative and direct evaluation.
    pub max_eval_gap: f64,
    pub pairs: usize,
    pub contraction_violations: usize,
    pub monotonicity_violations: usize,
    /// Values outside `[0, 1 / (1 - gamma)]`.
    pub bound_violations: usize,
}

impl DpSuite {
    pub fn is_clean(&self, eval_tol: f64) -> bool {
        self.max_eval_gap <= eval_tol
            && self.contraction_violations == 0
            && self.monotonicity_violations == 0
            && self.bound_violations == 0
    }
}

fn random_policy(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize) -> DeterministicPolicy {
    DeterministicPolicy((0..n_states).map(|_| Action(rng.gen_range(0..n_actions as u32))).collect())
}

fn eval_gap(cfg: &SuiteConfig, k: usize) -> Result<(f64, usize)> {
    let mut rng = cfg.instance_rng(k, 0x3c4d);
    let n_states = rng.gen_range(2..=cfg.dp_max_states.max(2));
    let n_actions = rng.gen_range(cfg.min_actions..=cfg.max_actions);
    let mdp = TabularMdp::<f64>::random(&mut rng, n_states, n_actions, cfg.gamma)?;
    let mu = random_policy(&mut rng, n_states, n_actions);
    let iterative = evaluate(&mdp, &mu, cfg.dp_tol)?;
    let direct = evaluate_linear(&mdp, &mu)?;
    let upper = 1.0 / (1.0 - cfg.gamma);
    let out_of_bounds = iterative.iter().filter(|v| !(**v >= -cfg.tol && **v <= upper + cfg.tol)).count();
    Ok((sup_distance(&iterative, &direct), out_of_bounds))
}

/// Relative slack allowed for floating point rounding in the operator checks.
const ROUNDING: f64 = 1e-12;

fn operator_pair(cfg: &SuiteConfig, k: usize) -> Result<(bool, bool)> {
    let mut rng = cfg.instance_rng(k, 0x5e6f);
    let n_states = rng.gen_range(cfg.min_states..=cfg.max_states);
    let n_actions = rng.gen_range(cfg.min_actions..=cfg.max_actions);
    let mdp = TabularMdp::<f64>::random(&mut rng, n_states, n_actions, cfg.gamma)?;
    let mu = random_policy(&mut rng, n_states, n_actions);
    let scale = 1.0 / (1.0 - cfg.gamma);
    let v1: Vec<f64> = (0..n_states).map(|_| rng.gen_range(-scale..scale)).collect();
    let v2: Vec<f64> = (0..n_states).map(|_| rng.gen_range(-scale..scale)).collect();
    // dominated pair: v3 >= v1 pointwise
    let v3: Vec<f64> = v1.iter().map(|v| v + rng.gen_range(0.0..scale)).collect();
    let (t1, t2, t3) = (
        bellman_apply(&mdp, &mu, &v1)?,
        bellman_apply(&mdp, &mu, &v2)?,
        bellman_apply(&mdp, &mu, &v3)?,
    );
    let contraction = sup_distance(&t1, &t2) <= cfg.gamma * sup_distance(&v1, &v2) + ROUNDING * scale;
    let monotone = t3.iter().zip(&t1).all(|(a, b)| *a >= *b - ROUNDING * scale);
    Ok((contraction, monotone))
}

/// Iterative against direct evaluation, the value bounds, and the
/// contraction and monotonicity of `T_mu` on random pairs.
pub fn dp_suite(cfg: &SuiteConfig) -> Result<DpSuite> {
    let gaps = (0..cfg.dp_instances)
        .into_par_iter()
        .map(|k| eval_gap(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    let pairs = (0..cfg.property_pairs)
        .into_par_iter()
        .map(|k| operator_pair(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(DpSuite {
        instances: gaps.len(),
        max_eval_gap: gaps.iter().map(|g| g.0).fold(0.0, f64::max),
        pairs: pairs.len(),
        contraction_violations: pairs.iter().filter(|p| !p.0).count(),
        monotonicity_violations: pairs.iter().filter(|p| !p.1).count(),
        bound_violations: gaps.iter().map(|g| g.1).sum(),
    })
}
