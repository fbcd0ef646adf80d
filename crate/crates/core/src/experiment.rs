//! A/B simulation of the base policy against the modified policy.
//!
//! Every seed simulates matched twins: the same population, with the same
//! per-user random streams, is run once with every user on the base policy
//! (control world) and once per tested alpha with the users assigned to the
//! test arm on the modified policy (test world). Arm metrics are computed on
//! the assigned users only, so control and test compare the same users under
//! the two policies. Q̂ is trained with SARSA on the control world's pipeline
//! tuples and refreshed every period.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::auction::Scorer;
use crate::env::streams::mix;
use crate::env::{EnvConfig, Environment, Outcome, UserModel};
use crate::error::{Error, Result};
use crate::pipeline::{BufferTable, InteractionRecord, DEFAULT_HORIZON, MAX_HORIZON};
use crate::policy::{alpha_grid, base_select, contribution_fraction_of, select, tune_alpha};
use crate::sarsa::{MlpQ, StateEncoding, TabularQ, DEFAULT_HIDDEN};
use crate::sarsa::{QModel, ReplayBuffer, Trainer, TrainerConfig};
use crate::state::{Action, Period, UserId, UserState};

/// Contribution-fraction cap used when reporting sweeps.
pub const CONTRIBUTION_CAP: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QModelKind {
    Mlp,
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QModelConfig {
    pub kind: QModelKind,
    pub hidden: Vec<usize>,
    /// Initial value of every tabular entry.
    pub tabular_init: f64,
}

impl Default for QModelConfig {
    fn default() -> Self {
        QModelConfig {
            kind: QModelKind::Mlp,
            hidden: DEFAULT_HIDDEN.to_vec(),
            tabular_init: 0.0,
        }
    }
}

/// Test-arm blending weight: fixed, or tuned against a contribution cap on
/// the states seen at the end of warm-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaPolicy {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub tune_cap: Option<f64>,
}

impl AlphaPolicy {
    pub fn fixed(alpha: f64) -> Self {
        AlphaPolicy {
            alpha: Some(alpha),
            tune_cap: None,
        }
    }

    pub fn tuned(cap: f64) -> Self {
        AlphaPolicy {
            alpha: None,
            tune_cap: Some(cap),
        }
    }

    fn mode(&self) -> Result<AlphaMode> {
        match (self.alpha, self.tune_cap) {
            (Some(a), None) if (0.0..=1.0).contains(&a) => Ok(AlphaMode::Fixed(a)),
            (None, Some(c)) if c > 0.0 && c <= 1.0 => Ok(AlphaMode::Tuned(c)),
            _ => Err(Error::InvalidConfig(
                "policy needs exactly one of alpha in [0, 1] or tune_cap in (0, 1]".into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AlphaMode {
    Fixed(f64),
    Tuned(f64),
}

fn default_seeds() -> usize {
    30
}
fn default_periods() -> u32 {
    42
}
fn default_warmup() -> u32 {
    21
}
fn default_split() -> f64 {
    0.5
}
fn default_horizon() -> u32 {
    DEFAULT_HORIZON
}
fn default_train_steps() -> u64 {
    200
}
fn default_tune_sample() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    /// Periods of the A/B phase.
    #[serde(default = "default_periods")]
    pub n_periods: u32,
    /// Base-policy periods before the A/B phase; Q̂ is trained on them.
    #[serde(default = "default_warmup")]
    pub warmup_periods: u32,
    /// Share of users assigned to the test arm.
    #[serde(default = "default_split")]
    pub split: f64,
    /// Effective horizon of the buffer table.
    #[serde(default = "default_horizon")]
    pub horizon: u32,
    /// SARSA steps after each period's ingest.
    #[serde(default = "default_train_steps")]
    pub train_steps_per_period: u64,
    /// States used when tuning alpha.
    #[serde(default = "default_tune_sample")]
    pub tune_sample: usize,
    pub policy: AlphaPolicy,
    #[serde(default)]
    pub q_model: QModelConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    pub env: EnvConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidConfig(format!("split {} outside (0, 1)", self.split)));
        }
        if self.n_seeds == 0 || self.n_periods == 0 {
            return Err(Error::InvalidConfig("n_seeds and n_periods must be positive".into()));
        }
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return Err(Error::InvalidConfig(format!("horizon {} outside 1..={MAX_HORIZON}", self.horizon)));
        }
        self.policy.mode()?;
        self.trainer.validate()?;
        self.env.population.validate()?;
        if self.q_model.kind == QModelKind::Tabular && matches!(self.env.backend, crate::env::BackendConfig::Vector(_)) {
            return Err(Error::InvalidConfig("a tabular Q-model needs the tabular backend".into()));
        }
        Ok(())
    }
}

/// Raw counts of one arm in one period.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ArmCounts {
    pub conversions: u64,
    /// Recommendations actually shown (the null action is not an impression).
    pub impressions: u64,
}

impl ArmCounts {
    fn add(&mut self, a: Action, converted: bool) {
        self.impressions += u64::from(!a.is_null());
        self.conversions += u64::from(converted);
    }

    fn merge(&mut self, other: ArmCounts) {
        self.conversions += other.conversions;
        self.impressions += other.impressions;
    }

    pub fn conversion_rate(&self) -> f64 {
        if self.impressions == 0 {
            0.0
        } else {
            self.conversions as f64 / self.impressions as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeriodRecord {
    pub period: Period,
    pub control: ArmCounts,
    pub test: ArmCounts,
    pub contribution_sum: f64,
    pub contribution_n: u64,
}

/// One seed of one alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    /// Alpha actually applied (after tuning, if any).
    pub alpha: f64,
    pub periods: Vec<PeriodRecord>,
}

impl SeedRun {
    pub fn totals(&self) -> (ArmCounts, ArmCounts) {
        let (mut c, mut t) = (ArmCounts::default(), ArmCounts::default());
        for p in &self.periods {
            c.merge(p.control);
            t.merge(p.test);
        }
        (c, t)
    }

    pub fn mean_contribution(&self) -> Option<f64> {
        let n: u64 = self.periods.iter().map(|p| p.contribution_n).sum();
        let sum: f64 = self.periods.iter().map(|p| p.contribution_sum).sum();
        (n > 0).then(|| sum / n as f64)
    }
}

/// `(test - control) / control`, defined when control is positive.
pub fn lift(test: f64, control: f64) -> Option<f64> {
    (control > 0.0).then(|| (test - control) / control)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanCi {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// Two-sided 95% Student-t interval; equal to the mean when `n < 2`.
    pub ci_low: f64,
    pub ci_high: f64,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Option<MeanCi> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Some(MeanCi {
                n,
                mean,
                sd: 0.0,
                ci_low: mean,
                ci_high: mean,
            });
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        let half = t * sd / (n as f64).sqrt();
        Some(MeanCi {
            n,
            mean,
            sd,
            ci_low: mean - half,
            ci_high: mean + half,
        })
    }

    pub fn excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Test,
}

/// One row of the per-period or per-week metrics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub alpha: f64,
    /// Period index, or week index in the weekly table, counted from the
    /// start of the A/B phase.
    pub period: u32,
    pub arm: Arm,
    pub conversions: u64,
    pub impressions: u64,
    pub conversion_rate: f64,
    pub conversion_lift: Option<f64>,
    pub conversion_rate_lift: Option<f64>,
    pub impression_lift: Option<f64>,
}

fn rows_for(seed: u64, alpha: f64, period: u32, control: ArmCounts, test: ArmCounts) -> [MetricsRow; 2] {
    let c = MetricsRow {
        seed,
        alpha,
        period,
        arm: Arm::Control,
        conversions: control.conversions,
        impressions: control.impressions,
        conversion_rate: control.conversion_rate(),
        conversion_lift: None,
        conversion_rate_lift: None,
        impression_lift: None,
    };
    let t = MetricsRow {
        arm: Arm::Test,
        conversions: test.conversions,
        impressions: test.impressions,
        conversion_rate: test.conversion_rate(),
        conversion_lift: lift(test.conversions as f64, control.conversions as f64),
        conversion_rate_lift: lift(test.conversion_rate(), control.conversion_rate()),
        impression_lift: lift(test.impressions as f64, control.impressions as f64),
        ..c.clone()
    };
    [c, t]
}

/// Whole-run summary of one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub alpha: f64,
    pub control_conversions: u64,
    pub test_conversions: u64,
    pub control_impressions: u64,
    pub test_impressions: u64,
    pub conversion_lift: Option<f64>,
    pub conversion_rate_lift: Option<f64>,
    pub impression_lift: Option<f64>,
    pub mean_contribution: Option<f64>,
}

/// Metrics of a set of seed runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub daily: Vec<MetricsRow>,
    pub weekly: Vec<MetricsRow>,
    pub seeds: Vec<SeedSummary>,
}

impl MetricsTable {
    pub fn from_runs(runs: &[SeedRun]) -> Self {
        let mut table = MetricsTable::default();
        let mut sorted: Vec<&SeedRun> = runs.iter().collect();
        sorted.sort_by(|a, b| (a.seed, a.alpha).partial_cmp(&(b.seed, b.alpha)).expect("finite alpha"));
        for run in sorted {
            let start = run.periods.first().map_or(0, |p| p.period);
            let mut weeks: Vec<(ArmCounts, ArmCounts)> = Vec::new();
            for p in &run.periods {
                let day = p.period - start;
                table.daily.extend(rows_for(run.seed, run.alpha, day, p.control, p.test));
                let w = (day / 7) as usize;
                if weeks.len() <= w {
                    weeks.resize(w + 1, Default::default());
                }
                weeks[w].0.merge(p.control);
                weeks[w].1.merge(p.test);
            }
            for (w, (c, t)) in weeks.into_iter().enumerate() {
                table.weekly.extend(rows_for(run.seed, run.alpha, w as u32, c, t));
            }
            let (c, t) = run.totals();
            table.seeds.push(SeedSummary {
                seed: run.seed,
                alpha: run.alpha,
                control_conversions: c.conversions,
                test_conversions: t.conversions,
                control_impressions: c.impressions,
                test_impressions: t.impressions,
                conversion_lift: lift(t.conversions as f64, c.conversions as f64),
                conversion_rate_lift: lift(t.conversion_rate(), c.conversion_rate()),
                impression_lift: lift(t.impressions as f64, c.impressions as f64),
                mean_contribution: run.mean_contribution(),
            });
        }
        table
    }

    pub fn is_empty(&self) -> bool {
        self.daily.is_empty()
    }

    fn across_seeds(&self, f: impl Fn(&SeedSummary) -> Option<f64>) -> Option<MeanCi> {
        MeanCi::of(&self.seeds.iter().filter_map(f).collect::<Vec<_>>())
    }

    pub fn conversion_lift(&self) -> Option<MeanCi> {
        self.across_seeds(|s| s.conversion_lift)
    }

    pub fn conversion_rate_lift(&self) -> Option<MeanCi> {
        self.across_seeds(|s| s.conversion_rate_lift)
    }

    pub fn impression_lift(&self) -> Option<MeanCi> {
        self.across_seeds(|s| s.impression_lift)
    }

    pub fn mean_contribution(&self) -> Option<f64> {
        self.across_seeds(|s| s.mean_contribution).map(|m| m.mean)
    }

    /// Writes `metrics_daily.csv`, `metrics_weekly.csv` and
    /// `seed_summary.csv` into `dir`. Nothing is written for an empty table.
    pub fn write_reports(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        if self.is_empty() {
            return Err(Error::EmptyTable);
        }
        fs::create_dir_all(dir)?;
        let daily = dir.join("metrics_daily.csv");
        let weekly = dir.join("metrics_weekly.csv");
        let seeds = dir.join("seed_summary.csv");
        write_rows(&daily, &self.daily)?;
        write_rows(&weekly, &self.weekly)?;
        write_rows(&seeds, &self.seeds)?;
        Ok(vec![daily, weekly, seeds])
    }
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Uniform draw deciding whether `user` belongs to the test arm.
fn assignment_draw(seed: u64, user: UserId) -> f64 {
    (mix(mix(seed ^ 0x7e57_a55e) ^ user.0) >> 11) as f64 / (1u64 << 53) as f64
}

/// Seed of the `k`-th replicate.
fn seed_offset(base: u64, k: u64) -> u64 {
    base.wrapping_add(k.wrapping_mul(0x9E37_79B9))
}

struct SeedContext<'a> {
    cfg: &'a ExperimentConfig,
    model: Arc<dyn UserModel>,
    seed_index: u64,
}

impl SeedContext<'_> {
    fn run<M: QModel<f64>>(&self, mut q: M, modes: &[AlphaMode]) -> Result<Vec<SeedRun>> {
        let cfg = self.cfg;
        let mut population = cfg.env.population.clone();
        population.seed = seed_offset(population.seed, self.seed_index);
        let mut trainer_cfg = cfg.trainer.clone();
        trainer_cfg.seed = seed_offset(trainer_cfg.seed, self.seed_index);

        let mut control = Environment::spawn(&population, self.model.clone())?;
        let scorer = control.scorer();
        let assigned: Vec<bool> = (0..population.n_users as u64)
            .map(|u| assignment_draw(population.seed, UserId(u)) < cfg.split)
            .collect();
        let mut table = BufferTable::new(cfg.horizon)?;
        let mut buffer = ReplayBuffer::new(trainer_cfg.buffer_capacity);
        let mut trainer = Trainer::new(trainer_cfg)?;

        let model = &self.model;
        let mut learn = |t: Period, served: Vec<(UserId, UserState, Action, Outcome)>, q: &mut M| -> Result<()> {
            let records = served
                .into_iter()
                .map(|(user_id, s, a, o)| InteractionRecord {
                    t,
                    user_id,
                    s: model.q_view(&s),
                    a,
                    r: o.reward(),
                })
                .collect();
            buffer.extend(table.ingest(t, records)?);
            if !buffer.is_empty() {
                for _ in 0..cfg.train_steps_per_period {
                    trainer.train_step(&buffer, q)?;
                }
            }
            Ok(())
        };

        for t in 0..cfg.warmup_periods {
            let served = control.run_period(t, |s| Ok(base_select(s, &scorer)))?;
            learn(t, served, &mut q)?;
        }

        let tune_states: Vec<UserState> = control
            .alive_users(cfg.warmup_periods)
            .into_iter()
            .take(cfg.tune_sample)
            .map(|u| control.state_of(u).cloned())
            .collect::<Result<_>>()?;
        let alphas = modes
            .iter()
            .map(|m| match *m {
                AlphaMode::Fixed(a) => Ok(a),
                AlphaMode::Tuned(cap) => {
                    let view = |s: &UserState, a: Action| q.q(&model.q_view(s), a);
                    Ok(tune_alpha(&tune_states, &scorer, &view, cap, &alpha_grid())?.alpha)
                }
            })
            .collect::<Result<Vec<f64>>>()?;

        let mut worlds: Vec<Environment> = alphas.iter().map(|_| control.clone()).collect();
        let mut runs: Vec<SeedRun> = alphas
            .iter()
            .map(|a| SeedRun {
                seed: self.seed_index,
                alpha: *a,
                periods: Vec::with_capacity(cfg.n_periods as usize),
            })
            .collect();
        let is_test = |u: UserId| assigned[u.0 as usize];

        for t in cfg.warmup_periods..cfg.warmup_periods + cfg.n_periods {
            let mut test_counts = Vec::with_capacity(worlds.len());
            let view = |s: &UserState, a: Action| q.q(&model.q_view(s), a);
            for (world, alpha) in worlds.iter_mut().zip(&alphas) {
                let served = world.run_period(t, |s| {
                    if is_test(s.user_id) {
                        select(s, &scorer, &view, *alpha)
                    } else {
                        Ok(base_select(s, &scorer))
                    }
                })?;
                let mut counts = ArmCounts::default();
                let (mut frac_sum, mut frac_n) = (0.0, 0u64);
                for (u, s, a, o) in &served {
                    if !is_test(*u) {
                        continue;
                    }
                    counts.add(*a, o.converted);
                    let qv = view(s, *a).ok_or_else(|| Error::UndefinedQ {
                        state: s.label(),
                        action: *a,
                    })?;
                    if let Ok(frac) = contribution_fraction_of(scorer.raw_score(s, *a), qv, *alpha) {
                        frac_sum += frac;
                        frac_n += 1;
                    }
                }
                test_counts.push((counts, frac_sum, frac_n));
            }
            let served = control.run_period(t, |s| Ok(base_select(s, &scorer)))?;
            let mut control_counts = ArmCounts::default();
            for (u, _, a, o) in &served {
                if is_test(*u) {
                    control_counts.add(*a, o.converted);
                }
            }
            for (run, (test, sum, n)) in runs.iter_mut().zip(test_counts) {
                run.periods.push(PeriodRecord {
                    period: t,
                    control: control_counts,
                    test,
                    contribution_sum: sum,
                    contribution_n: n,
                });
            }
            learn(t, served, &mut q)?;
        }
        Ok(runs)
    }
}

fn run_seed(cfg: &ExperimentConfig, model: Arc<dyn UserModel>, k: u64, modes: &[AlphaMode]) -> Result<Vec<SeedRun>> {
    let init_seed = seed_offset(cfg.trainer.seed ^ 0x1417, k);
    let n_actions = model.n_actions();
    let ctx = SeedContext {
        cfg,
        model: model.clone(),
        seed_index: k,
    };
    match cfg.q_model.kind {
        QModelKind::Tabular => {
            let n_states = model.as_tabular().ok_or(Error::UnsupportedInVectorMode)?.n_states();
            ctx.run(TabularQ::new(n_states, n_actions, cfg.q_model.tabular_init), modes)
        }
        QModelKind::Mlp => {
            let encoding = match (model.q_feature_dim(), model.as_tabular()) {
                (Some(dim), _) => StateEncoding::Features { dim },
                (None, Some(mdp)) => StateEncoding::OneHot {
                    n_states: mdp.n_states(),
                },
                (None, None) => return Err(Error::InvalidConfig("model has neither features nor a kernel".into())),
            };
            ctx.run(MlpQ::<f64>::new(encoding, n_actions, &cfg.q_model.hidden, init_seed), modes)
        }
    }
}

fn run_all(cfg: &ExperimentConfig, modes: &[AlphaMode]) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let model = cfg.env.build_model()?;
    let per_seed = (0..cfg.n_seeds as u64)
        .into_par_iter()
        .map(|k| run_seed(cfg, model.clone(), k, modes))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Runs the configured A/B experiment over all seeds.
pub fn run_ab(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    let runs = run_all(cfg, &[cfg.policy.mode()?])?;
    Ok(MetricsTable::from_runs(&runs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub n_seeds: usize,
    pub mean_conversion_lift: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_conversion_rate_lift: f64,
    pub mean_contribution: Option<f64>,
    pub cap: f64,
    pub within_cap: bool,
}

/// One A/B block per alpha on shared seeds. Q̂ does not depend on alpha, so
/// all alphas of a seed share one control world and one training run.
pub fn sweep_alpha(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<(Vec<SweepRow>, MetricsTable)> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidConfig(format!("alpha {a} outside [0, 1]")));
    }
    let modes: Vec<AlphaMode> = alphas.iter().map(|a| AlphaMode::Fixed(*a)).collect();
    let runs = run_all(cfg, &modes)?;
    let table = MetricsTable::from_runs(&runs);
    let rows = alphas
        .iter()
        .map(|alpha| {
            let sub: Vec<SeedRun> = runs.iter().filter(|r| r.alpha == *alpha).cloned().collect();
            let t = MetricsTable::from_runs(&sub);
            let conv = t.conversion_lift().unwrap_or(MeanCi {
                n: 0,
                mean: 0.0,
                sd: 0.0,
                ci_low: 0.0,
                ci_high: 0.0,
            });
            let contribution = t.mean_contribution();
            SweepRow {
                alpha: *alpha,
                n_seeds: sub.len(),
                mean_conversion_lift: conv.mean,
                ci_low: conv.ci_low,
                ci_high: conv.ci_high,
                mean_conversion_rate_lift: t.conversion_rate_lift().map_or(0.0, |m| m.mean),
                mean_contribution: contribution,
                cap: CONTRIBUTION_CAP,
                within_cap: contribution.map_or(true, |c| c <= CONTRIBUTION_CAP),
            }
        })
        .collect();
    Ok((rows, table))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    write_rows(path, rows)
}
