use std::collections::BTreeSet;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ltv_core::dp_oracle::suite::{dp_suite, improvement_suite, SuiteConfig};
use ltv_core::dp_oracle::{exact_values, q_from_v, verify_improvement_with, DeterministicPolicy, VerifyOptions};
use ltv_core::env::{write_log_csv, BackendConfig, Environment, TabularModel};
use ltv_core::experiment::{run_ab, sweep_alpha, write_sweep_csv, ExperimentConfig, MetricsTable, QModelKind};
use ltv_core::pipeline::{write_tuples_csv, BufferTable, InteractionRecord};
use ltv_core::policy::{base_select, QEstimate};
use ltv_core::sarsa::{write_curve_csv, MlpQ, QModel, ReplayBuffer, StateEncoding, TabularQ, Trainer};
use ltv_core::{Action, Mdp, Scoring, UserId, UserState};

#[derive(Parser)]
#[command(name = "ltv", version, about = "Long-term-value policy improvement: verifier, trainer and A/B simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized DP suites, or check one MDP given as CSV tables.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Number of random instances (overrides the config).
        #[arg(long)]
        instances: Option<usize>,
        /// `s,a,s_next,prob` table of a single instance to verify.
        #[arg(long, requires_all = ["rewards", "scoring"])]
        transitions: Option<PathBuf>,
        /// `s,a,reward` table.
        #[arg(long)]
        rewards: Option<PathBuf>,
        /// `state_id,item_id,bid,ecvr` table.
        #[arg(long)]
        scoring: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        gamma: f64,
    },
    /// Simulate the base policy, build tuples and fit Q̂ with SARSA.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// A/B experiment of the modified policy against the base policy.
    Ab {
        #[command(flatten)]
        common: Common,
    },
    /// One A/B block per alpha on shared seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alphas.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,0.96,1")]
        alphas: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify {
            common,
            instances,
            transitions,
            rewards,
            scoring,
            gamma,
        } => match (transitions, rewards, scoring) {
            (Some(t), Some(r), Some(s)) => verify_one(&common, &t, &r, &s, gamma),
            _ => verify_suites(&common, instances),
        },
        Command::Train { common } => train(&common),
        Command::Ab { common } => ab(&common),
        Command::Sweep { common, alphas } => sweep(&common, &alphas),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("invariant violated");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn verify_suites(common: &Common, instances: Option<usize>) -> Result<bool> {
    let mut cfg = match &common.config {
        Some(p) => toml::from_str::<SuiteConfig>(&fs::read_to_string(p)?).context("reading suite config")?,
        None => SuiteConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = instances {
        cfg.instances = n;
    }
    prepare_out(&common.out)?;
    let suite = improvement_suite(&cfg)?;
    suite.write_csv(File::create(common.out.join("verify_report.csv"))?)?;
    let dp = dp_suite(&cfg)?;
    let dp_ok = dp.is_clean(1e-8);
    println!(
        "improvement: {} instances x {} alphas, {} changed states, lemma violations {}, value violations {}, strict violations {}",
        suite.instances.len(),
        cfg.alphas.len(),
        suite.changed_states(),
        suite.lemma_violations(),
        suite.value_violations(),
        suite.strict_violations()
    );
    println!(
        "endpoints: {} failing instances; ordering V* >= V_mod >= V_base: {} violations; max policy iterations {}",
        suite.endpoint_failures(),
        suite.ordering_violations(),
        suite.instances.iter().map(|i| i.pi_iterations).max().unwrap_or(0)
    );
    println!(
        "dp: max |iterative - direct| = {:.3e} over {} instances; contraction {} / monotonicity {} / bound {} violations over {} pairs",
        dp.max_eval_gap, dp.instances, dp.contraction_violations, dp.monotonicity_violations, dp.bound_violations, dp.pairs
    );
    Ok(suite.is_clean() && dp_ok)
}

fn verify_one(common: &Common, transitions: &Path, rewards: &Path, scoring: &Path, gamma: f64) -> Result<bool> {
    let cfg = match &common.config {
        Some(p) => toml::from_str::<SuiteConfig>(&fs::read_to_string(p)?).context("reading suite config")?,
        None => SuiteConfig::default(),
    };
    let mdp = Mdp::read_csv(File::open(transitions)?, File::open(rewards)?, gamma)?;
    let scoring = Scoring::read_csv(File::open(scoring)?)?;
    let opts = VerifyOptions {
        tol: cfg.tol,
        strict_tol: cfg.strict_tol,
        q_noise: cfg.q_noise,
        seed: common.seed.unwrap_or(cfg.seed),
    };
    prepare_out(&common.out)?;
    let mut clean = true;
    for alpha in &cfg.alphas {
        let report = verify_improvement_with(&mdp, &scoring, *alpha, &opts)?;
        report.write_csv(File::create(common.out.join(format!("verify_alpha_{alpha}.csv")))?)?;
        println!(
            "alpha {alpha}: {} changed states, lemma violations {}, value violations {}, strict violations {}",
            report.changed_states(),
            report.lemma_violations,
            report.value_violations,
            report.strict_violations
        );
        clean &= report.is_clean();
    }
    Ok(clean)
}

fn load_experiment(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = common.seed {
        cfg.env.population.seed = seed;
        cfg.trainer.seed = seed;
    }
    Ok(cfg)
}

fn print_lifts(table: &MetricsTable) {
    for (name, est) in [
        ("conversions", table.conversion_lift()),
        ("conversion rate", table.conversion_rate_lift()),
        ("impressions", table.impression_lift()),
    ] {
        match est {
            Some(m) => println!(
                "{name} lift: mean {:+.4} (95% CI {:+.4} .. {:+.4}, n = {})",
                m.mean, m.ci_low, m.ci_high, m.n
            ),
            None => println!("{name} lift: undefined"),
        }
    }
    if let Some(c) = table.mean_contribution() {
        println!("mean contribution fraction: {c:.4}");
    }
}

/// Rates are ratios of the reported counts, and arms on identical policies
/// show no lift.
fn table_is_consistent(table: &MetricsTable) -> bool {
    let rows_ok = table.daily.iter().chain(&table.weekly).all(|r| {
        let expected = if r.impressions == 0 {
            0.0
        } else {
            r.conversions as f64 / r.impressions as f64
        };
        (0.0..=1.0).contains(&r.conversion_rate) && r.conversion_rate == expected
    });
    let neutral_ok = table
        .seeds
        .iter()
        .filter(|s| s.alpha == 0.0)
        .all(|s| s.control_conversions == s.test_conversions && s.control_impressions == s.test_impressions);
    rows_ok && neutral_ok
}

fn ab(common: &Common) -> Result<bool> {
    let cfg = load_experiment(common)?;
    let table = run_ab(&cfg)?;
    prepare_out(&common.out)?;
    for p in table.write_reports(&common.out)? {
        println!("wrote {}", p.display());
    }
    print_lifts(&table);
    Ok(table_is_consistent(&table))
}

fn sweep(common: &Common, alphas: &[f64]) -> Result<bool> {
    let cfg = load_experiment(common)?;
    let (rows, table) = sweep_alpha(&cfg, alphas)?;
    prepare_out(&common.out)?;
    write_sweep_csv(&common.out.join("sweep.csv"), &rows)?;
    table.write_reports(&common.out)?;
    for r in &rows {
        println!(
            "alpha {:.2}: conversion lift {:+.4} (95% CI {:+.4} .. {:+.4}), contribution {}",
            r.alpha,
            r.mean_conversion_lift,
            r.ci_low,
            r.ci_high,
            r.mean_contribution.map_or("n/a".to_string(), |c| format!("{c:.4}"))
        );
    }
    Ok(table_is_consistent(&table))
}

fn train(common: &Common) -> Result<bool> {
    let cfg = load_experiment(common)?;
    prepare_out(&common.out)?;
    let mut env = Environment::from_config(&cfg.env)?.record_log();
    let scorer = env.scorer();
    let mut table = BufferTable::new(cfg.horizon)?;
    let mut tuples = Vec::new();
    for t in 0..cfg.warmup_periods + cfg.n_periods {
        let served = env.run_period(t, |s| Ok(base_select(s, &scorer)))?;
        let records = served
            .into_iter()
            .map(|(user_id, s, a, o)| InteractionRecord {
                t,
                user_id,
                s: env.model().q_view(&s),
                a,
                r: o.reward(),
            })
            .collect();
        tuples.extend(table.ingest(t, records)?);
    }
    tuples.extend(table.flush()?);
    write_log_csv(File::create(common.out.join("logs.csv"))?, env.log())?;
    write_tuples_csv(File::create(common.out.join("tuples.csv"))?, &tuples)?;
    println!("{} interactions, {} tuples", env.log().len(), tuples.len());

    // Exact Q_base for the tabular backend, as the evaluation reference. Only
    // logged (s, a) pairs are identifiable from base-policy data. The state is
    // frozen between interactions, so with a constant interaction probability
    // p the tuples discount by E[gamma^tau; tau <= h] per interaction.
    let reference = match (env.as_tabular(), &cfg.env.backend) {
        (Ok(mdp), BackendConfig::Tabular(tc)) => {
            mdp.write_transitions_csv(File::create(common.out.join("mdp_transitions.csv"))?)?;
            mdp.write_rewards_csv(File::create(common.out.join("mdp_rewards.csv"))?)?;
            let p = tc.interaction_prob[0];
            let constant = tc.interaction_prob.iter().all(|q| *q == p);
            let gamma_eff: f64 = (1..=cfg.horizon)
                .map(|tau| p * (1.0 - p).powi(tau as i32 - 1) * cfg.trainer.gamma.powi(tau as i32))
                .sum();
            let mdp = mdp.with_gamma(gamma_eff)?;
            let states: Vec<UserState> = (0..mdp.n_states()).map(|s| UserState::tabular(UserId(0), s)).collect();
            let base = DeterministicPolicy(states.iter().map(|s| base_select(s, &scorer)).collect());
            let q = q_from_v(&mdp, &exact_values(&mdp, &base)?)?;
            let logged: BTreeSet<(usize, Action)> = tuples
                .iter()
                .filter_map(|d| Some((d.s.tabular_index()?, d.a)))
                .collect();
            constant.then_some((q, logged))
        }
        _ => None,
    };
    if let BackendConfig::Tabular(t) = &cfg.env.backend {
        TabularModel::from_config(t)?
            .scoring()
            .write_csv(File::create(common.out.join("scoring.csv"))?)?;
    }

    let mut buffer = ReplayBuffer::new(cfg.trainer.buffer_capacity);
    buffer.extend(tuples);
    let mut trainer = Trainer::new(cfg.trainer.clone())?;
    let model = env.model().clone();
    let eval = |q: &dyn QEstimate<f64>| -> Option<f64> {
        let (exact, logged) = reference.as_ref()?;
        let mut worst: f64 = 0.0;
        for (k, a) in logged {
            let qv = q.q(&UserState::tabular(UserId(0), *k), *a)?;
            worst = worst.max((qv - exact.get(*k, *a)).abs());
        }
        Some(worst)
    };
    let every = (cfg.trainer.total_steps / 100).max(1);
    let (curve, checkpoint) = match cfg.q_model.kind {
        QModelKind::Tabular => {
            let mdp = env.as_tabular()?;
            let mut q = TabularQ::new(mdp.n_states(), mdp.n_actions(), cfg.q_model.tabular_init);
            let curve = trainer.fit(&mut buffer, &mut q, |_, _| Ok(()), every, |q| eval(q))?;
            (curve, q.checkpoint())
        }
        QModelKind::Mlp => {
            let encoding = match (model.q_feature_dim(), env.as_tabular()) {
                (Some(dim), _) => StateEncoding::Features { dim },
                (None, Ok(mdp)) => StateEncoding::OneHot { n_states: mdp.n_states() },
                (None, Err(e)) => return Err(e.into()),
            };
            let mut q = MlpQ::<f64>::new(encoding, model.n_actions(), &cfg.q_model.hidden, cfg.trainer.seed);
            let curve = trainer.fit(&mut buffer, &mut q, |_, _| Ok(()), every, |q| eval(q))?;
            (curve, q.checkpoint())
        }
    };
    write_curve_csv(File::create(common.out.join("training_curve.csv"))?, &curve, true)?;
    fs::write(common.out.join("q_checkpoint.toml"), checkpoint.to_text()?)?;
    if let Some(last) = curve.last() {
        println!(
            "{} steps, final batch loss {:.6}, max-norm error over logged pairs {}",
            last.step,
            last.loss,
            last.eval_error.map_or("n/a".to_string(), |e| format!("{e:.4}"))
        );
    }
    Ok(curve.iter().all(|p| p.loss.is_finite()))
}

