use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ltv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltv")).args(args).output().unwrap()
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_runs_the_suites_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ltv(&["verify", "--instances", "20", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = dir.path().join("verify_report.csv");
    assert_eq!(
        header(&report),
        "instance,alpha,state,base_action,mod_action,v_base,v_mod,lemma_margin,value_margin"
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("value violations 0"), "{stdout}");
}

#[test]
fn impossible_margin_is_reported_through_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("suite.toml");
    // no improvement can clear a strict margin of 100 when values are at most 5
    fs::write(&cfg, "instances = 5\nstrict_tol = 100.0\ndp_instances = 2\nproperty_pairs = 10\n").unwrap();
    let out = ltv(&["verify", "-c", s(&cfg), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_configs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(ltv(&["ab", "-c", s(&missing), "-o", s(dir.path())]).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(config("tabular_small.toml")).unwrap().replace("split = 0.5", "split = 1.5")).unwrap();
    assert_eq!(ltv(&["ab", "-c", s(&bad), "-o", s(dir.path())]).status.code(), Some(2));

    assert_eq!(ltv(&["train", "-o", s(dir.path())]).status.code(), Some(2));
}

#[test]
fn train_exports_tables_that_verify_accepts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ltv(&["train", "-c", &config("tabular_small.toml"), "-o", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let p = dir.path();
    assert_eq!(header(&p.join("logs.csv")), "t,user_id,state_repr,item_id,converted");
    assert_eq!(header(&p.join("scoring.csv")), "state_id,item_id,bid,ecvr");
    assert_eq!(header(&p.join("training_curve.csv")), "step,loss,eval_error");
    let checkpoint = fs::read_to_string(p.join("q_checkpoint.toml")).unwrap();
    assert!(checkpoint.contains("format = \"ltv-q-checkpoint\""));
    assert!(checkpoint.contains("version = 1"));

    let curve = fs::read_to_string(p.join("training_curve.csv")).unwrap();
    let last = curve.lines().last().unwrap();
    let err: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(err < 0.15, "{last}");

    let report = p.join("single");
    let out = ltv(&[
        "verify",
        "--transitions",
        s(&p.join("mdp_transitions.csv")),
        "--rewards",
        s(&p.join("mdp_rewards.csv")),
        "--scoring",
        s(&p.join("scoring.csv")),
        "-o",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report.join("verify_alpha_0.96.csv").exists());
}

#[test]
fn ab_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ab = dir.path().join("ab");
    let out = ltv(&["ab", "-c", &config("tabular_small.toml"), "-o", s(&ab)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics_daily.csv", "metrics_weekly.csv", "seed_summary.csv"] {
        assert!(ab.join(f).exists(), "{f}");
    }
    assert_eq!(
        header(&ab.join("metrics_weekly.csv")),
        "seed,alpha,period,arm,conversions,impressions,conversion_rate,conversion_lift,conversion_rate_lift,impression_lift"
    );

    let sweep = dir.path().join("sweep");
    let out = ltv(&["sweep", "-c", &config("tabular_small.toml"), "--alphas", "0,1", "-o", s(&sweep)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.lines().nth(1).unwrap().starts_with("0.0,4,0.0,"));
}

#[test]
fn seed_flag_is_deterministic_and_matters() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let out = ltv(&["ab", "-c", &config("tabular_small.toml"), "--seed", seed, "-o", s(&out_dir)]);
        assert!(out.status.success());
        fs::read(out_dir.join("metrics_daily.csv")).unwrap()
    };
    let (a, b, c) = (run("5", "a"), run("5", "b"), run("6", "c"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}
