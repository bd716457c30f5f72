use std::fs;
use std::path::Path;
use std::process::Command;

use brite::error::Error;
use brite::harness::report::load_records;
use brite::harness::{cmd_compare, cmd_report, cmd_run, ExperimentConfig};
use brite::model::LogitModel;

const BASE: &str = r#"
name = "base"
algorithm = "brite"
iterations = 4
seeds = [0, 1, 2]
posterior_samples = 6
estep = { kind = "planning", beta = 1.0 }
mstep = { kind = "weighted_mle", steps = 4, rate = 1.0 }

[task]
seed = 2
generator = { kind = "carry_addition", digits = 1, base = 4 }

[model]
features = { kind = "factored" }
init_scale = 0.3
"#;

fn base() -> ExperimentConfig {
    ExperimentConfig::parse(BASE).unwrap()
}

fn with(text: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{BASE}\n{text}")).unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn run_writes_one_table_per_seed_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&base(), dir.path(), None).unwrap();
    let names = read_dir_sorted(dir.path());
    for f in ["config.resolved", "record.seed0.tsv", "record.seed1.tsv", "record.seed2.tsv", "summary.txt"] {
        assert!(names.contains(&f.to_string()), "{f} missing from {names:?}");
    }
    let first: Vec<Vec<u8>> = (0..3).map(|s| fs::read(dir.path().join(format!("record.seed{s}.tsv"))).unwrap()).collect();
    cmd_run(&base(), dir.path(), Some(2)).unwrap();
    let second: Vec<Vec<u8>> = (0..3).map(|s| fs::read(dir.path().join(format!("record.seed{s}.tsv"))).unwrap()).collect();
    assert_eq!(first, second);
    let resolved = ExperimentConfig::parse(&fs::read_to_string(dir.path().join("config.resolved")).unwrap()).unwrap();
    assert_eq!(resolved, base());
}

#[test]
fn distinct_seeds_give_distinct_sampled_runs() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&base(), dir.path(), None).unwrap();
    let a = fs::read(dir.path().join("record.seed0.tsv")).unwrap();
    let b = fs::read(dir.path().join("record.seed1.tsv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base();
    cfg.checkpoint_every = 2;
    cfg.seeds = vec![7];
    let out = cmd_run(&cfg, dir.path(), None).unwrap();
    let names = read_dir_sorted(dir.path());
    assert!(names.contains(&"checkpoint.seed7.t2".to_string()), "{names:?}");
    assert!(names.contains(&"checkpoint.seed7.t4".to_string()), "{names:?}");
    let text = fs::read_to_string(dir.path().join("checkpoint.seed7.t4")).unwrap();
    let m = LogitModel::from_checkpoint(&text, out.task.clone()).unwrap();
    assert_eq!(brite::train::greedy_accuracy(&m), out.seeds[0].record.last().acc_greedy);
}

#[test]
fn failing_seed_leaves_partial_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base();
    cfg.algorithm = brite::harness::config::Algorithm::Restem;
    let out = cmd_run(&cfg, dir.path(), None).unwrap();
    assert!(out.failed());
    assert!(dir.path().join("INCOMPLETE").exists());
    let partial = fs::read_to_string(dir.path().join("record.seed0.tsv.partial")).unwrap();
    assert_eq!(partial.lines().count(), 2, "header and the initial row");
    assert!(fs::read_to_string(dir.path().join("summary.txt")).unwrap().contains("INCOMPLETE"));
}

#[test]
fn report_is_idempotent_and_matches_records() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&base(), dir.path(), None).unwrap();
    cmd_report(dir.path()).unwrap();
    let once = fs::read(dir.path().join("series.objective.tsv")).unwrap();
    cmd_report(dir.path()).unwrap();
    assert_eq!(once, fs::read(dir.path().join("series.objective.tsv")).unwrap());

    let records = load_records(dir.path()).unwrap();
    let text = String::from_utf8(once).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t\tmean\tmin\tmax"));
    for (t, l) in lines.enumerate() {
        let f: Vec<f64> = l.split('\t').map(|v| v.parse().unwrap()).collect();
        let vals: Vec<f64> = records.iter().map(|(_, r)| r.rows[t].objective).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((f[1] - mean).abs() <= 1e-12);
        assert_eq!(f[2], vals.iter().cloned().fold(f64::INFINITY, f64::min));
        assert_eq!(f[3], vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn report_rejects_corrupt_records() {
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&base(), dir.path(), None).unwrap();
    fs::write(dir.path().join("record.seed1.tsv"), "t\tobjective\n0\tx\n").unwrap();
    assert!(matches!(cmd_report(dir.path()), Err(Error::CorruptRecord { .. })));
}

#[test]
fn compare_with_self_has_zero_deltas() {
    let c = cmd_compare(&[base(), base()], None).unwrap();
    assert_eq!(c.max_abs_delta(), 0.0);
    assert!(c.wins.iter().all(|w| w.ties == 3));
}

#[test]
fn three_way_compare_counts_every_pair() {
    let mut rejection = base();
    rejection.name = "rejection".into();
    rejection.estep = brite::estep::EStepBackend::Rejection { budget: 6 };
    rejection.posterior_samples = None;
    let mut filter = base();
    filter.name = "filter".into();
    filter.algorithm = brite::harness::config::Algorithm::FilterSft;
    filter.budget = 6;
    let c = cmd_compare(&[base(), rejection, filter], None).unwrap();
    assert_eq!(c.wins.len(), 3 * 4);
    for w in &c.wins {
        assert_eq!(w.wins + w.losses + w.ties, 3);
    }
    assert!(c.table.contains("delta[1:rejection:brite]"));
}

#[test]
fn compare_rejects_mismatched_tasks() {
    let mut other = base();
    other.task.seed = 99;
    assert!(matches!(cmd_compare(&[base(), other], None), Err(Error::MismatchedTask(_))));
    let mut seeds = base();
    seeds.seeds = vec![0];
    assert!(matches!(cmd_compare(&[base(), seeds], None), Err(Error::MismatchedTask(_))));
}

#[test]
fn reference_gap_is_summarized_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with("[reference]\nsteps = 300\nrate = 1.0");
    let mut cfg = cfg;
    cfg.estep = brite::estep::EStepBackend::Exact;
    cfg.posterior_samples = None;
    cfg.mstep = brite::train::MStepSpec::GradientAscent { steps: 5, rate: 1.0 };
    cmd_run(&cfg, dir.path(), None).unwrap();
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("reference gap"), "{summary}");
    let rec = fs::read_to_string(dir.path().join("record.seed0.tsv")).unwrap();
    let kl_col: Vec<&str> = rec.lines().nth(2).unwrap().split('\t').collect();
    assert_ne!(kl_col[3], "NaN");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_brite"))
}

#[test]
fn cli_rejects_negative_beta_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, BASE.replace("iterations = 4", "iterations = 4\nbeta = -1.0")).unwrap();
    let out = bin().args(["run", "--config"]).arg(&path).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));
}

#[test]
fn cli_run_honors_out_root_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, BASE).unwrap();
    let out = bin().args(["run", "--seeds", "4,5", "--config"]).arg(&path).env("BRITE_OUT", dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names = read_dir_sorted(&dir.path().join("base"));
    assert!(names.contains(&"record.seed4.tsv".to_string()) && names.contains(&"record.seed5.tsv".to_string()));
    assert!(!names.contains(&"record.seed0.tsv".to_string()));
}

#[test]
fn cli_verify_filter_and_fault() {
    let ok = bin().args(["verify", "--filter", "plan*"]).output().unwrap();
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(ok.status.success(), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("PASS")).all(|l| l.starts_with("PASS plan.")));
    assert!(text.contains("plan.shaping_posterior"));

    let bad = bin().args(["verify", "--filter", "plan.shaping*", "--inject-fault", "flip-token-sign"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL plan.shaping_posterior"));
}

#[test]
fn bundled_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        n += 1;
    }
    assert!(n >= 4);
}
