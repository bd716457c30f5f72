//! Acceptance criteria, one PASS/FAIL line each.

use std::fs;
use std::time::{Duration, Instant};

use brite::harness::run::cmd_run;
use brite::harness::suite::{self, Check};
use brite::harness::{cmd_report, ExperimentConfig};
use brite::planner::ShapingFault;

struct Line {
    id: usize,
    passed: bool,
    text: String,
}

fn line(id: usize, what: &str, checks: &[(&str, Check)], limit: Option<Duration>, elapsed: Duration) -> Line {
    let mut passed = checks.iter().all(|(_, c)| c.passed);
    let mut parts: Vec<String> = checks
        .iter()
        .map(|(n, c)| format!("{n}: measured {:e} vs {:e} over {} [{}]", c.measured, c.threshold, c.instances, c.detail))
        .collect();
    if let Some(l) = limit {
        let within = elapsed < l;
        passed &= within;
        parts.push(format!("runtime {:.2}s (limit {}s)", elapsed.as_secs_f64(), l.as_secs()));
    } else {
        parts.push(format!("runtime {:.2}s", elapsed.as_secs_f64()));
    }
    let status = if passed { "PASS" } else { "FAIL" };
    Line { id, passed, text: format!("criterion {id}: {status} {what}; {}", parts.join("; ")) }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

const DETERMINISM_CONFIG: &str = r#"
name = "acceptance-determinism"
algorithm = "brite"
iterations = 6
seeds = [0, 1, 2, 3]
posterior_samples = 8
estep = { kind = "planning", beta = 1.0 }
mstep = { kind = "weighted_mle", steps = 5, rate = 1.0 }

[task]
seed = 5
generator = { kind = "carry_addition", digits = 1, base = 5 }

[model]
features = { kind = "factored" }
init_scale = 0.5
"#;

const DETERMINISM_DPO_CONFIG: &str = r#"
name = "acceptance-determinism-dpo"
algorithm = "brite_dpo"
iterations = 3
seeds = [0, 1]
budget = 8

[task]
seed = 5
generator = { kind = "carry_addition", digits = 1, base = 5 }

[model]
features = { kind = "factored" }
init_scale = 0.5
"#;

fn determinism() -> Check {
    let mut differing = Vec::new();
    let mut files = 0;
    for (k, text) in [DETERMINISM_CONFIG, DETERMINISM_DPO_CONFIG].iter().enumerate() {
        let cfg = ExperimentConfig::parse(text).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        cmd_run(&cfg, a.path(), Some(1)).unwrap();
        cmd_run(&cfg, b.path(), Some(3)).unwrap();
        cmd_report(a.path()).unwrap();
        cmd_report(b.path()).unwrap();
        let mut names: Vec<String> = fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.starts_with("record.") || n.starts_with("series."))
            .collect();
        names.sort();
        for n in names {
            files += 1;
            if fs::read(a.path().join(&n)).unwrap() != fs::read(b.path().join(&n)).unwrap() {
                differing.push(format!("config {k}: {n}"));
            }
        }
    }
    Check {
        passed: differing.is_empty() && files > 0,
        measured: differing.len() as f64,
        threshold: 0.0,
        instances: files,
        detail: if differing.is_empty() { "metric tables byte-identical".into() } else { differing.join(", ") },
    }
}

fn main() {
    let mut lines = Vec::new();

    let (c, e) = timed(|| suite::softmax_plan_equivalence(60));
    lines.push(line(1, "soft planning equals trajectory softmax", &[("max TV", c)], Some(Duration::from_secs(10)), e));

    let (c, e) = timed(|| suite::shaping_posterior(ShapingFault::None));
    lines.push(line(2, "shaped planning recovers the exact posterior", &[("max TV", c)], Some(Duration::from_secs(30)), e));

    let (c, e) = timed(|| suite::elbo_bound(24, 1000));
    lines.push(line(3, "lower bound below objective, tight at posterior", &[("excess", c)], None, e));

    let (c, e) = timed(|| (suite::kl_identity(100), suite::gradient_identity(100)));
    lines.push(line(4, "KL identity and objective gradient", &[("kl", c.0), ("grad", c.1)], None, e));

    let (c, e) = timed(|| (suite::em_monotone(12, 100), suite::em_certificate(12, 100), suite::em_convergence()));
    lines.push(line(
        5,
        "EM monotone and certificate",
        &[("monotone", c.0), ("certificate", c.1), ("convergence", c.2)],
        None,
        e,
    ));

    let (c, e) = timed(|| suite::reference_gap_diagnostic(20, 10_000));
    lines.push(line(6, "reference gap on probe-passing runs", &[("violations", c)], None, e));

    let (c, e) = timed(|| (suite::unify_filter_sft(12), suite::unify_restem(12)));
    lines.push(line(7, "baselines coincide with an exact EM iteration", &[("filter", c.0), ("restem", c.1)], None, e));

    let (c, e) = timed(|| (suite::trend_rejection(5), suite::trend_preference(5)));
    lines.push(line(
        8,
        "planning posterior beats rejection; posterior candidates beat model candidates",
        &[("rejection wins", c.0), ("preference wins", c.1)],
        Some(Duration::from_secs(300)),
        e,
    ));

    let (c, e) = timed(|| (suite::dpo_reference_loss(20), suite::dpo_gradient(20), suite::dpo_shift_invariance(10)));
    lines.push(line(9, "preference loss", &[("log 2", c.0), ("grad", c.1), ("shift", c.2)], None, e));

    let (c, e) = timed(determinism);
    lines.push(line(10, "determinism", &[("differing files", c)], None, e));

    for l in &lines {
        println!("{}", l.text);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
