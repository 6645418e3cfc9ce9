//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.
//!
//! Criteria 7 and 9 train on real CIFAR-10 and need `FPNET_DATA_DIR`; without
//! it they report FAIL (BLOCKED) rather than being skipped.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fpnet::data::{load_cifar10, Split};
use fpnet::model_zoo::build_fp_resnet50_spec;
use fpnet::trainer::{metrics_csv, MetricsRecord, TrainConfig, Trainer};
use fpnet::verify::{self, conv_suite, gradcheck_suite, model_total};
use fpnet::{Base, ModelSpec};

const SEED: u64 = 20_240_521;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

fn volterra() -> Outcome {
    let start = Instant::now();
    let worst = verify::volterra_equivalence(1000, SEED).expect("volterra");
    let t = start.elapsed();
    outcome(worst <= 1e-9 && within(Duration::from_secs(5), t), format!("1000 triples, max relative error {worst:.2e} (tol 1e-9), {t:.2?} (limit 5s)"))
}

fn orthogonal() -> Outcome {
    let start = Instant::now();
    let failures = verify::orthogonal_suppression(100, SEED).expect("orthogonal");
    let t = start.elapsed();
    outcome(failures == 0 && within(Duration::from_secs(1), t), format!("{failures} of 100 pre-norm outputs non-zero, {t:.2?} (limit 1s)"))
}

fn eq4() -> Outcome {
    let start = Instant::now();
    let (mismatches, n) = verify::formula_vs_enumeration(50, SEED).expect("enumeration");
    let t = start.elapsed();
    outcome(mismatches == 0 && within(Duration::from_secs(10), t), format!("{mismatches} mismatches over {n} specs, {t:.2?} (limit 10s)"))
}

fn totals() -> Outcome {
    let start = Instant::now();
    let fp = model_total(Base::Resnet32, "001", false).unwrap();
    let ab = model_total(Base::Resnet32, "001", true).unwrap();
    let r20 = model_total(Base::Resnet20, "000", false).unwrap();
    let r44 = model_total(Base::Resnet44, "000", false).unwrap();
    let r50 = build_fp_resnet50_spec(1000).unwrap().total_params;
    let t = start.elapsed();
    let k = |v: usize| (v as f64 / 1e3).round() as usize;
    let ok = k(fp) == 166
        && k(ab) == 162
        && fp - ab == 3456
        && (270..=660).contains(&k(r20))
        && (270..=660).contains(&k(r44))
        && r20.abs_diff(275_000) <= 10_000
        && r50.abs_diff(16_000_000) <= 500_000
        && within(Duration::from_secs(10), t);
    outcome(
        ok,
        format!(
            "resnet32-001 {fp} ({}K), single-filter {ab} ({}K), difference {}, resnet20 {r20} ({}K), resnet44 {r44} ({}K), fp-resnet50 {r50}, {t:.2?}",
            k(fp),
            k(ab),
            fp as i64 - ab as i64,
            k(r20),
            k(r44)
        ),
    )
}

fn gradients() -> Outcome {
    let report = gradcheck_suite(20, SEED).expect("gradcheck");
    let worst = report.checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect::<Vec<_>>();
    let ok = report.passed() && report.seconds <= 120.0;
    let detail = if worst.is_empty() {
        format!("{} ops and the full block, 20 instances each, all within 1e-6, {:.1}s (limit 120s)", report.checks.len() - 1, report.seconds)
    } else {
        worst.join("; ")
    };
    outcome(ok, detail)
}

fn convolutions() -> Outcome {
    let report = conv_suite(50, SEED, 1e-5).expect("conv");
    let detail = report.checks.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; ");
    outcome(report.passed() && report.seconds <= 60.0, format!("{detail}; {:.2}s (limit 60s)", report.seconds))
}

fn script_band() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/reproduce_cifar.sh");
    let Ok(text) = std::fs::read_to_string(&path) else {
        return outcome(false, format!("{} missing", path.display()));
    };
    // 7.85 +- 3 x 0.22 and 8.25 +- 3 x 0.17.
    let documented = ["7.85", "0.66", "7.19", "8.51", "8.25", "0.51", "7.74", "8.76"].iter().all(|s| text.contains(s));
    outcome(documented && text.contains("--epochs 200"), "extended-run script documents the mean +- 3 std bands; headline errors not reproduced at desk scale")
}

struct SmokeRun {
    metrics: Vec<MetricsRecord>,
    seconds: f64,
}

fn smoke_run(dir: &Path, out: &Path) -> fpnet::Result<SmokeRun> {
    let train = load_cifar10(dir, Split::Train)?.subset_per_class(500);
    let test = load_cifar10(dir, Split::Test)?;
    let start = Instant::now();
    let mut t = Trainer::<f32>::new(ModelSpec::with_config(Base::Resnet20, "001"), TrainConfig::smoke(SEED))?.with_output(out)?;
    let report = t.run(&train, &test)?;
    Ok(SmokeRun { metrics: report.metrics, seconds: start.elapsed().as_secs_f64() })
}

fn without_wall(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect::<Vec<_>>().join("\n")
}

fn training(data: Option<&PathBuf>) -> (Outcome, Outcome) {
    let Some(dir) = data else {
        let why = "BLOCKED: FPNET_DATA_DIR is not set; CIFAR-10 is required and is not bundled";
        return (outcome(false, why), outcome(false, why));
    };
    let tmp = tempfile::tempdir().expect("tempdir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = match smoke_run(dir, &a) {
        Ok(r) => r,
        Err(e) => return (outcome(false, format!("training failed: {e}")), outcome(false, "no first run")),
    };
    let m = &first.metrics;
    let (l1, l10) = (m[0].train_loss, m[m.len() - 1].train_loss);
    let drop = 1.0 - l10 / l1;
    let err = m[m.len() - 1].test_error;
    let c7 = outcome(
        m.len() == 10 && drop >= 0.40 && err < 0.60,
        format!("train loss {l1:.4} -> {l10:.4} ({:.1}% drop, need >= 40%), test error {err:.4} (need < 0.60), {:.0}s", 100.0 * drop, first.seconds),
    );
    let c9 = match smoke_run(dir, &b) {
        Ok(_) => {
            let read = |p: &Path| std::fs::read_to_string(p.join("metrics.csv")).unwrap_or_default();
            let (x, y) = (read(&a), read(&b));
            let same = !x.is_empty() && without_wall(&x) == without_wall(&y) && without_wall(&metrics_csv(m)) == without_wall(&x);
            outcome(same, format!("metrics.csv of two seeded runs {} excluding wall_seconds", if same { "identical" } else { "differ" }))
        }
        Err(e) => outcome(false, format!("second run failed: {e}")),
    };
    (c7, c9)
}

fn main() -> ExitCode {
    let data = std::env::var_os("FPNET_DATA_DIR").map(PathBuf::from);
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "volterra equivalence", volterra()),
        (2, "orthogonal suppression", orthogonal()),
        (3, "block parameter formula", eq4()),
        (4, "model parameter totals", totals()),
        (5, "gradient checks", gradients()),
        (6, "convolution references", convolutions()),
    ];
    let (c7, c9) = training(data.as_ref());
    results.push((7, "training smoke", c7));
    results.push((8, "extended-run band", script_band()));
    results.push((9, "determinism", c9));

    let mut failed = 0;
    for (id, name, o) in &results {
        println!("{} criterion {id} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
