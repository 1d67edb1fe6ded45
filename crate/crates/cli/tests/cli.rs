use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;
use tscp::calibrate::CalibrationResult;
use tscp::sweep::{GuidelinePlan, MondrianComparison, SelectionRule, SweepMetadata};
use tscp::synthetic::{self, SyntheticConfig};

fn tscp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tscp")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = tscp(args);
    assert!(o.status.success(), "tscp {args:?} failed: {}", stderr(&o));
    o
}

struct Fixture {
    dir: TempDir,
    input: PathBuf,
}

impl Fixture {
    /// Moderately overconfident 10-class data.
    fn new(num_samples: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = SyntheticConfig {
            num_classes: 10,
            num_samples,
            signal_min: 0.5,
            signal_max: 4.0,
            ..SyntheticConfig::default()
        };
        let table = synthetic::generate(&config, 7).unwrap();
        let input = dir.path().join("logits.csv");
        table.write_csv(fs::File::create(&input).unwrap()).unwrap();
        Self { dir, input }
    }

    fn input(&self) -> &str {
        self.input.to_str().unwrap()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn calibrate_writes_result_and_reliability_csv() {
    let f = Fixture::new(3000);
    let out = f.out("cal");
    ok(&["calibrate", "--input", f.input(), "--out-dir", s(&out)]);
    let result: CalibrationResult = read_json(&out.join("calibration.json"));
    assert!(result.objective_value_after <= result.objective_value_before);
    let csv = fs::read_to_string(out.join("reliability.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("bin_low,"));
}

#[test]
fn missing_input_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent/logits.csv");
    let out = dir.path().join("out");
    let o = tscp(&["calibrate", "--input", s(&missing), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn nll_and_ece_temperatures_agree() {
    let f = Fixture::new(5000);
    let t_star = |objective: &str| {
        let out = f.out(objective);
        ok(&["calibrate", "--input", f.input(), "--objective", objective, "--out-dir", s(&out)]);
        read_json::<CalibrationResult>(&out.join("calibration.json")).t_star.value()
    };
    let (ece, nll) = (t_star("ece"), t_star("nll"));
    assert!((ece - nll).abs() <= 0.15, "ece {ece} vs nll {nll}");
}

#[test]
fn fit_then_eval_covers_at_target_rate() {
    let f = Fixture::new(4000);
    let out = f.out("run");
    ok(&["calibrate", "--input", f.input(), "--out-dir", s(&out)]);
    let cal = out.join("calibration.json");
    ok(&[
        "fit", "--input", f.input(), "--calibration", s(&cal), "--method", "aps", "--randomized",
        "--cp-fraction", "0.3", "--out-dir", s(&out),
    ]);
    ok(&[
        "eval", "--input", f.input(), "--model", s(&out.join("model.json")), "--cp-fraction", "0.3", "--out-dir",
        s(&out),
    ]);
    let report: tscp::metrics::MetricsReport = read_json(&out.join("metrics.json"));
    // 2400 evaluation rows: the standard error of the coverage is about 0.006.
    assert!(report.mar_cov_gap < 0.04, "{report:?}");
    assert_eq!(report.n_eval, 2400);
}

#[test]
fn fit_mondrian_round_trips_through_eval() {
    let f = Fixture::new(3000);
    let out = f.out("m");
    ok(&["fit", "--input", f.input(), "--mondrian", "--method", "raps", "--out-dir", s(&out)]);
    let model: serde_json::Value = read_json(&out.join("model.json"));
    assert_eq!(model["per_class"].as_array().unwrap().len(), 10);
    ok(&["eval", "--input", f.input(), "--model", s(&out.join("model.json")), "--out-dir", s(&out)]);
}

#[test]
fn sweep_default_grid_has_46_rows_per_method() {
    let f = Fixture::new(2000);
    let out = f.out("sweep");
    ok(&["sweep", "--input", f.input(), "--trials", "2", "--out-dir", s(&out)]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    for method in ["lac", "aps", "raps"] {
        let rows = csv.lines().skip(1).filter(|l| l.split(',').nth(1) == Some(method)).count();
        assert_eq!(rows, 46, "{method}");
    }
    let meta: SweepMetadata = read_json(&out.join("sweep.json"));
    assert_eq!(meta.temperatures.len(), 46);
    assert!((meta.temperatures[0] - 0.5).abs() < 1e-12 && (meta.temperatures[45] - 5.0).abs() < 1e-12);
}

#[test]
fn sweep_rerun_is_byte_identical() {
    let f = Fixture::new(2000);
    let run = |name: &str| {
        let out = f.out(name);
        ok(&[
            "sweep", "--input", f.input(), "--trials", "3", "--randomized", "--seed", "11", "--out-dir", s(&out),
        ]);
        (fs::read(out.join("sweep.csv")).unwrap(), fs::read(out.join("sweep.json")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn sweep_peak_in_metadata_matches_csv_argmax() {
    let f = Fixture::new(3000);
    let out = f.out("peak");
    ok(&["sweep", "--input", f.input(), "--trials", "3", "--randomized", "--out-dir", s(&out)]);
    let meta: SweepMetadata = read_json(&out.join("sweep.json"));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(meta.t_c_empirical.len(), 2, "adaptive methods only");
    for (label, t_c) in &meta.t_c_empirical {
        let mut best: Option<(f64, f64)> = None;
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols[1] != label {
                continue;
            }
            let (t, size): (f64, f64) = (cols[0].parse().unwrap(), cols[3].parse().unwrap());
            if best.is_none_or(|(_, b)| size > b) {
                best = Some((t, size));
            }
        }
        assert_eq!(best.unwrap().0, t_c.value(), "{label}");
    }
}

#[test]
fn guideline_min_topcovgap_picks_curve_minimum() {
    let f = Fixture::new(3000);
    let out = f.out("g");
    ok(&["guideline", "--input", f.input(), "--rule", "min-topcovgap", "--out-dir", s(&out)]);
    let plan: GuidelinePlan = read_json(&out.join("plan.json"));
    assert_eq!(plan.selection_rule, SelectionRule::MinTopCovGap);
    let curve = &plan.approximated_curve.curves[0];
    let gaps: Vec<f64> = curve.metrics.iter().map(|m| m.top_cov_gap).collect();
    let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let first = gaps.iter().position(|&g| g == min).unwrap();
    assert_eq!(plan.t_hat.value(), plan.approximated_curve.temperatures[first]);
}

#[test]
fn guideline_fixed_rule_passes_t_hat_through() {
    let f = Fixture::new(2000);
    let out = f.out("g");
    ok(&["guideline", "--input", f.input(), "--rule", "fixed", "--t-hat", "1.3", "--out-dir", s(&out)]);
    let plan: GuidelinePlan = read_json(&out.join("plan.json"));
    assert_eq!(plan.t_hat.value(), 1.3);
    assert!(matches!(plan.selection_rule, SelectionRule::UserFixed { .. }));

    let o = tscp(&["guideline", "--input", f.input(), "--rule", "fixed", "--out-dir", s(&f.out("bad"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!f.out("bad").exists());
}

#[test]
fn guideline_plan_round_trips() {
    let f = Fixture::new(2000);
    let out = f.out("g");
    ok(&["guideline", "--input", f.input(), "--rule", "min-avgsize", "--randomized", "--out-dir", s(&out)]);
    let bytes = fs::read(out.join("plan.json")).unwrap();
    let plan: GuidelinePlan = serde_json::from_slice(&bytes).unwrap();
    let mut again = serde_json::to_vec_pretty(&plan).unwrap();
    again.push(b'\n');
    assert_eq!(again, bytes);
}

#[test]
fn verify_theory_default_run_has_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["verify-theory", "--out-dir", s(dir.path())]);
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "violations: 0"), "{text}");
    let lines = fs::read_to_string(dir.path().join("theory.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 6 * 10_000);
}

#[test]
fn verify_theory_small_run_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = ok(&["verify-theory", "--cases", "10", "--out-dir", s(dir.path())]);
    assert!(start.elapsed().as_secs_f64() < 1.0, "{:?}", start.elapsed());
    assert!(stdout(&o).contains("violations: 0"));
}

#[test]
fn verify_theory_detects_injected_sign_flip() {
    let dir = tempfile::tempdir().unwrap();
    let o = tscp(&["verify-theory", "--cases", "200", "--inject-sign-flip", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let n: usize = last.strip_prefix("violations: ").unwrap().parse().unwrap();
    assert!(n > 0);
}

#[test]
fn verify_theory_with_input_checks_thresholds() {
    let f = Fixture::new(2000);
    let out = f.out("vt");
    let o = ok(&["verify-theory", "--input", f.input(), "--cases", "50", "--out-dir", s(&out)]);
    let text = stdout(&o);
    assert!(text.contains("[aps] threshold_monotonicity: cases 45"), "{text}");
    assert!(text.contains("[raps] threshold_monotonicity: cases 45"), "{text}");
    assert!(out.join("quantile_similarity.json").exists());
}

#[test]
fn mondrian_compare_shape_and_determinism() {
    let f = Fixture::new(3000);
    let run = |name: &str| {
        let out = f.out(name);
        ok(&["mondrian-compare", "--input", f.input(), "--trials", "4", "--per-class", "5", "--out-dir", s(&out)]);
        (fs::read_to_string(out.join("mondrian.csv")).unwrap(), fs::read(out.join("mondrian.json")).unwrap())
    };
    let (csv, json) = run("a");
    let keys: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[1].to_string())
        })
        .collect();
    let mut expected = Vec::new();
    for approach in ["mondrian", "ts-t-hat"] {
        for metric in ["avg_size", "mar_cov_gap", "top_cov_gap"] {
            expected.push((approach.to_string(), metric.to_string()));
        }
    }
    assert_eq!(keys, expected);
    let comparison: MondrianComparison = serde_json::from_slice(&json).unwrap();
    assert_eq!(comparison.trials.len(), 4);
    assert_eq!(run("b"), (csv, json));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let f = Fixture::new(1500);
    let out = f.out("cfg");
    let config = f.out("run.json");
    let manifest = serde_json::json!({
        "input": f.input(),
        "alpha": 0.05,
        "method": ["aps"],
        "trials": 2,
        "t_step": 0.5,
        "out_dir": s(&out),
    });
    fs::write(&config, manifest.to_string()).unwrap();
    ok(&["sweep", "--config", s(&config), "--alpha", "0.2"]);
    let meta: SweepMetadata = read_json(&out.join("sweep.json"));
    assert_eq!(meta.alpha, 0.2);
    assert_eq!(meta.num_trials, 2);
    assert_eq!(meta.temperatures.len(), 10);
    assert_eq!(meta.methods.len(), 1);

    fs::write(&config, r#"{"alpah": 0.1}"#).unwrap();
    assert_eq!(tscp(&["sweep", "--config", s(&config)]).status.code(), Some(2));
}

#[test]
fn invalid_arguments_exit_2_without_output() {
    let f = Fixture::new(500);
    let out = f.out("bad");
    for args in [
        vec!["sweep", "--input", f.input(), "--alpha", "1.5", "--out-dir", s(&out)],
        vec!["sweep", "--input", f.input(), "--t-min", "0.1", "--out-dir", s(&out)],
        vec!["sweep", "--input", f.input(), "--method", "foo", "--out-dir", s(&out)],
        vec!["fit", "--input", f.input(), "--temperature", "-1", "--out-dir", s(&out)],
        vec!["eval", "--input", f.input(), "--out-dir", s(&out)],
    ] {
        let o = tscp(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!stderr(&o).is_empty());
    }
    assert!(!out.exists());
}

#[test]
fn synth_writes_a_loadable_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data/s.csv");
    ok(&["synth", "--classes", "5", "--samples", "40", "--output", s(&path)]);
    let table = tscp::data::load_logits(&path, tscp::data::Format::Csv).unwrap();
    assert_eq!((table.num_samples(), table.num_classes()), (40, 5));
}

#[test]
fn mondrian_top_cov_gap_varies_more_than_pooled() {
    let f = Fixture::new(4000);
    let out = f.out("mc");
    ok(&[
        "mondrian-compare", "--input", f.input(), "--trials", "30", "--per-class", "5", "--randomized", "--out-dir",
        s(&out),
    ]);
    let comparison: MondrianComparison = read_json(&out.join("mondrian.json"));
    let mondrian = comparison.stats("mondrian", "top_cov_gap").std;
    let pooled = comparison.stats("ts-t-hat", "top_cov_gap").std;
    assert!(mondrian > pooled, "mondrian std {mondrian} vs pooled {pooled}");
}
