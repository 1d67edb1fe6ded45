//! One function per subcommand. Each resolves and validates its whole
//! configuration, computes, and only then writes its outputs.

use std::fs;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tscp::calibrate::{self, CalibrationResult, EceConfig, Objective, SearchConfig};
use tscp::conformal::{self, CPModel, MondrianModel, ScoreKind, SetPredictor};
use tscp::metrics::{self, MetricsReport};
use tscp::softmax::Temperature;
use tscp::sweep::{self, MondrianCompareConfig, SelectionRule, SweepConfig};
use tscp::synthetic::{self, SyntheticConfig};
use tscp::theory::{self, TheoryReport};

use crate::config::{RowsArg, RuleArg, RunConfig};
use crate::output::Outputs;

pub enum Status {
    Ok,
    Violations,
}

pub fn calibrate(cfg: &RunConfig) -> Result<Status> {
    let objective = cfg.objective.unwrap_or(Objective::Ece);
    let bins = EceConfig::new(cfg.bins.unwrap_or(EceConfig::default().num_bins))?;
    let d = SearchConfig::default();
    let search = SearchConfig {
        t_min: cfg.t_min.unwrap_or(d.t_min),
        t_max: cfg.t_max.unwrap_or(d.t_max),
        grid_step: cfg.t_step.unwrap_or(d.grid_step),
    };
    let table = cfg.load_table()?;

    let result = calibrate::optimize_temperature(&table, objective, bins, search)?;
    let diagram = calibrate::reliability_diagram(&table, result.t_star, bins);
    let mut csv = Vec::new();
    calibrate::write_reliability_csv(&diagram, &mut csv)?;

    let dir = cfg.out_dir();
    let mut out = Outputs::new();
    out.add_json(dir.join("calibration.json"), &result)?;
    out.add(dir.join("reliability.csv"), csv);
    out.commit()?;
    println!(
        "T* = {:.4} ({}: {:.6} at T = 1, {:.6} at T*)",
        result.t_star.value(),
        objective_name(objective),
        result.objective_value_before,
        result.objective_value_after
    );
    Ok(Status::Ok)
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Ece => "ece",
        Objective::Nll => "nll",
    }
}

/// Model files hold either a pooled or a classwise predictor.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ModelFile {
    Mondrian(MondrianModel),
    Pooled(CPModel),
}

impl ModelFile {
    fn predictor(&self) -> &dyn SetPredictor {
        match self {
            ModelFile::Mondrian(m) => m,
            ModelFile::Pooled(m) => m,
        }
    }
}

pub fn fit(cfg: &RunConfig) -> Result<Status> {
    let method = cfg.single_method(ScoreKind::Aps)?;
    let alpha = cfg.alpha()?;
    let temperature = match (cfg.temperature, &cfg.calibration) {
        (Some(_), Some(_)) => bail!("pass either --temperature or --calibration, not both"),
        (Some(t), None) => Temperature::new(t)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let result: CalibrationResult =
                serde_json::from_str(&text).with_context(|| format!("invalid calibration file {}", path.display()))?;
            result.t_star
        }
        (None, None) => Temperature::ONE,
    };
    let table = cfg.load_table()?;
    let split = cfg.split(&table)?;

    let seed = cfg.seed();
    let model = if cfg.mondrian.unwrap_or(false) {
        ModelFile::Mondrian(conformal::fit_mondrian(&table, &split.cp_indices, method, alpha, temperature, seed)?)
    } else {
        ModelFile::Pooled(conformal::fit_threshold(&table, &split.cp_indices, method, alpha, temperature, seed)?)
    };

    let mut out = Outputs::new();
    out.add_json(cfg.out_dir().join("model.json"), &model)?;
    out.commit()?;
    match &model {
        ModelFile::Pooled(m) => {
            println!("{} at T = {}: q_hat = {} from {} CP rows", method.label(), temperature.value(), m.q_hat, m.n_cal);
            if m.clamp_warning {
                eprintln!("warning: too few CP rows for alpha = {alpha}; q_hat is the largest score");
            }
        }
        ModelFile::Mondrian(m) => {
            let fallback = m.fallback.iter().filter(|&&f| f).count();
            println!(
                "{} at T = {}: {} class thresholds, {fallback} classes fall back to the pooled q_hat = {}",
                method.label(),
                temperature.value(),
                m.per_class.len(),
                m.pooled.q_hat
            );
        }
    }
    Ok(Status::Ok)
}

pub fn eval(cfg: &RunConfig) -> Result<Status> {
    let path = cfg.model.as_deref().context("missing --model")?;
    let text = fs::read_to_string(path).with_context(|| format!("cannot read model {}", path.display()))?;
    let model: ModelFile = serde_json::from_str(&text).with_context(|| format!("invalid model file {}", path.display()))?;
    match &model {
        ModelFile::Pooled(m) => m.validate()?,
        ModelFile::Mondrian(m) => {
            m.pooled.validate()?;
            for c in &m.per_class {
                c.validate()?;
            }
        }
    }
    let table = cfg.load_table()?;
    if let ModelFile::Mondrian(m) = &model {
        ensure!(
            m.per_class.len() == table.num_classes(),
            "model has {} classes, the input has {}",
            m.per_class.len(),
            table.num_classes()
        );
    }
    let rows: Vec<usize> = match cfg.rows.unwrap_or(RowsArg::Eval) {
        RowsArg::Eval => cfg.split(&table)?.eval_indices,
        RowsArg::All => (0..table.num_samples()).collect(),
    };

    let predictor = model.predictor();
    let report = metrics::evaluate(predictor, &table, &rows, cfg.seed())?;
    let mut csv = Vec::new();
    metrics::write_batch_csv(
        &[(predictor.temperature().value(), predictor.method().label(), report.clone())],
        &mut csv,
    )?;

    let dir = cfg.out_dir();
    let mut out = Outputs::new();
    out.add_json(dir.join("metrics.json"), &report)?;
    out.add(dir.join("metrics.csv"), csv);
    out.commit()?;
    print_metrics(&predictor.method().label(), &report);
    Ok(Status::Ok)
}

fn print_metrics(label: &str, r: &MetricsReport) {
    println!(
        "{label}: avg_size {:.4}, mar_cov_gap {:.4}, top_cov_gap {:.4}, avg_cov_gap {:.4} ({} rows)",
        r.avg_size, r.mar_cov_gap, r.top_cov_gap, r.avg_cov_gap, r.n_eval
    );
}

pub fn sweep(cfg: &RunConfig) -> Result<Status> {
    let config = SweepConfig {
        methods: cfg.methods(&[ScoreKind::Lac, ScoreKind::Aps, ScoreKind::Raps])?,
        alpha: cfg.alpha()?,
        grid: cfg.grid()?,
        num_trials: cfg.trials(100)?,
        base_seed: cfg.seed(),
        resampling: cfg.resampling.map(Into::into).unwrap_or_default(),
    };
    let table = cfg.load_table()?;
    let split = cfg.split(&table)?;

    let curve = sweep::run_sweep_with(&table, &split, &config)?;
    let mut csv = Vec::new();
    curve.write_csv(&mut csv)?;
    let meta = curve.metadata();

    let dir = cfg.out_dir();
    let mut out = Outputs::new();
    out.add(dir.join("sweep.csv"), csv);
    out.add_json(dir.join("sweep.json"), &meta)?;
    out.commit()?;
    println!(
        "{} temperatures x {} methods, {} trials",
        curve.temperatures.len(),
        curve.curves.len(),
        curve.num_trials
    );
    if let Some(t) = curve.t_star {
        println!("T* = {:.4}", t.value());
    }
    for (label, t) in &meta.t_c_empirical {
        println!("{label}: avg_size peaks at T = {}", t.value());
    }
    Ok(Status::Ok)
}

pub fn guideline(cfg: &RunConfig) -> Result<Status> {
    let method = cfg.single_method(ScoreKind::Raps)?;
    let alpha = cfg.alpha()?;
    let grid = cfg.grid()?;
    let rule = match (cfg.rule.unwrap_or(RuleArg::MinTopcovgap), cfg.t_hat) {
        (RuleArg::Fixed, Some(t)) => SelectionRule::UserFixed { t_hat: Temperature::new(t)? },
        (RuleArg::Fixed, None) => bail!("--rule fixed needs --t-hat"),
        (_, Some(_)) => bail!("--t-hat only applies to --rule fixed"),
        (RuleArg::MinTopcovgap, None) => SelectionRule::MinTopCovGap,
        (RuleArg::MinAvgsize, None) => SelectionRule::MinAvgSize,
    };
    let table = cfg.load_table()?;
    let split = cfg.split(&table)?;

    let curve = sweep::approximate_curves(&table, &split, &[method], alpha, &grid, cfg.seed())?;
    let plan = sweep::select_t_hat(&curve, &method, rule)?;

    let mut out = Outputs::new();
    out.add_json(cfg.out_dir().join("plan.json"), &plan)?;
    out.commit()?;
    println!(
        "{}: confidence with T* = {:.4}, prediction sets with T_hat = {}",
        method.label(),
        plan.t_star.value(),
        plan.t_hat.value()
    );
    Ok(Status::Ok)
}

pub fn verify_theory(cfg: &RunConfig, inject_sign_flip: bool) -> Result<Status> {
    let cases = cfg.cases.unwrap_or(10_000);
    ensure!(cases > 0, "--cases must be positive");
    let classes = cfg.classes.unwrap_or(100);
    ensure!(classes >= 2, "--classes must be at least 2");
    let seed = cfg.seed();
    // The data-driven checks only run when an input file is given.
    let data = match cfg.input {
        Some(_) => {
            let methods = cfg.methods(&[ScoreKind::Aps, ScoreKind::Raps])?;
            if let Some(m) = methods.iter().find(|m| !m.is_adaptive()) {
                bail!("threshold monotonicity needs APS or RAPS, got {}", m.label());
            }
            let alpha = cfg.alpha()?;
            let temperatures = cfg.grid()?.points();
            let table = cfg.load_table()?;
            let split = cfg.split(&table)?;
            Some((methods, alpha, temperatures, table, split))
        }
        None => None,
    };

    let gradient = if inject_sign_flip {
        theory::verify_gradient_sign_with(cases, seed, classes, |z, t, m| {
            -theory::grad_gap_z1(z, Temperature::new(t).expect("positive"), m).expect("valid case")
        })?
    } else {
        theory::verify_gradient_sign_theorem(cases, seed, classes)?
    };
    let mut reports: Vec<TheoryReport> = vec![
        theory::verify_score_decrease(cases, seed),
        gradient,
        theory::verify_gradient_finite_difference(cases, seed, 1e-5),
        theory::verify_sufficient_condition(cases, seed),
        theory::verify_decay_bound(cases, seed, classes)?,
        theory::verify_entropy_monotonicity(cases, seed),
    ];
    let mut labels = vec![String::new(); reports.len()];
    let mut similarity = Vec::new();
    if let Some((methods, alpha, temperatures, table, split)) = &data {
        for &m in methods {
            reports.push(theory::verify_threshold_monotonicity(table, &split.cp_indices, m, *alpha, temperatures, seed)?);
            labels.push(format!("[{}] ", m.label()));
            similarity.extend(theory::quantile_similarity_report(table, &split.cp_indices, m, *alpha, temperatures, seed)?);
        }
    }
    let minimizer = theory::bound_minimizer(classes)?;

    let mut jsonl = Vec::new();
    for r in &reports {
        r.write_jsonl(&mut jsonl)?;
    }
    let dir = cfg.out_dir();
    let mut out = Outputs::new();
    out.add(dir.join("theory.jsonl"), jsonl);
    if data.is_some() {
        out.add_json(dir.join("quantile_similarity.json"), &similarity)?;
    }
    out.commit()?;

    for (label, r) in labels.iter().zip(&reports) {
        println!("{label}{}", r.summary_line());
    }
    println!("bound minimizer for C = {classes}: T = {:.4}", minimizer.x);
    let violations: usize = reports.iter().map(TheoryReport::violations).sum();
    println!("violations: {violations}");
    Ok(if violations == 0 { Status::Ok } else { Status::Violations })
}

pub fn mondrian_compare(cfg: &RunConfig) -> Result<Status> {
    let d = MondrianCompareConfig::default();
    let config = MondrianCompareConfig {
        method: cfg.single_method(ScoreKind::Raps)?,
        alpha: cfg.alpha()?,
        calib_fraction: cfg.calib_fraction.unwrap_or(d.calib_fraction),
        per_class: cfg.per_class.unwrap_or(d.per_class),
        grid: cfg.grid()?,
        num_trials: cfg.trials(d.num_trials)?,
        base_seed: cfg.seed(),
    };
    ensure!(config.per_class > 0, "--per-class must be positive");
    let table = cfg.load_table()?;

    let comparison = sweep::mondrian_compare(&table, &config)?;
    let mut csv = Vec::new();
    comparison.write_csv(&mut csv)?;

    let dir = cfg.out_dir();
    let mut out = Outputs::new();
    out.add(dir.join("mondrian.csv"), csv.clone());
    out.add_json(dir.join("mondrian.json"), &comparison)?;
    out.commit()?;
    print!("{}", String::from_utf8(csv)?);
    Ok(Status::Ok)
}

pub fn synth(cfg: &RunConfig) -> Result<Status> {
    let d = SyntheticConfig::default();
    let config = SyntheticConfig {
        num_classes: cfg.classes.unwrap_or(d.num_classes),
        num_samples: cfg.samples.unwrap_or(d.num_samples),
        beta: cfg.beta.unwrap_or(d.beta),
        ..d
    };
    let path = cfg.output.clone().unwrap_or_else(|| cfg.out_dir().join("logits.csv"));
    let table = synthetic::generate(&config, cfg.seed())?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;

    let mut out = Outputs::new();
    out.add(path.clone(), csv);
    out.commit()?;
    println!(
        "{} samples, {} classes written to {}",
        table.num_samples(),
        table.num_classes(),
        path.display()
    );
    Ok(Status::Ok)
}
