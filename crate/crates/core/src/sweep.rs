//! Temperature sweeps, the two-branch guideline (calibrated confidence at
//! `T*`, prediction sets at a separately chosen `T̂`), per-sample set-size
//! comparisons and the Mondrian comparison.
//!
//! Trial `i` of a sweep draws its split from `split.seed + i` and its
//! per-sample uniforms from `base_seed + i`. The softmax masses of every
//! needed row are computed once per temperature and shared by all trials and
//! methods at that temperature.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{optimize_temperature, round_grid, CalibrationResult, EceConfig, Objective, SearchConfig};
use crate::conformal::{
    conformal_quantile, cp_uniforms, eval_uniforms, fit_mondrian, fit_threshold, CPModel, Outcome,
    PredictionSet, RankedLogits, ScoreMethod, SetPredictor, Tempered, Thresholds,
};
use crate::data::{LogitsTable, SplitPlan};
use crate::error::{argument, Error, Result};
use crate::metrics::{aggregate, evaluate, median, MetricsReport};
use crate::optim::{argmax_first, argmin_first};
use crate::softmax::{softmax_at, Temperature};

/// Lowest temperature a sweep accepts without an explicit override; very
/// small temperatures make the scaled softmax numerically degenerate.
pub const TEMPERATURE_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub t_min: f64,
    pub t_max: f64,
    pub step: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            t_min: 0.5,
            t_max: 5.0,
            step: 0.1,
        }
    }
}

impl Grid {
    pub fn new(t_min: f64, t_max: f64, step: f64, allow_below_floor: bool) -> Result<Self> {
        if !(t_min > 0.0 && t_max >= t_min && t_max.is_finite() && step > 0.0) {
            return Err(argument(format!(
                "grid needs 0 < t_min <= t_max and step > 0, got [{t_min}, {t_max}] step {step}"
            )));
        }
        if t_min < TEMPERATURE_FLOOR && !allow_below_floor {
            return Err(argument(format!(
                "t_min {t_min} is below the temperature floor {TEMPERATURE_FLOOR}; pass an explicit override"
            )));
        }
        Ok(Self { t_min, t_max, step })
    }

    /// `t_min + i·step` for every `i` with the point not beyond `t_max`,
    /// rounded to 10 decimals.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.t_max - self.t_min) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| round_grid(self.t_min + i as f64 * self.step)).collect()
    }
}

/// How trials redraw the data split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Fresh calibration / CP / evaluation partition per trial.
    #[default]
    Joint,
    /// Calibration rows fixed; CP and evaluation rows redrawn per trial.
    CpOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<ScoreMethod>,
    pub alpha: f64,
    pub grid: Grid,
    pub num_trials: usize,
    pub base_seed: u64,
    pub resampling: Resampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: ScoreMethod,
    /// Median over trials of `q̂` at each temperature.
    pub q_hat: Vec<f64>,
    pub metrics: Vec<MetricsReport>,
    /// Grid argmax of AvgSize (adaptive methods only).
    pub t_c_empirical: Option<Temperature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub temperatures: Vec<f64>,
    pub alpha: f64,
    pub grid: Grid,
    pub num_trials: usize,
    pub base_seed: u64,
    pub split_seed: u64,
    pub resampling: Resampling,
    /// ECE-optimal temperature on the calibration rows, when computed.
    pub t_star: Option<Temperature>,
    pub curves: Vec<MethodCurve>,
}

impl SweepCurve {
    pub fn curve(&self, method: &ScoreMethod) -> Option<&MethodCurve> {
        self.curves.iter().find(|c| &c.method == method)
    }

    /// CSV with header `T,method,q_hat,avg_size,mar_cov_gap,top_cov_gap,avg_cov_gap`,
    /// one block of grid rows per method.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "T,method,q_hat,avg_size,mar_cov_gap,top_cov_gap,avg_cov_gap")?;
        for c in &self.curves {
            let label = c.method.label();
            for (j, t) in self.temperatures.iter().enumerate() {
                let m = &c.metrics[j];
                writeln!(
                    out,
                    "{t},{label},{},{},{},{},{}",
                    c.q_hat[j], m.avg_size, m.mar_cov_gap, m.top_cov_gap, m.avg_cov_gap
                )?;
            }
        }
        Ok(())
    }

    pub fn metadata(&self) -> SweepMetadata {
        SweepMetadata {
            grid: self.grid,
            temperatures: self.temperatures.clone(),
            alpha: self.alpha,
            num_trials: self.num_trials,
            base_seed: self.base_seed,
            split_seed: self.split_seed,
            resampling: self.resampling,
            t_star: self.t_star,
            methods: self.curves.iter().map(|c| c.method).collect(),
            t_c_empirical: self
                .curves
                .iter()
                .filter_map(|c| c.t_c_empirical.map(|t| (c.method.label(), t)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub grid: Grid,
    pub temperatures: Vec<f64>,
    pub alpha: f64,
    pub num_trials: usize,
    pub base_seed: u64,
    pub split_seed: u64,
    pub resampling: Resampling,
    pub t_star: Option<Temperature>,
    pub methods: Vec<ScoreMethod>,
    /// Method label and its AvgSize peak temperature.
    pub t_c_empirical: Vec<(String, Temperature)>,
}

struct TrialPlan {
    cp: Vec<usize>,
    eval: Vec<usize>,
    cp_u: Vec<f64>,
    eval_u: Vec<f64>,
}

impl TrialPlan {
    fn new(cp: Vec<usize>, eval: Vec<usize>, seed: u64) -> Self {
        let cp_u = cp_uniforms(seed, cp.len());
        let eval_u = eval_uniforms(seed, eval.len());
        Self { cp, eval, cp_u, eval_u }
    }
}

/// Outcome of one sample; pooled thresholds stop at the first excluded
/// rank because scores never decrease along the ranking.
fn outcome_at(view: &Tempered<'_>, pos: usize, ranked: &RankedLogits, method: &ScoreMethod, th: &Thresholds, u: f64) -> Outcome {
    match th {
        Thresholds::Pooled(q) => {
            let row = view.row(pos);
            let label_rank = ranked.label_rank(row);
            let mut size = 0;
            while size < ranked.num_classes() && view.score_at_rank(pos, size, method, u) <= *q {
                size += 1;
            }
            Outcome {
                size,
                covered: label_rank < size,
                label: ranked.label(row),
            }
        }
        Thresholds::PerClass(_) => view.outcome(pos, method, th, u),
    }
}

/// Indexed `[temperature][method][trial]`: `(q̂, report)`.
type TrialGrid = Vec<Vec<Vec<(f64, MetricsReport)>>>;

fn sweep_core(
    ranked: &RankedLogits,
    trials: &[TrialPlan],
    methods: &[ScoreMethod],
    alpha: f64,
    temperatures: &[f64],
) -> Result<TrialGrid> {
    let n = ranked.num_samples();
    let mut needed = vec![false; n];
    for tr in trials {
        for &i in tr.cp.iter().chain(&tr.eval) {
            needed[i] = true;
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| needed[i]).collect();
    let mut pos_of = vec![usize::MAX; n];
    for (p, &i) in rows.iter().enumerate() {
        pos_of[i] = p;
    }
    temperatures
        .par_iter()
        .map(|&t| {
            let view = ranked.tempered(&rows, t);
            methods
                .iter()
                .map(|method| {
                    trials
                        .iter()
                        .map(|tr| {
                            let scores: Vec<f64> = tr
                                .cp
                                .iter()
                                .zip(&tr.cp_u)
                                .map(|(&i, &u)| view.label_score(pos_of[i], method, u))
                                .collect();
                            let q = conformal_quantile(&scores, alpha)?.q_hat;
                            let th = Thresholds::Pooled(q);
                            let outcomes: Vec<Outcome> = tr
                                .eval
                                .iter()
                                .zip(&tr.eval_u)
                                .map(|(&i, &u)| outcome_at(&view, pos_of[i], ranked, method, &th, u))
                                .collect();
                            Ok((q, MetricsReport::from_outcomes(&outcomes, ranked.num_classes(), alpha)?))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn assemble(
    per_t: TrialGrid,
    methods: &[ScoreMethod],
    temperatures: &[f64],
) -> Vec<MethodCurve> {
    methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let q_hat: Vec<f64> = per_t
                .iter()
                .map(|m| median(&m[k].iter().map(|(q, _)| *q).collect::<Vec<_>>()))
                .collect();
            let metrics: Vec<MetricsReport> = per_t
                .iter()
                .map(|m| aggregate(&m[k].iter().map(|(_, r)| r.clone()).collect::<Vec<_>>()))
                .collect();
            let t_c_empirical = method.is_adaptive().then(|| {
                let sizes: Vec<f64> = metrics.iter().map(|r| r.avg_size).collect();
                Temperature::new(temperatures[argmax_first(&sizes).expect("non-empty grid")]).expect("positive grid")
            });
            MethodCurve {
                method,
                q_hat,
                metrics,
                t_c_empirical,
            }
        })
        .collect()
}

fn check_sweep_inputs(table: &LogitsTable, split: &SplitPlan, methods: &[ScoreMethod], alpha: f64) -> Result<()> {
    crate::conformal::check_alpha(alpha)?;
    if methods.is_empty() {
        return Err(argument("no score methods requested"));
    }
    if split.num_samples() != table.num_samples() {
        return Err(argument(format!(
            "split covers {} rows but the table has {}",
            split.num_samples(),
            table.num_samples()
        )));
    }
    Ok(())
}

fn ece_t_star(table: &LogitsTable, rows: &[usize]) -> Result<Temperature> {
    let calib = table.subset(rows)?;
    Ok(optimize_temperature(&calib, Objective::Ece, EceConfig::default(), SearchConfig::default())?.t_star)
}

/// Full sweep with default (joint) resampling.
pub fn run_sweep(
    table: &LogitsTable,
    split: &SplitPlan,
    methods: &[ScoreMethod],
    alpha: f64,
    grid: &Grid,
    num_trials: usize,
    base_seed: u64,
) -> Result<SweepCurve> {
    run_sweep_with(
        table,
        split,
        &SweepConfig {
            methods: methods.to_vec(),
            alpha,
            grid: *grid,
            num_trials,
            base_seed,
            resampling: Resampling::Joint,
        },
    )
}

/// For each temperature and method: fit on the CP rows, evaluate on the
/// evaluation rows, and take the per-metric median across trials.
pub fn run_sweep_with(table: &LogitsTable, split: &SplitPlan, config: &SweepConfig) -> Result<SweepCurve> {
    check_sweep_inputs(table, split, &config.methods, config.alpha)?;
    if config.num_trials == 0 {
        return Err(argument("need at least one trial"));
    }
    let temperatures = config.grid.points();
    let trials: Vec<TrialPlan> = (0..config.num_trials as u64)
        .map(|i| {
            let split_seed = split.seed.wrapping_add(i);
            let s = match config.resampling {
                Resampling::Joint => SplitPlan::new(table.num_samples(), split.calib_fraction, split.cp_fraction, split_seed)?,
                Resampling::CpOnly if i == 0 => split.clone(),
                Resampling::CpOnly => split.redraw_cp(split_seed),
            };
            Ok(TrialPlan::new(s.cp_indices, s.eval_indices, config.base_seed.wrapping_add(i)))
        })
        .collect::<Result<_>>()?;
    let ranked = RankedLogits::new(table);
    let per_t = sweep_core(&ranked, &trials, &config.methods, config.alpha, &temperatures)?;
    Ok(SweepCurve {
        curves: assemble(per_t, &config.methods, &temperatures),
        temperatures,
        alpha: config.alpha,
        grid: config.grid,
        num_trials: config.num_trials,
        base_seed: config.base_seed,
        split_seed: split.seed,
        resampling: config.resampling,
        t_star: Some(ece_t_star(table, &split.calib_indices)?),
    })
}

/// Single-trial sweep that fits on the CP rows and evaluates on the
/// calibration rows, so that no evaluation data is touched.
pub fn approximate_curves(
    table: &LogitsTable,
    split: &SplitPlan,
    methods: &[ScoreMethod],
    alpha: f64,
    grid: &Grid,
    seed: u64,
) -> Result<SweepCurve> {
    let mut curve = approximate_without_t_star(table, split, methods, alpha, grid, seed)?;
    curve.t_star = Some(ece_t_star(table, &split.calib_indices)?);
    Ok(curve)
}

fn approximate_without_t_star(
    table: &LogitsTable,
    split: &SplitPlan,
    methods: &[ScoreMethod],
    alpha: f64,
    grid: &Grid,
    seed: u64,
) -> Result<SweepCurve> {
    check_sweep_inputs(table, split, methods, alpha)?;
    if split.calib_indices.is_empty() {
        return Err(argument("calibration split is empty"));
    }
    let temperatures = grid.points();
    let trials = [TrialPlan::new(split.cp_indices.clone(), split.calib_indices.clone(), seed)];
    let ranked = RankedLogits::new(table);
    let per_t = sweep_core(&ranked, &trials, methods, alpha, &temperatures)?;
    Ok(SweepCurve {
        curves: assemble(per_t, methods, &temperatures),
        temperatures,
        alpha,
        grid: *grid,
        num_trials: 1,
        base_seed: seed,
        split_seed: split.seed,
        resampling: Resampling::Joint,
        t_star: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum SelectionRule {
    MinTopCovGap,
    MinAvgSize,
    UserFixed { t_hat: Temperature },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelinePlan {
    /// Temperature of the confidence branch.
    pub t_star: Temperature,
    /// Temperature of the prediction-set branch.
    pub t_hat: Temperature,
    pub method: ScoreMethod,
    pub selection_rule: SelectionRule,
    pub approximated_curve: SweepCurve,
}

/// Picks `T̂` on the curve of `method`: grid argmin of TopCovGap or AvgSize
/// (ties to the smallest temperature), or the user's value. `t_star` comes
/// from the curve when it carries one, else `T = 1`.
pub fn select_t_hat(curve: &SweepCurve, method: &ScoreMethod, rule: SelectionRule) -> Result<GuidelinePlan> {
    if curve.temperatures.is_empty() {
        return Err(argument("curve is empty"));
    }
    let mc = curve
        .curve(method)
        .ok_or_else(|| argument(format!("curve has no method {}", method.label())))?;
    let pick = |f: fn(&MetricsReport) -> f64| {
        let v: Vec<f64> = mc.metrics.iter().map(f).collect();
        Temperature::new(curve.temperatures[argmin_first(&v).expect("non-empty")])
    };
    let t_hat = match rule {
        SelectionRule::MinTopCovGap => pick(|m| m.top_cov_gap)?,
        SelectionRule::MinAvgSize => pick(|m| m.avg_size)?,
        SelectionRule::UserFixed { t_hat } => t_hat,
    };
    Ok(GuidelinePlan {
        t_star: curve.t_star.unwrap_or(Temperature::ONE),
        t_hat,
        method: *method,
        selection_rule: rule,
        approximated_curve: curve.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroscopicDiff {
    /// `|C_b(x)| − |C_a(x)|` per evaluation row, sorted descending.
    pub differences: Vec<i64>,
    pub increased: usize,
    pub unchanged: usize,
    pub decreased: usize,
    pub avg_size_a: f64,
    pub avg_size_b: f64,
}

/// Per-sample change in set size between temperatures `t_a` and `t_b`, each
/// with its own threshold fitted on the CP rows.
pub fn microscopic_diff(
    table: &LogitsTable,
    split: &SplitPlan,
    method: ScoreMethod,
    alpha: f64,
    t_a: Temperature,
    t_b: Temperature,
    seed: u64,
) -> Result<MicroscopicDiff> {
    if !method.is_adaptive() {
        return Err(argument("per-sample size analysis applies to APS and RAPS only"));
    }
    let eval = &split.eval_indices;
    if eval.is_empty() {
        return Err(argument("evaluation split is empty"));
    }
    let ranked = RankedLogits::new(table);
    let us = eval_uniforms(seed, eval.len());
    let sizes = |t: Temperature| -> Result<Vec<usize>> {
        let model = fit_threshold(table, &split.cp_indices, method, alpha, t, seed)?;
        let view = ranked.tempered(eval, t.value());
        let th = model.thresholds();
        Ok((0..eval.len()).map(|p| outcome_at(&view, p, &ranked, &method, &th, us[p]).size).collect())
    };
    let a = sizes(t_a)?;
    let b = sizes(t_b)?;
    let mut differences: Vec<i64> = a.iter().zip(&b).map(|(&x, &y)| y as i64 - x as i64).collect();
    differences.sort_unstable_by(|x, y| y.cmp(x));
    let n = eval.len() as f64;
    Ok(MicroscopicDiff {
        increased: differences.iter().filter(|&&d| d > 0).count(),
        unchanged: differences.iter().filter(|&&d| d == 0).count(),
        decreased: differences.iter().filter(|&&d| d < 0).count(),
        avg_size_a: a.iter().sum::<usize>() as f64 / n,
        avg_size_b: b.iter().sum::<usize>() as f64 / n,
        differences,
    })
}

/// Confidence from the calibrated branch (max softmax entry at `T*`) and the
/// prediction set from the CP branch at `T̂`.
pub fn two_branch_predict(
    plan: &GuidelinePlan,
    model_conf: &CalibrationResult,
    model_cp: &CPModel,
    logits: &[f64],
    u: f64,
) -> Result<(f64, PredictionSet)> {
    if model_conf.t_star != plan.t_star {
        return Err(Error::Consistency(format!(
            "calibration model has T* = {} but the plan expects {}",
            model_conf.t_star, plan.t_star
        )));
    }
    if model_cp.temperature != plan.t_hat {
        return Err(Error::Consistency(format!(
            "CP model was fitted at T = {} but the plan's T̂ is {}",
            model_cp.temperature, plan.t_hat
        )));
    }
    let confidence = softmax_at(logits, plan.t_star)?.max();
    Ok((confidence, model_cp.predict(logits, u)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MondrianCompareConfig {
    pub method: ScoreMethod,
    pub alpha: f64,
    pub calib_fraction: f64,
    /// CP rows drawn per class.
    pub per_class: usize,
    pub grid: Grid,
    pub num_trials: usize,
    pub base_seed: u64,
}

impl Default for MondrianCompareConfig {
    fn default() -> Self {
        Self {
            method: ScoreMethod::raps(true),
            alpha: 0.1,
            calib_fraction: 0.1,
            per_class: 10,
            grid: Grid::default(),
            num_trials: 100,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MondrianTrial {
    pub seed: u64,
    pub t_hat: Temperature,
    pub mondrian: MetricsReport,
    pub ts_t_hat: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    /// Sample standard deviation across trials (0 for one trial).
    pub std: f64,
    pub median: f64,
}

impl SummaryStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            median: median(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MondrianComparison {
    pub config: MondrianCompareConfig,
    pub trials: Vec<MondrianTrial>,
}

pub const COMPARED_METRICS: [&str; 3] = ["avg_size", "mar_cov_gap", "top_cov_gap"];

impl MondrianComparison {
    fn values(&self, approach: &str, metric: &str) -> Vec<f64> {
        self.trials
            .iter()
            .map(|t| {
                let r = if approach == "mondrian" { &t.mondrian } else { &t.ts_t_hat };
                match metric {
                    "avg_size" => r.avg_size,
                    "mar_cov_gap" => r.mar_cov_gap,
                    _ => r.top_cov_gap,
                }
            })
            .collect()
    }

    pub fn stats(&self, approach: &str, metric: &str) -> SummaryStats {
        SummaryStats::of(&self.values(approach, metric))
    }

    /// Rows `approach,metric,mean,std,median` for both approaches.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "approach,metric,mean,std,median")?;
        for approach in ["mondrian", "ts-t-hat"] {
            for metric in COMPARED_METRICS {
                let s = self.stats(approach, metric);
                writeln!(out, "{approach},{metric},{},{},{}", s.mean, s.std, s.median)?;
            }
        }
        Ok(())
    }
}

/// Per trial: a stratified split with `per_class` CP rows per class; `T̂`
/// minimizes the calibration-set TopCovGap; the pooled method at `T̂` and
/// the classwise method at `T = 1` are both evaluated on the remaining rows.
pub fn mondrian_compare(table: &LogitsTable, config: &MondrianCompareConfig) -> Result<MondrianComparison> {
    crate::conformal::check_alpha(config.alpha)?;
    if config.num_trials == 0 {
        return Err(argument("need at least one trial"));
    }
    let trials = (0..config.num_trials as u64)
        .into_par_iter()
        .map(|i| {
            let seed = config.base_seed.wrapping_add(i);
            let run = || -> Result<MondrianTrial> {
                let split = SplitPlan::stratified_cp(table, config.calib_fraction, config.per_class, seed)?;
                let curve = approximate_without_t_star(table, &split, &[config.method], config.alpha, &config.grid, seed)?;
                let t_hat = select_t_hat(&curve, &config.method, SelectionRule::MinTopCovGap)?.t_hat;
                let pooled = fit_threshold(table, &split.cp_indices, config.method, config.alpha, t_hat, seed)?;
                let classwise = fit_mondrian(table, &split.cp_indices, config.method, config.alpha, Temperature::ONE, seed)?;
                Ok(MondrianTrial {
                    seed,
                    t_hat,
                    mondrian: evaluate(&classwise, table, &split.eval_indices, seed)?,
                    ts_t_hat: evaluate(&pooled, table, &split.eval_indices, seed)?,
                })
            };
            run().map_err(|e| Error::Trial {
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MondrianComparison {
        config: config.clone(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticConfig};

    fn small() -> LogitsTable {
        generate(&SyntheticConfig { num_classes: 20, num_samples: 4000, ..SyntheticConfig::default() }, 31).unwrap()
    }

    #[test]
    fn grid_points_and_floor() {
        assert_eq!(Grid::default().points().len(), 46);
        assert_eq!(Grid::default().points()[13], 1.8);
        assert!(matches!(Grid::new(0.2, 5.0, 0.1, false), Err(Error::Argument(_))));
        assert!(Grid::new(0.2, 5.0, 0.1, true).is_ok());
        assert!(Grid::new(1.0, 0.5, 0.1, false).is_err());
    }

    #[test]
    fn sweep_matches_direct_fit_and_evaluate() {
        let table = small();
        let split = SplitPlan::new(4000, 0.1, 0.3, 5).unwrap();
        let grid = Grid::new(0.5, 2.0, 0.5, false).unwrap();
        let methods = [ScoreMethod::lac(), ScoreMethod::raps(true)];
        let curve = run_sweep(&table, &split, &methods, 0.1, &grid, 1, 9).unwrap();
        for (k, method) in methods.iter().enumerate() {
            for (j, &t) in curve.temperatures.iter().enumerate() {
                let model = fit_threshold(&table, &split.cp_indices, *method, 0.1, Temperature::new(t).unwrap(), 9).unwrap();
                assert_eq!(curve.curves[k].q_hat[j], model.q_hat);
                let report = evaluate(&model, &table, &split.eval_indices, 9).unwrap();
                assert_eq!(curve.curves[k].metrics[j], report);
            }
        }
        assert!(curve.curves[0].t_c_empirical.is_none());
        assert!(curve.curves[1].t_c_empirical.is_some());
    }

    #[test]
    fn sweep_q_hat_monotone_and_deterministic() {
        let table = small();
        let split = SplitPlan::new(4000, 0.1, 0.2, 1).unwrap();
        let methods = [ScoreMethod::aps(false), ScoreMethod::aps(true), ScoreMethod::raps(false)];
        let a = run_sweep(&table, &split, &methods, 0.1, &Grid::default(), 3, 4).unwrap();
        for c in &a.curves {
            assert!(c.q_hat.windows(2).all(|w| w[1] <= w[0]), "{}", c.method.label());
        }
        let b = run_sweep(&table, &split, &methods, 0.1, &Grid::default(), 3, 4).unwrap();
        assert_eq!(a, b);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 3 * 46);
    }

    #[test]
    fn cp_only_resampling_keeps_calibration_rows() {
        let table = small();
        let split = SplitPlan::new(4000, 0.1, 0.2, 1).unwrap();
        let config = SweepConfig {
            methods: vec![ScoreMethod::aps(false)],
            alpha: 0.1,
            grid: Grid::new(1.0, 2.0, 0.5, false).unwrap(),
            num_trials: 2,
            base_seed: 0,
            resampling: Resampling::CpOnly,
        };
        let curve = run_sweep_with(&table, &split, &config).unwrap();
        assert_eq!(curve.resampling, Resampling::CpOnly);
        assert_eq!(curve.curves[0].metrics[0].num_trials, 2);
    }

    #[test]
    fn approximate_curve_shape_and_determinism() {
        let table = small();
        let split = SplitPlan::new(4000, 0.1, 0.2, 1).unwrap();
        let methods = [ScoreMethod::aps(true), ScoreMethod::lac()];
        let a = approximate_curves(&table, &split, &methods, 0.1, &Grid::default(), 2).unwrap();
        assert_eq!(a, approximate_curves(&table, &split, &methods, 0.1, &Grid::default(), 2).unwrap());
        assert_eq!(a.curves.len(), 2);
        assert!(a.curves.iter().all(|c| c.metrics.len() == 46));
        assert_eq!(a.curves[0].metrics[0].n_eval, split.calib_indices.len());
        assert!(a.t_star.is_some());
    }

    fn curve_with(top: &[f64], sizes: &[f64], temps: &[f64]) -> SweepCurve {
        let report = |top_cov_gap: f64, avg_size: f64| MetricsReport {
            avg_size,
            mar_cov_gap: 0.0,
            top_cov_gap,
            avg_cov_gap: 0.0,
            alpha: 0.1,
            n_eval: 1,
            per_class_coverage: vec![],
            missing_classes: 0,
            num_trials: 1,
        };
        SweepCurve {
            temperatures: temps.to_vec(),
            alpha: 0.1,
            grid: Grid::default(),
            num_trials: 1,
            base_seed: 0,
            split_seed: 0,
            resampling: Resampling::Joint,
            t_star: None,
            curves: vec![MethodCurve {
                method: ScoreMethod::aps(false),
                q_hat: vec![0.9; temps.len()],
                metrics: top.iter().zip(sizes).map(|(&t, &s)| report(t, s)).collect(),
                t_c_empirical: None,
            }],
        }
    }

    #[test]
    fn select_t_hat_rules() {
        let aps = ScoreMethod::aps(false);
        let c = curve_with(&[0.3, 0.1, 0.2], &[5.0, 4.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(select_t_hat(&c, &aps, SelectionRule::MinTopCovGap).unwrap().t_hat.value(), 2.0);
        assert_eq!(select_t_hat(&c, &aps, SelectionRule::MinAvgSize).unwrap().t_hat.value(), 3.0);
        let fixed = Temperature::new(1.3).unwrap();
        assert_eq!(select_t_hat(&c, &aps, SelectionRule::UserFixed { t_hat: fixed }).unwrap().t_hat, fixed);
        let tie = curve_with(&[0.1, 0.1], &[1.0, 1.0], &[1.0, 2.0]);
        assert_eq!(select_t_hat(&tie, &aps, SelectionRule::MinTopCovGap).unwrap().t_hat.value(), 1.0);
        assert!(select_t_hat(&curve_with(&[], &[], &[]), &aps, SelectionRule::MinAvgSize).is_err());
        assert!(select_t_hat(&c, &ScoreMethod::lac(), SelectionRule::MinAvgSize).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let table = small();
        let split = SplitPlan::new(4000, 0.1, 0.2, 1).unwrap();
        let curve = approximate_curves(&table, &split, &[ScoreMethod::raps(true)], 0.1, &Grid::default(), 0).unwrap();
        let plan = select_t_hat(&curve, &ScoreMethod::raps(true), SelectionRule::MinTopCovGap).unwrap();
        let text = serde_json::to_string(&plan).unwrap();
        let back: GuidelinePlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn microscopic_diff_properties() {
        let table = small();
        let split = SplitPlan::new(4000, 0.1, 0.3, 2).unwrap();
        let method = ScoreMethod::aps(true);
        let same = microscopic_diff(&table, &split, method, 0.1, Temperature::ONE, Temperature::ONE, 1).unwrap();
        assert!(same.differences.iter().all(|&d| d == 0));
        let t_b = Temperature::new(2.0).unwrap();
        let d = microscopic_diff(&table, &split, method, 0.1, Temperature::ONE, t_b, 1).unwrap();
        assert_eq!(d.increased + d.unchanged + d.decreased, split.eval_indices.len());
        let mean = d.differences.iter().sum::<i64>() as f64 / d.differences.len() as f64;
        assert!((mean - (d.avg_size_b - d.avg_size_a)).abs() < 1e-9);
        assert!(d.differences.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.increased > d.decreased);
        assert!(microscopic_diff(&table, &split, ScoreMethod::lac(), 0.1, Temperature::ONE, t_b, 1).is_err());
    }

    #[test]
    fn two_branch_checks_temperatures() {
        let table = small();
        let split = SplitPlan::new(4000, 0.1, 0.2, 1).unwrap();
        let method = ScoreMethod::aps(false);
        let curve = curve_with(&[0.2, 0.1], &[1.0, 1.0], &[1.0, 1.5]);
        let plan = select_t_hat(&curve, &method, SelectionRule::MinTopCovGap).unwrap();
        let conf = CalibrationResult {
            t_star: Temperature::ONE,
            objective: Objective::Ece,
            objective_value_before: 0.0,
            objective_value_after: 0.0,
            search_trace: vec![],
        };
        let at_hat = fit_threshold(&table, &split.cp_indices, method, 0.1, plan.t_hat, 0).unwrap();
        let at_one = fit_threshold(&table, &split.cp_indices, method, 0.1, Temperature::ONE, 0).unwrap();
        let z = table.row(0);
        let (confidence, set) = two_branch_predict(&plan, &conf, &at_hat, z, 0.5).unwrap();
        assert_eq!(confidence, softmax_at(z, Temperature::ONE).unwrap().max());
        assert_eq!(set, at_hat.predict(z, 0.5).unwrap());
        assert!(matches!(two_branch_predict(&plan, &conf, &at_one, z, 0.5), Err(Error::Consistency(_))));
        let other = CalibrationResult { t_star: Temperature::new(2.0).unwrap(), ..conf };
        assert!(matches!(two_branch_predict(&plan, &other, &at_hat, z, 0.5), Err(Error::Consistency(_))));
    }

    #[test]
    fn mondrian_compare_shape_and_determinism() {
        let table = small();
        let config = MondrianCompareConfig {
            per_class: 5,
            num_trials: 3,
            grid: Grid::new(0.5, 3.0, 0.5, false).unwrap(),
            ..MondrianCompareConfig::default()
        };
        let a = mondrian_compare(&table, &config).unwrap();
        assert_eq!(a, mondrian_compare(&table, &config).unwrap());
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().any(|l| l.starts_with("mondrian,top_cov_gap,")));
        assert!(text.lines().any(|l| l.starts_with("ts-t-hat,avg_size,")));
    }

    #[test]
    fn summary_stats() {
        let s = SummaryStats::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
