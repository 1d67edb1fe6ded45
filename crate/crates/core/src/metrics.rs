//! Set-size and coverage metrics for one evaluation split, and the
//! median-of-means aggregation across seeded trials.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{eval_uniforms, Outcome, RankedLogits, SetPredictor};
use crate::data::LogitsTable;
use crate::error::{argument, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_size: f64,
    pub mar_cov_gap: f64,
    pub top_cov_gap: f64,
    pub avg_cov_gap: f64,
    pub alpha: f64,
    pub n_eval: usize,
    /// Coverage of each class; `None` for classes without evaluation samples.
    pub per_class_coverage: Vec<Option<f64>>,
    pub missing_classes: usize,
    /// Number of trials aggregated into this report (1 for a single evaluation).
    pub num_trials: usize,
}

/// Number of classes averaged by TopCovGap: `⌈0.05·C⌉`.
pub fn top_class_count(num_classes: usize) -> usize {
    num_classes.div_ceil(20)
}

impl MetricsReport {
    /// Builds the report from per-sample outcomes.
    pub fn from_outcomes(outcomes: &[Outcome], num_classes: usize, alpha: f64) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(argument("evaluation split is empty"));
        }
        let n = outcomes.len() as f64;
        let target = 1.0 - alpha;
        let mut counts = vec![0usize; num_classes];
        let mut hits = vec![0usize; num_classes];
        let mut size_total = 0usize;
        let mut covered = 0usize;
        for o in outcomes {
            size_total += o.size;
            counts[o.label] += 1;
            if o.covered {
                covered += 1;
                hits[o.label] += 1;
            }
        }
        let per_class_coverage: Vec<Option<f64>> = counts
            .iter()
            .zip(&hits)
            .map(|(&c, &h)| (c > 0).then(|| h as f64 / c as f64))
            .collect();
        let mut deviations: Vec<f64> = per_class_coverage
            .iter()
            .flatten()
            .map(|cov| (cov - target).abs())
            .collect();
        let present = deviations.len();
        deviations.sort_by(|a, b| b.total_cmp(a));
        let top = top_class_count(num_classes).min(present);
        Ok(Self {
            avg_size: size_total as f64 / n,
            mar_cov_gap: (covered as f64 / n - target).abs(),
            top_cov_gap: deviations[..top].iter().sum::<f64>() / top as f64,
            avg_cov_gap: deviations.iter().sum::<f64>() / present as f64,
            alpha,
            n_eval: outcomes.len(),
            per_class_coverage,
            missing_classes: num_classes - present,
            num_trials: 1,
        })
    }
}

/// Evaluates a fitted predictor on `eval_indices`. Randomized methods draw one
/// uniform per evaluation row from `seed`.
pub fn evaluate<P: SetPredictor + ?Sized>(
    model: &P,
    table: &LogitsTable,
    eval_indices: &[usize],
    seed: u64,
) -> Result<MetricsReport> {
    if eval_indices.is_empty() {
        return Err(argument("evaluation split is empty"));
    }
    if let Some(&i) = eval_indices.iter().find(|&&i| i >= table.num_samples()) {
        return Err(argument(format!("index {i} out of range for {} samples", table.num_samples())));
    }
    let ranked = RankedLogits::new(table);
    let view = ranked.tempered(eval_indices, model.temperature().value());
    let thresholds = model.thresholds();
    let us = eval_uniforms(seed, eval_indices.len());
    let outcomes: Vec<Outcome> = (0..eval_indices.len())
        .map(|p| view.outcome(p, model.method(), &thresholds, us[p]))
        .collect();
    MetricsReport::from_outcomes(&outcomes, table.num_classes(), model.alpha())
}

/// Median with the even-count convention of averaging the two central values.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Runs `trial_fn` for seeds `base_seed..base_seed + num_trials` (in
/// parallel) and reports the per-metric median of the trial values. The
/// per-class coverage is the median over trials in which the class was present.
pub fn median_of_means<F>(trial_fn: F, num_trials: usize, base_seed: u64) -> Result<MetricsReport>
where
    F: Fn(u64) -> Result<MetricsReport> + Sync,
{
    if num_trials == 0 {
        return Err(argument("need at least one trial"));
    }
    let reports: Vec<MetricsReport> = (0..num_trials as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            trial_fn(seed).map_err(|e| Error::Trial {
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(&reports))
}

/// Median aggregation of already computed trial reports.
pub fn aggregate(reports: &[MetricsReport]) -> MetricsReport {
    let pick = |f: fn(&MetricsReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
    let num_classes = reports[0].per_class_coverage.len();
    let per_class_coverage: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.per_class_coverage[c]).collect();
            (!vals.is_empty()).then(|| median(&vals))
        })
        .collect();
    MetricsReport {
        avg_size: pick(|r| r.avg_size),
        mar_cov_gap: pick(|r| r.mar_cov_gap),
        top_cov_gap: pick(|r| r.top_cov_gap),
        avg_cov_gap: pick(|r| r.avg_cov_gap),
        alpha: reports[0].alpha,
        n_eval: reports[0].n_eval,
        missing_classes: per_class_coverage.iter().filter(|c| c.is_none()).count(),
        per_class_coverage,
        num_trials: reports.len(),
    }
}

/// Writes `T,method,avg_size,mar_cov_gap,top_cov_gap,avg_cov_gap` rows.
pub fn write_batch_csv<W: Write>(rows: &[(f64, String, MetricsReport)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "T,method,avg_size,mar_cov_gap,top_cov_gap,avg_cov_gap")?;
    for (t, method, r) in rows {
        writeln!(
            out,
            "{t},{method},{},{},{},{}",
            r.avg_size, r.mar_cov_gap, r.top_cov_gap, r.avg_cov_gap
        )?;
    }
    Ok(())
}
