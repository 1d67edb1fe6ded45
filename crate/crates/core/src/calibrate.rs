//! Temperature-scaling calibration: ECE and NLL objectives, the scalar
//! temperature search and reliability-diagram bins.
//!
//! Samples are binned by their confidence (the largest softmax entry) into
//! `L` equal-width bins over `[0, 1]`; a confidence of exactly `1.0` falls in
//! the last bin.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LogitsTable;
use crate::error::{argument, Error, Result};
use crate::optim::{argmin_first, golden_section};
use crate::softmax::{argmax_unchecked, Temperature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EceConfig {
    pub num_bins: usize,
}

impl EceConfig {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins < 2 {
            return Err(argument(format!("ECE needs at least 2 bins, got {num_bins}")));
        }
        Ok(Self { num_bins })
    }

    fn bin_of(&self, confidence: f64) -> usize {
        ((confidence * self.num_bins as f64) as usize).min(self.num_bins - 1)
    }
}

impl Default for EceConfig {
    fn default() -> Self {
        Self { num_bins: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ece,
    Nll,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ece" => Ok(Objective::Ece),
            "nll" => Ok(Objective::Nll),
            other => Err(argument(format!("unknown objective '{other}'"))),
        }
    }
}

/// Bracket and grid resolution for [`optimize_temperature`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub grid_step: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            t_min: 0.1,
            t_max: 10.0,
            grid_step: 0.01,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            return Err(argument(format!(
                "temperature bracket must satisfy 0 < t_min < t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if !(self.grid_step > 0.0) {
            return Err(argument(format!("grid step must be positive, got {}", self.grid_step)));
        }
        Ok(())
    }

    /// Grid points `t_min + i·step` up to `t_max`, with `t_max` and `1.0`
    /// (when inside the bracket) always included.
    pub fn grid(&self) -> Vec<f64> {
        let steps = ((self.t_max - self.t_min) / self.grid_step + 1e-9).floor() as usize;
        let mut grid: Vec<f64> = (0..=steps)
            .map(|i| round_grid(self.t_min + i as f64 * self.grid_step))
            .collect();
        grid.push(self.t_max);
        if self.t_min <= 1.0 && 1.0 <= self.t_max {
            grid.push(1.0);
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        grid
    }
}

/// Rounds away the accumulation noise of `start + i·step` grids.
pub(crate) fn round_grid(x: f64) -> f64 {
    (x * 1e10).round() / 1e10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub t_star: Temperature,
    pub objective: Objective,
    /// Objective at `T = 1`.
    pub objective_value_before: f64,
    /// Objective at `t_star`.
    pub objective_value_after: f64,
    pub search_trace: Vec<(f64, f64)>,
}

/// Per-sample quantities that do not depend on the temperature.
struct Prepared<'a> {
    table: &'a LogitsTable,
    correct: Vec<bool>,
    max_logit: Vec<f64>,
}

impl<'a> Prepared<'a> {
    fn new(table: &'a LogitsTable) -> Self {
        let mut correct = Vec::with_capacity(table.num_samples());
        let mut max_logit = Vec::with_capacity(table.num_samples());
        for (i, row) in table.rows().enumerate() {
            let top = argmax_unchecked(row);
            correct.push(top == table.label(i));
            max_logit.push(row[top]);
        }
        Self {
            table,
            correct,
            max_logit,
        }
    }

    /// Sum of `exp((z_j - max) / T)` over the row; its reciprocal is the confidence.
    fn partition(&self, i: usize, t: f64) -> f64 {
        let m = self.max_logit[i];
        self.table.row(i).iter().map(|&z| ((z - m) / t).exp()).sum()
    }

    fn confidence(&self, i: usize, t: f64) -> f64 {
        1.0 / self.partition(i, t)
    }

    fn nll(&self, t: f64) -> f64 {
        (0..self.table.num_samples())
            .map(|i| {
                let z_y = self.table.row(i)[self.table.label(i)];
                self.partition(i, t).ln() - (z_y - self.max_logit[i]) / t
            })
            .sum()
    }

    fn bins(&self, t: f64, config: EceConfig) -> Vec<BinAccumulator> {
        let mut bins = vec![BinAccumulator::default(); config.num_bins];
        for i in 0..self.table.num_samples() {
            let conf = self.confidence(i, t);
            let b = &mut bins[config.bin_of(conf)];
            b.count += 1;
            b.correct += usize::from(self.correct[i]);
            b.confidence_sum += conf;
        }
        bins
    }

    fn ece(&self, t: f64, config: EceConfig) -> f64 {
        let n = self.table.num_samples() as f64;
        self.bins(t, config)
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| {
                let count = b.count as f64;
                (count / n) * (b.correct as f64 / count - b.confidence_sum / count).abs()
            })
            .sum()
    }

    fn objective(&self, objective: Objective, t: f64, config: EceConfig) -> f64 {
        match objective {
            Objective::Ece => self.ece(t, config),
            Objective::Nll => self.nll(t),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct BinAccumulator {
    count: usize,
    correct: usize,
    confidence_sum: f64,
}

/// Expected calibration error at temperature `T`.
pub fn ece(table: &LogitsTable, temperature: Temperature, config: EceConfig) -> f64 {
    Prepared::new(table).ece(temperature.value(), config)
}

/// Negative log-likelihood `−Σ ln σ(z_i / T)_{y_i}`, summed over the table.
pub fn nll(table: &LogitsTable, temperature: Temperature) -> f64 {
    Prepared::new(table).nll(temperature.value())
}

/// Scans the grid (in parallel, with a fixed per-point reduction order), then
/// refines the best NLL cell by golden-section search down to a `1e-4`
/// bracket. ECE is piecewise constant in `T`, so for ECE the grid minimum is
/// returned as is. Grid ties resolve to the smallest temperature.
pub fn optimize_temperature(
    table: &LogitsTable,
    objective: Objective,
    config: EceConfig,
    search: SearchConfig,
) -> Result<CalibrationResult> {
    search.validate()?;
    let prepared = Prepared::new(table);
    let grid = search.grid();
    let values: Vec<f64> = grid
        .par_iter()
        .map(|&t| prepared.objective(objective, t, config))
        .collect();
    let best = argmin_first(&values).expect("grid is never empty");
    let mut search_trace: Vec<(f64, f64)> = grid.iter().copied().zip(values.iter().copied()).collect();
    let before = prepared.objective(objective, 1.0, config);

    let (mut t_star, mut value) = (grid[best], values[best]);
    if objective == Objective::Nll {
        let lo = (t_star - search.grid_step).max(search.t_min);
        let hi = (t_star + search.grid_step).min(search.t_max);
        let refined = golden_section(|t| prepared.nll(t), lo, hi, 1e-4);
        search_trace.push((refined.x, refined.value));
        if refined.value < value {
            t_star = refined.x;
            value = refined.value;
        }
    }
    Ok(CalibrationResult {
        t_star: Temperature::new(t_star)?,
        objective,
        objective_value_before: before,
        objective_value_after: value,
        search_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub accuracy: f64,
    /// Zero for empty bins.
    pub mean_confidence: f64,
}

/// Per-bin accuracy and mean confidence; the bins partition `[0, 1]`.
pub fn reliability_diagram(
    table: &LogitsTable,
    temperature: Temperature,
    config: EceConfig,
) -> Vec<ReliabilityBin> {
    let prepared = Prepared::new(table);
    let width = 1.0 / config.num_bins as f64;
    prepared
        .bins(temperature.value(), config)
        .into_iter()
        .enumerate()
        .map(|(l, b)| {
            let (accuracy, mean_confidence) = if b.count == 0 {
                (0.0, 0.0)
            } else {
                (
                    b.correct as f64 / b.count as f64,
                    b.confidence_sum / b.count as f64,
                )
            };
            ReliabilityBin {
                bin_low: l as f64 * width,
                bin_high: if l + 1 == config.num_bins { 1.0 } else { (l + 1) as f64 * width },
                count: b.count,
                accuracy,
                mean_confidence,
            }
        })
        .collect()
}

pub fn write_reliability_csv<W: Write>(bins: &[ReliabilityBin], mut out: W) -> std::io::Result<()> {
    writeln!(out, "bin_low,bin_high,count,accuracy,mean_confidence")?;
    for b in bins {
        writeln!(
            out,
            "{},{},{},{},{}",
            b.bin_low, b.bin_high, b.count, b.accuracy, b.mean_confidence
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticConfig};
    use proptest::prelude::*;

    fn table(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> LogitsTable {
        LogitsTable::from_rows(rows, labels).unwrap()
    }

    #[test]
    fn perfect_confident_predictions_have_zero_ece() {
        let t = table(vec![vec![1000.0, 0.0], vec![0.0, 1000.0]], vec![0, 1]);
        assert_eq!(ece(&t, Temperature::ONE, EceConfig::default()), 0.0);
    }

    #[test]
    fn single_bin_hand_computation() {
        // ln(19) gives σ = [0.95, 0.05]; one of the two predictions is right.
        let z = 19f64.ln();
        let t = table(vec![vec![z, 0.0], vec![z, 0.0]], vec![0, 1]);
        let e = ece(&t, Temperature::ONE, EceConfig::default());
        assert!((e - 0.45).abs() < 1e-12, "{e}");
    }

    #[test]
    fn nll_closed_forms() {
        let t = table(vec![vec![0.0, 0.0]], vec![0]);
        assert!((nll(&t, Temperature::ONE) - 2f64.ln()).abs() < 1e-15);
        let t = table(vec![vec![2f64.ln(), 0.0]], vec![0]);
        let v = nll(&t, Temperature::ONE);
        assert!((v + (2.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((v - 0.4055).abs() < 1e-4);
    }

    #[test]
    fn nll_is_stable_for_huge_margins() {
        let t = table(vec![vec![0.0, 2000.0]], vec![0]);
        let v = nll(&t, Temperature::ONE);
        assert!((v - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_bracket_rejected() {
        let t = table(vec![vec![0.0, 1.0]], vec![0]);
        let search = SearchConfig {
            t_min: 1.0,
            t_max: 1.0,
            grid_step: 0.01,
        };
        assert!(matches!(
            optimize_temperature(&t, Objective::Nll, EceConfig::default(), search),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn grid_contains_one_and_endpoints() {
        let g = SearchConfig { t_min: 0.25, t_max: 2.0, grid_step: 0.5 }.grid();
        assert_eq!(g, vec![0.25, 0.75, 1.0, 1.25, 1.75, 2.0]);
        assert_eq!(SearchConfig::default().grid().len(), 991);
    }

    fn synthetic(beta: f64, n: usize, seed: u64) -> LogitsTable {
        let cfg = SyntheticConfig {
            num_classes: 10,
            num_samples: n,
            beta,
            ..SyntheticConfig::default()
        };
        generate(&cfg, seed).unwrap()
    }

    #[test]
    fn nll_recovers_scale() {
        for (beta, seed) in [(2.0, 1), (1.0, 2)] {
            let t = synthetic(beta, 5000, seed);
            let r = optimize_temperature(&t, Objective::Nll, EceConfig::default(), SearchConfig::default())
                .unwrap();
            assert!((r.t_star.value() - beta).abs() < 0.05, "beta {beta}: {}", r.t_star);
            assert!(r.objective_value_after <= r.objective_value_before + 1e-12);
        }
    }

    #[test]
    fn over_and_under_confidence_direction() {
        let over = synthetic(1.6, 4000, 5);
        let under = synthetic(0.6, 4000, 6);
        for objective in [Objective::Nll, Objective::Ece] {
            let r = optimize_temperature(&over, objective, EceConfig::default(), SearchConfig::default()).unwrap();
            assert!(r.t_star.value() > 1.0);
            let r = optimize_temperature(&under, objective, EceConfig::default(), SearchConfig::default()).unwrap();
            assert!(r.t_star.value() < 1.0);
        }
    }

    #[test]
    fn ece_and_nll_optima_agree() {
        let t = synthetic(1.5, 8000, 11);
        let a = optimize_temperature(&t, Objective::Nll, EceConfig::default(), SearchConfig::default()).unwrap();
        let b = optimize_temperature(&t, Objective::Ece, EceConfig::default(), SearchConfig::default()).unwrap();
        assert!((a.t_star.value() - b.t_star.value()).abs() < 0.15, "{} vs {}", a.t_star, b.t_star);
        assert!(b.objective_value_after <= b.objective_value_before);
    }

    #[test]
    fn reliability_single_sample_and_partition() {
        let z = 19f64.ln();
        let t = table(vec![vec![z, 0.0]], vec![0]);
        let bins = reliability_diagram(&t, Temperature::ONE, EceConfig::default());
        assert_eq!(bins.len(), 10);
        let occupied: Vec<_> = bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!(occupied[0].count, 1);
        assert_eq!(occupied[0].bin_low, 0.9);

        let t = synthetic(1.3, 3000, 3);
        let bins = reliability_diagram(&t, Temperature::ONE, EceConfig::default());
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 3000);
        assert_eq!(bins[0].bin_low, 0.0);
        assert_eq!(bins[9].bin_high, 1.0);
    }

    #[test]
    fn reliability_calibrated_large_n() {
        let t = synthetic(1.0, 50_000, 21);
        for b in reliability_diagram(&t, Temperature::ONE, EceConfig::default()) {
            if b.count >= 500 {
                assert!((b.accuracy - b.mean_confidence).abs() < 0.05, "{b:?}");
            }
        }
    }

    #[test]
    fn reliability_csv_header() {
        let t = table(vec![vec![0.0, 1.0]], vec![1]);
        let mut buf = Vec::new();
        write_reliability_csv(&reliability_diagram(&t, Temperature::ONE, EceConfig::default()), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_low,bin_high,count,accuracy,mean_confidence\n"));
        assert_eq!(text.lines().count(), 11);
    }

    proptest! {
        #[test]
        fn objectives_shift_and_order_invariant(
            rows in prop::collection::vec(prop::collection::vec(-8.0f64..8.0, 4), 1..40),
            shift in -30.0f64..30.0,
            temp in 0.2f64..5.0,
            seed: u64,
        ) {
            let labels: Vec<usize> = (0..rows.len()).map(|i| (i + seed as usize) % 4).collect();
            let t = table(rows.clone(), labels.clone());
            let shifted = table(rows.iter().map(|r| r.iter().map(|z| z + shift).collect()).collect(), labels.clone());
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.reverse();
            let permuted = t.subset(&order).unwrap();
            let temp = Temperature::new(temp).unwrap();
            let cfg = EceConfig::default();
            prop_assert!((ece(&t, temp, cfg) - ece(&shifted, temp, cfg)).abs() < 1e-9);
            prop_assert!((nll(&t, temp) - nll(&shifted, temp)).abs() < 1e-8 * (1.0 + nll(&t, temp)));
            prop_assert!((ece(&t, temp, cfg) - ece(&permuted, temp, cfg)).abs() < 1e-12);
        }

        #[test]
        fn nll_decreases_with_true_logit(
            row in prop::collection::vec(-5.0f64..5.0, 3),
            label in 0usize..3,
            bump in 0.01f64..3.0,
        ) {
            let t = table(vec![row.clone()], vec![label]);
            let mut up = row.clone();
            up[label] += bump;
            let t_up = table(vec![up], vec![label]);
            prop_assert!(nll(&t_up, Temperature::ONE) < nll(&t, Temperature::ONE));
        }
    }
}
