//! Numerical checks of how temperature scaling moves APS scores, thresholds
//! and set sizes.
//!
//! Every verifier draws its cases from `rng::stream(seed, Theory, case)`,
//! so runs are reproducible and cases can be evaluated in parallel. Each
//! case becomes a [`TheoryRecord`]: `covered` says whether the hypothesis of
//! the statement held for that case and `holds` whether its conclusion did.
//! A record with `covered && !holds` is a violation.
//!
//! Softmax tails `Σ_{c>M} σ_c` are computed directly rather than as `1 − head`
//! so that differences between temperatures stay resolvable when the head
//! mass is close to one.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{self, ScoreMethod};
use crate::data::LogitsTable;
use crate::error::{argument, Result};
use crate::optim::{bisect, golden_section};
use crate::rng::{self, Purpose, Rng};
use crate::softmax::{entropy_at, softmax_into, ProbVector, Temperature};

/// A logits vector sorted in non-increasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortedLogits(Vec<f64>);

impl SortedLogits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(argument("sorted logits need at least two entries"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(argument("sorted logits must be finite"));
        }
        if values.windows(2).any(|w| w[0] < w[1]) {
            return Err(argument("logits are not sorted in non-increasing order"));
        }
        Ok(Self(values))
    }

    /// Sorts arbitrary finite logits.
    pub fn from_unsorted(mut values: Vec<f64>) -> Result<Self> {
        values.sort_by(|a, b| b.total_cmp(a));
        Self::new(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `z_1 − z_2`.
    pub fn delta_z(&self) -> f64 {
        self.0[0] - self.0[1]
    }
}

/// Unnormalized weights `exp((z_i − z_1)/T)` and their total.
fn weights(z: &[f64], t: f64) -> (Vec<f64>, f64) {
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|&v| ((v - top) / t).exp()).collect();
    let total = w.iter().sum();
    (w, total)
}

/// `Σ_{c>m} σ_c(z/T)` over positions `m..C` (0-based), summed smallest first.
fn tail(z: &[f64], t: f64, m: usize) -> f64 {
    let (w, total) = weights(z, t);
    w[m..].iter().rev().sum::<f64>() / total
}

fn check_m(z: &SortedLogits, m: usize) -> Result<()> {
    if m == 0 || m > z.len() {
        return Err(argument(format!("M must lie in [1, {}], got {m}", z.len())));
    }
    Ok(())
}

/// Positional gap function; `z` need not be sorted.
fn gap_raw(z: &[f64], t: f64, m: usize) -> f64 {
    if m == z.len() {
        return 0.0;
    }
    tail(z, t, m) - tail(z, 1.0, m)
}

/// `g(z; T, M) = Σ_{i≤M} σ_i(z) − Σ_{i≤M} σ_i(z/T)`.
pub fn gap(z: &SortedLogits, temperature: Temperature, m: usize) -> Result<f64> {
    check_m(z, m)?;
    Ok(gap_raw(z.as_slice(), temperature.value(), m))
}

fn grad_raw(z: &[f64], t: f64, m: usize) -> f64 {
    let (w1, s1) = weights(z, 1.0);
    let (wt, st) = weights(z, t);
    let tail1 = w1[m..].iter().rev().sum::<f64>() / s1;
    let tail_t = wt[m..].iter().rev().sum::<f64>() / st;
    (w1[0] / s1) * tail1 - (wt[0] / st) * tail_t / t
}

/// `∂g/∂z_1 = σ_1(z)·Σ_{c>M} σ_c(z) − (1/T)·σ_1(z/T)·Σ_{c>M} σ_c(z/T)`.
pub fn grad_gap_z1(z: &SortedLogits, temperature: Temperature, m: usize) -> Result<f64> {
    check_m(z, m)?;
    Ok(grad_raw(z.as_slice(), temperature.value(), m))
}

fn bound_raw(t: f64, c: usize) -> f64 {
    let c1 = (c - 1) as f64;
    if t > 1.0 {
        (t / (t - 1.0) * (4.0 * t).ln()).max(t / (t + 1.0) * (4.0 * t * c1 * c1).ln())
    } else {
        (t / (t - 1.0) * (t / 4.0).ln()).max(t / (t + 1.0) * (4.0 * c1 * c1 / t).ln())
    }
}

/// Bound function `b(T)`: above it, the sign of `∂g/∂z_1` is fixed.
pub fn bound_b(temperature: Temperature, num_classes: usize) -> Result<f64> {
    if temperature.value() == 1.0 {
        return Err(argument("the bound function is undefined at T = 1"));
    }
    if num_classes < 2 {
        return Err(argument("the bound function needs C >= 2"));
    }
    Ok(bound_raw(temperature.value(), num_classes))
}

/// Open temperature intervals on which `b(T) < delta_z`, found by scanning a
/// fine grid on each branch and bisecting every sign change. An interval
/// starting at `0` or ending at `t_max` is open-ended on that side.
pub fn bound_intervals(delta_z: f64, num_classes: usize, t_max: f64) -> Result<Vec<(f64, f64)>> {
    if num_classes < 2 || !(t_max > 1.0) {
        return Err(argument("need C >= 2 and t_max > 1"));
    }
    let f = |t: f64| bound_raw(t, num_classes) - delta_z;
    let mut intervals = Vec::new();
    for (lo, hi) in [(1e-9, 1.0 - 1e-9), (1.0 + 1e-9, t_max)] {
        const STEPS: usize = 20_000;
        let xs: Vec<f64> = (0..=STEPS).map(|i| lo + (hi - lo) * i as f64 / STEPS as f64).collect();
        let mut start = (f(xs[0]) < 0.0).then_some(if lo < 1.0 { 0.0 } else { 1.0 });
        for w in xs.windows(2) {
            let (a, b) = (f(w[0]), f(w[1]));
            if (a < 0.0) != (b < 0.0) {
                let root = bisect(f, w[0], w[1], 1e-12).expect("bracketed");
                match start.take() {
                    Some(s) => intervals.push((s, root)),
                    None => start = Some(root),
                }
            }
        }
        if let Some(s) = start {
            intervals.push((s, hi.max(1.0).min(t_max)));
        }
    }
    Ok(intervals)
}

/// `T̃_c`: the minimizer of `b(T)` on `[1.01, 10]`, bracketed on a 0.01 grid
/// and refined by golden-section search.
pub fn bound_minimizer(num_classes: usize) -> Result<crate::optim::Minimum> {
    if num_classes < 2 {
        return Err(argument("the bound function needs C >= 2"));
    }
    let grid: Vec<f64> = (0..=899).map(|i| 1.01 + 0.01 * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&t| bound_raw(t, num_classes)).collect();
    let best = crate::optim::argmin_first(&values).expect("non-empty grid");
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    Ok(golden_section(|t| bound_raw(t, num_classes), lo, hi, 1e-9))
}

/// Per-entry differences `d_i = σ_i(z) − σ_i(z/T)`.
fn entry_differences(z: &[f64], t: f64) -> Vec<f64> {
    let mut p = vec![0.0; z.len()];
    let mut pt = vec![0.0; z.len()];
    softmax_into(z, 1.0, &mut p);
    softmax_into(z, t, &mut pt);
    p.iter().zip(&pt).map(|(a, b)| a - b).collect()
}

/// 1-based index of the last entry whose difference has the sign that the
/// top entry has on this branch (`d > 0` for `T > 1`, `d < 0` for `T < 1`).
pub fn s_index(z: &SortedLogits, temperature: Temperature) -> usize {
    let t = temperature.value();
    let d = entry_differences(z.as_slice(), t);
    let wanted = |v: f64| if t > 1.0 { v > 0.0 } else { v < 0.0 };
    d.iter().rposition(|&v| wanted(v)).map_or(0, |i| i + 1)
}

/// Upper bound on `|g(z;T,M) − g(z;T,L)|` when `s = 1`, and the observed
/// maximum over all `(M, L)` pairs. `None` when `s ≠ 1` or `T = 1`.
pub fn decay_bound(z: &SortedLogits, temperature: Temperature) -> Option<DecayCheck> {
    let t = temperature.value();
    if t == 1.0 || s_index(z, temperature) != 1 {
        return None;
    }
    let c1 = (z.len() - 1) as f64;
    let e = if t > 1.0 { (-z.delta_z() / t).exp() } else { (-z.delta_z()).exp() };
    let bound = c1 * e / (c1 * e + 1.0);
    let d = entry_differences(z.as_slice(), t);
    let mut g = Vec::with_capacity(d.len());
    let mut acc = 0.0;
    for v in &d {
        acc += v;
        g.push(acc);
    }
    let mut max_diff: f64 = 0.0;
    for &gm in &g {
        for &gl in &g {
            max_diff = max_diff.max((gm - gl).abs());
        }
    }
    Some(DecayCheck { bound, max_diff })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayCheck {
    pub bound: f64,
    pub max_diff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    ScoreDecrease,
    GradientSign,
    GradientFiniteDifference,
    SufficientCondition,
    DecayBound,
    EntropyMonotonicity,
    ThresholdMonotonicity,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = serde_json::to_value(self).expect("unit enum");
        f.write_str(v.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRecord {
    pub check: Check,
    pub case: usize,
    pub num_classes: usize,
    pub z_max: f64,
    pub z_min: f64,
    pub delta_z: f64,
    pub temperature: f64,
    /// Secondary temperature (the smaller one) for two-temperature checks.
    pub temperature_ref: Option<f64>,
    pub m: Option<usize>,
    pub gap: Option<f64>,
    pub gradient: Option<f64>,
    pub bound: Option<f64>,
    pub covered: bool,
    pub holds: bool,
    /// Set when a strict inequality was observed strictly.
    pub strict: Option<bool>,
    pub note: Option<String>,
}

impl TheoryRecord {
    fn new(check: Check, case: usize, z: &[f64], temperature: f64) -> Self {
        let z_max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z_min = z.iter().copied().fold(f64::INFINITY, f64::min);
        let mut sorted = z.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        Self {
            check,
            case,
            num_classes: z.len(),
            z_max,
            z_min,
            delta_z: sorted[0] - sorted[1],
            temperature,
            temperature_ref: None,
            m: None,
            gap: None,
            gradient: None,
            bound: None,
            covered: true,
            holds: true,
            strict: None,
            note: None,
        }
    }

    pub fn is_violation(&self) -> bool {
        self.covered && !self.holds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub check: Check,
    pub records: Vec<TheoryRecord>,
}

impl TheoryReport {
    fn new(check: Check, records: Vec<TheoryRecord>) -> Self {
        Self { check, records }
    }

    pub fn cases(&self) -> usize {
        self.records.len()
    }

    pub fn covered(&self) -> usize {
        self.records.iter().filter(|r| r.covered).count()
    }

    pub fn violations(&self) -> usize {
        self.records.iter().filter(|r| r.is_violation()).count()
    }

    pub fn strict(&self) -> usize {
        self.records.iter().filter(|r| r.strict == Some(true)).count()
    }

    /// `check: cases N, covered N[, strict N], violations N`; the strict count
    /// only appears for checks that record strictness.
    pub fn summary_line(&self) -> String {
        let strict = if self.records.iter().any(|r| r.strict.is_some()) {
            format!(", strict {}", self.strict())
        } else {
            String::new()
        };
        format!(
            "{}: cases {}, covered {}{strict}, violations {}",
            self.check,
            self.cases(),
            self.covered(),
            self.violations()
        )
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn run_cases<F>(check: Check, num_cases: usize, seed: u64, case_fn: F) -> TheoryReport
where
    F: Fn(usize, &mut Rng) -> TheoryRecord + Sync,
{
    let records = (0..num_cases)
        .into_par_iter()
        .map(|i| case_fn(i, &mut rng::stream(seed, Purpose::Theory, i as u64)))
        .collect();
    TheoryReport::new(check, records)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::uniform01(rng)
}

/// `C` logits, uniform on `[-10, 10]` and at least `0.1` apart at the
/// extremes; with probability `1/100` all equal.
fn random_logits(rng: &mut Rng, c: usize) -> Vec<f64> {
    if rng::index_below(rng, 100) == 0 {
        return vec![uniform(rng, -10.0, 10.0); c];
    }
    loop {
        let z: Vec<f64> = (0..c).map(|_| uniform(rng, -10.0, 10.0)).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = z.iter().copied().fold(f64::INFINITY, f64::min);
        if max - min >= 0.1 {
            return z;
        }
    }
}

/// Sorted logits with a prescribed `Δz`: `z_2` is a random offset, `z_1 =
/// z_2 + Δz` and the remaining entries lie i.i.d. within `spread` below `z_2`.
fn dominant_logits(rng: &mut Rng, c: usize, delta_z: f64, spread: f64) -> SortedLogits {
    let z2 = uniform(rng, -5.0, 5.0);
    let mut z = vec![z2 + delta_z, z2];
    z.extend((2..c).map(|_| z2 - spread * rng::uniform01(rng)));
    SortedLogits::from_unsorted(z).expect("finite")
}

fn branch_temperature(rng: &mut Rng, above_one: bool) -> f64 {
    if above_one {
        uniform(rng, 1.05, 10.0)
    } else {
        uniform(rng, 0.1, 0.95)
    }
}

/// Sorted softmax mass beyond rank `l`, for every `l` in `0..=C`.
fn tails(sorted: &[f64], t: f64) -> Vec<f64> {
    let (w, total) = weights(sorted, t);
    let mut out = vec![0.0; w.len() + 1];
    for l in (0..w.len()).rev() {
        out[l] = out[l + 1] + w[l];
    }
    out.iter().map(|v| v / total).collect()
}

/// For `T > T̃`, the sorted cumulative mass up to any `L` is no larger at
/// `T` than at `T̃`, strictly unless `L = C` or all logits are equal. The
/// comparison is made on the complementary tails.
pub fn verify_score_decrease(num_cases: usize, seed: u64) -> TheoryReport {
    run_cases(Check::ScoreDecrease, num_cases, seed, |case, rng| {
        let c = 2 + rng::index_below(rng, 49);
        let z = SortedLogits::from_unsorted(random_logits(rng, c)).expect("finite");
        let t_ref = uniform(rng, 0.1, 5.0);
        let t = t_ref * uniform(rng, 1.01, 3.0);
        let l = 1 + rng::index_below(rng, c);
        let hot = tails(z.as_slice(), t)[l];
        let cold = tails(z.as_slice(), t_ref)[l];
        let mut r = TheoryRecord::new(Check::ScoreDecrease, case, z.as_slice(), t);
        r.temperature_ref = Some(t_ref);
        r.m = Some(l);
        r.gap = Some(hot - cold);
        r.holds = hot >= cold;
        let constant = z.as_slice()[0] == z.as_slice()[c - 1];
        if l < c && !constant {
            r.strict = Some(hot > cold);
            r.holds &= hot > cold;
        } else {
            r.note = Some("equality case".into());
            r.holds &= (hot - cold).abs() <= 1e-15;
        }
        r
    })
}

/// Gradient sign theorem with the analytic gradient.
pub fn verify_gradient_sign_theorem(num_cases: usize, seed: u64, num_classes: usize) -> Result<TheoryReport> {
    verify_gradient_sign_with(num_cases, seed, num_classes, |z, t, m| grad_raw(z.as_slice(), t, m))
}

/// Gradient sign theorem with a caller-supplied gradient (used to check that
/// the verifier catches a wrong formula). Cases alternate between `T > 1`
/// and `T < 1`; `Δz` is drawn on `[0, b(T) + 10]`, so both sides of the
/// bound occur. Only cases with `Δz > b(T)` are covered, with `M < C`
/// (at `M = C` the gap is identically zero).
pub fn verify_gradient_sign_with<G>(num_cases: usize, seed: u64, num_classes: usize, grad: G) -> Result<TheoryReport>
where
    G: Fn(&SortedLogits, f64, usize) -> f64 + Sync,
{
    if num_classes < 2 {
        return Err(argument("gradient check needs C >= 2"));
    }
    Ok(run_cases(Check::GradientSign, num_cases, seed, |case, rng| {
        let above = case % 2 == 0;
        let t = branch_temperature(rng, above);
        let b = bound_raw(t, num_classes);
        let delta_z = uniform(rng, 0.0, b + 10.0);
        let z = dominant_logits(rng, num_classes, delta_z, 10.0);
        let m = 1 + rng::index_below(rng, num_classes - 1);
        let g = grad(&z, t, m);
        let mut r = TheoryRecord::new(Check::GradientSign, case, z.as_slice(), t);
        r.m = Some(m);
        r.gradient = Some(g);
        r.bound = Some(b);
        r.covered = z.delta_z() > b;
        r.holds = if above { g < 0.0 } else { g > 0.0 };
        if !r.covered {
            r.note = Some("not covered by theorem".into());
        }
        r
    }))
}

/// Central finite differences (`h = 1e-6`) of the gap in `z_1` against the
/// analytic gradient. The relative error is taken against
/// `max(|analytic|, |fd|, 1e-4)` so that near-zero gradients are compared in
/// absolute terms.
pub fn verify_gradient_finite_difference(num_cases: usize, seed: u64, tolerance: f64) -> TheoryReport {
    const H: f64 = 1e-6;
    run_cases(Check::GradientFiniteDifference, num_cases, seed, |case, rng| {
        let c = 2 + rng::index_below(rng, 19);
        let t = branch_temperature(rng, case % 2 == 0);
        let delta_z = uniform(rng, 0.0, 12.0);
        let z = dominant_logits(rng, c, delta_z, 6.0);
        let m = 1 + rng::index_below(rng, c);
        let analytic = grad_raw(z.as_slice(), t, m);
        let mut plus = z.as_slice().to_vec();
        let mut minus = plus.clone();
        plus[0] += H;
        minus[0] -= H;
        let fd = (gap_raw(&plus, t, m) - gap_raw(&minus, t, m)) / (2.0 * H);
        let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
        let mut r = TheoryRecord::new(Check::GradientFiniteDifference, case, z.as_slice(), t);
        r.m = Some(m);
        r.gradient = Some(analytic);
        r.gap = Some(err);
        r.holds = err <= tolerance;
        r
    })
}

/// Sufficient condition linking the gap at `L − 1` (or `L_T − 1`) to the
/// ordering of the set sizes `L` and `L_T`. Both sizes and the gap come from
/// the same sequential prefix sums.
pub fn verify_sufficient_condition(num_cases: usize, seed: u64) -> TheoryReport {
    run_cases(Check::SufficientCondition, num_cases, seed, |case, rng| {
        let c = 2 + rng::index_below(rng, 29);
        let z = SortedLogits::from_unsorted(random_logits(rng, c)).expect("finite");
        let above = case % 2 == 0;
        let t = branch_temperature(rng, above);
        let (a, b) = (1.0 - rng::uniform01(rng), 1.0 - rng::uniform01(rng));
        // T > 1 requires q̂ ≥ q̂_T, T < 1 the reverse.
        let (q, q_t) = if above { (a.max(b), a.min(b)) } else { (a.min(b), a.max(b)) };
        let mut p = vec![0.0; c];
        let mut pt = vec![0.0; c];
        softmax_into(z.as_slice(), 1.0, &mut p);
        softmax_into(z.as_slice(), t, &mut pt);
        let pv = ProbVector::new(p.clone()).expect("softmax");
        let pvt = ProbVector::new(pt.clone()).expect("softmax");
        let l = conformal::deterministic_set_size(&pv, q).expect("sorted");
        let l_t = conformal::deterministic_set_size(&pvt, q_t).expect("sorted");
        let prefix = |v: &[f64], k: usize| v[..k].iter().sum::<f64>();

        let mut r = TheoryRecord::new(Check::SufficientCondition, case, z.as_slice(), t);
        let (pivot, conclusion) = if above { (l, l <= l_t) } else { (l_t, l >= l_t) };
        r.m = Some(pivot);
        if pivot == 1 {
            r.covered = false;
            r.holds = conclusion;
            r.note = Some("trivial: minimal set size".into());
            return r;
        }
        let g = prefix(&p, pivot - 1) - prefix(&pt, pivot - 1);
        r.gap = Some(g);
        r.covered = if above { g >= q - q_t } else { g <= q - q_t };
        r.holds = conclusion;
        if !r.covered {
            r.note = Some("antecedent false".into());
        }
        r
    })
}

/// Exponential-decay bound on `|g(z;T,M) − g(z;T,L)|` for `s = 1`. Cases
/// with `s ≠ 1` are redrawn (up to 50 attempts) and recorded as uncovered
/// if none qualifies.
pub fn verify_decay_bound(num_cases: usize, seed: u64, num_classes: usize) -> Result<TheoryReport> {
    if num_classes < 2 {
        return Err(argument("decay check needs C >= 2"));
    }
    Ok(run_cases(Check::DecayBound, num_cases, seed, |case, rng| {
        let t = branch_temperature(rng, case % 2 == 0);
        let temp = Temperature::new(t).expect("positive");
        let mut last = None;
        for _ in 0..50 {
            let delta_z = uniform(rng, 2.0, 20.0);
            let z = dominant_logits(rng, num_classes, delta_z, 10.0);
            if let Some(check) = decay_bound(&z, temp) {
                let mut r = TheoryRecord::new(Check::DecayBound, case, z.as_slice(), t);
                r.bound = Some(check.bound);
                r.gap = Some(check.max_diff);
                r.holds = check.max_diff < check.bound;
                return r;
            }
            last = Some(z);
        }
        let z = last.expect("at least one attempt");
        let mut r = TheoryRecord::new(Check::DecayBound, case, z.as_slice(), t);
        r.covered = false;
        r.note = Some("precondition unmet: s != 1".into());
        r
    }))
}

/// Entropy of `σ(z/T)` increases with `T` for non-constant `z`. A decrease
/// larger than `1e-12` is a violation; `strict` records an exact increase.
pub fn verify_entropy_monotonicity(num_cases: usize, seed: u64) -> TheoryReport {
    run_cases(Check::EntropyMonotonicity, num_cases, seed, |case, rng| {
        let c = 2 + rng::index_below(rng, 29);
        let z = loop {
            let z = random_logits(rng, c);
            if z[0] != z[c - 1] || z.iter().any(|&v| v != z[0]) {
                break z;
            }
        };
        let t1 = uniform(rng, 0.1, 5.0);
        let t2 = t1 * uniform(rng, 1.01, 3.0);
        let h1 = entropy_at(&z, Temperature::new(t1).expect("positive")).expect("finite");
        let h2 = entropy_at(&z, Temperature::new(t2).expect("positive")).expect("finite");
        let mut r = TheoryRecord::new(Check::EntropyMonotonicity, case, &z, t2);
        r.temperature_ref = Some(t1);
        r.gap = Some(h2 - h1);
        r.holds = h2 > h1 - 1e-12;
        r.strict = Some(h2 > h1);
        r
    })
}

/// Fits APS/RAPS thresholds on the CP rows over an increasing temperature
/// grid with fixed uniforms and checks that `q̂_T` never increases.
pub fn verify_threshold_monotonicity(
    table: &LogitsTable,
    cp_indices: &[usize],
    method: ScoreMethod,
    alpha: f64,
    temperatures: &[f64],
    seed: u64,
) -> Result<TheoryReport> {
    if !method.is_adaptive() {
        return Err(argument("threshold monotonicity applies to APS and RAPS only"));
    }
    if temperatures.windows(2).any(|w| w[0] >= w[1]) {
        return Err(argument("temperatures must be strictly increasing"));
    }
    let ranked = conformal::RankedLogits::new(table);
    let q: Vec<f64> = temperatures
        .par_iter()
        .map(|&t| {
            let scores = conformal::label_scores(&ranked, cp_indices, &method, t, seed);
            conformal::conformal_quantile(&scores, alpha).map(|q| q.q_hat)
        })
        .collect::<Result<_>>()?;
    let records = temperatures
        .windows(2)
        .zip(q.windows(2))
        .enumerate()
        .map(|(i, (t, q))| {
            let mut r = TheoryRecord::new(Check::ThresholdMonotonicity, i, &[q[0], q[1]], t[1]);
            r.temperature_ref = Some(t[0]);
            r.gap = Some(q[1] - q[0]);
            r.holds = q[1] <= q[0];
            r.strict = Some(q[1] < q[0]);
            r
        })
        .collect();
    Ok(TheoryReport::new(Check::ThresholdMonotonicity, records))
}

/// Quantile samples with and without scaling at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSimilarity {
    pub temperature: f64,
    /// Table row realizing `q̂` at `T = 1`.
    pub index_base: usize,
    /// Table row realizing `q̂_T`.
    pub index_scaled: usize,
    pub same_sample: bool,
    pub delta_z_base: f64,
    pub delta_z_scaled: f64,
    /// Median `Δz` over the CP rows, for reference.
    pub median_delta_z: f64,
    pub top5_base: Vec<f64>,
    pub top5_scaled: Vec<f64>,
}

/// Descriptive comparison of the quantile samples at `T = 1` and at each
/// requested temperature. Nothing is asserted.
pub fn quantile_similarity_report(
    table: &LogitsTable,
    cp_indices: &[usize],
    method: ScoreMethod,
    alpha: f64,
    temperatures: &[f64],
    seed: u64,
) -> Result<Vec<QuantileSimilarity>> {
    let ranked = conformal::RankedLogits::new(table);
    let quantile_row = |t: f64| -> Result<usize> {
        let scores = conformal::label_scores(&ranked, cp_indices, &method, t, seed);
        Ok(cp_indices[conformal::conformal_quantile(&scores, alpha)?.position])
    };
    let delta = |i: usize| {
        let s = ranked.sorted_row(i);
        s[0] - s[1]
    };
    let top5 = |i: usize, t: f64| {
        let mut p = vec![0.0; table.num_classes()];
        softmax_into(ranked.sorted_row(i), t, &mut p);
        p.truncate(5);
        p
    };
    let median_delta_z = crate::metrics::median(&cp_indices.iter().map(|&i| delta(i)).collect::<Vec<_>>());
    let base = quantile_row(1.0)?;
    temperatures
        .iter()
        .map(|&t| {
            Temperature::new(t)?;
            let scaled = quantile_row(t)?;
            Ok(QuantileSimilarity {
                temperature: t,
                index_base: base,
                index_scaled: scaled,
                same_sample: base == scaled,
                delta_z_base: delta(base),
                delta_z_scaled: delta(scaled),
                median_delta_z,
                top5_base: top5(base, 1.0),
                top5_scaled: top5(scaled, t),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticConfig};
    use proptest::prelude::*;

    fn sl(v: &[f64]) -> SortedLogits {
        SortedLogits::new(v.to_vec()).unwrap()
    }

    fn temp(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    /// Oracle: both softmaxes summed head-first, no shared code.
    fn gap_oracle(z: &[f64], t: f64, m: usize) -> f64 {
        let head = |scale: f64| {
            let e: Vec<f64> = z.iter().map(|v| (v / scale).exp()).collect();
            e[..m].iter().sum::<f64>() / e.iter().sum::<f64>()
        };
        head(1.0) - head(t)
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap(&sl(&[1.0, 1.0, 1.0]), temp(3.0), 2).unwrap(), 0.0);
        assert_eq!(gap(&sl(&[3.0, 1.0, 0.0]), temp(3.0), 3).unwrap(), 0.0);
        let g = gap(&sl(&[2.0, 0.0, 0.0]), temp(2.0), 1).unwrap();
        let oracle = 2f64.exp() / (2f64.exp() + 2.0) - 1f64.exp() / (1f64.exp() + 2.0);
        assert!((g - oracle).abs() < 1e-15);
        assert!((g - 0.2108).abs() < 1e-4);
        assert!(gap(&sl(&[2.0, 0.0]), temp(2.0), 0).is_err());
        assert!(gap(&sl(&[2.0, 0.0]), temp(2.0), 3).is_err());
        assert!(SortedLogits::new(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn gradient_special_cases() {
        let z = sl(&[0.5, 0.5, 0.5, 0.5]);
        for m in 1..4 {
            let t = 2.5;
            let g = grad_gap_z1(&z, temp(t), m).unwrap();
            let tail = (4 - m) as f64 / 4.0;
            let expected = 0.25 * tail - 0.25 * tail / t;
            assert!((g - expected).abs() < 1e-15);
        }
        assert!(grad_gap_z1(&sl(&[3.0, 1.0, -2.0]), Temperature::ONE, 1).unwrap().abs() < 1e-16);
    }

    #[test]
    fn bound_examples() {
        let b = bound_b(temp(2.0), 100).unwrap();
        let expected = (2.0 * 8f64.ln()).max(2.0 / 3.0 * (8.0 * 99.0f64 * 99.0).ln());
        assert!((b - expected).abs() < 1e-12);
        assert!((b - 7.513).abs() < 1e-3);
        assert!(bound_b(Temperature::ONE, 100).is_err());
        assert!(bound_b(temp(1.000001), 100).unwrap() > 1e5);
    }

    #[test]
    fn bound_intervals_for_delta_eight() {
        let iv = bound_intervals(8.0, 100, 50.0).unwrap();
        assert_eq!(iv.len(), 2, "{iv:?}");
        assert_eq!(iv[0].0, 0.0);
        assert!((iv[0].1 - 0.83).abs() < 0.01, "{iv:?}");
        assert!((iv[1].0 - 1.25).abs() < 0.01, "{iv:?}");
        assert!((iv[1].1 - 2.33).abs() < 0.01, "{iv:?}");
    }

    #[test]
    fn bound_minimizer_shifts_left_with_classes() {
        let m10 = bound_minimizer(10).unwrap();
        let m100 = bound_minimizer(100).unwrap();
        let m1000 = bound_minimizer(1000).unwrap();
        assert!(m1000.x < m100.x && m100.x < m10.x);
        // Fine-grid oracle.
        for (c, m) in [(10, m10), (1000, m1000)] {
            let best = (0..90_000)
                .map(|i| 1.01 + 1e-4 * i as f64)
                .min_by(|a, b| bound_raw(*a, c).total_cmp(&bound_raw(*b, c)))
                .unwrap();
            assert!((best - m.x).abs() < 2e-4, "C={c}: {best} vs {}", m.x);
        }
    }

    #[test]
    fn decay_bound_example() {
        let mut z = vec![8.0];
        z.extend(std::iter::repeat_n(0.0, 99));
        let z = sl(&z);
        let check = decay_bound(&z, temp(2.0)).expect("s = 1");
        let e = 99.0 * (-4f64).exp();
        assert!((check.bound - e / (e + 1.0)).abs() < 1e-15);
        assert!((check.bound - 0.6445).abs() < 1e-4);
        assert!(check.max_diff < check.bound);

        let flat = sl(&[1.0; 5]);
        assert_eq!(s_index(&flat, temp(2.0)), 0);
        assert!(decay_bound(&flat, temp(2.0)).is_none());
    }

    #[test]
    fn constructed_gradient_case() {
        let t = 2.0;
        let b = bound_raw(t, 10);
        let mut z = vec![b + 0.1, 0.0];
        z.extend((0..8).map(|i| -0.5 * i as f64));
        let z = SortedLogits::from_unsorted(z).unwrap();
        for m in 1..10 {
            assert!(grad_gap_z1(&z, temp(t), m).unwrap() < 0.0);
        }
    }

    #[test]
    fn small_verifier_runs_are_clean() {
        let s = verify_score_decrease(2000, 1);
        assert_eq!(s.violations(), 0);
        assert!(s.strict() > 1500);
        let g = verify_gradient_sign_theorem(2000, 2, 10).unwrap();
        assert_eq!(g.violations(), 0);
        assert!(g.covered() > 200 && g.covered() < 1900, "{}", g.summary_line());
        assert_eq!(verify_gradient_finite_difference(2000, 3, 1e-5).violations(), 0);
        let p = verify_sufficient_condition(2000, 4);
        assert_eq!(p.violations(), 0);
        assert!(p.covered() > 100);
        let d = verify_decay_bound(500, 5, 100).unwrap();
        assert_eq!(d.violations(), 0);
        assert_eq!(d.covered(), 500);
        assert_eq!(verify_entropy_monotonicity(2000, 6).violations(), 0);
    }

    #[test]
    fn sign_flip_is_detected() {
        let flipped = verify_gradient_sign_with(500, 2, 10, |z, t, m| -grad_raw(z.as_slice(), t, m)).unwrap();
        assert!(flipped.violations() > 0);
        assert_eq!(flipped.violations(), flipped.covered());
    }

    #[test]
    fn verifiers_are_deterministic() {
        assert_eq!(verify_sufficient_condition(300, 9), verify_sufficient_condition(300, 9));
    }

    #[test]
    fn jsonl_one_record_per_line() {
        let r = verify_entropy_monotonicity(5, 0);
        let mut buf = Vec::new();
        r.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        let first: TheoryRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.check, Check::EntropyMonotonicity);
        assert!(r.summary_line().ends_with("violations 0"));
    }

    fn overconfident() -> LogitsTable {
        generate(&SyntheticConfig { num_classes: 20, num_samples: 3000, ..SyntheticConfig::default() }, 7).unwrap()
    }

    #[test]
    fn threshold_monotonicity_on_synthetic_data() {
        let table = overconfident();
        let idx: Vec<usize> = (0..1000).collect();
        let grid: Vec<f64> = (5..=50).map(|i| i as f64 / 10.0).collect();
        for method in [ScoreMethod::aps(false), ScoreMethod::aps(true), ScoreMethod::raps(true)] {
            let r = verify_threshold_monotonicity(&table, &idx, method, 0.1, &grid, 3).unwrap();
            assert_eq!(r.violations(), 0, "{}", method.label());
            assert_eq!(r.cases(), grid.len() - 1);
        }
        assert!(verify_threshold_monotonicity(&table, &idx, ScoreMethod::lac(), 0.1, &grid, 3).is_err());
    }

    #[test]
    fn quantile_similarity_shape() {
        let table = overconfident();
        let idx: Vec<usize> = (0..1000).collect();
        let rows = quantile_similarity_report(&table, &idx, ScoreMethod::aps(false), 0.1, &[1.0, 1.5, 2.0], 0).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].same_sample);
        assert!(rows[0].delta_z_base > rows[0].median_delta_z);
        assert_eq!(rows[1].top5_base.len(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn gap_matches_oracle(
            raw in prop::collection::vec(-5.0f64..5.0, 2..12),
            t in 0.2f64..6.0,
            m_seed: usize,
        ) {
            let z = SortedLogits::from_unsorted(raw).unwrap();
            let m = 1 + m_seed % z.len();
            let g = gap(&z, temp(t), m).unwrap();
            prop_assert!((g - gap_oracle(z.as_slice(), t, m)).abs() < 1e-12);
        }

        #[test]
        fn gap_sign_by_branch(
            raw in prop::collection::vec(-5.0f64..5.0, 2..12),
            t in prop_oneof![0.1f64..0.95, 1.05f64..8.0],
            m_seed: usize,
        ) {
            let z = SortedLogits::from_unsorted(raw).unwrap();
            prop_assume!(z.as_slice()[0] - z.as_slice()[z.len() - 1] > 0.1);
            let m = 1 + m_seed % (z.len() - 1);
            let g = gap(&z, temp(t), m).unwrap();
            if t > 1.0 { prop_assert!(g > 0.0) } else { prop_assert!(g < 0.0) }
        }
    }
}
