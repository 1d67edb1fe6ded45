//! Split conformal prediction with LAC, APS and RAPS scores, pooled and
//! classwise (Mondrian) thresholds.
//!
//! Classes are ranked by descending logit with ties broken by ascending class
//! index. Temperature scaling never changes that ranking, so the rank of
//! every class is computed once per sample and reused at every temperature.
//! With `e_l = exp((z_(l) − z_(1)) / T)` and prefix sums `P_l`, the sorted
//! softmax mass up to rank `l` is `P_l / P_C`; in particular the full mass is
//! exactly `1`.

use serde::{Deserialize, Serialize};

use crate::data::LogitsTable;
use crate::error::{argument, Error, Result};
use crate::rng::{self, Purpose};
use crate::softmax::{ProbVector, Temperature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Lac,
    Aps,
    Raps,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lac" => Ok(ScoreKind::Lac),
            "aps" => Ok(ScoreKind::Aps),
            "raps" => Ok(ScoreKind::Raps),
            other => Err(argument(format!("unknown score method '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreKind::Lac => "lac",
            ScoreKind::Aps => "aps",
            ScoreKind::Raps => "raps",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMethod {
    #[serde(rename = "method")]
    pub kind: ScoreKind,
    pub randomized: bool,
    /// Only used by RAPS.
    pub lambda: f64,
    /// Only used by RAPS.
    pub k_reg: usize,
}

impl ScoreMethod {
    pub const DEFAULT_LAMBDA: f64 = 0.1;
    pub const DEFAULT_K_REG: usize = 5;

    pub fn new(kind: ScoreKind, randomized: bool, lambda: f64, k_reg: usize) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(argument(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self {
            kind,
            randomized,
            lambda,
            k_reg,
        })
    }

    pub fn lac() -> Self {
        Self::of(ScoreKind::Lac, false)
    }

    pub fn aps(randomized: bool) -> Self {
        Self::of(ScoreKind::Aps, randomized)
    }

    pub fn raps(randomized: bool) -> Self {
        Self::of(ScoreKind::Raps, randomized)
    }

    /// Default RAPS hyperparameters, whatever the kind.
    pub fn of(kind: ScoreKind, randomized: bool) -> Self {
        Self {
            kind,
            randomized,
            lambda: Self::DEFAULT_LAMBDA,
            k_reg: Self::DEFAULT_K_REG,
        }
    }

    pub fn is_adaptive(&self) -> bool {
        self.kind != ScoreKind::Lac
    }

    /// Short label such as `aps`, `raps-rand`.
    pub fn label(&self) -> String {
        if self.randomized {
            format!("{}-rand", self.kind)
        } else {
            self.kind.to_string()
        }
    }

    fn penalty(&self, rank: usize) -> f64 {
        match self.kind {
            ScoreKind::Raps => self.lambda * rank.saturating_sub(self.k_reg) as f64,
            _ => 0.0,
        }
    }

    /// Score of the class at 1-based `rank`, given the sorted mass `prev`
    /// before it and `cum` up to and including it.
    fn score_from_mass(&self, rank: usize, prev: f64, cum: f64, prob: f64, u: f64) -> f64 {
        match self.kind {
            ScoreKind::Lac => 1.0 - prob,
            ScoreKind::Aps | ScoreKind::Raps => {
                let base = if self.randomized {
                    (1.0 - u) * cum + u * prev
                } else {
                    cum
                };
                base + self.penalty(rank)
            }
        }
    }
}

/// Descending order of `values`, ties by ascending index.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Nonconformity score of `label`. Randomized methods need `u ∈ [0, 1]`;
/// LAC ignores randomization.
pub fn score(method: ScoreMethod, probs: &ProbVector, label: usize, u: Option<f64>) -> Result<f64> {
    let p = probs.as_slice();
    if label >= p.len() {
        return Err(argument(format!("label {label} out of range for {} classes", p.len())));
    }
    let u = match (method.randomized && method.is_adaptive(), u) {
        (true, None) => return Err(argument("randomized score needs a uniform draw u")),
        (true, Some(u)) if !(0.0..=1.0).contains(&u) => {
            return Err(argument(format!("u must lie in [0, 1], got {u}")))
        }
        (_, u) => u.unwrap_or(0.0),
    };
    let order = descending_order(p);
    let mut cum = 0.0;
    for (r, &class) in order.iter().enumerate() {
        let prev = cum;
        cum += p[class];
        if class == label {
            return Ok(method.score_from_mass(r + 1, prev, cum, p[class], u));
        }
    }
    unreachable!("label is in range")
}

/// Smallest prefix length of descending `probs` whose sum reaches `q_hat`
/// (at least 1, at most `C`).
pub fn deterministic_set_size(probs: &ProbVector, q_hat: f64) -> Result<usize> {
    let p = probs.as_slice();
    if p.windows(2).any(|w| w[0] < w[1]) {
        return Err(argument("probabilities must be sorted in descending order"));
    }
    let mut cum = 0.0;
    for (i, &v) in p.iter().enumerate() {
        cum += v;
        if cum >= q_hat {
            return Ok(i + 1);
        }
    }
    Ok(p.len())
}

/// Per-sample class ranking by logit, computed once and shared by all
/// temperatures.
#[derive(Debug, Clone)]
pub struct RankedLogits {
    num_classes: usize,
    /// Class at each rank, row-major.
    order: Vec<u32>,
    /// Logits in rank order, row-major.
    sorted: Vec<f64>,
    labels: Vec<usize>,
    /// 0-based rank of each row's label.
    label_rank: Vec<usize>,
}

impl RankedLogits {
    pub fn new(table: &LogitsTable) -> Self {
        let c = table.num_classes();
        let n = table.num_samples();
        let mut order = Vec::with_capacity(n * c);
        let mut sorted = Vec::with_capacity(n * c);
        let mut label_rank = Vec::with_capacity(n);
        for (i, row) in table.rows().enumerate() {
            let o = descending_order(row);
            label_rank.push(o.iter().position(|&k| k == table.label(i)).expect("label in range"));
            sorted.extend(o.iter().map(|&k| row[k]));
            order.extend(o.iter().map(|&k| k as u32));
        }
        Self {
            num_classes: c,
            order,
            sorted,
            labels: table.labels().to_vec(),
            label_rank,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// 0-based rank of row `i`'s label.
    pub fn label_rank(&self, i: usize) -> usize {
        self.label_rank[i]
    }

    pub fn sorted_row(&self, i: usize) -> &[f64] {
        &self.sorted[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn class_at(&self, i: usize, rank: usize) -> usize {
        self.order[i * self.num_classes + rank] as usize
    }

    /// Softmax masses of the given rows at temperature `t`.
    pub fn tempered(&self, rows: &[usize], t: f64) -> Tempered<'_> {
        let c = self.num_classes;
        let mut exps = Vec::with_capacity(rows.len() * c);
        let mut prefix = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            let s = self.sorted_row(i);
            let top = s[0];
            let mut acc = 0.0;
            for &z in s {
                let e = ((z - top) / t).exp();
                acc += e;
                exps.push(e);
                prefix.push(acc);
            }
        }
        Tempered {
            ranked: self,
            rows: rows.to_vec(),
            exps,
            prefix,
        }
    }

    /// Tempered view of every row.
    pub fn tempered_all(&self, t: f64) -> Tempered<'_> {
        let rows: Vec<usize> = (0..self.num_samples()).collect();
        self.tempered(&rows, t)
    }
}

/// Rank-ordered softmax masses for a set of rows at one temperature.
/// Positions index into the row list passed to [`RankedLogits::tempered`].
pub struct Tempered<'a> {
    ranked: &'a RankedLogits,
    rows: Vec<usize>,
    exps: Vec<f64>,
    prefix: Vec<f64>,
}

impl Tempered<'_> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row index (in the ranked table) at position `pos`.
    pub fn row(&self, pos: usize) -> usize {
        self.rows[pos]
    }

    /// Score of the class at 0-based `rank` of position `pos`.
    pub fn score_at_rank(&self, pos: usize, rank: usize, method: &ScoreMethod, u: f64) -> f64 {
        let c = self.ranked.num_classes;
        let base = pos * c;
        let total = self.prefix[base + c - 1];
        let cum = self.prefix[base + rank] / total;
        let prev = if rank == 0 { 0.0 } else { self.prefix[base + rank - 1] / total };
        let prob = self.exps[base + rank] / total;
        method.score_from_mass(rank + 1, prev, cum, prob, u)
    }

    pub fn label_score(&self, pos: usize, method: &ScoreMethod, u: f64) -> f64 {
        let rank = self.ranked.label_rank(self.rows[pos]);
        self.score_at_rank(pos, rank, method, u)
    }

    /// Sorted softmax vector of position `pos`.
    pub fn sorted_probs(&self, pos: usize) -> Vec<f64> {
        let c = self.ranked.num_classes;
        let e = &self.exps[pos * c..(pos + 1) * c];
        let total = self.prefix[pos * c + c - 1];
        e.iter().map(|v| v / total).collect()
    }

    /// Classes included at position `pos`, in rank order.
    pub fn set_at(&self, pos: usize, method: &ScoreMethod, thresholds: &Thresholds, u: f64) -> Vec<usize> {
        let row = self.rows[pos];
        (0..self.ranked.num_classes)
            .filter_map(|r| {
                let class = self.ranked.class_at(row, r);
                (self.score_at_rank(pos, r, method, u) <= thresholds.get(class)).then_some(class)
            })
            .collect()
    }

    /// Set size and whether the label is covered, without materializing the set.
    pub fn outcome(&self, pos: usize, method: &ScoreMethod, thresholds: &Thresholds, u: f64) -> Outcome {
        let row = self.rows[pos];
        let label_rank = self.ranked.label_rank(row);
        let mut size = 0;
        let mut covered = false;
        for r in 0..self.ranked.num_classes {
            let class = self.ranked.class_at(row, r);
            if self.score_at_rank(pos, r, method, u) <= thresholds.get(class) {
                size += 1;
                covered |= r == label_rank;
            }
        }
        Outcome {
            size,
            covered,
            label: self.ranked.label(row),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub size: usize,
    pub covered: bool,
    pub label: usize,
}

/// Inclusion thresholds: one for all classes, or one per class.
#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    Pooled(f64),
    PerClass(Vec<f64>),
}

impl Thresholds {
    pub fn get(&self, class: usize) -> f64 {
        match self {
            Thresholds::Pooled(q) => *q,
            Thresholds::PerClass(qs) => qs[class],
        }
    }
}

/// Rank `k = ⌈(n+1)(1−α)⌉` of the conformal quantile among `n` scores,
/// clamped to `n`. The flag reports whether the clamp fired.
pub fn quantile_rank(n: usize, alpha: f64) -> (usize, bool) {
    let k = (((n + 1) as f64) * (1.0 - alpha) - 1e-9).ceil().max(1.0) as usize;
    if k > n {
        (n, true)
    } else {
        (k, false)
    }
}

/// The conformal quantile of `scores` and the position of the sample that
/// realizes it (first position among equal scores).
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<Quantile> {
    if scores.is_empty() {
        return Err(argument("CP set is empty"));
    }
    check_alpha(alpha)?;
    let (k, clamped) = quantile_rank(scores.len(), alpha);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let (_, &mut position, _) =
        idx.select_nth_unstable_by(k - 1, |&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(Quantile {
        q_hat: scores[position],
        position,
        rank: k,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile {
    pub q_hat: f64,
    pub position: usize,
    pub rank: usize,
    pub clamped: bool,
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(argument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// One uniform per CP sample, in index order.
pub fn cp_uniforms(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, Purpose::CpScores, 0);
    (0..n).map(|_| rng::uniform01(&mut rng)).collect()
}

/// One uniform per evaluation sample, in index order.
pub fn eval_uniforms(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, Purpose::Eval, 0);
    (0..n).map(|_| rng::uniform01(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CPModel {
    #[serde(flatten)]
    pub method: ScoreMethod,
    pub alpha: f64,
    pub temperature: Temperature,
    pub q_hat: f64,
    pub n_cal: usize,
    pub clamp_warning: bool,
}

impl CPModel {
    /// Checks the invariants of a model that was deserialized rather than fitted.
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !self.q_hat.is_finite() {
            return Err(Error::Validation(format!("q_hat must be finite, got {}", self.q_hat)));
        }
        if self.n_cal == 0 {
            return Err(Error::Validation("n_cal must be positive".into()));
        }
        ScoreMethod::new(self.method.kind, self.method.randomized, self.method.lambda, self.method.k_reg)
            .map_err(|e| Error::Validation(e.to_string()))?;
        Ok(())
    }
}

/// A fitted set predictor: pooled or classwise thresholds at one temperature.
pub trait SetPredictor {
    fn method(&self) -> &ScoreMethod;
    fn alpha(&self) -> f64;
    fn temperature(&self) -> Temperature;
    fn thresholds(&self) -> Thresholds;

    /// Prediction set for one sample; `u` is ignored by deterministic methods.
    fn predict(&self, logits: &[f64], u: f64) -> Result<PredictionSet> {
        let table = LogitsTable::from_rows(vec![logits.to_vec()], vec![0])?;
        let ranked = RankedLogits::new(&table);
        let view = ranked.tempered(&[0], self.temperature().value());
        let thresholds = self.thresholds();
        if let Thresholds::PerClass(qs) = &thresholds {
            if qs.len() != logits.len() {
                return Err(Error::Consistency(format!(
                    "model has {} class thresholds, logits have {} entries",
                    qs.len(),
                    logits.len()
                )));
            }
        }
        let mut classes = view.set_at(0, self.method(), &thresholds, u);
        classes.sort_unstable();
        Ok(PredictionSet { classes })
    }
}

impl SetPredictor for CPModel {
    fn method(&self) -> &ScoreMethod {
        &self.method
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn temperature(&self) -> Temperature {
        self.temperature
    }

    fn thresholds(&self) -> Thresholds {
        Thresholds::Pooled(self.q_hat)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Ascending class indices.
    pub classes: Vec<usize>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }
}

/// `{y : s(x, y) ≤ q̂}` with one `u` shared by every candidate label.
pub fn predict_set(model: &CPModel, logits: &[f64], u: f64) -> Result<PredictionSet> {
    model.predict(logits, u)
}

fn check_indices(table: &LogitsTable, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(argument("CP set is empty"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= table.num_samples()) {
        return Err(argument(format!("index {i} out of range for {} samples", table.num_samples())));
    }
    Ok(())
}

/// Fits `q̂` on the CP rows `indices`. Randomized methods draw one uniform
/// per CP row from `seed`.
pub fn fit_threshold(
    table: &LogitsTable,
    indices: &[usize],
    method: ScoreMethod,
    alpha: f64,
    temperature: Temperature,
    seed: u64,
) -> Result<CPModel> {
    check_indices(table, indices)?;
    check_alpha(alpha)?;
    let ranked = RankedLogits::new(table);
    let scores = label_scores(&ranked, indices, &method, temperature.value(), seed);
    let q = conformal_quantile(&scores, alpha)?;
    Ok(CPModel {
        method,
        alpha,
        temperature,
        q_hat: q.q_hat,
        n_cal: indices.len(),
        clamp_warning: q.clamped,
    })
}

/// Label scores of the CP rows, in the order of `indices`.
pub fn label_scores(ranked: &RankedLogits, indices: &[usize], method: &ScoreMethod, t: f64, seed: u64) -> Vec<f64> {
    let us = cp_uniforms(seed, indices.len());
    let view = ranked.tempered(indices, t);
    (0..indices.len()).map(|p| view.label_score(p, method, us[p])).collect()
}

/// Classwise conformal predictor. Classes without CP samples use the pooled
/// model and are flagged in `fallback`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MondrianModel {
    pub pooled: CPModel,
    pub per_class: Vec<CPModel>,
    pub fallback: Vec<bool>,
}

impl SetPredictor for MondrianModel {
    fn method(&self) -> &ScoreMethod {
        &self.pooled.method
    }

    fn alpha(&self) -> f64 {
        self.pooled.alpha
    }

    fn temperature(&self) -> Temperature {
        self.pooled.temperature
    }

    fn thresholds(&self) -> Thresholds {
        Thresholds::PerClass(self.per_class.iter().map(|m| m.q_hat).collect())
    }
}

/// Per-class thresholds fitted on the CP rows of each class. Uniform draws
/// are the same as for [`fit_threshold`] with the same seed.
pub fn fit_mondrian(
    table: &LogitsTable,
    indices: &[usize],
    method: ScoreMethod,
    alpha: f64,
    temperature: Temperature,
    seed: u64,
) -> Result<MondrianModel> {
    check_indices(table, indices)?;
    check_alpha(alpha)?;
    let ranked = RankedLogits::new(table);
    let scores = label_scores(&ranked, indices, &method, temperature.value(), seed);
    mondrian_from_scores(table.num_classes(), indices.iter().map(|&i| table.label(i)), &scores, method, alpha, temperature)
}

pub(crate) fn mondrian_from_scores(
    num_classes: usize,
    labels: impl Iterator<Item = usize>,
    scores: &[f64],
    method: ScoreMethod,
    alpha: f64,
    temperature: Temperature,
) -> Result<MondrianModel> {
    let pooled_q = conformal_quantile(scores, alpha)?;
    let pooled = CPModel {
        method,
        alpha,
        temperature,
        q_hat: pooled_q.q_hat,
        n_cal: scores.len(),
        clamp_warning: pooled_q.clamped,
    };
    let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    for (y, &s) in labels.zip(scores) {
        by_class[y].push(s);
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut fallback = Vec::with_capacity(num_classes);
    for class_scores in &by_class {
        if class_scores.is_empty() {
            per_class.push(pooled.clone());
            fallback.push(true);
        } else {
            let q = conformal_quantile(class_scores, alpha)?;
            per_class.push(CPModel {
                q_hat: q.q_hat,
                n_cal: class_scores.len(),
                clamp_warning: q.clamped,
                ..pooled.clone()
            });
            fallback.push(false);
        }
    }
    Ok(MondrianModel {
        pooled,
        per_class,
        fallback,
    })
}
