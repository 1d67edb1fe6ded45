//! Tempered softmax, entropy and argmax.
//!
//! All exponentials are taken after subtracting the row maximum, so no
//! finite logit vector overflows at any positive temperature.

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};

/// A positive, finite temperature.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(argument(format!("temperature must be positive and finite, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Temperature::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

impl std::fmt::Display for Temperature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Probability vector: entries in `[0, 1]` summing to one within `1e-9`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(argument("empty probability vector"));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(argument(format!("probability {p} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(argument(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
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

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Largest entry (the model confidence).
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(argument("empty logit vector"));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(argument(format!("non-finite logit {z}")));
    }
    Ok(())
}

/// `σ(z / T)` computed with max-subtraction.
pub fn softmax_at(logits: &[f64], temperature: Temperature) -> Result<ProbVector> {
    check_logits(logits)?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature.value(), &mut out);
    Ok(ProbVector(out))
}

/// Unchecked kernel behind [`softmax_at`]; `out` must have the length of `logits`.
pub fn softmax_into(logits: &[f64], t: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / t).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `ln σ(z / T)` via log-sum-exp.
pub fn log_softmax_at(logits: &[f64], temperature: Temperature) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let t = temperature.value();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| ((z - max) / t).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&z| (z - max) / t - lse).collect())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.0
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Entropy of `σ(z / T)` evaluated in the log domain, accurate even where
/// some probabilities underflow.
pub fn entropy_at(logits: &[f64], temperature: Temperature) -> Result<f64> {
    let log_p = log_softmax_at(logits, temperature)?;
    Ok(-log_p.iter().map(|&lp| lp.exp() * lp).filter(|v| v.is_finite()).sum::<f64>())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_class(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(argument("argmax of empty vector"));
    }
    Ok(argmax_unchecked(values))
}

pub(crate) fn argmax_unchecked(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
