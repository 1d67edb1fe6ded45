//! Synthetic logits with a known calibration scale.
//!
//! Each sample picks a latent class `k` uniformly, draws i.i.d. Gaussian
//! logits and lifts entry `k` by a class-dependent signal (linearly spaced
//! between `signal_min` and `signal_max`, times a per-sample jitter). The
//! label is then drawn from the softmax of those logits, so the unscaled
//! logits are calibrated by construction. The returned logits are multiplied
//! by `beta`: `beta > 1` gives an overconfident model whose NLL-optimal
//! temperature is `beta`, `beta < 1` an underconfident one.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LogitsTable;
use crate::error::{argument, Result};
use crate::rng::{self, Purpose};
use crate::softmax::softmax_into;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub num_samples: usize,
    pub beta: f64,
    pub signal_min: f64,
    pub signal_max: f64,
    pub noise: f64,
    pub jitter: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 100,
            num_samples: 20_000,
            beta: 2.0,
            signal_min: 5.0,
            signal_max: 16.0,
            noise: 1.0,
            jitter: (0.7, 1.3),
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_samples == 0 {
            return Err(argument(format!(
                "synthetic data needs C >= 2 and N >= 1, got C={} N={}",
                self.num_classes, self.num_samples
            )));
        }
        let finite = [self.beta, self.signal_min, self.signal_max, self.noise, self.jitter.0, self.jitter.1]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.beta <= 0.0 || self.noise < 0.0 || self.jitter.0 > self.jitter.1 {
            return Err(argument(format!("invalid synthetic parameters {self:?}")));
        }
        Ok(())
    }
}

pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<LogitsTable> {
    config.validate()?;
    let c = config.num_classes;
    let mut rng = rng::stream(seed, Purpose::Synthetic, 0);
    let mut logits = Vec::with_capacity(config.num_samples * c);
    let mut labels = Vec::with_capacity(config.num_samples);
    let mut probs = vec![0.0; c];
    let (j_lo, j_hi) = config.jitter;
    for _ in 0..config.num_samples {
        let k = rng::index_below(&mut rng, c);
        let mut z: Vec<f64> = (0..c)
            .map(|_| config.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let signal = config.signal_min + (config.signal_max - config.signal_min) * k as f64 / (c - 1) as f64;
        z[k] += signal * (j_lo + (j_hi - j_lo) * rng::uniform01(&mut rng));

        softmax_into(&z, 1.0, &mut probs);
        let u = rng::uniform01(&mut rng);
        let mut acc = 0.0;
        let mut y = c - 1;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                y = j;
                break;
            }
        }
        labels.push(y);
        logits.extend(z.iter().map(|v| v * config.beta));
    }
    LogitsTable::new(c, logits, labels)
}
