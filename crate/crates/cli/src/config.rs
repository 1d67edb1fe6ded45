//! Run configuration: an optional JSON manifest overlaid by command-line flags.
//!
//! Every field is optional in both sources. A flag that was given replaces the
//! manifest value; anything still unset falls back to the command default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use tscp::calibrate::Objective;
use tscp::conformal::{ScoreKind, ScoreMethod};
use tscp::data::{self, Format, LogitsTable, SplitPlan};
use tscp::sweep::{Grid, Resampling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplingArg {
    Joint,
    CpOnly,
}

impl From<ResamplingArg> for Resampling {
    fn from(r: ResamplingArg) -> Self {
        match r {
            ResamplingArg::Joint => Resampling::Joint,
            ResamplingArg::CpOnly => Resampling::CpOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleArg {
    MinTopcovgap,
    MinAvgsize,
    Fixed,
}

/// Which rows `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowsArg {
    Eval,
    All,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub format: Option<Format>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub calib_fraction: Option<f64>,
    pub cp_fraction: Option<f64>,

    pub method: Option<Vec<ScoreKind>>,
    pub randomized: Option<bool>,
    pub lambda: Option<f64>,
    pub k_reg: Option<usize>,

    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub t_step: Option<f64>,
    pub trials: Option<usize>,
    pub allow_below_floor: Option<bool>,
    pub resampling: Option<ResamplingArg>,

    pub objective: Option<Objective>,
    pub bins: Option<usize>,
    pub temperature: Option<f64>,
    pub calibration: Option<PathBuf>,
    pub mondrian: Option<bool>,
    pub model: Option<PathBuf>,
    pub rows: Option<RowsArg>,
    pub rule: Option<RuleArg>,
    pub t_hat: Option<f64>,
    pub per_class: Option<usize>,
    pub cases: Option<usize>,
    pub classes: Option<usize>,
    pub samples: Option<usize>,
    pub beta: Option<f64>,
    pub output: Option<PathBuf>,
}

/// Copies every `Some` field of `$from` over `$to`.
macro_rules! overlay {
    ($to:expr, $from:expr; $($field:ident),* $(,)?) => {
        $(if $from.$field.is_some() {
            $to.$field = $from.$field.clone();
        })*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Fields set in `flags` win over the ones in `self`.
    pub fn overlay(mut self, flags: &RunConfig) -> Self {
        overlay!(self, flags;
            input, format, alpha, seed, out_dir, calib_fraction, cp_fraction,
            method, randomized, lambda, k_reg,
            t_min, t_max, t_step, trials, allow_below_floor, resampling,
            objective, bins, temperature, calibration, mondrian, model, rows, rule, t_hat,
            per_class, cases, classes, samples, beta, output,
        );
        self
    }

    pub fn input_path(&self) -> Result<&Path> {
        let path = self.input.as_deref().context("missing --input")?;
        if !path.is_file() {
            bail!("input file not found: {}", path.display());
        }
        Ok(path)
    }

    pub fn load_table(&self) -> Result<LogitsTable> {
        let path = self.input_path()?;
        let format = match self.format {
            Some(f) => f,
            None => Format::from_path(path)
                .with_context(|| format!("cannot infer the format of {}; pass --format", path.display()))?,
        };
        Ok(data::load_logits(path, format)?)
    }

    pub fn alpha(&self) -> Result<f64> {
        let alpha = self.alpha.unwrap_or(0.1);
        if !(alpha > 0.0 && alpha < 1.0) {
            bail!("--alpha must lie in (0, 1), got {alpha}");
        }
        Ok(alpha)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn split(&self, table: &LogitsTable) -> Result<SplitPlan> {
        let calib = self.calib_fraction.unwrap_or(0.1);
        let cp = self.cp_fraction.unwrap_or(0.1);
        Ok(data::make_split(table, calib, cp, self.seed())?)
    }

    /// Score methods from `--method`, or `defaults` when none was given.
    pub fn methods(&self, defaults: &[ScoreKind]) -> Result<Vec<ScoreMethod>> {
        let kinds = self.method.as_deref().unwrap_or(defaults);
        if kinds.is_empty() {
            bail!("--method needs at least one value");
        }
        let base = ScoreMethod::raps(false);
        let lambda = self.lambda.unwrap_or(base.lambda);
        let k_reg = self.k_reg.unwrap_or(base.k_reg);
        let randomized = self.randomized.unwrap_or(false);
        let mut methods: Vec<ScoreMethod> = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let m = ScoreMethod::new(kind, randomized, lambda, k_reg)?;
            if methods.contains(&m) {
                bail!("method {kind} listed twice");
            }
            methods.push(m);
        }
        Ok(methods)
    }

    /// The single method of commands that take one.
    pub fn single_method(&self, default: ScoreKind) -> Result<ScoreMethod> {
        let methods = self.methods(&[default])?;
        if methods.len() != 1 {
            bail!("this command takes exactly one --method");
        }
        Ok(methods[0])
    }

    pub fn grid(&self) -> Result<Grid> {
        let d = Grid::default();
        Ok(Grid::new(
            self.t_min.unwrap_or(d.t_min),
            self.t_max.unwrap_or(d.t_max),
            self.t_step.unwrap_or(d.step),
            self.allow_below_floor.unwrap_or(false),
        )?)
    }

    pub fn trials(&self, default: usize) -> Result<usize> {
        let n = self.trials.unwrap_or(default);
        if n == 0 {
            bail!("--trials must be positive");
        }
        Ok(n)
    }
}
