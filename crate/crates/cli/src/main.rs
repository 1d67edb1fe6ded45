//! `tscp`: temperature scaling and conformal prediction from the command line.
//!
//! Exit status is 0 on success, 1 when a theory check finds a violation and 2
//! for usage, input or I/O errors.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tscp::calibrate::Objective;
use tscp::conformal::ScoreKind;
use tscp::data::Format;

use config::{ResamplingArg, RowsArg, RuleArg, RunConfig};

#[derive(Parser)]
#[command(name = "tscp", version, about = "Temperature scaling and conformal prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the calibration temperature T* on a logits file and write a reliability diagram.
    Calibrate {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        range: Range,
        /// Calibration objective.
        #[arg(long)]
        objective: Option<Objective>,
        /// Number of ECE / reliability bins.
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Fit a conformal threshold on the CP split.
    Fit {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        method: MethodFlags,
        /// Temperature applied before scoring (default 1).
        #[arg(long)]
        temperature: Option<f64>,
        /// Take the temperature from a `calibrate` result instead.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Fit one threshold per class.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        mondrian: Option<bool>,
    },
    /// Evaluate a fitted model on the evaluation split (or on every row).
    Eval {
        #[command(flatten)]
        shared: Shared,
        /// Model JSON written by `fit`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        rows: Option<RowsArg>,
    },
    /// Metrics of every method across a temperature grid.
    Sweep {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        method: MethodFlags,
        #[command(flatten)]
        range: Range,
        #[command(flatten)]
        trials: Trials,
        #[arg(long)]
        resampling: Option<ResamplingArg>,
    },
    /// Choose the prediction-set temperature from a curve approximated on the calibration split.
    Guideline {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        method: MethodFlags,
        #[command(flatten)]
        range: Range,
        #[arg(long)]
        rule: Option<RuleArg>,
        /// Temperature used by `--rule fixed`.
        #[arg(long)]
        t_hat: Option<f64>,
    },
    /// Check the temperature-scaling results on random cases.
    VerifyTheory {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        method: MethodFlags,
        #[command(flatten)]
        range: Range,
        /// Random cases per check.
        #[arg(long)]
        cases: Option<usize>,
        /// Number of classes for the gradient and decay checks.
        #[arg(long)]
        classes: Option<usize>,
        /// Negate the gradient formula, to confirm that the check can fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Compare classwise conformal prediction with pooled prediction at a tuned temperature.
    MondrianCompare {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        method: MethodFlags,
        #[command(flatten)]
        range: Range,
        #[command(flatten)]
        trials: Trials,
        /// CP rows per class.
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Write a synthetic overconfident logits file.
    Synth {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Logit scale; the calibrated temperature comes out close to it.
        #[arg(long)]
        beta: Option<f64>,
        /// Output file (default `<out-dir>/logits.csv`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Shared {
    /// Logits file (CSV with `z0..,label` columns, or JSONL).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<Format>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    calib_fraction: Option<f64>,
    #[arg(long)]
    cp_fraction: Option<f64>,
}

#[derive(Args)]
struct MethodFlags {
    /// Score function(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<ScoreKind>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    randomized: Option<bool>,
    /// RAPS penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// RAPS rank offset.
    #[arg(long)]
    k_reg: Option<usize>,
}

#[derive(Args)]
struct Range {
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    t_step: Option<f64>,
    /// Permit sweep temperatures below 0.3.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    allow_below_floor: Option<bool>,
}

#[derive(Args)]
struct Trials {
    #[arg(long)]
    trials: Option<usize>,
}

impl Shared {
    fn apply(&self, c: &mut RunConfig) {
        c.input = self.input.clone();
        c.format = self.format;
        c.alpha = self.alpha;
        c.seed = self.seed;
        c.out_dir = self.out_dir.clone();
        c.calib_fraction = self.calib_fraction;
        c.cp_fraction = self.cp_fraction;
    }
}

impl MethodFlags {
    fn apply(&self, c: &mut RunConfig) {
        c.method = self.method.clone();
        c.randomized = self.randomized;
        c.lambda = self.lambda;
        c.k_reg = self.k_reg;
    }
}

impl Range {
    fn apply(&self, c: &mut RunConfig) {
        c.t_min = self.t_min;
        c.t_max = self.t_max;
        c.t_step = self.t_step;
        c.allow_below_floor = self.allow_below_floor;
    }
}

/// Flags as a partial config, plus the manifest path.
fn flags(command: &Command) -> (RunConfig, Option<PathBuf>) {
    let mut c = RunConfig::default();
    let shared = match command {
        Command::Calibrate {
            shared,
            range,
            objective,
            bins,
        } => {
            range.apply(&mut c);
            c.objective = *objective;
            c.bins = *bins;
            shared
        }
        Command::Fit {
            shared,
            method,
            temperature,
            calibration,
            mondrian,
        } => {
            method.apply(&mut c);
            c.temperature = *temperature;
            c.calibration = calibration.clone();
            c.mondrian = *mondrian;
            shared
        }
        Command::Eval { shared, model, rows } => {
            c.model = model.clone();
            c.rows = *rows;
            shared
        }
        Command::Sweep {
            shared,
            method,
            range,
            trials,
            resampling,
        } => {
            method.apply(&mut c);
            range.apply(&mut c);
            c.trials = trials.trials;
            c.resampling = *resampling;
            shared
        }
        Command::Guideline {
            shared,
            method,
            range,
            rule,
            t_hat,
        } => {
            method.apply(&mut c);
            range.apply(&mut c);
            c.rule = *rule;
            c.t_hat = *t_hat;
            shared
        }
        Command::VerifyTheory {
            shared,
            method,
            range,
            cases,
            classes,
            ..
        } => {
            method.apply(&mut c);
            range.apply(&mut c);
            c.cases = *cases;
            c.classes = *classes;
            shared
        }
        Command::MondrianCompare {
            shared,
            method,
            range,
            trials,
            per_class,
        } => {
            method.apply(&mut c);
            range.apply(&mut c);
            c.trials = trials.trials;
            c.per_class = *per_class;
            shared
        }
        Command::Synth {
            shared,
            classes,
            samples,
            beta,
            output,
        } => {
            c.classes = *classes;
            c.samples = *samples;
            c.beta = *beta;
            c.output = output.clone();
            shared
        }
    };
    shared.apply(&mut c);
    (c, shared.config.clone())
}

fn run(cli: Cli) -> Result<commands::Status> {
    let (flag_config, manifest) = flags(&cli.command);
    let config = match manifest {
        Some(path) => RunConfig::load(&path)?.overlay(&flag_config),
        None => flag_config,
    };
    match cli.command {
        Command::Calibrate { .. } => commands::calibrate(&config),
        Command::Fit { .. } => commands::fit(&config),
        Command::Eval { .. } => commands::eval(&config),
        Command::Sweep { .. } => commands::sweep(&config),
        Command::Guideline { .. } => commands::guideline(&config),
        Command::VerifyTheory { inject_sign_flip, .. } => commands::verify_theory(&config, inject_sign_flip),
        Command::MondrianCompare { .. } => commands::mondrian_compare(&config),
        Command::Synth { .. } => commands::synth(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::Violations) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
