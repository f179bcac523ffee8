//! `momix`: generate mixture data, fit it by moment completion, score
//! estimates and run table-style experiments.
//!
//! Exit codes: 0 success, 2 usage error, 3 bad input, 4 solver failure,
//! 5 extraction failure.

mod commands;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use momix::models::Emission;
use momix::pipeline::{ExperimentModel, SolverPath};

#[derive(Debug, Parser)]
#[command(
    name = "momix",
    version,
    about = "Mixture-model estimation by moment completion"
)]
pub struct Cli {
    /// Seed for random models, sampling and extraction projections.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file. `generate` requires it; other commands print to stdout
    /// when it is absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Report warnings and timings on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a data set (CSV) and write its ground truth (JSON).
    Generate(GenerateArgs),
    /// Estimate mixture parameters from a CSV data set.
    Fit(FitArgs),
    /// Relative error of an estimate against a ground-truth file.
    Eval(EvalArgs),
    /// Run an experiment described by a JSON config.
    Experiment(ExperimentArgs),
}

fn parse_kebab<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model family: gaussian-spherical, gaussian-diag, gaussian-constrained,
    /// multiview, linear-regression or binomial.
    #[arg(long, value_parser = parse_kebab::<ExperimentModel>)]
    pub model: Option<ExperimentModel>,
    /// Trials per draw of a binomial model.
    #[arg(long)]
    pub m: Option<u32>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of mixture components.
    #[arg(long, required_unless_present = "spec")]
    pub k: Option<usize>,
    /// Dimension (per view for multiview, covariates for regression).
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of rows to sample.
    #[arg(long)]
    pub samples: usize,
    /// Ground-truth output; defaults to the data path with `.truth.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Sample from this mixture (JSON) instead of drawing a random one.
    #[arg(long, conflicts_with_all = ["model", "k", "d", "m"])]
    pub spec: Option<PathBuf>,
    /// Write a header line of column names.
    #[arg(long)]
    pub header: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV data; regression rows hold the covariates then the response.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Full model description (JSON `ModelSpec`, or a truth file holding one
    /// under "model"), instead of --model.
    #[arg(long, conflicts_with = "model")]
    pub model_spec: Option<PathBuf>,
    /// Number of components.
    #[arg(long)]
    pub k: usize,
    /// Moment-matrix degree r (model default when absent).
    #[arg(long)]
    pub degree: Option<u32>,
    /// Completion route: auto, linear, sdp, multiview-corner or
    /// multiplication-matrix.
    #[arg(long, value_parser = parse_kebab::<SolverPath>)]
    pub solver: Option<SolverPath>,
    /// JSON fit configuration (SDP settings, constraints, ...); flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Known regression noise variance; estimated as a parameter when absent.
    #[arg(long)]
    pub noise_variance: Option<f64>,
    /// Multiview emission: one-hot (categorical views) or gaussian.
    #[arg(long, default_value = "one-hot", value_parser = ["one-hot", "gaussian"])]
    pub emission: String,
    /// Standard deviation of Gaussian multiview emissions.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// The CSV starts with a header line.
    #[arg(long)]
    pub header: bool,
    /// Ground truth to score the estimate against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

impl FitArgs {
    pub fn emission(&self) -> Emission {
        match self.emission.as_str() {
            "gaussian" => Emission::Gaussian { sigma: self.sigma },
            _ => Emission::OneHot,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fit report, or any JSON with "weights" and "components".
    #[arg(long)]
    pub estimate: PathBuf,
    /// Ground-truth mixture.
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => commands::generate(&cli, args),
        Command::Fit(args) => commands::fit(&cli, args),
        Command::Eval(args) => commands::eval(&cli, args),
        Command::Experiment(args) => commands::experiment(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
