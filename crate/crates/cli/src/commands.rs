use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use momix::completion::SdpConfig;
use momix::models::{sample, MixtureSpec, ModelAdapter, ModelSpec};
use momix::pipeline::{
    self, derive_seed, random_mixture, relative_error, run_experiment, ComponentEstimate,
    ExperimentModel, ExperimentSpec, FitConfig, Method, SolverPath,
};

use crate::error::{CliError, CliResult};
use crate::io::{csv_string, emit, json_string, read_csv, read_json, write_atomic};
use crate::{Cli, EvalArgs, ExperimentArgs, FitArgs, GenerateArgs};

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

fn column_names(model: &ModelSpec) -> Vec<String> {
    match model {
        ModelSpec::GaussianSpherical { dim, .. } | ModelSpec::GaussianDiagonal { dim, .. } => {
            (1..=*dim).map(|i| format!("x{i}")).collect()
        }
        ModelSpec::LinearRegression { dim, .. } => {
            let mut names: Vec<String> = (1..=*dim).map(|i| format!("x{i}")).collect();
            names.push("y".into());
            names
        }
        ModelSpec::Binomial { .. } => vec!["count".into()],
        ModelSpec::Multiview { dim, .. } => (1..=3)
            .flat_map(|v| (1..=*dim).map(move |i| format!("v{v}_{i}")))
            .collect(),
    }
}

pub fn generate(cli: &Cli, args: &GenerateArgs) -> CliResult<()> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| usage("generate needs --out for the data file"))?;
    let seed = cli.seed.unwrap_or(0);
    let truth = match &args.spec {
        Some(path) => {
            let spec: MixtureSpec = read_json(path)?;
            spec.validate().map_err(|e| CliError::input(path, e))?;
            spec
        }
        None => {
            let model = args
                .model
                .model
                .ok_or_else(|| usage("--model is required unless --spec is given"))?;
            let k = args
                .k
                .ok_or_else(|| usage("--k is required unless --spec is given"))?;
            let d = match (model, args.d) {
                (ExperimentModel::Binomial, d) => d.unwrap_or(1),
                (_, Some(d)) => d,
                (_, None) => return Err(usage("--d is required for this model")),
            };
            if args.model.m.is_some() && model != ExperimentModel::Binomial {
                return Err(usage("--m applies to binomial models only"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
            let mut spec = random_mixture(model, k, d, &mut rng)?;
            if let (ModelSpec::Binomial { trials }, Some(m)) = (&mut spec.model, args.model.m) {
                *trials = m;
                spec.validate()?;
            }
            spec
        }
    };
    let (data, _) = sample(&truth, args.samples, derive_seed(seed, 0, 1))?;
    let names = column_names(&truth.model);
    let csv = csv_string(&data, args.header.then_some(names.as_slice()));
    let truth_path = args
        .truth
        .clone()
        .unwrap_or_else(|| out.with_extension("truth.json"));
    let truth_json = json_string(&truth);
    write_atomic(out, &csv)?;
    write_atomic(&truth_path, &truth_json)?;
    println!("{}", out.display());
    println!("{}", truth_path.display());
    Ok(())
}

/// A `ModelSpec`, or a document holding one under "model".
fn read_model_spec(path: &Path) -> CliResult<ModelSpec> {
    let value: Value = read_json(path)?;
    let inner = match value.get("model") {
        Some(m) if m.is_object() => m.clone(),
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| CliError::input(path, e))
}

fn model_from_flags(args: &FitArgs, columns: usize) -> CliResult<ModelSpec> {
    let kind = args
        .model
        .model
        .ok_or_else(|| usage("fit needs --model or --model-spec"))?;
    let bad_width =
        |what: &str| CliError::input(&args.data, format!("{columns} columns do not fit {what}"));
    Ok(match kind {
        ExperimentModel::GaussianSpherical => ModelSpec::GaussianSpherical {
            dim: columns,
            max_order: None,
        },
        ExperimentModel::GaussianDiagonal | ExperimentModel::GaussianConstrained => {
            ModelSpec::GaussianDiagonal {
                dim: columns,
                max_order: None,
            }
        }
        ExperimentModel::LinearRegression => {
            if columns < 2 {
                return Err(bad_width("a regression (covariates then response)"));
            }
            let noise = match args.noise_variance {
                Some(v) => json!({ "kind": "known", "variance": v }),
                None => json!({ "kind": "parameter" }),
            };
            serde_json::from_value(json!({
                "kind": "linear-regression",
                "dim": columns - 1,
                "noise": noise,
            }))
            .map_err(|e| usage(e.to_string()))?
        }
        ExperimentModel::Binomial => ModelSpec::Binomial {
            trials: args
                .model
                .m
                .ok_or_else(|| usage("binomial fits need --m (trials per draw)"))?,
        },
        ExperimentModel::Multiview => {
            if !columns.is_multiple_of(3) {
                return Err(bad_width("three equal views"));
            }
            ModelSpec::Multiview {
                dim: columns / 3,
                emission: args.emission(),
            }
        }
    })
}

pub fn fit(cli: &Cli, args: &FitArgs) -> CliResult<()> {
    let data = read_csv(&args.data, args.header)?;
    let columns = data[0].len();
    let spec = match &args.model_spec {
        Some(path) => read_model_spec(path)?,
        None => model_from_flags(args, columns)?,
    };
    let adapter = ModelAdapter::new(spec)?;
    if let Some((i, row)) = data
        .iter()
        .enumerate()
        .find(|(_, r)| r.len() != adapter.data_columns())
    {
        return Err(CliError::input(
            &args.data,
            format!(
                "row {} has {} columns, model {} needs {}",
                i + 1,
                row.len(),
                adapter.name(),
                adapter.data_columns()
            ),
        ));
    }
    let mut cfg: FitConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => FitConfig::default(),
    };
    cfg.k = args.k;
    if args.degree.is_some() {
        cfg.degree = args.degree;
    }
    if let Some(solver) = args.solver {
        cfg.solver = solver;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let truth: Option<MixtureSpec> = args.truth.as_deref().map(read_json).transpose()?;
    let mut report = pipeline::fit(&adapter, &data, &cfg)?;
    if let Some(truth) = &truth {
        report.relative_error = Some(relative_error(&report.estimate, truth)?);
    }
    if cli.verbose {
        eprintln!(
            "path {}, certificate {:?}, {} SDP rounds, {:.3}s",
            report.path,
            report.certificate_rank,
            report.completion.rounds,
            report.elapsed.as_secs_f64()
        );
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
    }
    emit(cli.out.as_deref(), &json_string(&report))
}

pub fn eval(cli: &Cli, args: &EvalArgs) -> CliResult<()> {
    let value: Value = read_json(&args.estimate)?;
    let inner = match value.get("estimate") {
        Some(e) => e.clone(),
        None => value,
    };
    #[derive(Deserialize)]
    struct Estimate {
        weights: Vec<f64>,
        components: Vec<Vec<f64>>,
    }
    let est: Estimate =
        serde_json::from_value(inner).map_err(|e| CliError::input(&args.estimate, e))?;
    let truth: MixtureSpec = read_json(&args.truth)?;
    let err = relative_error(
        &ComponentEstimate {
            weights: est.weights,
            components: est.components,
        },
        &truth,
    )
    .map_err(|e| CliError::input(&args.estimate, e))?;
    println!("{err:?}");
    if let Some(out) = &cli.out {
        write_atomic(out, &json_string(&json!({ "relative_error": err })))?;
    }
    Ok(())
}

fn default_methods() -> Vec<Method> {
    vec![Method::Poly]
}

/// Experiment file schema; unknown keys are rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ExperimentModel,
    pub k: usize,
    pub d: usize,
    /// Sample sizes `T`.
    pub samples: Vec<usize>,
    pub trials: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub degree: Option<u32>,
    #[serde(default)]
    pub solver: Option<SolverPath>,
    #[serde(default)]
    pub sdp: Option<SdpConfig>,
    #[serde(default)]
    pub threads: Option<usize>,
    /// JSON results file; `--out` takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

pub fn experiment(cli: &Cli, args: &ExperimentArgs) -> CliResult<()> {
    let cfg: ExperimentConfig = read_json(&args.config)?;
    let spec = ExperimentSpec {
        model: Some(cfg.model),
        k: cfg.k,
        d: cfg.d,
        samples: cfg.samples,
        trials: cfg.trials,
        methods: cfg.methods,
        seed: cli.seed.unwrap_or(cfg.seed),
        degree: cfg.degree,
        solver: cfg.solver,
        sdp: cfg.sdp,
        threads: cfg.threads,
    };
    spec.validate()
        .map_err(|e| CliError::input(&args.config, e))?;
    let start = Instant::now();
    let report = run_experiment(&spec)?;
    if cli.verbose {
        eprintln!(
            "{} trials in {:.1}s",
            report.trials.len(),
            start.elapsed().as_secs_f64()
        );
    }
    let json = json_string(&report);
    match cli.out.as_ref().or(cfg.output.as_ref()) {
        Some(path) => {
            write_atomic(path, &json)?;
            print!("{}", report.table());
        }
        None => {
            eprint!("{}", report.table());
            print!("{json}");
        }
    }
    Ok(())
}
