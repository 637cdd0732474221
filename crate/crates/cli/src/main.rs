use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bnca_core::experiment::{self, child_seed, BncaModel, DataSource, ExperimentConfig, Method, ReportBundle};
use bnca_core::report::{emit_report, ReportFormat};
use bnca_core::{dataset, Error};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

/// Bayesian neighbourhood component analysis experiments.
#[derive(Parser, Debug)]
#[command(name = "bnca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit BNCA on a whole dataset and save the model as JSON.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a saved model on a labelled CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        has_header: bool,
        #[arg(long, default_value_t = 1000)]
        mcmc_samples: usize,
        #[arg(long, default_value_t = 0.01)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the evaluation JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the experiment at every noise level (first training size only).
    SweepNoise {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Repeat the experiment at every training size (first noise level only).
    SweepSize {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Convert a saved JSON report into another format.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output path; JSON goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    format: String,
}

/// Flags mirroring the config file keys. Keys present in `--config` win.
#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labelled CSV, label in the last column.
    #[arg(long, conflicts_with_all = ["blobs_classes", "blobs_dim", "blobs_spread"])]
    data: Option<PathBuf>,
    #[arg(long)]
    has_header: bool,
    #[arg(long)]
    blobs_classes: Option<usize>,
    #[arg(long)]
    blobs_dim: Option<usize>,
    #[arg(long)]
    blobs_spread: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    nca_max_iters: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    noise_levels: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    per_class_sizes: Option<Vec<usize>>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    mcmc_samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    difficult_fraction: Option<f64>,
    #[arg(long)]
    no_traces: bool,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::InvalidArgument(_) => 1,
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) | Error::Data(_) | Error::DimensionMismatch { .. } => 2,
            Error::NonFinite(_) | Error::NotPositiveDefinite(_) => 3,
        };
        Self {
            code,
            message: err.to_string(),
        }
    }
}

impl ExperimentArgs {
    fn to_config(&self) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.data {
            cfg.source = DataSource::Csv {
                path: path.clone(),
                has_header: self.has_header,
            };
            cfg.test_per_class = None;
        } else if let DataSource::Blobs { classes, dim, spread } = &mut cfg.source {
            *classes = self.blobs_classes.unwrap_or(*classes);
            *dim = self.blobs_dim.unwrap_or(*dim);
            *spread = self.blobs_spread.unwrap_or(*spread);
        }
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        take!(
            k,
            knn_k,
            epsilon,
            sigma,
            max_iters,
            tol,
            nca_max_iters,
            noise_levels,
            per_class_sizes,
            repeats,
            master_seed,
            tau,
            mcmc_samples,
            methods,
            difficult_fraction
        );
        if self.d.is_some() {
            cfg.d = self.d;
        }
        if self.test_per_class.is_some() {
            cfg.test_per_class = self.test_per_class;
        }
        cfg.standardize |= self.standardize;
        cfg.traces &= !self.no_traces;
        cfg
    }

    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let flags = self.to_config();
        let cfg = match &self.config {
            None => flags,
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
                let file: Value = serde_json::from_str(&text)
                    .map_err(|e| Failure::config(format!("config {} is not valid JSON: {e}", path.display())))?;
                let Value::Object(overrides) = file else {
                    return Err(Failure::config("config file must hold a JSON object"));
                };
                let mut merged = serde_json::to_value(&flags).map_err(|e| Failure::config(e.to_string()))?;
                if let Value::Object(base) = &mut merged {
                    base.extend(overrides);
                }
                serde_json::from_value(merged).map_err(|e| Failure::config(format!("invalid config: {e}")))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure {
        code: 3,
        message: e.to_string(),
    })? + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure {
            code: 2,
            message: format!("cannot write {}: {e}", path.display()),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit(bundle: &ReportBundle, output: &OutputArgs) -> Result<(), Failure> {
    let format: ReportFormat = output.format.parse()?;
    match (&output.out, format) {
        (Some(path), _) => {
            for p in emit_report(bundle, format, path)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(())
        }
        (None, ReportFormat::Json) => write_json(bundle, None),
        (None, ReportFormat::Csv) => {
            print!("{}", bnca_core::report::accuracy_table(bundle));
            Ok(())
        }
    }
}

fn warn_nonconverged(bundle: &ReportBundle) {
    for row in bundle.rows.iter().filter(|r| r.nonconverged > 0) {
        eprintln!(
            "warning: {} of {} {} fits did not converge at {}",
            row.nonconverged,
            row.accuracy.per_seed_scores.len(),
            row.method,
            row.condition.label()
        );
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { exp, model } => {
            let cfg = exp.resolve()?;
            let data = experiment::load_pool(&cfg)?;
            let fitted = experiment::train_model(&data, &cfg)?;
            if !fitted.converged {
                eprintln!(
                    "warning: fit stopped after {} iterations without converging",
                    fitted.iterations
                );
            }
            write_json(&fitted, Some(&model))
        }
        Command::Evaluate {
            model,
            data,
            has_header,
            mcmc_samples,
            tau,
            seed,
            out,
        } => {
            if mcmc_samples == 0 || !(0.0..1.0).contains(&tau) {
                return Err(Failure::config("need mcmc_samples >= 1 and tau in [0, 1)"));
            }
            let text = std::fs::read_to_string(&model).map_err(|e| Failure {
                code: 2,
                message: format!("cannot read model {}: {e}", model.display()),
            })?;
            let fitted: BncaModel = serde_json::from_str(&text).map_err(|e| Failure {
                code: 2,
                message: format!("invalid model {}: {e}", model.display()),
            })?;
            let test = dataset::load_csv(&data, has_header)?;
            let eval =
                experiment::evaluate_model(&fitted, &test, mcmc_samples, tau, child_seed(seed, "evaluate", "", 0))?;
            write_json(&eval, out.as_deref())
        }
        Command::SweepNoise { exp, output } => {
            let mut cfg = exp.resolve()?;
            cfg.per_class_sizes.truncate(1);
            let bundle = experiment::run_experiment(&cfg)?;
            warn_nonconverged(&bundle);
            emit(&bundle, &output)
        }
        Command::SweepSize { exp, output } => {
            let mut cfg = exp.resolve()?;
            cfg.noise_levels.truncate(1);
            let bundle = experiment::run_experiment(&cfg)?;
            warn_nonconverged(&bundle);
            emit(&bundle, &output)
        }
        Command::Report { input, output } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Failure {
                code: 2,
                message: format!("cannot read {}: {e}", input.display()),
            })?;
            let bundle: ReportBundle = serde_json::from_str(&text).map_err(|e| Failure {
                code: 2,
                message: format!("invalid report {}: {e}", input.display()),
            })?;
            emit(&bundle, &output)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
