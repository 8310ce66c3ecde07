mod commands;
mod config;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mahavar::synthetic_bench::{OodKind, SyntheticSpec};
use mahavar::{Error, Result};

use commands::EtfArgs;
use config::{CommonArgs, RunConfig};

#[derive(Parser)]
#[command(name = "mahavar", version, about = "Class-wise Mahalanobis variance OOD detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit class means and tied covariance on the training split.
    Fit(CommonArgs),
    /// Score splits and write one score vector per split.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        /// Splits to score (default: test ID and test OOD splits).
        #[arg(long, value_delimiter = ',')]
        split: Vec<String>,
    },
    /// AUROC and FPR@95 per OOD test split, plus the average.
    Eval(CommonArgs),
    /// Grid search for α on the validation splits.
    TuneAlpha {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated α values (default: the built-in 26-point grid).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Numerical checks of the ETF variance results on random geometries.
    EtfVerify {
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long, default_value_t = 1_000)]
        identity_draws: usize,
        #[arg(long, default_value_t = 1_000)]
        separation_draws: usize,
        /// ID points checked per separation draw.
        #[arg(long, default_value_t = 8)]
        id_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out", default_value = "out")]
        output_dir: PathBuf,
    },
    /// Sorted-distance profiles and variance histograms as CSV.
    Diagnostics {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
    /// Write a synthetic ETF benchmark as a manifest plus tensor files.
    GenSynthetic(GenArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// JSON synthetic spec; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    within_class_std: Option<f64>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// orthogonal_subspace | shifted_gaussian | uniform_shell | near_ood_interpolated
    #[arg(long)]
    ood_kind: Option<OodKind>,
    #[arg(long)]
    ood_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl GenArgs {
    fn resolve(&self) -> Result<SyntheticSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|source| Error::Json {
                    path: path.clone(),
                    source,
                })?
            }
            None => SyntheticSpec::default(),
        };
        macro_rules! take {
            ($($field:ident <- $flag:ident),*) => {
                $(if let Some(v) = self.$flag { spec.$field = v; })*
            };
        }
        take!(
            num_classes <- classes,
            dim <- dim,
            radius <- radius,
            within_class_std <- within_class_std,
            train_per_class <- train_per_class,
            test_per_class <- test_per_class,
            ood_kind <- ood_kind,
            ood_count <- ood_count,
            seed <- seed
        );
        spec.validate()?;
        Ok(spec)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(common) => commands::cmd_fit(&RunConfig::resolve(&common)?),
        Command::Score { common, split } => commands::cmd_score(&RunConfig::resolve(&common)?, &split),
        Command::Eval(common) => commands::cmd_eval(&RunConfig::resolve(&common)?).map(|_| ()),
        Command::TuneAlpha { common, grid } => {
            commands::cmd_tune_alpha(&RunConfig::resolve(&common)?, grid).map(|_| ())
        }
        Command::EtfVerify {
            draws,
            identity_draws,
            separation_draws,
            id_points,
            seed,
            output_dir,
        } => {
            let report = commands::cmd_etf_verify(&EtfArgs {
                draws,
                identity_draws,
                separation_draws,
                id_points,
                seed,
                output_dir,
            })?;
            match report.failures() {
                0 => Ok(()),
                n => Err(Error::Invalid(format!("{n} ETF checks failed"))),
            }
        }
        Command::Diagnostics { common, bins } => commands::cmd_diagnostics(&RunConfig::resolve(&common)?, bins),
        Command::GenSynthetic(args) => commands::cmd_gen_synthetic(&args.resolve()?, &args.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
