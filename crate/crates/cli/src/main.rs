mod commands;
mod config;
mod error;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::source::Source;

/// Analytic moment propagation, AP2/BN/WN normalization and training of small networks.
///
/// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure,
/// 5 verification failure.
#[derive(Debug, Parser)]
#[command(name = "apnorm", version)]
struct Cli {
    /// Plain-text `key = value` file supplying flags not given on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the analytic per-layer, per-channel (mean, variance) of a model.
    Stats(StatsArgs),
    /// Train a preset network and write its curves and final model.
    Train(TrainArgs),
    /// Introduce or strip normalization layers of a saved model.
    Convert(ConvertArgs),
    /// Tabulate the output moments of a nonlinearity against the input mean.
    MomentsPlot(MomentsPlotArgs),
    /// Run the built-in verification suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Model directory.
    model: PathBuf,
    /// Take the input statistics from this dataset.
    #[arg(long, value_name = "SOURCE", conflicts_with = "standard_input_stats")]
    data: Option<Source>,
    /// Use zero-mean, unit-variance input statistics.
    #[arg(long)]
    standard_input_stats: bool,
    /// Variance of additive input noise included in the dataset statistics.
    #[arg(long, default_value_t = 0.0, value_name = "VAR")]
    noise: f64,
    /// Use only the first N examples of the dataset.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Also write the table as CSV.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    #[value(name = "mnist_mlp", alias = "mnist-mlp")]
    MnistMlp,
    #[value(name = "cifar_cnn", alias = "cifar-cnn")]
    CifarCnn,
    /// Fully connected network sized to the dataset; see --hidden.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HiddenActivation {
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Init {
    Normal,
    Orthonormal,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "mnist_mlp")]
    preset: Preset,
    /// Hidden widths of the `mlp` preset.
    #[arg(long, value_delimiter = ',', default_value = "20,20")]
    hidden: Vec<usize>,
    /// Hidden nonlinearity of the `mlp` preset.
    #[arg(long, value_enum, default_value = "sigmoid")]
    activation: HiddenActivation,
    #[arg(long, value_enum, default_value = "normal")]
    weight_init: Init,
    /// Normalization used during training: none, bn, wn or ap2.
    #[arg(long, default_value = "none")]
    norm: apnorm::layers::NormMode,
    /// Initialization protocol: none, bn or ap2.
    #[arg(long, default_value = "none")]
    init: apnorm::optim::InitProtocol,
    /// Training set.
    #[arg(long, value_name = "SOURCE")]
    data: Source,
    /// Validation set, evaluated after every epoch.
    #[arg(long, value_name = "SOURCE")]
    validation: Option<Source>,
    /// Use only the first N training examples.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Variance of Gaussian noise added to every training input.
    #[arg(long, default_value_t = 0.0, value_name = "VAR")]
    noise: f64,
    /// Random translations of up to this many pixels.
    #[arg(long, default_value_t = 0)]
    offset_range: usize,
    /// Random horizontal flips.
    #[arg(long)]
    hflip: bool,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Initial learning rate, decayed by 0.96 per epoch.
    #[arg(long, default_value_t = 1e-3, conflicts_with = "lr_search")]
    lr: f64,
    /// Choose the learning rate by Brent search over log10(lr) in [-6, -2].
    #[arg(long)]
    lr_search: bool,
    /// Treat normalization statistics as constants in the backward pass.
    #[arg(long)]
    detach_stats: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for CSV files and the trained model.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Direction {
    Normalized,
    Unnormalized,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// Model directory.
    model: PathBuf,
    #[arg(long, value_enum)]
    to: Direction,
    /// Normalization to introduce: bn, wn or ap2.
    #[arg(long)]
    mode: Option<apnorm::layers::NormMode>,
    /// equivalence, projecting, or bn-style (projecting with U[0,1) scales).
    #[arg(long, default_value = "equivalence")]
    init: apnorm::layers::InitMode,
    /// Conversion batch; required whenever BN statistics are involved.
    #[arg(long, value_name = "SOURCE")]
    batch: Option<Source>,
    /// Number of examples taken from --batch.
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Nonlinearity {
    Relu,
    Sigmoid,
    Lrelu,
}

#[derive(Debug, Args)]
struct MomentsPlotArgs {
    #[arg(long, value_enum, default_value = "relu")]
    nonlinearity: Nonlinearity,
    /// Negative slope of lrelu.
    #[arg(long, default_value_t = 0.01)]
    slope: f64,
    /// Input standard deviation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Input mean range, `LO..HI`.
    #[arg(long, default_value = "-6..6", allow_hyphen_values = true)]
    range: String,
    #[arg(long, default_value_t = 121)]
    points: usize,
    /// Output CSV (stdout when omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Suites to run (all when omitted): moments, gradients, invariances.
    #[arg(long)]
    suite: Vec<apnorm::verify::Suite>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte-Carlo samples per grid point of the moments suite.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let args = match config::merge(&Cli::command(), args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    let result = match cli.command {
        Command::Stats(a) => commands::stats(a),
        Command::Train(a) => commands::train(a),
        Command::Convert(a) => commands::convert(a),
        Command::MomentsPlot(a) => commands::moments_plot(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
