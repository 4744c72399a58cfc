mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "trajgmm", version, about = "3-D Gaussian mixture flight-position forecasting")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that builds a run configuration.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set model.dropout=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for independent jobs.
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Model and optimiser flags; each maps onto one configuration field.
#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub conv_layers: Option<usize>,
    #[arg(long)]
    pub traffic_layers: Option<usize>,
    #[arg(long)]
    pub dense_width: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    /// rational, tanh or sigmoid.
    #[arg(long)]
    pub activation: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario and write one dataset per lead time.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        flights: Option<usize>,
        /// Scenario length in minutes.
        #[arg(long)]
        duration: Option<u32>,
        #[arg(long)]
        storms: Option<usize>,
        /// Grid size as HxW, e.g. 32x32.
        #[arg(long)]
        grid: Option<String>,
        /// Typical wind speed in knots.
        #[arg(long)]
        wind: Option<f64>,
        /// Comma-separated lead times in minutes.
        #[arg(long, value_delimiter = ',')]
        lead_times: Option<Vec<u32>>,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model per dataset (a dataset directory or a gen-data root).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// Separate validation dataset; otherwise flights are split.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustive k-fold search over a hyperparameter space.
    GridSearch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// JSON or TOML table mapping field names to candidate lists.
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the predicted mode and mixture for one instance.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Instance index within the dataset.
        #[arg(long)]
        instance: usize,
    },
    /// Aggregate vanilla-gradient saliency over a dataset.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report how many wavelet levels a grid can drop.
    Preprocess {
        /// CSV grid, one row per line.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = trajgmm::preprocess::ENERGY_THRESHOLD)]
        threshold: f64,
        /// Decomposition depth; defaults to the deepest the grid allows.
        #[arg(long)]
        levels: Option<usize>,
        /// Write the compressed grid here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect evaluation reports of several runs into one CSV.
    ExportPlots {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::GenData {
            cfg,
            out,
            flights,
            duration,
            storms,
            grid,
            wind,
            lead_times,
            force,
        } => commands::gen_data(commands::GenDataArgs {
            cfg,
            out,
            flights,
            duration,
            storms,
            grid,
            wind,
            lead_times,
            force,
        }),
        Command::Train {
            cfg,
            model,
            data,
            validation,
            out,
        } => commands::train(&cfg, &model, &data, validation.as_deref(), out),
        Command::GridSearch {
            cfg,
            model,
            data,
            space,
            folds,
            out,
        } => commands::grid_search(&cfg, &model, &data, &space, folds, out),
        Command::Evaluate { ckpt, data, out } => commands::evaluate(&ckpt, &data, out),
        Command::Predict { ckpt, data, instance } => commands::predict(&ckpt, &data, instance),
        Command::Explain { ckpt, data, out } => commands::explain(&ckpt, &data, out),
        Command::Preprocess {
            grid,
            threshold,
            levels,
            out,
        } => commands::preprocess(&grid, threshold, levels, out.as_deref()),
        Command::ExportPlots { runs, out } => commands::export_plots(&runs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            match e.category() {
                "usage" | "config" => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
