//! `attend`: runs the notification-attendance pipeline stage by stage.
//!
//! Every stage reads files, writes files into `--out`, and records a
//! `<command>.manifest.json` beside them.

mod commands;
mod config;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use attend::pipeline::{ExperimentConfig, ModelKind};
use attend::weighting::WeightScheme;
use clap::{Args, Parser, Subcommand};

use crate::failure::{exit_code, Failure};

#[derive(Parser, Debug)]
#[command(
    name = "attend",
    version,
    about = "Notification attendance prediction from phone event streams"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key-value TOML file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// inv, inv-sqrt, inv-log or uniform.
    #[arg(long, global = true)]
    weighting: Option<WeightScheme>,
    #[arg(long, global = true)]
    seq_len: Option<usize>,
    /// Feed raw encoded samples to the recurrent model.
    #[arg(long, global = true)]
    no_compress: bool,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (events and demographics).
    Generate,
    /// Label every notification post and summarize per category.
    Label(DataArg),
    /// Encode events into sparse samples.
    Encode {
        #[command(flatten)]
        data: DataArg,
        /// Drop one sensor from the encoding.
        #[arg(long)]
        without: Option<attend::events::SensorKind>,
    },
    /// Merge an encoded sample file into compressed samples.
    Compress {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Extract windowed features for every notification.
    Features(DataArg),
    /// Train the boosted-tree model over the configured grid.
    TrainGbt {
        #[command(flatten)]
        data: DataArg,
        /// Feature file; extracted from the dataset when absent.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Train the recurrent model on an event stream.
    TrainRnn {
        #[command(flatten)]
        data: DataArg,
        /// Sample file used as is; encoded from the dataset when absent.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Score a saved model per user and category.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Split whose cells and ROC curves are written.
        #[arg(long, default_value = "test")]
        split: attend::eval::Split,
    },
    /// Retrain without each sensor and report the AUC loss.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "gbt")]
        model: ModelKind,
        /// Comma-separated sensors; all sensors when absent.
        #[arg(long, value_delimiter = ',')]
        units: Vec<attend::events::SensorKind>,
    },
    /// Repeat training over consecutive seeds and summarize.
    Trials {
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated models among gbt, rnn, baseline.
        #[arg(long, value_delimiter = ',', default_value = "gbt,rnn,baseline")]
        models: Vec<ModelKind>,
    },
    /// Category summary and per-feature distributions by outcome.
    Report {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct DataArg {
    /// Dataset directory written by `generate`; generated from the
    /// configuration when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => config::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(w) = self.weighting {
            c.weighting = w;
        }
        if let Some(l) = self.seq_len {
            c.rnn.sequencing.seq_len = l;
        }
        if self.no_compress {
            c.compress = false;
        }
        if let Some(t) = self.trials {
            c.trials = t;
        }
        c.validate().map_err(|e| Failure::InvalidConfig(e.to_string()))?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.common.resolve()?;
    std::fs::create_dir_all(&cli.common.out)?;
    let ctx = commands::Context {
        config,
        out: cli.common.out.clone(),
    };
    match cli.command {
        Command::Generate => ctx.generate(),
        Command::Label(d) => ctx.label(d.data.as_deref()),
        Command::Encode { data, without } => ctx.encode(data.data.as_deref(), without),
        Command::Compress { samples } => ctx.compress(&samples),
        Command::Features(d) => ctx.features(d.data.as_deref()),
        Command::TrainGbt { data, features } => ctx.train_gbt(data.data.as_deref(), features.as_deref()),
        Command::TrainRnn { data, samples } => ctx.train_rnn(data.data.as_deref(), samples.as_deref()),
        Command::Evaluate {
            data,
            model,
            features,
            samples,
            split,
        } => ctx.evaluate(
            data.data.as_deref(),
            &model,
            features.as_deref(),
            samples.as_deref(),
            split,
        ),
        Command::Ablate { data, model, units } => ctx.ablate(data.data.as_deref(), model, &units),
        Command::Trials { data, models } => ctx.trials(data.data.as_deref(), &models),
        Command::Report { data, features } => ctx.report(data.data.as_deref(), features.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
