use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use planting_cli::config::PRESETS;
use planting_cli::{report, BaselineLoss, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "planting", version, about = "Channel planting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config in TOML.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: cifar10, cifar100, stl10 or synthetic.
    #[arg(long)]
    preset: Option<String>,
    /// Directory with the dataset's binary files.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Shrink epochs and split sizes by this factor in (0, 1].
    #[arg(long)]
    scale: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => anyhow::bail!(
                "pass --config PATH or --preset NAME ({})",
                PRESETS.join(", ")
            ),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(trials) = self.trials {
            config.trials = trials;
        }
        if let Some(dir) = &self.dataset_dir {
            config.dataset.dir = Some(dir.clone());
        }
        if let Some(scale) = self.scale {
            config = config.scaled(scale)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn open(&self) -> Result<Experiment> {
        Experiment::open(self.resolve()?, &self.out)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Kd,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher network with cross-entropy.
    TrainTeacher(Common),
    /// Train the small initial network with cross-entropy.
    TrainInitial(Common),
    /// Train fixed-width students.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        /// Conv width; repeat for several. Defaults to the configured list.
        #[arg(long)]
        width: Vec<usize>,
        /// Defaults to both.
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// Grow the initial network by planting channels.
    Plant(Common),
    /// Average all result rows under --out over trials.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Print the resolved config as TOML.
    ShowConfig(Common),
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainTeacher(c) => c.open()?.train_teacher(),
        Command::TrainInitial(c) => c.open()?.train_initial(),
        Command::TrainBaseline {
            common,
            width,
            loss,
        } => {
            let losses = match loss {
                Some(LossArg::Ce) => vec![BaselineLoss::CrossEntropy],
                Some(LossArg::Kd) => vec![BaselineLoss::Distill],
                None => vec![BaselineLoss::CrossEntropy, BaselineLoss::Distill],
            };
            let widths = (!width.is_empty()).then_some(width.as_slice());
            common.open()?.train_baseline(widths, &losses)
        }
        Command::Plant(c) => c.open()?.plant(),
        Command::Report { out } => {
            let text = report(&out).with_context(|| format!("reporting on {}", out.display()))?;
            print!("{text}");
            Ok(())
        }
        Command::ShowConfig(c) => {
            print!("{}", c.resolve()?.to_toml()?);
            Ok(())
        }
    }
}
