use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tilscore_core::foreground::FesiParams;
use tilscore_core::milnet::HyperParams;
use tilscore_core::survstats::CovariateSpec;
use tilscore_core::SynthConfig;

#[derive(Parser, Debug, Serialize)]
#[command(name = "tilscore", version, about = "Stromal TILs scoring pipeline")]
pub struct Cli {
    /// Seed for every random stream; overrides seeds in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// JSON file with `hyper`, `synth`, `fesi` and `covariates` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// k folds of whole groups
    Kfold,
    /// one fold per cohort
    Loco,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Centre,
    Cohort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Median,
    Cutoffs,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "snake_case", tag = "subcommand")]
pub enum Command {
    /// Foreground mask and tile manifest for a PPM slide raster.
    Tile {
        #[arg(long)]
        image: PathBuf,
        /// Microns per pixel of the raster.
        #[arg(long)]
        mpp: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic cohort: bag files plus a clinical table.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one champion per fold and save them as an ensemble.
    Train {
        #[arg(long)]
        bags: PathBuf,
        #[arg(long)]
        clinical: PathBuf,
        #[arg(long, value_enum, default_value_t = PlanKind::Kfold)]
        plan: PlanKind,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Group::Centre)]
        group: Group,
        /// Independent restarts per fold; the champion is picked among them.
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        /// Train only these folds.
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score bags with one or more checkpoints (files or ensemble directories).
    Predict {
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        bags: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Agreement, ranking and calibration panel against pathologist scores.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        clinical: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 30.0, 50.0, 75.0])]
        cutoffs: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cox models, proportional-hazards test and Kaplan-Meier groups.
    Survival {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        clinical: PathBuf,
        /// Predictions whose range normalizes the scores; defaults to the
        /// scored set itself.
        #[arg(long)]
        train_predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Median)]
        split: Split,
        /// Percent cutoffs used with `--split cutoffs`.
        #[arg(long, value_delimiter = ',', default_values_t = vec![30.0, 75.0])]
        cutoffs: Vec<f64>,
        /// Numeric covariate as `name` or `name=scale`.
        #[arg(long)]
        numeric: Vec<String>,
        /// Factor covariate as `name` or `name=reference`.
        #[arg(long)]
        factor: Vec<String>,
        /// Leave the model score out of the Cox models.
        #[arg(long)]
        no_score: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention and score heatmaps of one bag.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bag: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub hyper: HyperParams,
    pub synth: SynthConfig,
    pub fesi: FesiParams,
    pub covariates: Vec<CovariateSpec>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).map_err(tilscore_core::Error::from).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.hyper.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }
}

/// Effective configuration written next to every output.
#[derive(Debug, Serialize)]
pub struct ConfigEcho<'a> {
    pub tool_version: &'static str,
    pub seed: u64,
    pub workers: usize,
    pub command: &'a Command,
    pub config: &'a FileConfig,
}

pub const CONFIG_ECHO: &str = "config.json";

pub fn write_echo(dir: &Path, cli: &Cli, seed: u64, config: &FileConfig) -> anyhow::Result<()> {
    let echo = ConfigEcho {
        tool_version: env!("CARGO_PKG_VERSION"),
        seed,
        workers: cli.workers,
        command: &cli.command,
        config,
    };
    std::fs::write(dir.join(CONFIG_ECHO), serde_json::to_string_pretty(&echo)? + "\n")?;
    Ok(())
}
