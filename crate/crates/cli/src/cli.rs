use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::Preset;

#[derive(Debug, Parser)]
#[command(name = "maglev-dfc", version, about = "Derivative feedback design, model-free training and identification for a two-disk maglev")]
pub struct Cli {
    /// JSON experiment configuration; missing keys take their defaults.
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    /// Ideal simulation on the printed linear model.
    Ideal,
    /// Hardware-like runs on the nonlinear plant.
    Hardware,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Ideal => Preset::Ideal,
            PresetArg::Hardware => Preset::Hardware,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the derivative-feedback Riccati equation and write the optimal gain.
    Design {
        /// Design on an identified model file instead of the configured model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Model-free multi-epoch training from the configured initial gain.
    Train,
    /// DMDc + PEM identification from excited closed-loop runs.
    Identify,
    /// Evaluate gain files on one shared scenario.
    Compare {
        #[arg(required = true)]
        gains: Vec<PathBuf>,
    },
    /// Simulate one closed loop and write the trajectory.
    Simulate {
        /// Gain file; defaults to the configured initial gain.
        #[arg(long)]
        gain: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Design { .. } => "design",
            Command::Train => "train",
            Command::Identify => "identify",
            Command::Compare { .. } => "compare",
            Command::Simulate { .. } => "simulate",
        }
    }
}
