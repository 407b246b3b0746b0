use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msg_cli::commands;
use msg_cli::config::{Overrides, RunConfig};
use msg_cli::pipeline::{parse_strategy, parse_weighting};

/// Multi-stream generative policy benchmark.
#[derive(Parser)]
#[command(name = "msg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task name (bimodal-2d | reach | drawer | place).
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (relative paths resolve under $MSG_OUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Composition strategy (ensemble | flow | flow-mcmc).
    #[arg(long)]
    strategy: Option<String>,
    /// Stream weighting (constant | threshold | linear | exponential |
    /// logvar-full | logvar-grouped | particle-full | particle-grouped).
    #[arg(long)]
    weighting: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations for a task.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of demonstrations.
        #[arg(long)]
        demos: Option<usize>,
    },
    /// Train one flow model per (skill, frame) stream.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing checkpoints.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate composition strategies and weightings over seeded episodes.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Run the design-choice ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Reproduce the bimodal composition study.
    Toy {
        #[command(flatten)]
        common: Common,
        /// Composed samples per strategy.
        #[arg(long, default_value_t = 500)]
        samples: usize,
    },
}

fn build_config(common: &Common, demos: Option<usize>) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    let overrides = Overrides {
        task: common.task.clone(),
        seed: common.seed,
        demos,
        strategy: common.strategy.as_deref().map(parse_strategy).transpose()?,
        weighting: common.weighting.as_deref().map(parse_weighting).transpose()?,
        out: common.out.clone(),
    };
    config.apply(&overrides);
    Ok(config)
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen { common, demos } => commands::cmd_gen(&build_config(common, *demos)?),
        Command::Train { common, force } => commands::cmd_train(&build_config(common, None)?, *force),
        Command::Eval { common } => commands::cmd_eval(&build_config(common, None)?),
        Command::Ablate { common } => commands::cmd_ablate(&build_config(common, None)?),
        Command::Toy { common, samples } => {
            let mut config = build_config(common, None)?;
            if common.task.is_none() {
                config.task = "bimodal-2d".into();
            }
            commands::cmd_toy(&config, *samples)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
