//! Benchmark harness CLI: reproducible generation, rollouts, evaluation, and
//! planning runs.
//!
//! Every command is deterministic given its config and seeds; rerunning a
//! command reproduces its outputs byte for byte. Failures exit nonzero with
//! a machine-readable JSON error record on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use commands::{
    cmd_eval, cmd_generate, cmd_plan, cmd_rollout, parse_mode, parse_modes, parse_predictor,
    parse_seed_range,
};
use config::BenchConfig;

#[derive(Parser)]
#[command(
    name = "dsr-bench",
    about = "Volumetric pushing benchmark: generate episodes, roll out the scene representation, evaluate, and plan pushes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override individual keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Objects per scene (overrides config).
    #[arg(long)]
    objects: Option<usize>,
    /// Interaction steps per episode (overrides config).
    #[arg(long)]
    steps: Option<usize>,
    /// Shape family: cubes | mixed (overrides config).
    #[arg(long)]
    family: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<BenchConfig> {
        let mut cfg = BenchConfig::load(self.config.as_deref())?;
        if let Some(n) = self.objects {
            cfg.dataset.n_objects = n;
        }
        if let Some(n) = self.steps {
            cfg.dataset.n_steps = n;
        }
        if let Some(f) = &self.family {
            cfg.dataset.family = match f.as_str() {
                "cubes" => dsr_core::sim::ShapeFamily::Cubes,
                "mixed" => dsr_core::sim::ShapeFamily::Mixed,
                other => anyhow::bail!("unknown family {other} (expected cubes|mixed)"),
            };
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic episode dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Seed range `a..b` (half-open) or a single seed.
        #[arg(long, default_value = "0..10")]
        seed_range: String,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll the scene representation over a dataset in one mode.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (from `generate`).
        #[arg(long)]
        data: PathBuf,
        /// Aggregation mode: dsr | nowarp | singlestep | gtwarp.
        #[arg(long, default_value = "dsr")]
        mode: String,
        /// Motion predictor: oracle | kinematic.
        #[arg(long, default_value = "kinematic")]
        predictor: String,
        /// Output directory for metrics (and optional state dumps).
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-step state volumes and sidecars.
        #[arg(long)]
        dump_states: bool,
    },
    /// Roll out several modes and write a comparison summary.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated modes to compare.
        #[arg(long, default_value = "gtwarp,dsr,nowarp,singlestep")]
        modes: String,
        #[arg(long, default_value = "kinematic")]
        predictor: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan pushes toward a simulator-collected target state.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Seed for the initial scene.
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        /// Policy pushes used to collect the target configuration.
        #[arg(long, default_value_t = 3)]
        target_pushes: usize,
        #[arg(long, default_value = "oracle")]
        predictor: String,
        /// Replan after every executed action (MPC) instead of open loop.
        #[arg(long)]
        replan: bool,
        /// Also run the uniform-random-action baseline.
        #[arg(long)]
        baseline: bool,
        /// Report path (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ErrorRecord {
    schema_version: u32,
    status: &'static str,
    message: String,
    chain: Vec<String>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            common,
            seed_range,
            out,
        } => {
            let cfg = common.resolve()?;
            let seeds = parse_seed_range(&seed_range)?;
            cmd_generate(&cfg, &seeds, &out)?;
        }
        Command::Rollout {
            common,
            data,
            mode,
            predictor,
            out,
            dump_states,
        } => {
            let cfg = common.resolve()?;
            cmd_rollout(
                &cfg,
                &data,
                parse_mode(&mode)?,
                parse_predictor(&predictor)?,
                &out,
                dump_states,
            )?;
        }
        Command::Eval {
            common,
            data,
            modes,
            predictor,
            out,
        } => {
            let cfg = common.resolve()?;
            cmd_eval(
                &cfg,
                &data,
                &parse_modes(&modes)?,
                parse_predictor(&predictor)?,
                &out,
            )?;
        }
        Command::Plan {
            common,
            scene_seed,
            target_pushes,
            predictor,
            replan,
            baseline,
            out,
        } => {
            let cfg = common.resolve()?;
            cmd_plan(
                &cfg,
                scene_seed,
                target_pushes,
                parse_predictor(&predictor)?,
                replan,
                baseline,
                out.as_deref(),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = ErrorRecord {
                schema_version: dsr_core::SCHEMA_VERSION,
                status: "error",
                message: err.to_string(),
                chain: err.chain().skip(1).map(|c| c.to_string()).collect(),
            };
            eprintln!(
                "{}",
                serde_json::to_string(&record)
                    .unwrap_or_else(|_| format!("{{\"status\":\"error\",\"message\":{:?}}}", err.to_string()))
            );
            ExitCode::FAILURE
        }
    }
}
