//! `dualkey` — command-line front end for the backdoor pipeline. Every
//! subcommand maps onto one library stage; flags only gather a config and
//! dispatch, so scripted runs and integration tests share identical code.

use anyhow::Result;
use clap::{Parser, Subcommand};
use dualkey_cli::config::{default_config_text, ExperimentConfig};
use dualkey_cli::stages::{self, Paths};
use dualkey_cli::{sweep, zoo};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "dualkey",
    about = "Dual-key multimodal backdoor laboratory: synthetic VQA pipeline, \
             attack sweeps, and the weight-histogram defense",
    version
)]
struct Cli {
    /// Experiment config file (key=value lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory root (overrides out.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Trial seeds, comma-separated (overrides trials.seeds).
    #[arg(long, global = true)]
    seed_list: Option<String>,

    /// Worker threads for sweep cells (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Config overrides, repeatable: --set section.key=value
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config with all recognized keys.
    PrintConfig,
    /// Build the clean train/validation splits.
    GenData,
    /// Pretrain and freeze the detector backbone.
    TrainDetector,
    /// Rank semantic target candidates inside the frequency band.
    SelectTargets,
    /// Build the visual trigger (solid, crop, or detector-optimized).
    OptimizePatch,
    /// Poison the training split for each trial seed.
    ComposePoison,
    /// Train answering models for each trial seed.
    TrainVqa {
        /// Train the clean baseline instead of the poisoned pipeline.
        #[arg(long)]
        clean: bool,
    },
    /// Score stored models: clean/trojan accuracy, ASR, I-ASR, Q-ASR.
    Evaluate {
        /// Evaluate the clean baseline models.
        #[arg(long)]
        clean: bool,
    },
    /// Run the declared grid (style x rate x scale x position x mode).
    Sweep,
    /// Train the model zoo and score the weight-histogram detector.
    Defense,
    /// Export per-region attention weights for inspection.
    AttentionDump {
        /// Number of validation items to export.
        #[arg(long, default_value_t = 16)]
        items: usize,
        /// Trial seed selecting the model.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.set(&format!("out.dir={}", out.display()))?;
    }
    if let Some(seeds) = &cli.seed_list {
        cfg.set(&format!("trials.seeds={seeds}"))?;
    }
    for assignment in &cli.sets {
        cfg.set(assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if matches!(cli.command, Command::PrintConfig) {
        print!("{}", default_config_text());
        return Ok(());
    }
    let cfg = effective_config(&cli)?;
    let paths = Paths::new(&PathBuf::from(cfg.get("out.dir")));
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let seeds = cfg.seed_list()?;

    match cli.command {
        Command::PrintConfig => unreachable!("handled above"),
        Command::GenData => {
            stages::gen_data(&cfg, &paths)?;
        }
        Command::TrainDetector => {
            stages::train_detector(&cfg, &paths)?;
        }
        Command::SelectTargets => {
            stages::select_targets(&cfg, &paths)?;
        }
        Command::OptimizePatch => {
            stages::optimize_patch_stage(&cfg, &paths)?;
        }
        Command::ComposePoison => {
            for &seed in &seeds {
                stages::compose_poison(&cfg, &paths, seed)?;
            }
        }
        Command::TrainVqa { clean } => {
            for &seed in &seeds {
                stages::train_vqa_stage(&cfg, &paths, seed, !clean)?;
            }
        }
        Command::Evaluate { clean } => {
            for &seed in &seeds {
                stages::evaluate_stage(&cfg, &paths, seed, !clean)?;
            }
        }
        Command::Sweep => {
            sweep::run_sweep(&cfg, &paths, jobs)?;
        }
        Command::Defense => {
            zoo::run_defense(&cfg, &paths)?;
        }
        Command::AttentionDump { items, seed } => {
            stages::attention_dump(&cfg, &paths, seed, items)?;
        }
    }
    Ok(())
}

// Integration coverage lives in tests/: config diagnostics, stage
// idempotence, the smoke sweep, and the acceptance suite all drive the
// library entry points this binary wraps.
#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_internally_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_stack_in_order_file_then_flags() {
        let cli = Cli::parse_from([
            "dualkey",
            "--seed-list",
            "5,6",
            "--set",
            "vqa.epochs=3",
            "--set",
            "vqa.epochs=4",
            "--out",
            "elsewhere",
            "gen-data",
        ]);
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.get("trials.seeds"), "5,6");
        assert_eq!(cfg.get("vqa.epochs"), "4");
        assert_eq!(cfg.get("out.dir"), "elsewhere");
    }

    #[test]
    fn bad_override_is_rejected_with_key_name() {
        let cli = Cli::parse_from(["dualkey", "--set", "vqa.epochsss=3", "gen-data"]);
        let err = effective_config(&cli).unwrap_err();
        assert!(err.to_string().contains("vqa.epochsss"), "{err}");
    }
}
