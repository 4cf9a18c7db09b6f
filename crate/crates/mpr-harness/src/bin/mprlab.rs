//! Experiment CLI. Exit codes: 0 success, 2 configuration error,
//! 3 numeric error.

use clap::{Parser, Subcommand};
use mpr_core::error::CoreError;
use mpr_core::reward::ProviderKind;
use mpr_harness::{commands, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mprlab", about = "Motion-prediction reward laboratory")]
struct Cli {
    /// Path to the experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override config values: --set key.path=value (repeatable).
    #[arg(long = "set", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a demonstration corpus from the [corpus] section.
    GenDemos,
    /// Train the motion predictor on a human corpus.
    TrainPredictor {
        /// Corpus file (default: <output_dir>/corpus_human.jsonl).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Generate robot demos and train the behavior-cloned base policy.
    TrainBc,
    /// Label a corpus with the configured reward provider.
    Label {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// One seeded residual-RL run with the configured provider.
    TrainRl {
        /// Seed index within the experiment (default 0).
        #[arg(long, default_value_t = 0)]
        run_seed: u64,
    },
    /// Evaluate the final checkpoint of a run (or the base policy).
    Evaluate {
        /// Run directory containing actor.ckpt; omit for the base policy.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Train every provider x seed combination and aggregate results.
    Compare {
        /// Comma-separated provider list.
        #[arg(long, default_value = "mpr,temporal_distance,sparse,privileged_dense")]
        providers: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Parallel worker jobs.
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
    /// Masking ablation: reward-noise comparison, optional RL runs.
    AblateNomask {
        /// Seeds for the RL comparison (0 skips RL).
        #[arg(long, default_value_t = 0)]
        rl_seeds: usize,
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
    /// Hesitation-bias study: paused vs control corpora.
    HesitationStudy,
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Numeric { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.set),
        None => RunConfig::parse("", &cli.set),
    };
    let cfg = match cfg {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };

    let result: Result<(), CoreError> = match cli.command {
        Command::GenDemos => commands::cmd_gen_demos(&cfg).map(|p| {
            println!("wrote {}", p.display());
        }),
        Command::TrainPredictor { corpus } => {
            commands::cmd_train_predictor(&cfg, corpus.as_deref()).map(|p| {
                println!("wrote {}", p.display());
            })
        }
        Command::TrainBc => commands::cmd_train_bc(&cfg).map(|p| {
            println!("wrote {}", p.display());
        }),
        Command::Label { corpus } => commands::cmd_label(&cfg, &corpus).map(|p| {
            println!("wrote {}", p.display());
        }),
        Command::TrainRl { run_seed } => commands::cmd_train_rl(&cfg, run_seed).map(|p| {
            println!("wrote {}", p.display());
        }),
        Command::Evaluate { run } => commands::cmd_evaluate(&cfg, run.as_deref()).map(|r| {
            println!("success_rate {:.2} over {} episodes", r.success_rate, r.episodes);
        }),
        Command::Compare {
            providers,
            seeds,
            workers,
        } => providers
            .split(',')
            .map(|s| ProviderKind::parse(s.trim()))
            .collect::<Result<Vec<_>, _>>()
            .and_then(|kinds| commands::cmd_compare(&cfg, &kinds, seeds, workers))
            .map(|report| {
                for p in &report.providers {
                    println!(
                        "{}: median final {:.2} (best {:.2}) over {} seeds",
                        p.provider, p.median_final, p.median_best, report.seeds_per_provider
                    );
                }
            }),
        Command::AblateNomask { rl_seeds, workers } => {
            commands::cmd_ablate_nomask(&cfg, rl_seeds, workers).map(|r| {
                println!(
                    "reward std masked {:.4} vs unmasked {:.4}",
                    r.masked_reward_std, r.unmasked_reward_std
                );
            })
        }
        Command::HesitationStudy => commands::cmd_hesitation_study(&cfg, None).map(|r| {
            println!(
                "value gap {:.4}, pre-pause reward diff {:.2e}",
                r.value_gap, r.mpr_max_pre_pause_diff
            );
        }),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
