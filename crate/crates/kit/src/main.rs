use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use ramp_core::geometry::{log_ball_volume, select_key_pair};
use ramp_core::AttackNorm;
use ramp_kit::config::DEFAULT_KEY_PAIR;
use ramp_kit::delta::delta_analysis;
use ramp_kit::run::{evaluate_checkpoint, run_experiment};
use ramp_kit::{emit_figure_data, ExperimentConfig, FigureKind, SEED_ENV};

#[derive(Parser)]
#[command(
    name = "ramp-kit",
    version,
    about = "Train and evaluate multi-norm robust classifiers"
)]
struct Cli {
    /// Overrides run.seed and data.seed of every config.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train according to a config and write the run directory.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the eval split of a config's data.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Estimate the delta-error terms between consecutive checkpoints.
    DeltaAnalysis { run_dir: PathBuf },
    /// Write CSV data for tradeoff_bars, accuracy_curves or error_terms.
    FigureData {
        kind: FigureKind,
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value = "figures")]
        out: PathBuf,
    },
    /// Show the volume-based key pair for a set of radii.
    Keypair {
        eps1: f64,
        eps2: f64,
        epsinf: f64,
        dim: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { config } => {
            let cfg = ExperimentConfig::load(&config, cli.seed)?;
            let out = run_experiment(&cfg)?;
            let r = &out.report;
            println!(
                "{}: clean {:.4}  l1 {:.4}  l2 {:.4}  linf {:.4}  union {:.4}",
                out.run_dir.display(),
                r.clean_acc,
                r.acc(AttackNorm::L1),
                r.acc(AttackNorm::L2),
                r.acc(AttackNorm::Linf),
                r.union_acc
            );
        }
        Cmd::Eval { checkpoint, config } => {
            let cfg = ExperimentConfig::load(&config, cli.seed)?;
            println!("{}", evaluate_checkpoint(&checkpoint, &cfg)?.to_json_line());
        }
        Cmd::DeltaAnalysis { run_dir } => {
            for row in delta_analysis(&run_dir)? {
                println!(
                    "epoch {:4}  variance {:.3e}  bias {:.3e}  tau_bar {:.4}  predicted_diff {:.3e}",
                    row.epoch, row.variance, row.bias, row.tau_bar, row.predicted_diff
                );
            }
        }
        Cmd::FigureData { kind, run_dirs, out } => {
            for p in emit_figure_data(kind, &run_dirs, &out)? {
                println!("{}", p.display());
            }
        }
        Cmd::Keypair {
            eps1,
            eps2,
            epsinf,
            dim,
        } => {
            let pair = select_key_pair(eps1, eps2, epsinf, dim, None);
            for (norm, eps) in [
                (AttackNorm::L1, eps1),
                (AttackNorm::L2, eps2),
                (AttackNorm::Linf, epsinf),
            ] {
                println!("log-volume {norm:>4}: {:.4}", log_ball_volume(norm, dim, eps));
            }
            println!("heuristic pair: {pair}");
            println!("shipped default: {DEFAULT_KEY_PAIR}");
        }
    }
    Ok(())
}
