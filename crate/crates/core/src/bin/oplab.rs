//! Experiment CLI: sweeps, single runs, the composite-update
//! verification, the toy fine-tuning proxy, plotting, and adapter
//! export.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 verification failure
//! (`verify-appendix` with out-of-band ratios).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use oplab::harness::{
    plot_manifest, run_sweep, toy_finetune, verify_appendix, AppendixConfig, SweepConfig,
};
use oplab::models::{read_adapter_export, write_adapter_export, AdapterLayer, AdapterState};
use oplab::Graph;

#[derive(Parser)]
#[command(name = "oplab", version, about = "Overparameterized low-rank adaptation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of a sweep config and write CSVs + manifest.
    Sweep { config: PathBuf },
    /// Run a single cell+seed from a sweep config by fingerprint.
    Run {
        config: PathBuf,
        #[arg(long)]
        cell: String,
    },
    /// Check the composite-update expansion on an eta-halving ladder.
    VerifyAppendix {
        /// Optional JSON file overriding the default check config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pre-train, freeze, and fine-tune adapters on a shifted task.
    ToyFinetune { config: PathBuf },
    /// Render SVG panels from a sweep manifest.
    Plot { manifest: PathBuf },
    /// Collapse a trained adapter state into a plain (A, B[, m]) export.
    ExportAdapter { run: PathBuf, path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code for usage errors is 2; this tool
            // reserves 2 for verification failures.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Sweep { config } => {
            let cfg = SweepConfig::load(&config)?;
            let manifest = run_sweep(&cfg)?;
            println!(
                "sweep '{}': {} runs, svd_error={:.6}, condition_number={:.3e}",
                manifest.experiment,
                manifest.runs.len(),
                manifest.svd_error,
                manifest.condition_number
            );
            for c in &manifest.comparisons {
                println!(
                    "  {}/{}: best lr {:e} -> mean final loss {:.6} ({} reached svd, {} diverged)",
                    c.model_kind.as_str(),
                    c.optimizer.as_str(),
                    c.best_lr,
                    c.best_mean_final_loss,
                    c.n_reached,
                    c.n_diverged
                );
            }
            println!("manifest: {}", cfg.out_dir.join("manifest.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, cell } => {
            let cfg = SweepConfig::load(&config)?;
            let entry = oplab::harness::run_one_by_fingerprint(&cfg, &cell)?;
            println!("{}", serde_json::to_string_pretty(&entry)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyAppendix { config } => {
            let cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<AppendixConfig>(&text)?
                }
                None => AppendixConfig::default(),
            };
            let report = verify_appendix(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            for (i, r) in report.ratios.iter().enumerate() {
                println!(
                    "ladder {} -> {}: ratio {:.4} (band [{}, {}])",
                    report.eta_ladder[i],
                    report.eta_ladder[i + 1],
                    r,
                    report.band.0,
                    report.band.1
                );
            }
            if report.pass {
                println!("verify-appendix: PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verify-appendix: FAIL");
                Ok(ExitCode::from(2))
            }
        }
        Command::ToyFinetune { config } => {
            let cfg = SweepConfig::load(&config)?;
            let report = toy_finetune(&cfg)?;
            println!(
                "baseline train loss {:.6}, eval {:.6}",
                report.baseline_train_loss, report.baseline_eval_loss
            );
            for v in &report.variants {
                println!(
                    "  {:<11} best lr {:e} -> final {:.6} (eval {:.6}, merge diff {:.2e})",
                    v.variant.as_str(),
                    v.best_lr,
                    v.best_mean_final_loss,
                    v.eval_loss_at_best_lr,
                    v.merge_max_abs_diff
                );
            }
            println!(
                "op_lora vs plain_lora gap: {:+.6} ({})",
                report.op_vs_plain_lora_gap,
                if report.op_lora_not_worse { "op not worse" } else { "op worse" }
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { manifest } => {
            let files = plot_manifest(&manifest)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportAdapter { run, path } => {
            let text = std::fs::read_to_string(&run)
                .with_context(|| format!("reading adapter state {}", run.display()))?;
            let state: AdapterState = serde_json::from_str(&text)?;
            let graph = Graph::new();
            let layer = AdapterLayer::from_state(&graph, &state)?;
            write_adapter_export(&path, &layer.export()?)?;
            let back = read_adapter_export(&path)?;
            println!(
                "exported {} arrays (rank {}, alpha {}) to {}",
                back.arrays.len(),
                back.rank,
                back.alpha,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
