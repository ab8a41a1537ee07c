//! End-to-end experiment harness: sweep configuration, deterministic
//! seeded runs, the composite-update verification, the toy fine-tuning
//! proxy, and SVG plotting.

mod appendix;
mod config;
mod finetune;
mod plot;
mod sweep;

pub use appendix::{verify_appendix, AppendixConfig, AppendixReport};
pub use config::{default_lr_grid, ModelKind, SweepConfig, TargetSpec, ToyFinetuneSpec};
pub use finetune::{toy_finetune, FinetuneReport};
pub use plot::{plot_manifest, LogAxis};
pub use sweep::{
    build_target, enumerate_runs, run_one_by_fingerprint, run_single, run_sweep, Cell,
    KindComparison, Manifest, RunEntry, RunSpec, DIVERGENCE_LIMIT, REACHED_TOL,
};
