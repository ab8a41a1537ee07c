//! Deterministic seeded sweeps over the config grid.
//!
//! Every run is fingerprinted by its cell + seed; its PRNG stream is
//! derived by hashing (experiment name, target seed, fingerprint), so
//! no run's draws depend on the sweep composition or execution order.
//! Reruns skip cells whose CSV and summary sidecar already exist and
//! match the config hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelKind, SweepConfig, TargetSpec};
use crate::autodiff::{zero_grads, Graph};
use crate::diagnostics::{summarize, RunRecord, RunSummary};
use crate::error::{Error, Result};
use crate::linalg;
use crate::matrix::Matrix;
use crate::models::{FactorModel, MfModel, OpMfModel};
use crate::optim::{schedule_lr, Optimizer, OptimizerKind, Schedule};
use crate::rng;

/// Relative tolerance for "reached the SVD error" in summaries.
pub const REACHED_TOL: f64 = 0.05;

/// Loss above this marks the run diverged; the prefix is kept.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model_kind: ModelKind,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub cell: Cell,
    pub seed: u64,
    pub fingerprint: String,
}

pub fn fingerprint(cell: &Cell, seed: u64) -> String {
    format!(
        "{}_{}_lr{:e}_h{}_s{}",
        cell.model_kind.as_str(),
        cell.optimizer.as_str(),
        cell.lr,
        cell.hidden,
        seed
    )
}

/// Cross-product of the sweep axes in a fixed order.
pub fn enumerate_runs(config: &SweepConfig) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for &model_kind in &config.model_kinds {
        for &optimizer in &config.optimizers {
            for &lr in &config.lrs {
                for &hidden in &config.hidden_widths {
                    for &seed in &config.seeds {
                        let cell = Cell {
                            model_kind,
                            optimizer,
                            lr,
                            hidden,
                        };
                        let fingerprint = fingerprint(&cell, seed);
                        out.push(RunSpec {
                            cell,
                            seed,
                            fingerprint,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Materializes the target matrix from its seed. All cells of an
/// experiment factor the identical matrix.
pub fn build_target(target: &TargetSpec) -> Result<Matrix> {
    match target {
        TargetSpec::Matrix {
            rows, cols, seed, ..
        } => {
            let mut r = rng::stream(&["target", &seed.to_string()]);
            Ok(Matrix::from_fn(*rows, *cols, |_, _| rng::uniform01(&mut r)))
        }
        TargetSpec::ToyFinetune(_) => Err(Error::Config(
            "toy_finetune targets run through toy_finetune, not sweep".into(),
        )),
    }
}

fn target_seed(config: &SweepConfig) -> u64 {
    match &config.target {
        TargetSpec::Matrix { seed, .. } => *seed,
        TargetSpec::ToyFinetune(spec) => spec.seed,
    }
}

/// Executes one run to completion (bitwise deterministic given the
/// config and spec) and returns its record.
pub fn run_single(config: &SweepConfig, spec: &RunSpec, target: &Matrix) -> Result<RunRecord> {
    let graph = Graph::new();
    let mut model_rng = rng::stream(&[
        "run",
        &config.experiment,
        &target_seed(config).to_string(),
        &spec.fingerprint,
    ]);
    let model: Box<dyn FactorModel> = match spec.cell.model_kind {
        ModelKind::Mf => Box::new(MfModel::new(&graph, target.clone(), config.rank, &mut model_rng)),
        ModelKind::Opmf => Box::new(OpMfModel::new(
            &graph,
            target.clone(),
            config.rank,
            spec.cell.hidden,
            config.latent,
            &mut model_rng,
        )),
    };
    let schedule = Schedule::warmup_linear_decay(config.warmup, config.steps);
    let mut opt = Optimizer::new(spec.cell.optimizer, spec.cell.lr);
    let mut record = RunRecord::new(&spec.fingerprint);
    let params = model.params();

    for t in 0..=config.steps {
        graph.clear_tape();
        zero_grads(&params);
        let (loss, b, a) = model.loss_with_factors()?;
        let loss_val = loss.scalar();
        if !loss_val.is_finite() || loss_val > DIVERGENCE_LIMIT {
            record.mark_diverged();
            break;
        }
        graph.backward(&loss)?;
        let lr = schedule_lr(&schedule, spec.cell.lr, t)?;
        record.record_step(t, lr, loss_val, model.as_ref(), &b.values(), &a.values())?;
        if t < config.steps {
            opt.step(&schedule, &params)?;
        }
    }
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub fingerprint: String,
    pub model_kind: ModelKind,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
    /// CSV path relative to the manifest's directory.
    pub csv: String,
    pub summary: RunSummary,
}

/// Per (model kind, optimizer) digest: the best lr by mean final loss
/// over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindComparison {
    pub model_kind: ModelKind,
    pub optimizer: OptimizerKind,
    pub best_lr: f64,
    pub best_mean_final_loss: f64,
    pub mean_min_loss_at_best_lr: f64,
    pub n_reached: usize,
    pub n_diverged: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub prng_scheme: String,
    pub config: SweepConfig,
    /// Rank-r SVD squared-error baseline (the red line).
    pub svd_error: f64,
    pub condition_number: f64,
    /// Effective rank (sum normalization) of the rank-r truncation.
    pub svd_truncation_eff_rank: f64,
    pub runs: Vec<RunEntry>,
    pub comparisons: Vec<KindComparison>,
    /// Wall time per fingerprint; the only non-deterministic section.
    pub timings_ms: BTreeMap<String, u64>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    fingerprint: String,
    config_hash: String,
    wall_ms: u64,
    summary: RunSummary,
}

/// Everything that must match for a cached run to be reused.
#[derive(Serialize)]
struct RunIdentity<'a> {
    experiment: &'a str,
    target: &'a TargetSpec,
    rank: usize,
    latent: usize,
    steps: u64,
    warmup: u64,
    cell: &'a Cell,
    seed: u64,
}

fn config_hash(config: &SweepConfig, spec: &RunSpec) -> String {
    let id = RunIdentity {
        experiment: &config.experiment,
        target: &config.target,
        rank: config.rank,
        latent: config.latent,
        steps: config.steps,
        warmup: config.warmup,
        cell: &spec.cell,
        seed: spec.seed,
    };
    let json = serde_json::to_string(&id).expect("identity serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    format!("{:x}", h.finalize())
}

fn csv_rel(spec: &RunSpec) -> String {
    format!("runs/{}.csv", spec.fingerprint)
}

fn sidecar_path(out_dir: &Path, spec: &RunSpec) -> PathBuf {
    out_dir.join("runs").join(format!("{}.summary.json", spec.fingerprint))
}

/// Runs every cell of the sweep (parallel up to `config.workers`,
/// run-level parallelism only), writes one CSV per run plus a summary
/// sidecar, and returns the manifest after writing `manifest.json`.
pub fn run_sweep(config: &SweepConfig) -> Result<Manifest> {
    config.validate()?;
    let out_dir = &config.out_dir;
    std::fs::create_dir_all(out_dir.join("runs"))
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    // Fail on an unwritable output dir before any compute.
    let probe = out_dir.join(".write-probe");
    std::fs::write(&probe, b"ok").map_err(|e| Error::io(probe.display().to_string(), e))?;
    std::fs::remove_file(&probe).ok();

    let target = build_target(&config.target)?;
    let dec = linalg::svd(&target)?;
    let svd_error: f64 = dec.s[config.rank..].iter().map(|s| s * s).sum();
    let s_max = dec.s[0];
    let tol = 1e-12 * s_max;
    let s_min = dec.s.iter().skip(1).filter(|&&s| s > tol).cloned().fold(f64::NAN, f64::min);
    let condition_number = if s_min.is_nan() { f64::INFINITY } else { s_max / s_min };
    let svd_truncation_eff_rank = linalg::effective_rank_from_singular_values(
        &dec.s[..config.rank],
        linalg::RankNorm::Sum,
        config.rank,
    )
    .value;

    let specs = enumerate_runs(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let outcomes: Result<Vec<(RunEntry, u64)>> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| execute_or_resume(config, spec, &target, svd_error))
            .collect()
    });
    let outcomes = outcomes?;

    let mut runs = Vec::with_capacity(outcomes.len());
    let mut timings_ms = BTreeMap::new();
    for (entry, wall) in outcomes {
        timings_ms.insert(entry.fingerprint.clone(), wall);
        runs.push(entry);
    }

    let comparisons = compare_kinds(config, &runs);
    let manifest = Manifest {
        experiment: config.experiment.clone(),
        prng_scheme: rng::STREAM_SCHEME.to_string(),
        config: config.clone(),
        svd_error,
        condition_number,
        svd_truncation_eff_rank,
        runs,
        comparisons,
        timings_ms,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn execute_or_resume(
    config: &SweepConfig,
    spec: &RunSpec,
    target: &Matrix,
    svd_error: f64,
) -> Result<(RunEntry, u64)> {
    let hash = config_hash(config, spec);
    let csv_path = config.out_dir.join(csv_rel(spec));
    let side_path = sidecar_path(&config.out_dir, spec);

    if csv_path.exists() && side_path.exists() {
        if let Ok(text) = std::fs::read_to_string(&side_path) {
            if let Ok(side) = serde_json::from_str::<Sidecar>(&text) {
                if side.fingerprint == spec.fingerprint && side.config_hash == hash {
                    let entry = make_entry(spec, side.summary);
                    return Ok((entry, side.wall_ms));
                }
            }
        }
    }

    let start = Instant::now();
    let record = run_single(config, spec, target)?;
    let wall_ms = start.elapsed().as_millis() as u64;
    record.write_csv(&csv_path)?;
    let summary = summarize(&record, svd_error, REACHED_TOL);
    let side = Sidecar {
        fingerprint: spec.fingerprint.clone(),
        config_hash: hash,
        wall_ms,
        summary: summary.clone(),
    };
    std::fs::write(&side_path, serde_json::to_string_pretty(&side)?)
        .map_err(|e| Error::io(side_path.display().to_string(), e))?;
    Ok((make_entry(spec, summary), wall_ms))
}

fn make_entry(spec: &RunSpec, summary: RunSummary) -> RunEntry {
    RunEntry {
        fingerprint: spec.fingerprint.clone(),
        model_kind: spec.cell.model_kind,
        optimizer: spec.cell.optimizer,
        lr: spec.cell.lr,
        hidden: spec.cell.hidden,
        seed: spec.seed,
        csv: csv_rel(spec),
        summary,
    }
}

fn compare_kinds(config: &SweepConfig, runs: &[RunEntry]) -> Vec<KindComparison> {
    let mut out = Vec::new();
    for &model_kind in &config.model_kinds {
        for &optimizer in &config.optimizers {
            let of_kind: Vec<&RunEntry> = runs
                .iter()
                .filter(|r| r.model_kind == model_kind && r.optimizer == optimizer)
                .collect();
            if of_kind.is_empty() {
                continue;
            }
            let mut best: Option<(f64, f64, f64)> = None; // (mean_final, lr, mean_min)
            for &lr in &config.lrs {
                let of_lr: Vec<&&RunEntry> =
                    of_kind.iter().filter(|r| r.lr == lr).collect();
                if of_lr.is_empty() {
                    continue;
                }
                let mean_final = of_lr.iter().map(|r| r.summary.final_loss).sum::<f64>()
                    / of_lr.len() as f64;
                let mean_min = of_lr.iter().map(|r| r.summary.min_loss).sum::<f64>()
                    / of_lr.len() as f64;
                if best.map_or(true, |(bf, _, _)| mean_final < bf) {
                    best = Some((mean_final, lr, mean_min));
                }
            }
            let (best_mean_final_loss, best_lr, mean_min_loss_at_best_lr) =
                best.expect("non-empty lr grid");
            out.push(KindComparison {
                model_kind,
                optimizer,
                best_lr,
                best_mean_final_loss,
                mean_min_loss_at_best_lr,
                n_reached: of_kind.iter().filter(|r| r.summary.reached_svd).count(),
                n_diverged: of_kind.iter().filter(|r| r.summary.diverged).count(),
            });
        }
    }
    out
}

/// Runs exactly one cell+seed by fingerprint (the `run` subcommand).
pub fn run_one_by_fingerprint(config: &SweepConfig, fp: &str) -> Result<RunEntry> {
    config.validate()?;
    let specs = enumerate_runs(config);
    let spec = specs.iter().find(|s| s.fingerprint == fp).ok_or_else(|| {
        let sample: Vec<&str> = specs.iter().take(4).map(|s| s.fingerprint.as_str()).collect();
        Error::Config(format!(
            "no run '{fp}' in this config; first fingerprints: {}",
            sample.join(", ")
        ))
    })?;
    std::fs::create_dir_all(config.out_dir.join("runs"))
        .map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;
    let target = build_target(&config.target)?;
    let dec = linalg::svd(&target)?;
    let svd_error: f64 = dec.s[config.rank..].iter().map(|s| s * s).sum();
    let (entry, _) = execute_or_resume(config, spec, &target, svd_error)?;
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> SweepConfig {
        SweepConfig::from_json(&format!(
            r#"{{
                "experiment": "unit",
                "target": {{"kind": "matrix", "rows": 12, "cols": 12, "dist": "uniform01", "seed": 9}},
                "rank": 3,
                "model_kinds": ["mf", "opmf"],
                "optimizers": ["sgd"],
                "lrs": [0.001, 0.01],
                "hidden_widths": [8],
                "latent": 16,
                "steps": 25,
                "warmup": 5,
                "seeds": [1],
                "workers": 2,
                "out_dir": {:?}
            }}"#,
            dir.to_str().unwrap()
        ))
        .unwrap()
    }

    #[test]
    fn enumeration_counts_cross_product() {
        let dir = std::env::temp_dir().join("oplab-enum");
        let cfg = small_config(&dir);
        assert_eq!(enumerate_runs(&cfg).len(), 4); // 2 kinds x 2 lrs x 1 seed
    }

    #[test]
    fn target_depends_only_on_seed() {
        let a = build_target(&TargetSpec::Matrix {
            rows: 5,
            cols: 7,
            dist: "uniform01".into(),
            seed: 4,
        })
        .unwrap();
        let b = build_target(&TargetSpec::Matrix {
            rows: 5,
            cols: 7,
            dist: "uniform01".into(),
            seed: 4,
        })
        .unwrap();
        assert_eq!(a, b);
        for &v in a.data() {
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn zero_step_run_has_only_step0_row() {
        let dir = std::env::temp_dir().join("oplab-zerostep");
        let mut cfg = small_config(&dir);
        cfg.steps = 0;
        cfg.warmup = 0;
        let target = build_target(&cfg.target).unwrap();
        let spec = &enumerate_runs(&cfg)[0];
        let rec = run_single(&cfg, spec, &target).unwrap();
        assert_eq!(rec.rows.len(), 1);
        assert!((rec.rows[0].loss - target.frob_sq()).abs() < 1e-9);
    }

    #[test]
    fn run_record_length_and_determinism() {
        let dir = std::env::temp_dir().join("oplab-det-unit");
        let cfg = small_config(&dir);
        let target = build_target(&cfg.target).unwrap();
        let spec = enumerate_runs(&cfg)
            .into_iter()
            .find(|s| s.cell.model_kind == ModelKind::Opmf)
            .unwrap();
        let r1 = run_single(&cfg, &spec, &target).unwrap();
        let r2 = run_single(&cfg, &spec, &target).unwrap();
        assert_eq!(r1.rows.len(), 26);
        assert_eq!(r1.rows, r2.rows);
    }

    #[test]
    fn divergent_run_keeps_prefix_and_flag() {
        let dir = std::env::temp_dir().join("oplab-div");
        let mut cfg = small_config(&dir);
        cfg.lrs = vec![1e6]; // hopeless learning rate
        cfg.warmup = 0;
        let target = build_target(&cfg.target).unwrap();
        let spec = enumerate_runs(&cfg)
            .into_iter()
            .find(|s| s.cell.model_kind == ModelKind::Mf)
            .unwrap();
        let rec = run_single(&cfg, &spec, &target).unwrap();
        assert!(rec.diverged);
        assert!(!rec.rows.is_empty());
        assert!(rec.rows.len() < 26);
    }

    #[test]
    fn manifest_svd_error_is_self_consistent() {
        let dir = std::env::temp_dir().join(format!("oplab-sweep-{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let cfg = small_config(&dir);
        let manifest = run_sweep(&cfg).unwrap();
        assert_eq!(manifest.runs.len(), 4);
        let target = build_target(&cfg.target).unwrap();
        let (_, err) = linalg::best_rank_r(&target, cfg.rank).unwrap();
        assert!((manifest.svd_error - err).abs() < 1e-9 * err.max(1.0));
        // 4 CSVs + manifest on disk.
        assert!(dir.join("manifest.json").exists());
        for run in &manifest.runs {
            assert!(dir.join(&run.csv).exists(), "{}", run.csv);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
