//! Desk-scale fine-tuning proxy: pre-train a small dense net on a
//! seeded task, freeze it, plant a low-rank shift in the teacher's
//! first layer, and fine-tune each adapter variant on the shifted
//! task over an lr grid and several seeds.

use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{SweepConfig, TargetSpec, ToyFinetuneSpec};
use crate::autodiff::{zero_grads, Graph, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{write_adapter_export, AdapterLayer, AdapterVariant};
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::rng;

/// Teacher/student parameters as plain values.
#[derive(Clone)]
struct NetParams {
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

impl NetParams {
    fn seeded(spec: &ToyFinetuneSpec, r: &mut ChaCha8Rng) -> Self {
        let (i, h, o) = (spec.in_dim, spec.hidden_dim, spec.out_dim);
        NetParams {
            w1: Matrix::from_fn(h, i, |_, _| rng::normal(r) / (i as f64).sqrt()),
            b1: Matrix::from_fn(h, 1, |_, _| 0.1 * rng::normal(r)),
            w2: Matrix::from_fn(o, h, |_, _| rng::normal(r) / (h as f64).sqrt()),
            b2: Matrix::from_fn(o, 1, |_, _| 0.1 * rng::normal(r)),
        }
    }

    /// Dense forward on values: w2 * relu(w1 x + b1) + b2.
    fn forward(&self, x: &Matrix) -> Matrix {
        let cols = x.cols();
        let mut h = self.w1.matmul(x).expect("w1 x");
        for j in 0..cols {
            for i in 0..h.rows() {
                let v = h.get(i, j) + self.b1.get(i, 0);
                h.set(i, j, v.max(0.0));
            }
        }
        let mut out = self.w2.matmul(&h).expect("w2 h");
        for j in 0..cols {
            for i in 0..out.rows() {
                let v = out.get(i, j) + self.b2.get(i, 0);
                out.set(i, j, v);
            }
        }
        out
    }
}

/// Inputs with anisotropic rows (row i scaled by 1/(1+i)) so the
/// fine-tuning landscape is poorly conditioned, the regime the
/// adapters are meant to be studied in.
fn sample_inputs(spec: &ToyFinetuneSpec, n: usize, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(spec.in_dim, n, |i, _| rng::normal(r) / (1.0 + i as f64))
}

/// 0.5 * ||pred - y||_F^2 / batch.
fn batch_loss(g: &Graph, pred: &Tensor, y: &Tensor) -> Result<Tensor> {
    let diff = g.sub(pred, y)?;
    let sq = g.frobenius_sq(&diff);
    Ok(g.scalar_mul(&sq, 0.5 / pred.cols() as f64))
}

fn values_loss(pred: &Matrix, y: &Matrix) -> f64 {
    0.5 * pred.sub(y).expect("shapes").frob_sq() / pred.cols() as f64
}

/// Pre-trains a student net on (x, y); returns the trained values and
/// the final loss.
fn pretrain(
    spec: &ToyFinetuneSpec,
    x: &Matrix,
    y: &Matrix,
    r: &mut ChaCha8Rng,
) -> Result<(NetParams, f64)> {
    let g = Graph::new();
    let init = NetParams::seeded(spec, r);
    let w1 = g.leaf("net.w1", init.w1, true);
    let b1 = g.leaf("net.b1", init.b1, true);
    let w2 = g.leaf("net.w2", init.w2, true);
    let b2 = g.leaf("net.b2", init.b2, true);
    let params = [w1.clone(), b1.clone(), w2.clone(), b2.clone()];
    let xt = g.constant("x", x.clone());
    let yt = g.constant("y", y.clone());
    let sched = Schedule::constant(spec.pretrain_steps);
    let mut opt = Optimizer::new(OptimizerKind::Adam, spec.pretrain_lr);
    let mut final_loss = f64::NAN;
    for _ in 0..spec.pretrain_steps {
        g.clear_tape();
        zero_grads(&params);
        let h = g.relu(&g.add(&g.matmul(&w1, &xt)?, &b1)?);
        let pred = g.add(&g.matmul(&w2, &h)?, &b2)?;
        let loss = batch_loss(&g, &pred, &yt)?;
        final_loss = loss.scalar();
        g.backward(&loss)?;
        opt.step(&sched, &params)?;
    }
    let trained = NetParams {
        w1: w1.values(),
        b1: b1.values(),
        w2: w2.values(),
        b2: b2.values(),
    };
    Ok((trained, final_loss))
}

/// Forward through the frozen net with the adapter standing in for the
/// first layer.
fn adapted_forward(
    g: &Graph,
    adapter: &AdapterLayer,
    frozen: &FrozenNet,
    x: &Tensor,
) -> Result<Tensor> {
    let h = g.relu(&g.add(&adapter.forward(x)?, &frozen.b1)?);
    g.add(&g.matmul(&frozen.w2, &h)?, &frozen.b2)
}

struct FrozenNet {
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl FrozenNet {
    fn new(g: &Graph, net: &NetParams) -> Self {
        FrozenNet {
            b1: g.constant("frozen.b1", net.b1.clone()),
            w2: g.constant("frozen.w2", net.w2.clone()),
            b2: g.constant("frozen.b2", net.b2.clone()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LrReport {
    pub lr: f64,
    pub mean_final_loss: f64,
    pub mean_eval_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: AdapterVariant,
    pub per_lr: Vec<LrReport>,
    pub best_lr: f64,
    pub best_mean_final_loss: f64,
    pub eval_loss_at_best_lr: f64,
    pub merge_max_abs_diff: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub optimizer: OptimizerKind,
    pub pretrain_final_loss: f64,
    /// Frozen net on the shifted task (no adapter training).
    pub baseline_train_loss: f64,
    pub baseline_eval_loss: f64,
    pub variants: Vec<VariantReport>,
    /// plain_lora best mean final loss minus op_lora's; >= 0 means the
    /// generated adapter is at least as good.
    pub op_vs_plain_lora_gap: f64,
    pub op_lora_not_worse: bool,
    pub state_files: Vec<String>,
}

/// Runs the full proxy: pretrain, freeze, shift, fine-tune all four
/// adapter variants over the config's lr grid and seeds, verify merge
/// equivalence on held-out inputs, and save trained adapter states.
pub fn toy_finetune(config: &SweepConfig) -> Result<FinetuneReport> {
    config.validate()?;
    let spec = match &config.target {
        TargetSpec::ToyFinetune(spec) => spec.clone(),
        TargetSpec::Matrix { .. } => {
            return Err(Error::Config(
                "toy_finetune needs a toy_finetune target".into(),
            ))
        }
    };
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;
    let optimizer = config.optimizers[0];
    let rank = config.rank.min(spec.hidden_dim).min(spec.in_dim);
    let hidden = config.hidden_widths[0];

    // Base task.
    let seed_s = spec.seed.to_string();
    let mut teacher_rng = rng::stream(&["toy-teacher", &seed_s]);
    let teacher = NetParams::seeded(&spec, &mut teacher_rng);
    let mut base_x_rng = rng::stream(&["toy-base-x", &seed_s]);
    let x_base = sample_inputs(&spec, spec.train_samples, &mut base_x_rng);
    let y_base = teacher.forward(&x_base);

    let mut student_rng = rng::stream(&["toy-student", &seed_s]);
    let (frozen, pretrain_final_loss) = pretrain(&spec, &x_base, &y_base, &mut student_rng)?;

    // Shifted task: plant a rank-limited change in the teacher's first
    // layer and sample fresh data from it.
    let mut shift_rng = rng::stream(&["toy-shift", &seed_s]);
    let u = Matrix::from_fn(spec.hidden_dim, spec.shift_rank, |_, _| {
        rng::normal(&mut shift_rng) / (spec.shift_rank as f64).sqrt()
    });
    let v = Matrix::from_fn(spec.shift_rank, spec.in_dim, |_, _| {
        rng::normal(&mut shift_rng) / (spec.in_dim as f64).sqrt()
    });
    let mut shifted_teacher = teacher.clone();
    shifted_teacher.w1 = shifted_teacher
        .w1
        .add(&u.matmul(&v)?.scale(spec.shift_scale))?;

    let mut task_rng = rng::stream(&["toy-shift-x", &seed_s]);
    let x_train = sample_inputs(&spec, spec.train_samples, &mut task_rng);
    let y_train = shifted_teacher.forward(&x_train);
    let mut eval_rng = rng::stream(&["toy-shift-eval", &seed_s]);
    let x_eval = sample_inputs(&spec, spec.eval_samples, &mut eval_rng);
    let y_eval = shifted_teacher.forward(&x_eval);

    let baseline_train_loss = values_loss(&frozen.forward(&x_train), &y_train);
    let baseline_eval_loss = values_loss(&frozen.forward(&x_eval), &y_eval);

    let mut variants = Vec::new();
    let mut state_files = Vec::new();
    for variant in AdapterVariant::ALL {
        let mut per_lr = Vec::new();
        let mut best: Option<(f64, f64, f64)> = None; // (mean_final, lr, mean_eval)
        let mut merge_max = 0.0f64;
        for &lr in &config.lrs {
            let mut finals = Vec::new();
            let mut evals = Vec::new();
            for &seed in &config.seeds {
                let outcome = finetune_one(
                    config, &spec, variant, &frozen, &x_train, &y_train, &x_eval, &y_eval, rank,
                    hidden, optimizer, lr, seed, false,
                )?;
                finals.push(outcome.final_loss);
                evals.push(outcome.eval_loss);
                merge_max = merge_max.max(outcome.merge_max_abs_diff);
            }
            let mean_final = finals.iter().sum::<f64>() / finals.len() as f64;
            let mean_eval = evals.iter().sum::<f64>() / evals.len() as f64;
            per_lr.push(LrReport {
                lr,
                mean_final_loss: mean_final,
                mean_eval_loss: mean_eval,
            });
            if best.map_or(true, |(bf, _, _)| mean_final < bf) {
                best = Some((mean_final, lr, mean_eval));
            }
        }
        let (best_mean_final_loss, best_lr, eval_loss_at_best_lr) =
            best.expect("non-empty lr grid");

        // Re-run the first seed at the best lr to save a trained state.
        let saved = finetune_one(
            config,
            &spec,
            variant,
            &frozen,
            &x_train,
            &y_train,
            &x_eval,
            &y_eval,
            rank,
            hidden,
            optimizer,
            best_lr,
            config.seeds[0],
            true,
        )?;
        if let Some(path) = saved.state_file {
            state_files.push(path.display().to_string());
        }
        if let Some(path) = saved.export_file {
            state_files.push(path.display().to_string());
        }

        variants.push(VariantReport {
            variant,
            per_lr,
            best_lr,
            best_mean_final_loss,
            eval_loss_at_best_lr,
            merge_max_abs_diff: merge_max,
        });
    }

    let find = |v: AdapterVariant| {
        variants
            .iter()
            .find(|r| r.variant == v)
            .expect("variant present")
            .best_mean_final_loss
    };
    let gap = find(AdapterVariant::PlainLora) - find(AdapterVariant::OpLora);

    let report = FinetuneReport {
        optimizer,
        pretrain_final_loss,
        baseline_train_loss,
        baseline_eval_loss,
        variants,
        op_vs_plain_lora_gap: gap,
        op_lora_not_worse: gap >= 0.0,
        state_files,
    };
    let path = config.out_dir.join("finetune_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(report)
}

struct FinetuneOutcome {
    final_loss: f64,
    eval_loss: f64,
    merge_max_abs_diff: f64,
    state_file: Option<PathBuf>,
    export_file: Option<PathBuf>,
}

#[allow(clippy::too_many_arguments)]
fn finetune_one(
    config: &SweepConfig,
    spec: &ToyFinetuneSpec,
    variant: AdapterVariant,
    frozen: &NetParams,
    x_train: &Matrix,
    y_train: &Matrix,
    x_eval: &Matrix,
    y_eval: &Matrix,
    rank: usize,
    hidden: usize,
    optimizer: OptimizerKind,
    lr: f64,
    seed: u64,
    save: bool,
) -> Result<FinetuneOutcome> {
    let g = Graph::new();
    let mut r = rng::stream(&[
        "toy-adapter",
        &config.experiment,
        &spec.seed.to_string(),
        variant.as_str(),
        &format!("lr{lr:e}"),
        &seed.to_string(),
    ]);
    let adapter = AdapterLayer::new(
        &g,
        frozen.w1.clone(),
        rank,
        rank as f64, // alpha = rank: scaling factor 1
        variant,
        hidden,
        config.latent,
        &mut r,
    )?;
    let net = FrozenNet::new(&g, frozen);
    let xt = g.constant("x", x_train.clone());
    let yt = g.constant("y", y_train.clone());
    let params = adapter.trainable();
    let sched = Schedule::warmup_linear_decay(config.warmup.min(config.steps), config.steps);
    let mut opt = Optimizer::new(optimizer, lr);
    let mut final_loss = f64::NAN;
    for t in 0..=config.steps {
        g.clear_tape();
        zero_grads(&params);
        let pred = adapted_forward(&g, &adapter, &net, &xt)?;
        let loss = batch_loss(&g, &pred, &yt)?;
        final_loss = loss.scalar();
        if !final_loss.is_finite() || final_loss > 1e12 {
            break;
        }
        if t < config.steps {
            g.backward(&loss)?;
            opt.step(&sched, &params)?;
        }
    }

    // Held-out inputs: live adapter forward vs merged dense weight.
    g.clear_tape();
    let xe = g.constant("xe", x_eval.clone());
    let live = adapted_forward(&g, &adapter, &net, &xe)?;
    let eval_loss = values_loss(&live.values(), y_eval);
    let merged = adapter.merge()?;
    let merged_net = NetParams {
        w1: merged,
        b1: frozen.b1.clone(),
        w2: frozen.w2.clone(),
        b2: frozen.b2.clone(),
    };
    let dense = merged_net.forward(x_eval);
    let merge_max_abs_diff = dense
        .data()
        .iter()
        .zip(live.values().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let (mut state_file, mut export_file) = (None, None);
    if save {
        let state_path = config
            .out_dir
            .join(format!("{}.adapter_state.json", variant.as_str()));
        std::fs::write(&state_path, serde_json::to_string_pretty(&adapter.state())?)
            .map_err(|e| Error::io(state_path.display().to_string(), e))?;
        let export_path = config
            .out_dir
            .join(format!("{}.adapter.bin", variant.as_str()));
        write_adapter_export(&export_path, &adapter.export()?)?;
        state_file = Some(state_path);
        export_file = Some(export_path);
    }

    Ok(FinetuneOutcome {
        final_loss,
        eval_loss,
        merge_max_abs_diff,
        state_file,
        export_file,
    })
}
