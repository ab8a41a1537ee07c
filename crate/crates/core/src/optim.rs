//! SGD, SGD with momentum, Adam, and the learning-rate schedules used
//! by the training protocol.
//!
//! Conventions that trajectories depend on, fixed here:
//! - momentum uses the velocity form `v <- mu*v + g; p <- p - lr*v`
//!   with coefficient 0.9 by default;
//! - Adam uses (0.9, 0.999, 1e-8) with bias correction and the epsilon
//!   added after the corrected square root;
//! - under warmup the schedule gives lr(0) = 0, so the first step
//!   leaves parameters untouched (buffers still update).

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    WarmupLinearDecay,
    Constant,
}

/// Learning-rate schedule over a fixed horizon.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn warmup_linear_decay(warmup_steps: u64, total_steps: u64) -> Self {
        Schedule {
            kind: ScheduleKind::WarmupLinearDecay,
            warmup_steps,
            total_steps,
        }
    }

    pub fn constant(total_steps: u64) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            warmup_steps: 0,
            total_steps,
        }
    }

    /// Multiplier in [0, 1] applied to the peak learning rate.
    pub fn factor(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::contract(format!(
                "schedule step {t} out of range [0, {}]",
                self.total_steps
            )));
        }
        match self.kind {
            ScheduleKind::Constant => Ok(1.0),
            ScheduleKind::WarmupLinearDecay => {
                if self.warmup_steps > 0 && t <= self.warmup_steps {
                    Ok(t as f64 / self.warmup_steps as f64)
                } else if self.total_steps == self.warmup_steps {
                    Ok(1.0)
                } else {
                    Ok((self.total_steps - t) as f64
                        / (self.total_steps - self.warmup_steps) as f64)
                }
            }
        }
    }
}

/// lr_peak * schedule factor at step `t`.
pub fn schedule_lr(schedule: &Schedule, lr_peak: f64, t: u64) -> Result<f64> {
    Ok(lr_peak * schedule.factor(t)?)
}

/// Optimizer state: per-parameter buffers plus the schedule position.
pub struct Optimizer {
    kind: OptimizerKind,
    lr_peak: f64,
    momentum_coeff: f64,
    betas: (f64, f64),
    eps: f64,
    step_count: u64,
    // Buffers are allocated lazily on the first step and keyed by
    // position in the params slice, which must stay stable.
    velocity: Vec<Matrix>,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr_peak: f64) -> Self {
        Optimizer {
            kind,
            lr_peak,
            momentum_coeff: DEFAULT_MOMENTUM,
            betas: ADAM_BETAS,
            eps: ADAM_EPS,
            step_count: 0,
            velocity: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Momentum optimizer with an explicit coefficient (the default is
    /// 0.9; with 0.0 it is bitwise plain SGD).
    pub fn sgd_momentum_with_coeff(lr_peak: f64, momentum_coeff: f64) -> Self {
        let mut o = Optimizer::new(OptimizerKind::Momentum, lr_peak);
        o.momentum_coeff = momentum_coeff;
        o
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr_peak(&self) -> f64 {
        self.lr_peak
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Learning rate the next `step` call will use.
    pub fn current_lr(&self, schedule: &Schedule) -> Result<f64> {
        schedule_lr(schedule, self.lr_peak, self.step_count)
    }

    /// One update over `params`, in place. Every parameter must carry a
    /// populated grad; grads are left untouched for the caller to zero.
    pub fn step(&mut self, schedule: &Schedule, params: &[Tensor]) -> Result<()> {
        let lr = self.current_lr(schedule)?;
        let grads: Vec<Matrix> = params
            .iter()
            .map(|p| {
                p.grad().ok_or_else(|| {
                    Error::contract(format!("optimizer step: parameter '{}' has no grad", p.name()))
                })
            })
            .collect::<Result<_>>()?;

        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter().zip(&grads) {
                    p.update_values(|v| {
                        for (x, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                            *x -= lr * gi;
                        }
                    });
                }
            }
            OptimizerKind::Momentum => {
                self.ensure_buffers(&grads, BufferSet::Velocity)?;
                let mu = self.momentum_coeff;
                for ((p, g), vel) in params.iter().zip(&grads).zip(&mut self.velocity) {
                    for (v, &gi) in vel.data_mut().iter_mut().zip(g.data()) {
                        *v = mu * *v + gi;
                    }
                    p.update_values(|vals| {
                        for (x, &vi) in vals.data_mut().iter_mut().zip(vel.data()) {
                            *x -= lr * vi;
                        }
                    });
                }
            }
            OptimizerKind::Adam => {
                self.ensure_buffers(&grads, BufferSet::Moments)?;
                let (b1, b2) = self.betas;
                let t = (self.step_count + 1) as i32;
                let bias1 = 1.0 - b1.powi(t);
                let bias2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in params
                    .iter()
                    .zip(&grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for ((mi, vi), &gi) in
                        m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    }
                    let eps = self.eps;
                    p.update_values(|vals| {
                        for ((x, &mi), &vi) in
                            vals.data_mut().iter_mut().zip(m.data()).zip(v.data())
                        {
                            let m_hat = mi / bias1;
                            let v_hat = vi / bias2;
                            *x -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    });
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }

    fn ensure_buffers(&mut self, grads: &[Matrix], set: BufferSet) -> Result<()> {
        let make = |grads: &[Matrix]| -> Vec<Matrix> {
            grads
                .iter()
                .map(|g| Matrix::zeros(g.rows(), g.cols()))
                .collect()
        };
        match set {
            BufferSet::Velocity => {
                if self.velocity.is_empty() {
                    self.velocity = make(grads);
                }
                check_shapes(&self.velocity, grads)
            }
            BufferSet::Moments => {
                if self.first_moment.is_empty() {
                    self.first_moment = make(grads);
                    self.second_moment = make(grads);
                }
                check_shapes(&self.first_moment, grads)
            }
        }
    }
}

enum BufferSet {
    Velocity,
    Moments,
}

fn check_shapes(buffers: &[Matrix], grads: &[Matrix]) -> Result<()> {
    if buffers.len() != grads.len() {
        return Err(Error::contract(format!(
            "optimizer bound to {} parameters, got {}",
            buffers.len(),
            grads.len()
        )));
    }
    for (b, g) in buffers.iter().zip(grads) {
        if b.shape() != g.shape() {
            return Err(Error::dim("optimizer buffer", b.shape(), g.shape()));
        }
    }
    Ok(())
}
