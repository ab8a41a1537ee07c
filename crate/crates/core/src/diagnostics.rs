//! Per-step training measurements: loss, gradient norm, gradient
//! consistency at 10-step lags, and the effective rank of the current
//! `BA` under both normalization conventions.
//!
//! CSV column order is a stable external contract:
//! `step,lr,loss,grad_norm,eff_rank_sum,eff_rank_max,grad_cos_param,grad_cos_product`
//! with missing values rendered as empty fields. Missing means: the
//! effective rank of an exactly-zero `BA` (flagged degenerate, not
//! plotted as 1) and consistency entries before step 10 / off the
//! 10-step grid / against a zero gradient vector (never 0, which would
//! mean orthogonal).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{self, RankNorm};
use crate::matrix::Matrix;
use crate::models::FactorModel;

pub const CSV_COLUMNS: [&str; 8] = [
    "step",
    "lr",
    "loss",
    "grad_norm",
    "eff_rank_sum",
    "eff_rank_max",
    "grad_cos_param",
    "grad_cos_product",
];

/// Lag between the gradient snapshots compared for consistency.
pub const CONSISTENCY_LAG: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub eff_rank_sum: Option<f64>,
    pub eff_rank_max: Option<f64>,
    pub grad_cos_param: Option<f64>,
    pub grad_cos_product: Option<f64>,
}

/// Euclidean norm of the concatenation of all parameter grads.
pub fn grad_norm(params: &[Tensor]) -> Result<f64> {
    let mut acc = 0.0;
    for p in params {
        let g = p
            .grad()
            .ok_or_else(|| Error::contract(format!("grad_norm: parameter '{}' has no grad", p.name())))?;
        acc += g.frob_sq();
    }
    Ok(acc.sqrt())
}

/// Concatenated parameter grads in `params` order.
pub fn flat_grads(params: &[Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for p in params {
        let g = p
            .grad()
            .ok_or_else(|| Error::contract(format!("flat_grads: parameter '{}' has no grad", p.name())))?;
        out.extend_from_slice(g.data());
    }
    Ok(out)
}

/// Cosine similarity in [-1, 1]; `None` when either vector is zero
/// (undefined, recorded as missing).
pub fn grad_consistency(g_t: &[f64], g_prev: &[f64]) -> Result<Option<f64>> {
    if g_t.len() != g_prev.len() {
        return Err(Error::contract(format!(
            "grad_consistency: lengths {} vs {}",
            g_t.len(),
            g_prev.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&a, &b) in g_t.iter().zip(g_prev) {
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)))
}

/// Time series of one training run plus its lag snapshots.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub fingerprint: String,
    pub rows: Vec<StepRow>,
    pub diverged: bool,
    snap_param: Option<(u64, Vec<f64>)>,
    snap_product: Option<(u64, Vec<f64>)>,
}

impl RunRecord {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        RunRecord {
            fingerprint: fingerprint.into(),
            rows: Vec::new(),
            diverged: false,
            snap_param: None,
            snap_product: None,
        }
    }

    /// Appends one measurement row. Call once per step, after backward
    /// and before the optimizer step; never mutates the model. Steps
    /// must arrive in order starting at 0.
    pub fn record_step(
        &mut self,
        step: u64,
        lr: f64,
        loss: f64,
        model: &dyn FactorModel,
        b: &Matrix,
        a: &Matrix,
    ) -> Result<()> {
        let expected = self.rows.last().map_or(0, |r| r.step + 1);
        if step != expected {
            return Err(Error::contract(format!(
                "record_step: got step {step}, expected {expected}"
            )));
        }
        if loss < 0.0 {
            return Err(Error::contract(format!("record_step: negative loss {loss}")));
        }

        let params = model.params();
        let gnorm = grad_norm(&params)?;

        let s = linalg::product_singular_values(b, a)?;
        let max_rank = b.rows().min(a.cols());
        let er_sum = linalg::effective_rank_from_singular_values(&s, RankNorm::Sum, max_rank);
        let (eff_rank_sum, eff_rank_max) = if er_sum.degenerate {
            (None, None)
        } else {
            let er_max =
                linalg::effective_rank_from_singular_values(&s, RankNorm::Max, max_rank);
            (Some(er_sum.value), Some(er_max.value))
        };

        let (mut cos_param, mut cos_product) = (None, None);
        if step % CONSISTENCY_LAG == 0 {
            let flat_p = flat_grads(&params)?;
            // dL/d(BA) = -2 (M - BA) for the reconstruction loss.
            let flat_g = model
                .target()
                .with_values(|m| -> Result<Vec<f64>> {
                    let diff = m.sub(&b.matmul(a)?)?;
                    Ok(diff.data().iter().map(|&v| -2.0 * v).collect())
                })?;
            if step >= CONSISTENCY_LAG {
                if let Some((t_prev, prev)) = &self.snap_param {
                    if *t_prev == step - CONSISTENCY_LAG {
                        cos_param = grad_consistency(&flat_p, prev)?;
                    }
                }
                if let Some((t_prev, prev)) = &self.snap_product {
                    if *t_prev == step - CONSISTENCY_LAG {
                        cos_product = grad_consistency(&flat_g, prev)?;
                    }
                }
            }
            self.snap_param = Some((step, flat_p));
            self.snap_product = Some((step, flat_g));
        }

        self.rows.push(StepRow {
            step,
            lr,
            loss,
            grad_norm: gnorm,
            eff_rank_sum,
            eff_rank_max,
            grad_cos_param: cos_param,
            grad_cos_product: cos_product,
        });
        Ok(())
    }

    pub fn mark_diverged(&mut self) {
        self.diverged = true;
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn min_loss(&self) -> Option<f64> {
        self.rows
            .iter()
            .map(|r| r.loss)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_COLUMNS)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.lr.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                fmt(r.eff_rank_sum),
                fmt(r.eff_rank_max),
                fmt(r.grad_cos_param),
                fmt(r.grad_cos_product),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Parses a run CSV back into rows (used by the plotter and tests).
pub fn read_csv_rows(path: &Path) -> Result<Vec<StepRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::contract(format!("bad float '{s}': {e}")))
        }
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        rows.push(StepRow {
            step: rec[0]
                .parse()
                .map_err(|e| Error::contract(format!("bad step '{}': {e}", &rec[0])))?,
            lr: rec[1]
                .parse()
                .map_err(|e| Error::contract(format!("bad lr '{}': {e}", &rec[1])))?,
            loss: rec[2]
                .parse()
                .map_err(|e| Error::contract(format!("bad loss '{}': {e}", &rec[2])))?,
            grad_norm: rec[3]
                .parse()
                .map_err(|e| Error::contract(format!("bad grad_norm '{}': {e}", &rec[3])))?,
            eff_rank_sum: parse_opt(&rec[4])?,
            eff_rank_max: parse_opt(&rec[5])?,
            grad_cos_param: parse_opt(&rec[6])?,
            grad_cos_product: parse_opt(&rec[7])?,
        });
    }
    Ok(rows)
}

/// End-of-run digest used in manifests and acceptance checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_loss: f64,
    pub min_loss: f64,
    /// min_loss <= svd_error * (1 + tol).
    pub reached_svd: bool,
    pub svd_tol: f64,
    pub diverged: bool,
    /// steps_to_decades[k] = first step whose loss dropped below
    /// loss(0) / 10^(k+1).
    pub steps_to_decades: Vec<u64>,
    pub final_eff_rank_sum: Option<f64>,
    pub final_eff_rank_max: Option<f64>,
    /// Eckart-Young dominance: min_loss is not below the rank-r SVD
    /// error (up to fp slack). False would indicate a bug.
    pub eckart_young_ok: bool,
}

pub fn summarize(record: &RunRecord, svd_error: f64, tol: f64) -> RunSummary {
    let final_loss = record.final_loss().unwrap_or(f64::NAN);
    let min_loss = record.min_loss().unwrap_or(f64::NAN);
    let loss0 = record.rows.first().map_or(f64::NAN, |r| r.loss);
    let mut steps_to_decades = Vec::new();
    let mut k = 1i32;
    loop {
        let threshold = loss0 / 10f64.powi(k);
        match record
            .rows
            .iter()
            .find(|r| r.loss <= threshold)
            .map(|r| r.step)
        {
            Some(step) => steps_to_decades.push(step),
            None => break,
        }
        k += 1;
        if k > 300 {
            break;
        }
    }
    let last = record.rows.last();
    RunSummary {
        final_loss,
        min_loss,
        reached_svd: min_loss <= svd_error * (1.0 + tol),
        svd_tol: tol,
        diverged: record.diverged,
        steps_to_decades,
        final_eff_rank_sum: last.and_then(|r| r.eff_rank_sum),
        final_eff_rank_max: last.and_then(|r| r.eff_rank_max),
        eckart_young_ok: min_loss >= svd_error * (1.0 - 1e-9) || svd_error == 0.0,
    }
}
