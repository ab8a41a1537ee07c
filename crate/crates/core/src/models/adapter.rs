//! Low-rank adapters over a frozen base weight.
//!
//! Four variants share one forward semantics: `plain_*` hold the
//! factors (and magnitude vector) as free tensors, `op_*` generate
//! them from a single MLP with a learned latent. The LoRA effective
//! weight is `W0 + (alpha/rank) * B * A`; the DoRA variants
//! column-normalize that matrix and rescale column j by a magnitude
//! `m[j]` (length d_in), which starts at the column norms of `W0` so
//! step 0 reproduces the base layer.
//!
//! After training, [`AdapterLayer::merge`] collapses everything into a
//! dense weight and [`AdapterLayer::export`] emits the plain
//! `(A, B[, m])` record; the generator is discarded.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::{MlpGenerator, OutputSegment, SegmentInit};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    OpLora,
    OpDora,
    PlainLora,
    PlainDora,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 4] = [
        AdapterVariant::PlainLora,
        AdapterVariant::OpLora,
        AdapterVariant::PlainDora,
        AdapterVariant::OpDora,
    ];

    pub fn is_generated(&self) -> bool {
        matches!(self, AdapterVariant::OpLora | AdapterVariant::OpDora)
    }

    pub fn is_dora(&self) -> bool {
        matches!(self, AdapterVariant::OpDora | AdapterVariant::PlainDora)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterVariant::OpLora => "op_lora",
            AdapterVariant::OpDora => "op_dora",
            AdapterVariant::PlainLora => "plain_lora",
            AdapterVariant::PlainDora => "plain_dora",
        }
    }
}

enum AdapterForm {
    Generated(MlpGenerator),
    Plain {
        a: Tensor,
        b: Tensor,
        magnitude: Option<Tensor>,
    },
}

pub struct AdapterLayer {
    graph: Graph,
    w0: Tensor,
    alpha: f64,
    rank: usize,
    variant: AdapterVariant,
    form: AdapterForm,
    hidden: usize,
    latent: usize,
}

fn column_norms(m: &Matrix) -> Vec<f64> {
    (0..m.cols()).map(|j| m.col_norm(j)).collect()
}

impl AdapterLayer {
    /// Builds an adapter of the given variant over a frozen `w0`
    /// (d_out x d_in). `hidden`/`latent` only matter for the generated
    /// variants. B always starts at zero, so the step-0 effective
    /// update is the zero matrix.
    pub fn new(
        graph: &Graph,
        w0: Matrix,
        rank: usize,
        alpha: f64,
        variant: AdapterVariant,
        hidden: usize,
        latent: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(Error::contract(format!(
                "adapter rank {rank} out of range for {d_out}x{d_in} base"
            )));
        }
        let norms = column_norms(&w0);
        let form = if variant.is_generated() {
            // One MLP emitting the stacked (A; B[; m]) output.
            let mut segments = vec![
                OutputSegment::new("a", rank, d_in, SegmentInit::Random),
                OutputSegment::new("b", d_out, rank, SegmentInit::Zero),
            ];
            if variant.is_dora() {
                segments.push(OutputSegment::new(
                    "m",
                    d_in,
                    1,
                    SegmentInit::Bias(norms.clone()),
                ));
            }
            AdapterForm::Generated(MlpGenerator::new(
                graph, "adapter.gen", hidden, latent, segments, rng,
            ))
        } else {
            let a_vals = Matrix::from_fn(rank, d_in, |_, _| crate::rng::kaiming_uniform(rng, d_in));
            AdapterForm::Plain {
                a: graph.leaf("adapter.a", a_vals, true),
                b: graph.leaf("adapter.b", Matrix::zeros(d_out, rank), true),
                magnitude: variant
                    .is_dora()
                    .then(|| graph.leaf("adapter.m", Matrix::column(&norms), true)),
            }
        };
        Ok(AdapterLayer {
            graph: graph.clone(),
            w0: graph.constant("adapter.w0", w0),
            alpha,
            rank,
            variant,
            form,
            hidden,
            latent,
        })
    }

    pub fn variant(&self) -> AdapterVariant {
        self.variant
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn base_weight(&self) -> Matrix {
        self.w0.values()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        match &self.form {
            AdapterForm::Generated(gen) => gen.params(),
            AdapterForm::Plain { a, b, magnitude } => {
                let mut p = vec![a.clone(), b.clone()];
                if let Some(m) = magnitude {
                    p.push(m.clone());
                }
                p
            }
        }
    }

    /// Current factors as graph tensors (generated variants run the
    /// MLP forward; differentiable either way).
    pub fn factors(&self) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        match &self.form {
            AdapterForm::Generated(gen) => {
                let mut a = None;
                let mut b = None;
                let mut m = None;
                for (name, t) in gen.generate()? {
                    match name.as_str() {
                        "a" => a = Some(t),
                        "b" => b = Some(t),
                        "m" => m = Some(t),
                        other => {
                            return Err(Error::contract(format!(
                                "unexpected generator segment '{other}'"
                            )))
                        }
                    }
                }
                Ok((a.expect("segment a"), b.expect("segment b"), m))
            }
            AdapterForm::Plain { a, b, magnitude } => {
                Ok((a.clone(), b.clone(), magnitude.clone()))
            }
        }
    }

    /// Effective dense weight as a differentiable tensor.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let g = &self.graph;
        let (a, b, m) = self.factors()?;
        let ba = g.matmul(&b, &a)?;
        let scaled = g.scalar_mul(&ba, self.scaling());
        let v = g.add(&self.w0, &scaled)?;
        match m {
            None => Ok(v),
            Some(m) => g.col_normalize_scale(&v, &m),
        }
    }

    /// `effective_weight * x` for a column vector or a (d_in x batch)
    /// matrix. The frozen base receives no gradient.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight()?;
        self.graph.matmul(&w, x)
    }

    /// Dense effective weight as plain values (the merged layer).
    pub fn merge(&self) -> Result<Matrix> {
        let (a, b, m) = self.factors()?;
        let (a, b) = (a.values(), b.values());
        let v = self.w0.values().add(&b.matmul(&a)?.scale(self.scaling()))?;
        match m {
            None => Ok(v),
            Some(m) => {
                let m = m.values();
                let (rows, cols) = v.shape();
                let norms = column_norms(&v);
                for (j, &n) in norms.iter().enumerate() {
                    if n == 0.0 || !n.is_finite() {
                        return Err(Error::contract(format!(
                            "merge: column {j} of the effective weight has zero norm"
                        )));
                    }
                }
                Ok(Matrix::from_fn(rows, cols, |i, j| {
                    m.get(j, 0) * v.get(i, j) / norms[j]
                }))
            }
        }
    }

    /// Plain `(A, B[, m])` record for a standard adapter runtime; the
    /// generator is discarded.
    pub fn export(&self) -> Result<AdapterExport> {
        let (a, b, m) = self.factors()?;
        let mut arrays = vec![("a".to_string(), a.values()), ("b".to_string(), b.values())];
        if let Some(m) = m {
            arrays.push(("m".to_string(), m.values()));
        }
        Ok(AdapterExport {
            dora: self.variant.is_dora(),
            rank: self.rank,
            alpha: self.alpha,
            arrays,
        })
    }

    /// Rebuilds a plain adapter from an exported record over the given
    /// frozen base.
    pub fn from_export(graph: &Graph, w0: Matrix, export: &AdapterExport) -> Result<Self> {
        let find = |name: &str| -> Result<Matrix> {
            export
                .arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::contract(format!("export is missing array '{name}'")))
        };
        let a = find("a")?;
        let b = find("b")?;
        let variant = if export.dora {
            AdapterVariant::PlainDora
        } else {
            AdapterVariant::PlainLora
        };
        let magnitude = if export.dora {
            Some(graph.leaf("adapter.m", find("m")?, true))
        } else {
            None
        };
        Ok(AdapterLayer {
            graph: graph.clone(),
            w0: graph.constant("adapter.w0", w0),
            alpha: export.alpha,
            rank: export.rank,
            variant,
            form: AdapterForm::Plain {
                a: graph.leaf("adapter.a", a, true),
                b: graph.leaf("adapter.b", b, true),
                magnitude,
            },
            hidden: 0,
            latent: 0,
        })
    }

    /// Full trainable state (including the generator) for later
    /// export; JSON-serializable.
    pub fn state(&self) -> AdapterState {
        AdapterState {
            variant: self.variant,
            rank: self.rank,
            alpha: self.alpha,
            hidden: self.hidden,
            latent: self.latent,
            w0: self.w0.values(),
            params: self
                .trainable()
                .iter()
                .map(|p| (p.name(), p.values()))
                .collect(),
        }
    }

    /// Reconstructs an adapter from a saved state.
    pub fn from_state(graph: &Graph, state: &AdapterState) -> Result<Self> {
        let mut rng = crate::rng::stream(&["adapter-from-state"]);
        let layer = AdapterLayer::new(
            graph,
            state.w0.clone(),
            state.rank,
            state.alpha,
            state.variant,
            state.hidden.max(1),
            state.latent.max(1),
            &mut rng,
        )?;
        for p in layer.trainable() {
            let name = p.name();
            let saved = state
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::contract(format!("state is missing parameter '{name}'")))?;
            p.set_values(saved.1.clone())?;
        }
        Ok(layer)
    }
}

/// Plain adapter record: named arrays plus scaling metadata.
#[derive(Clone, Debug)]
pub struct AdapterExport {
    pub dora: bool,
    pub rank: usize,
    pub alpha: f64,
    pub arrays: Vec<(String, Matrix)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterState {
    pub variant: AdapterVariant,
    pub rank: usize,
    pub alpha: f64,
    pub hidden: usize,
    pub latent: usize,
    pub w0: Matrix,
    pub params: Vec<(String, Matrix)>,
}

const EXPORT_MAGIC: &[u8; 8] = b"OPADPT01";

/// Binary export layout (all integers and floats little-endian):
/// magic "OPADPT01", u8 dora flag, u32 rank, f64 alpha, u32 array
/// count, then per array: u32 name length, name bytes, u32 rows, u32
/// cols, rows*cols f64 values in row-major order.
pub fn write_adapter_export(path: &Path, export: &AdapterExport) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(EXPORT_MAGIC);
    buf.push(u8::from(export.dora));
    buf.extend_from_slice(&(export.rank as u32).to_le_bytes());
    buf.extend_from_slice(&export.alpha.to_le_bytes());
    buf.extend_from_slice(&(export.arrays.len() as u32).to_le_bytes());
    for (name, m) in &export.arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_adapter_export(path: &Path) -> Result<AdapterExport> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::contract("truncated adapter export"));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 8)? != EXPORT_MAGIC {
        return Err(Error::contract("not an adapter export (bad magic)"));
    }
    let dora = take(&mut cur, 1)?[0] != 0;
    let rank = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let alpha = f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::contract("non-utf8 array name in export"))?;
        let rows = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
        }
        arrays.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(AdapterExport {
        dora,
        rank,
        alpha,
        arrays,
    })
}
