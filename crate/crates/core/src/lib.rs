//! Overparameterized low-rank adaptation lab.
//!
//! Everything needed to study MLP-overparameterized low-rank training
//! at desk scale: a reverse-mode autodiff engine over dense f64
//! matrices, an in-repo Jacobi SVD with spectral diagnostics, SGD /
//! momentum / Adam with warmup-decay schedules, matrix-factorization
//! and adapter models with merge-and-discard semantics, per-step run
//! diagnostics, and a deterministic sweep harness with CSV/JSON/SVG
//! output (see the `oplab` binary).

pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod matrix;
pub mod models;
pub mod optim;
pub mod rng;

pub use autodiff::{Graph, Tensor};
pub use error::{Error, Result};
pub use matrix::Matrix;
