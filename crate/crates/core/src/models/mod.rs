//! Trainable model families: free matrix factorization, its
//! MLP-generated counterpart, the factored linear regression, and
//! low-rank adapters over a frozen layer.

mod adapter;
mod generator;
mod mf;
mod regression;

pub use adapter::{
    read_adapter_export, write_adapter_export, AdapterExport, AdapterLayer, AdapterState,
    AdapterVariant,
};
pub use generator::{MlpGenerator, OutputSegment, SegmentInit};
pub use mf::{MfModel, OpMfModel};
pub use regression::{plain_reg_loss, OpRegression};

use crate::autodiff::{Graph, Tensor};
use crate::error::Result;

/// A model that factors a fixed target as `B * A`, whatever produces
/// the factors. The diagnostics layer records every run through this
/// surface.
pub trait FactorModel {
    fn graph(&self) -> &Graph;
    /// Trainable tensors in a stable order.
    fn params(&self) -> Vec<Tensor>;
    fn target(&self) -> &Tensor;
    fn rank(&self) -> usize;
    /// Builds the reconstruction loss `||M - BA||_F^2` on a fresh
    /// tape section and returns `(loss, b, a)` so callers can reuse
    /// the factor values without a second forward pass.
    fn loss_with_factors(&self) -> Result<(Tensor, Tensor, Tensor)>;
    fn kind_name(&self) -> &'static str;
}

/// Reconstruction loss alone.
pub fn mf_loss(model: &dyn FactorModel) -> Result<Tensor> {
    Ok(model.loss_with_factors()?.0)
}

/// Total number of trainable scalars.
pub fn param_count(params: &[Tensor]) -> usize {
    params.iter().map(|p| p.rows() * p.cols()).sum()
}
