//! Factored linear regression `w = w1 * w2` and the first-order
//! expansion check for the composite update.
//!
//! The loss is the empirical mean of `0.5 * (x^T w1 w2 - y)^2` (with
//! the 1/2, unlike the factorization loss; both are implemented
//! exactly as their models define them).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{zero_grads, Graph, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

pub struct OpRegression {
    graph: Graph,
    pub w1: Tensor,
    pub w2: Tensor,
    x: Tensor,
    y: Tensor,
    n: usize,
}

impl OpRegression {
    pub fn new(graph: &Graph, x: Matrix, y: Matrix, w1: Matrix, w2: f64) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::contract("regression dataset is empty"));
        }
        if y.shape() != (n, 1) || w1.shape() != (x.cols(), 1) {
            return Err(Error::dim("op_regression", x.shape(), y.shape()));
        }
        Ok(OpRegression {
            graph: graph.clone(),
            w1: graph.leaf("reg.w1", w1, true),
            w2: graph.leaf("reg.w2", Matrix::from_vec(1, 1, vec![w2]), true),
            x: graph.constant("reg.x", x),
            y: graph.constant("reg.y", y),
            n,
        })
    }

    /// Seeded init: w1 entries N(0,1)/sqrt(d), w2 = 1.3 (nonzero and
    /// away from 1 so both gradient paths stay generic).
    pub fn seeded(graph: &Graph, x: Matrix, y: Matrix, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = x.cols();
        let w1 = Matrix::from_fn(d, 1, |_, _| rng::normal(rng) / (d as f64).sqrt());
        Self::new(graph, x, y, w1, 1.3)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w1.clone(), self.w2.clone()]
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn dataset(&self) -> (Matrix, Matrix) {
        (self.x.values(), self.y.values())
    }

    /// Effective weight w1 * w2 as values.
    pub fn composite_weight(&self) -> Matrix {
        self.w1.values().scale(self.w2.scalar())
    }

    /// mean of 0.5 * (x_i^T w1 w2 - y_i)^2 over the dataset.
    pub fn loss(&self) -> Result<Tensor> {
        let g = &self.graph;
        let pred = g.matmul(&self.x, &self.w1)?;
        let scaled = g.mul_scalar_tensor(&pred, &self.w2)?;
        let resid = g.sub(&scaled, &self.y)?;
        let sq = g.frobenius_sq(&resid);
        Ok(g.scalar_mul(&sq, 0.5 / self.n as f64))
    }

    /// Gradients of the loss at the current point, without mutating
    /// parameter values; any previously accumulated grads are cleared.
    pub fn grads(&self) -> Result<(Matrix, f64)> {
        zero_grads(&self.params());
        self.graph.clear_tape();
        let loss = self.loss()?;
        self.graph.backward(&loss)?;
        let g1 = self.w1.grad().expect("w1 grad");
        let g2 = self.w2.grad().expect("w2 grad").data()[0];
        zero_grads(&self.params());
        self.graph.clear_tape();
        Ok((g1, g2))
    }

    /// Takes one exact gradient step on copies of (w1, w2), forms the
    /// resulting composite weight, and compares it against the
    /// first-order expansion
    /// `w - eta*w2^2*grad_w - eta*(grad_w2/w2)*w`
    /// evaluated at the pre-step point. Returns the Euclidean norm of
    /// the difference, which is exactly `eta^2 * |g2| * ||g1||` up to
    /// rounding. Parameter values are left untouched.
    pub fn composite_update_check(&self, eta: f64) -> Result<f64> {
        if eta < 0.0 {
            return Err(Error::contract("composite_update_check: eta must be >= 0"));
        }
        let w2 = self.w2.scalar();
        if w2 == 0.0 {
            return Err(Error::contract(
                "composite_update_check: the expansion divides by w2 = 0",
            ));
        }
        let (g1, g2) = self.grads()?;
        let w1 = self.w1.values();
        let w = w1.scale(w2);

        // Exact step on the factors.
        let w1_next = w1.sub(&g1.scale(eta))?;
        let w2_next = w2 - eta * g2;
        let w_actual = w1_next.scale(w2_next);

        // First-order expansion at the pre-step point. grad_w is the
        // plain-loss gradient at the composite weight: X^T(Xw - y)/n.
        let (x, y) = self.dataset();
        let grad_w = x.matmul_atb(&x.matmul(&w)?.sub(&y)?)?.scale(1.0 / self.n as f64);
        let w_pred = w
            .sub(&grad_w.scale(eta * w2 * w2))?
            .sub(&w.scale(eta * g2 / w2))?;

        Ok(w_actual.sub(&w_pred)?.frob())
    }
}

/// mean of 0.5 * (x_i^T w - y_i)^2 for the unfactored model.
pub fn plain_reg_loss(graph: &Graph, w: &Tensor, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::contract("regression dataset is empty"));
    }
    let pred = graph.matmul(x, w)?;
    let resid = graph.sub(&pred, y)?;
    let sq = graph.frobenius_sq(&resid);
    Ok(graph.scalar_mul(&sq, 0.5 / n as f64))
}
