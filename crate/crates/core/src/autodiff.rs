//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape of operation records. [`Tensor`]s are shared
//! handles to value/grad storage; leaves (parameters and constants)
//! outlive the tape, which is cleared and rebuilt every training step.
//! [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into every `requires_grad` ancestor of the loss; gradients
//! keep accumulating across calls until [`Tensor::zero_grad`].
//!
//! Conventions fixed here because trajectories depend on them:
//! - all arithmetic is f64;
//! - the ReLU subgradient at exactly 0 is 0;
//! - broadcasting exists only as column-vector bias addition in
//!   [`Graph::add`].
//!
//! A graph and its tensors belong to one thread (`Rc` handles, not
//! `Send`); independent graphs on different threads never interact.
//! [`Tensor::values`] snapshots are plain matrices and can cross
//! threads freely.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

struct TensorData {
    name: String,
    values: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    id: u64,
}

/// Shared handle to a node's storage. Cloning is cheap and aliases.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<RefCell<TensorData>>,
}

impl Tensor {
    pub fn id(&self) -> u64 {
        self.data.borrow().id
    }

    pub fn name(&self) -> String {
        self.data.borrow().name.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.borrow().values.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn requires_grad(&self) -> bool {
        self.data.borrow().requires_grad
    }

    /// Snapshot of the current values (detached).
    pub fn values(&self) -> Matrix {
        self.data.borrow().values.clone()
    }

    /// Runs `f` against the values without copying them.
    pub fn with_values<R>(&self, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.data.borrow().values)
    }

    /// Scalar convenience for 1x1 tensors.
    pub fn scalar(&self) -> f64 {
        let d = self.data.borrow();
        assert_eq!(d.values.shape(), (1, 1), "scalar() on non-scalar tensor");
        d.values.data()[0]
    }

    /// Replaces the values in place; the shape must not change.
    pub fn set_values(&self, m: Matrix) -> Result<()> {
        let mut d = self.data.borrow_mut();
        if d.values.shape() != m.shape() {
            return Err(Error::dim("set_values", d.values.shape(), m.shape()));
        }
        d.values = m;
        Ok(())
    }

    /// In-place update of the values (used by optimizers).
    pub fn update_values(&self, f: impl FnOnce(&mut Matrix)) {
        f(&mut self.data.borrow_mut().values)
    }

    pub fn grad(&self) -> Option<Matrix> {
        self.data.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.data.borrow_mut().grad = None;
    }

    fn accumulate_grad(&self, g: &Matrix) {
        let mut d = self.data.borrow_mut();
        debug_assert!(d.requires_grad, "grad accumulated on requires_grad=false");
        match &mut d.grad {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.data.borrow();
        write!(
            f,
            "Tensor({} {}x{} requires_grad={})",
            d.name,
            d.values.rows(),
            d.values.cols(),
            d.requires_grad
        )
    }
}

enum OpKind {
    Matmul,
    Add,
    Sub,
    Hadamard,
    ScalarMul(f64),
    /// out = a * s where s is a 1x1 tensor.
    MulScalarTensor,
    /// out[i,j] = a[i,j] + bias[i,0]; the one permitted broadcast.
    AddBiasCol,
    Relu,
    FrobeniusSq,
    /// Rows [start, start+len) of a column vector.
    SliceRows {
        start: usize,
        len: usize,
    },
    Reshape,
    /// out[:,j] = m[j] * v[:,j] / ||v[:,j]||.
    ColNormScale,
}

struct Record {
    op: OpKind,
    inputs: Vec<Tensor>,
    output: Tensor,
}

struct GraphInner {
    records: Vec<Record>,
    next_id: u64,
}

/// Operation tape plus node factory. Clones share the same tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                records: Vec::new(),
                next_id: 0,
            })),
        }
    }

    fn make_tensor(&self, name: String, values: Matrix, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.next_id;
        inner.next_id += 1;
        Tensor {
            data: Rc::new(RefCell::new(TensorData {
                name,
                values,
                grad: None,
                requires_grad,
                id,
            })),
        }
    }

    /// Creates a leaf node (parameter when `requires_grad`).
    pub fn leaf(&self, name: &str, values: Matrix, requires_grad: bool) -> Tensor {
        self.make_tensor(name.to_string(), values, requires_grad)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, name: &str, values: Matrix) -> Tensor {
        self.leaf(name, values, false)
    }

    /// Number of recorded operations on the tape.
    pub fn tape_len(&self) -> usize {
        self.inner.borrow().records.len()
    }

    /// Drops all operation records. Leaves (and any tensors the caller
    /// still holds) stay valid; the next forward pass starts a fresh
    /// tape.
    pub fn clear_tape(&self) {
        self.inner.borrow_mut().records.clear();
    }

    fn push(&self, op: OpKind, inputs: Vec<Tensor>, values: Matrix, name: String) -> Tensor {
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let out = self.make_tensor(name, values, requires_grad);
        if requires_grad {
            self.inner.borrow_mut().records.push(Record {
                op,
                inputs,
                output: out.clone(),
            });
        }
        out
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let values = a.with_values(|av| b.with_values(|bv| av.matmul(bv)))?;
        Ok(self.push(
            OpKind::Matmul,
            vec![a.clone(), b.clone()],
            values,
            "matmul".into(),
        ))
    }

    /// Elementwise addition. When `b` is a column vector and `a` is
    /// wider with matching rows, `b` broadcasts across the columns of
    /// `a` (bias addition); no other broadcasting exists.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ar, ac) = a.shape();
        let (br, bc) = b.shape();
        if (ar, ac) == (br, bc) {
            let values = a.with_values(|av| b.with_values(|bv| av.add(bv)))?;
            Ok(self.push(OpKind::Add, vec![a.clone(), b.clone()], values, "add".into()))
        } else if bc == 1 && br == ar && ac > 1 {
            let values = a.with_values(|av| {
                b.with_values(|bv| {
                    Matrix::from_fn(ar, ac, |i, j| av.get(i, j) + bv.get(i, 0))
                })
            });
            Ok(self.push(
                OpKind::AddBiasCol,
                vec![a.clone(), b.clone()],
                values,
                "add_bias".into(),
            ))
        } else {
            Err(Error::dim("add", (ar, ac), (br, bc)))
        }
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let values = a.with_values(|av| b.with_values(|bv| av.sub(bv)))?;
        Ok(self.push(OpKind::Sub, vec![a.clone(), b.clone()], values, "sub".into()))
    }

    pub fn hadamard(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let values = a.with_values(|av| b.with_values(|bv| av.hadamard(bv)))?;
        Ok(self.push(
            OpKind::Hadamard,
            vec![a.clone(), b.clone()],
            values,
            "hadamard".into(),
        ))
    }

    pub fn scalar_mul(&self, a: &Tensor, c: f64) -> Tensor {
        let values = a.with_values(|av| av.scale(c));
        self.push(
            OpKind::ScalarMul(c),
            vec![a.clone()],
            values,
            "scalar_mul".into(),
        )
    }

    /// `a` scaled by a trainable 1x1 tensor.
    pub fn mul_scalar_tensor(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.shape() != (1, 1) {
            return Err(Error::dim("mul_scalar_tensor", s.shape(), (1, 1)));
        }
        let sv = s.scalar();
        let values = a.with_values(|av| av.scale(sv));
        Ok(self.push(
            OpKind::MulScalarTensor,
            vec![a.clone(), s.clone()],
            values,
            "mul_scalar".into(),
        ))
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    pub fn relu(&self, a: &Tensor) -> Tensor {
        let values = a.with_values(|av| {
            let mut m = av.clone();
            for v in m.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            m
        });
        self.push(OpKind::Relu, vec![a.clone()], values, "relu".into())
    }

    /// Sum of squared entries as a 1x1 tensor.
    pub fn frobenius_sq(&self, a: &Tensor) -> Tensor {
        let s = a.with_values(Matrix::frob_sq);
        self.push(
            OpKind::FrobeniusSq,
            vec![a.clone()],
            Matrix::from_vec(1, 1, vec![s]),
            "frobenius_sq".into(),
        )
    }

    /// Rows [start, start+len) of a column vector.
    pub fn slice_rows(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = a.shape();
        if cols != 1 {
            return Err(Error::contract(format!(
                "slice_rows expects a column vector, got {rows}x{cols}"
            )));
        }
        if start + len > rows {
            return Err(Error::contract(format!(
                "slice_rows [{start}, {}) out of bounds for {rows} rows",
                start + len
            )));
        }
        let values = a.with_values(|av| {
            Matrix::from_vec(len, 1, av.data()[start..start + len].to_vec())
        });
        Ok(self.push(
            OpKind::SliceRows { start, len },
            vec![a.clone()],
            values,
            "slice_rows".into(),
        ))
    }

    /// Row-major reinterpretation under a new shape.
    pub fn reshape(&self, a: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        let values = a.with_values(|av| av.reshape(rows, cols))?;
        Ok(self.push(OpKind::Reshape, vec![a.clone()], values, "reshape".into()))
    }

    /// Column-normalizes `v` and rescales column `j` by `m[j]`:
    /// `out[:,j] = m[j] * v[:,j] / ||v[:,j]||`. A zero column norm is a
    /// contract error, never silently clamped.
    pub fn col_normalize_scale(&self, v: &Tensor, m: &Tensor) -> Result<Tensor> {
        let (rows, cols) = v.shape();
        if m.shape() != (cols, 1) {
            return Err(Error::dim("col_normalize_scale", m.shape(), (cols, 1)));
        }
        let values = v.with_values(|vv| -> Result<Matrix> {
            let mut norms = vec![0.0; cols];
            for (j, n) in norms.iter_mut().enumerate() {
                *n = vv.col_norm(j);
                if *n == 0.0 || !n.is_finite() {
                    return Err(Error::contract(format!(
                        "col_normalize_scale: column {j} has zero or non-finite norm"
                    )));
                }
            }
            Ok(m.with_values(|mv| {
                Matrix::from_fn(rows, cols, |i, j| mv.get(j, 0) * vv.get(i, j) / norms[j])
            }))
        })?;
        Ok(self.push(
            OpKind::ColNormScale,
            vec![v.clone(), m.clone()],
            values,
            "col_norm_scale".into(),
        ))
    }

    /// Reverse pass from a scalar loss. Accumulates into the `grad` of
    /// every `requires_grad` ancestor (including the loss itself);
    /// calling twice doubles the accumulated gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.shape() != (1, 1) {
            let (r, c) = loss.shape();
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        // Scratch gradients are private to this pass so repeated calls
        // stay additive in the persistent grads.
        let mut scratch: HashMap<u64, Matrix> = HashMap::new();
        let mut touched: HashMap<u64, Tensor> = HashMap::new();
        scratch.insert(loss.id(), Matrix::from_vec(1, 1, vec![1.0]));
        touched.insert(loss.id(), loss.clone());

        let inner = self.inner.borrow();
        for rec in inner.records.iter().rev() {
            let Some(gout) = scratch.get(&rec.output.id()).cloned() else {
                continue;
            };
            let grads = Self::input_grads(rec, &gout)?;
            for (input, grad) in rec.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !input.requires_grad() {
                    continue;
                }
                match scratch.entry(input.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        e.get_mut().add_assign(&grad)
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(grad);
                        touched.insert(input.id(), input.clone());
                    }
                }
            }
        }
        drop(inner);

        for (id, tensor) in touched {
            if tensor.requires_grad() {
                tensor.accumulate_grad(&scratch[&id]);
            }
        }
        Ok(())
    }

    /// Per-input gradients for one record; `None` marks an input that
    /// receives nothing (kept positional).
    fn input_grads(rec: &Record, gout: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let grads = match &rec.op {
            OpKind::Matmul => {
                let a = &rec.inputs[0];
                let b = &rec.inputs[1];
                let ga = b.with_values(|bv| gout.matmul_abt(bv))?;
                let gb = a.with_values(|av| av.matmul_atb(gout))?;
                vec![Some(ga), Some(gb)]
            }
            OpKind::Add => vec![Some(gout.clone()), Some(gout.clone())],
            OpKind::Sub => vec![Some(gout.clone()), Some(gout.scale(-1.0))],
            OpKind::Hadamard => {
                let a = &rec.inputs[0];
                let b = &rec.inputs[1];
                let ga = b.with_values(|bv| gout.hadamard(bv))?;
                let gb = a.with_values(|av| gout.hadamard(av))?;
                vec![Some(ga), Some(gb)]
            }
            OpKind::ScalarMul(c) => vec![Some(gout.scale(*c))],
            OpKind::MulScalarTensor => {
                let a = &rec.inputs[0];
                let s = rec.inputs[1].scalar();
                let ga = gout.scale(s);
                let gs = a.with_values(|av| {
                    let dot: f64 = gout.data().iter().zip(av.data()).map(|(&g, &x)| g * x).sum();
                    Matrix::from_vec(1, 1, vec![dot])
                });
                vec![Some(ga), Some(gs)]
            }
            OpKind::AddBiasCol => {
                let (rows, cols) = (gout.rows(), gout.cols());
                let mut gb = Matrix::zeros(rows, 1);
                for i in 0..rows {
                    let mut acc = 0.0;
                    for j in 0..cols {
                        acc += gout.get(i, j);
                    }
                    gb.set(i, 0, acc);
                }
                vec![Some(gout.clone()), Some(gb)]
            }
            OpKind::Relu => {
                let ga = rec.inputs[0].with_values(|av| {
                    let mut g = gout.clone();
                    for (gv, &xv) in g.data_mut().iter_mut().zip(av.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                });
                vec![Some(ga)]
            }
            OpKind::FrobeniusSq => {
                let g0 = gout.data()[0];
                let ga = rec.inputs[0].with_values(|av| av.scale(2.0 * g0));
                vec![Some(ga)]
            }
            OpKind::SliceRows { start, len } => {
                let rows = rec.inputs[0].rows();
                let mut ga = Matrix::zeros(rows, 1);
                for k in 0..*len {
                    ga.set(start + k, 0, gout.get(k, 0));
                }
                vec![Some(ga)]
            }
            OpKind::Reshape => {
                let (r, c) = rec.inputs[0].shape();
                vec![Some(gout.reshape(r, c)?)]
            }
            OpKind::ColNormScale => {
                let v = &rec.inputs[0];
                let m = &rec.inputs[1];
                let (rows, cols) = v.shape();
                let (gv, gm) = v.with_values(|vv| {
                    m.with_values(|mv| {
                        let mut gv = Matrix::zeros(rows, cols);
                        let mut gm = Matrix::zeros(cols, 1);
                        for j in 0..cols {
                            let n = vv.col_norm(j);
                            let mut d = 0.0;
                            for i in 0..rows {
                                d += gout.get(i, j) * vv.get(i, j);
                            }
                            let mj = mv.get(j, 0);
                            for i in 0..rows {
                                let term = gout.get(i, j) / n - vv.get(i, j) * d / (n * n * n);
                                gv.set(i, j, mj * term);
                            }
                            gm.set(j, 0, d / n);
                        }
                        (gv, gm)
                    })
                });
                vec![Some(gv), Some(gm)]
            }
        };
        Ok(grads)
    }
}

/// Clears the grads of every tensor in the slice.
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn matmul_forward_hand_values() {
        let g = Graph::new();
        let a = g.constant("a", mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant("b", mat(2, 1, &[5.0, 6.0]));
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.values().data(), &[17.0, 39.0]);
        // No trainable input, nothing recorded.
        assert_eq!(g.tape_len(), 0);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant("a", Matrix::zeros(2, 3));
        let b = g.constant("b", Matrix::zeros(4, 2));
        let err = g.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn add_zero_is_identity() {
        let g = Graph::new();
        let x = g.constant("x", mat(2, 2, &[1.0, -2.0, 3.5, 0.0]));
        let z = g.constant("z", Matrix::zeros(2, 2));
        let y = g.add(&x, &z).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn scalar_mul_gradient_is_scaled_upstream() {
        let g = Graph::new();
        let x = g.leaf("x", mat(1, 2, &[1.0, 2.0]), true);
        let y = g.scalar_mul(&x, 2.0);
        let loss = g.frobenius_sq(&y);
        g.backward(&loss).unwrap();
        // d/dx ||2x||^2 = 8x = 2 * (d||y||^2/dy = 2y) chain.
        assert_eq!(x.grad().unwrap().data(), &[8.0, 16.0]);
    }

    #[test]
    fn relu_forward_and_fixed_subgradient() {
        let g = Graph::new();
        let x = g.leaf("x", mat(3, 1, &[-1.0, 0.0, 2.0]), true);
        let y = g.relu(&x);
        assert_eq!(y.values().data(), &[0.0, 0.0, 2.0]);
        let s = g.scalar_mul(&y, 5.0);
        let loss = g.frobenius_sq(&s); // d loss/dy = 50*y = [0,0,100] pre-chain
        g.backward(&loss).unwrap();
        let grad = x.grad().unwrap();
        assert_eq!(grad.get(0, 0), 0.0); // negative input
        assert_eq!(grad.get(1, 0), 0.0); // exactly zero: subgradient fixed to 0
        assert!(grad.get(2, 0) > 0.0);
    }

    #[test]
    fn relu_backward_passes_upstream_where_positive() {
        // Single positive entry, upstream grad 5 -> grad 5; at -3 -> 0.
        for (input, expect) in [(3.0, 5.0), (-3.0, 0.0)] {
            let g = Graph::new();
            let x = g.leaf("x", mat(1, 1, &[input]), true);
            let y = g.relu(&x);
            let y5 = g.scalar_mul(&y, 5.0);
            // loss = 5*relu(x); grad through scalar_mul is 5 * 1.
            g.backward(&y5).unwrap();
            assert_eq!(x.grad().unwrap().data()[0], expect);
        }
    }

    #[test]
    fn frobenius_of_zero_and_hand_value() {
        let g = Graph::new();
        let z = g.constant("z", Matrix::zeros(3, 3));
        assert_eq!(g.frobenius_sq(&z).scalar(), 0.0);
        let x = g.constant("x", mat(1, 2, &[3.0, 4.0]));
        assert_eq!(g.frobenius_sq(&x).scalar(), 25.0);
    }

    #[test]
    fn backward_zero_factor_gives_zero_grad() {
        let g = Graph::new();
        let b = g.leaf("b", Matrix::zeros(3, 2), true);
        let a = g.leaf("a", mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let ba = g.matmul(&b, &a).unwrap();
        let loss = g.frobenius_sq(&ba);
        g.backward(&loss).unwrap();
        // d||BA||^2/dA = 2 B^T BA = 0 when B = 0.
        assert!(a.grad().unwrap().is_zero());
        // ...but B's grad is 2(BA)A^T = 0 too at B = 0.
        assert!(b.grad().unwrap().is_zero());
    }

    #[test]
    fn two_backward_calls_double_grads() {
        let g = Graph::new();
        let x = g.leaf("x", mat(2, 1, &[1.0, -2.0]), true);
        let loss = g.frobenius_sq(&x);
        g.backward(&loss).unwrap();
        let once = x.grad().unwrap();
        g.backward(&loss).unwrap();
        let twice = x.grad().unwrap();
        assert_eq!(twice, once.scale(2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let g = Graph::new();
        let x = g.leaf("x", Matrix::zeros(2, 2), true);
        let y = g.scalar_mul(&x, 1.0);
        let err = g.backward(&y).unwrap_err().to_string();
        assert!(err.contains("scalar"), "{err}");
    }

    #[test]
    fn constants_never_accumulate_grad() {
        let g = Graph::new();
        let c = g.constant("c", mat(1, 2, &[1.0, 2.0]));
        let x = g.leaf("x", mat(1, 2, &[3.0, 4.0]), true);
        let y = g.hadamard(&c, &x).unwrap();
        let loss = g.frobenius_sq(&y);
        g.backward(&loss).unwrap();
        assert!(c.grad().is_none());
        assert!(x.grad().is_some());
    }

    #[test]
    fn clear_tape_keeps_leaves_alive() {
        let g = Graph::new();
        let x = g.leaf("x", mat(1, 1, &[2.0]), true);
        let loss = g.frobenius_sq(&x);
        g.backward(&loss).unwrap();
        g.clear_tape();
        assert_eq!(g.tape_len(), 0);
        // Fresh tape over the same leaf.
        let loss2 = g.frobenius_sq(&x);
        x.zero_grad();
        g.backward(&loss2).unwrap();
        assert_eq!(x.grad().unwrap().data()[0], 4.0);
    }

    #[test]
    fn bias_broadcast_sums_grad_over_columns() {
        let g = Graph::new();
        let a = g.leaf("a", mat(2, 3, &[1.0; 6]), true);
        let bias = g.leaf("bias", mat(2, 1, &[0.5, -0.5]), true);
        let y = g.add(&a, &bias).unwrap();
        assert_eq!(y.values().get(0, 2), 1.5);
        let loss = g.frobenius_sq(&y);
        g.backward(&loss).unwrap();
        // dL/dbias_i = sum_j 2*y_ij = 3 * 2*1.5 (row 0).
        let gb = bias.grad().unwrap();
        assert!((gb.get(0, 0) - 9.0).abs() < 1e-12);
        assert!((gb.get(1, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let build = || {
            let g = Graph::new();
            let a = g.leaf("a", Matrix::from_fn(4, 4, |i, j| (i * 31 + j) as f64 * 0.017), true);
            let b = g.leaf("b", Matrix::from_fn(4, 4, |i, j| (i + 17 * j) as f64 * -0.03), true);
            let p = g.matmul(&a, &b).unwrap();
            let r = g.relu(&p);
            let loss = g.frobenius_sq(&r);
            loss.scalar()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    #[test]
    fn col_normalize_scale_zero_column_errors() {
        let g = Graph::new();
        let v = g.leaf("v", mat(2, 2, &[1.0, 0.0, 1.0, 0.0]), true);
        let m = g.leaf("m", mat(2, 1, &[1.0, 1.0]), true);
        let err = g.col_normalize_scale(&v, &m).unwrap_err().to_string();
        assert!(err.contains("column 1"), "{err}");
    }

    #[test]
    fn col_normalize_scale_restores_scaled_matrix() {
        // With m set to the column norms the op is the identity.
        let g = Graph::new();
        let vals = mat(3, 2, &[1.0, -2.0, 2.0, 4.0, -2.0, 4.0]);
        let norms = Matrix::from_vec(2, 1, vec![vals.col_norm(0), vals.col_norm(1)]);
        let v = g.leaf("v", vals.clone(), true);
        let m = g.leaf("m", norms, true);
        let out = g.col_normalize_scale(&v, &m).unwrap();
        let diff = out.values().sub(&vals).unwrap();
        assert!(diff.frob() < 1e-14);
    }
}
