//! Finite-difference checks for every differentiable op and for the
//! full model losses, plus property tests of the spectral invariants.

mod common;

use common::{check_gradients, FD_REL_TOL};
use oplab::autodiff::Graph;
use oplab::linalg;
use oplab::matrix::Matrix;
use oplab::models::{FactorModel, OpMfModel, OpRegression};
use oplab::models::{AdapterLayer, AdapterVariant};
use oplab::rng;
use proptest::prelude::*;

fn random_matrix(rows: usize, cols: usize, tag: &str) -> Matrix {
    let mut r = rng::stream(&["gradcheck", tag]);
    Matrix::from_fn(rows, cols, |_, _| 2.0 * rng::uniform01(&mut r) - 1.0)
}

/// Keeps ReLU inputs away from the kink so central differences are
/// valid.
fn random_matrix_off_zero(rows: usize, cols: usize, tag: &str) -> Matrix {
    let mut r = rng::stream(&["gradcheck-relu", tag]);
    Matrix::from_fn(rows, cols, |_, _| {
        let v = 2.0 * rng::uniform01(&mut r) - 1.0;
        if v.abs() < 0.05 {
            v + 0.1
        } else {
            v
        }
    })
}

#[test]
fn matmul_gradients() {
    let g = Graph::new();
    let a = g.leaf("a", random_matrix(4, 3, "mm-a"), true);
    let b = g.leaf("b", random_matrix(3, 5, "mm-b"), true);
    check_gradients(
        &g,
        &[a.clone(), b.clone()],
        &|| Ok(g.frobenius_sq(&g.matmul(&a, &b)?)),
        FD_REL_TOL,
    );
}

#[test]
fn frobenius_of_ba_gradient_is_closed_form() {
    // d||BA||_F^2 / dB = 2 (BA) A^T, checked against both the closed
    // form and finite differences.
    let g = Graph::new();
    let b = g.leaf("b", random_matrix(4, 2, "ba-b"), true);
    let a = g.leaf("a", random_matrix(2, 5, "ba-a"), true);
    let loss = g.frobenius_sq(&g.matmul(&b, &a).unwrap());
    g.backward(&loss).unwrap();
    let closed = b
        .values()
        .matmul(&a.values())
        .unwrap()
        .matmul_abt(&a.values())
        .unwrap()
        .scale(2.0);
    let got = b.grad().unwrap();
    for (x, y) in got.data().iter().zip(closed.data()) {
        assert!((x - y).abs() < 1e-10 * y.abs().max(1.0));
    }
    check_gradients(
        &g,
        &[b.clone(), a.clone()],
        &|| Ok(g.frobenius_sq(&g.matmul(&b, &a)?)),
        1e-6,
    );
}

#[test]
fn elementwise_op_gradients() {
    let g = Graph::new();
    let a = g.leaf("a", random_matrix(3, 4, "ew-a"), true);
    let b = g.leaf("b", random_matrix(3, 4, "ew-b"), true);
    check_gradients(
        &g,
        &[a.clone(), b.clone()],
        &|| Ok(g.frobenius_sq(&g.add(&a, &b)?)),
        FD_REL_TOL,
    );
    check_gradients(
        &g,
        &[a.clone(), b.clone()],
        &|| Ok(g.frobenius_sq(&g.sub(&a, &b)?)),
        FD_REL_TOL,
    );
    // Hadamard backward vs finite differences, rel err < 1e-6.
    check_gradients(
        &g,
        &[a.clone(), b.clone()],
        &|| Ok(g.frobenius_sq(&g.hadamard(&a, &b)?)),
        1e-6,
    );
    check_gradients(
        &g,
        &[a.clone()],
        &|| Ok(g.frobenius_sq(&g.scalar_mul(&a, -1.7))),
        FD_REL_TOL,
    );
}

#[test]
fn bias_broadcast_gradients() {
    let g = Graph::new();
    let a = g.leaf("a", random_matrix(3, 5, "bb-a"), true);
    let bias = g.leaf("bias", random_matrix(3, 1, "bb-b"), true);
    check_gradients(
        &g,
        &[a.clone(), bias.clone()],
        &|| Ok(g.frobenius_sq(&g.add(&a, &bias)?)),
        FD_REL_TOL,
    );
}

#[test]
fn relu_and_scalar_tensor_gradients() {
    let g = Graph::new();
    let a = g.leaf("a", random_matrix_off_zero(4, 3, "rl-a"), true);
    let s = g.leaf("s", Matrix::from_vec(1, 1, vec![0.8]), true);
    check_gradients(
        &g,
        &[a.clone(), s.clone()],
        &|| Ok(g.frobenius_sq(&g.mul_scalar_tensor(&g.relu(&a), &s)?)),
        FD_REL_TOL,
    );
}

#[test]
fn slice_and_reshape_gradients() {
    let g = Graph::new();
    let a = g.leaf("a", random_matrix(8, 1, "sl-a"), true);
    check_gradients(
        &g,
        &[a.clone()],
        &|| {
            let s = g.slice_rows(&a, 2, 4)?;
            let m = g.reshape(&s, 2, 2)?;
            Ok(g.frobenius_sq(&m))
        },
        FD_REL_TOL,
    );
}

#[test]
fn dora_normalization_gradients_on_3x3() {
    let g = Graph::new();
    let v = g.leaf("v", random_matrix(3, 3, "dn-v"), true);
    let m = g.leaf(
        "m",
        Matrix::from_vec(3, 1, vec![1.1, 0.9, 1.3]),
        true,
    );
    check_gradients(
        &g,
        &[v.clone(), m.clone()],
        &|| Ok(g.frobenius_sq(&g.col_normalize_scale(&v, &m)?)),
        FD_REL_TOL,
    );
}

#[test]
fn generator_gradient_wrt_latent() {
    use oplab::models::{MlpGenerator, OutputSegment, SegmentInit};
    let g = Graph::new();
    let mut r = rng::stream(&["gradcheck-gen"]);
    let gen = MlpGenerator::new(
        &g,
        "g",
        3,
        4,
        vec![OutputSegment::new("out", 2, 2, SegmentInit::Random)],
        &mut r,
    );
    check_gradients(
        &g,
        &[gen.z.clone()],
        &|| Ok(g.frobenius_sq(&gen.generate_named("out")?)),
        1e-6,
    );
}

#[test]
fn regression_loss_gradients() {
    let g = Graph::new();
    let mut r = rng::stream(&["gradcheck-reg"]);
    let x = Matrix::from_fn(10, 3, |_, _| rng::normal(&mut r));
    let w_true = Matrix::from_fn(3, 1, |_, _| rng::normal(&mut r));
    let y = x.matmul(&w_true).unwrap();
    let model = OpRegression::seeded(&g, x, y, &mut r).unwrap();
    check_gradients(&g, &model.params(), &|| model.loss(), FD_REL_TOL);
}

#[test]
fn full_opmf_loss_gradients_6x6_rank2() {
    // Every parameter entry of both generators, rel err < 1e-5.
    let g = Graph::new();
    let mut r = rng::stream(&["gradcheck-opmf"]);
    let target = Matrix::from_fn(6, 6, |_, _| rng::uniform01(&mut r));
    let model = OpMfModel::new(&g, target, 2, 4, 8, &mut r);
    // Move the B generator off its zero init so its z/w1/b1 grads are
    // generic.
    model.gen_b.w2.update_values(|m| {
        for (i, v) in m.data_mut().iter_mut().enumerate() {
            *v = ((i % 9) as f64 - 4.0) * 0.05;
        }
    });
    check_gradients(
        &g,
        &model.params(),
        &|| Ok(model.loss_with_factors()?.0),
        FD_REL_TOL,
    );
}

#[test]
fn dora_adapter_gradients_through_generator() {
    let g = Graph::new();
    let mut r = rng::stream(&["gradcheck-dora"]);
    let w0 = Matrix::from_fn(3, 3, |_, _| rng::normal(&mut r) * 0.4 + 0.2);
    let layer =
        AdapterLayer::new(&g, w0, 2, 2.0, AdapterVariant::OpDora, 4, 6, &mut r).unwrap();
    // Off-init so the normalization sees a non-trivial update.
    for p in layer.trainable() {
        p.update_values(|m| {
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v += ((i % 5) as f64 - 2.0) * 0.04;
            }
        });
    }
    let x = g.constant("x", random_matrix(3, 2, "dora-x"));
    check_gradients(
        &g,
        &layer.trainable(),
        &|| Ok(g.frobenius_sq(&layer.forward(&x)?)),
        FD_REL_TOL,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_matches_naive_oracle(
        m in 1usize..5, k in 1usize..5, n in 1usize..5,
        seed in 0u64..1000
    ) {
        let mut r = rng::stream(&["prop-mm", &seed.to_string()]);
        let a = Matrix::from_fn(m, k, |_, _| 2.0 * rng::uniform01(&mut r) - 1.0);
        let b = Matrix::from_fn(k, n, |_, _| 2.0 * rng::uniform01(&mut r) - 1.0);
        let fast = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get(i, p) * b.get(p, j);
                }
                prop_assert!((fast.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn effective_rank_scale_invariant(
        rows in 2usize..7, cols in 2usize..7,
        scale in 1e-3f64..1e3, seed in 0u64..1000
    ) {
        let mut r = rng::stream(&["prop-er", &seed.to_string()]);
        let m = Matrix::from_fn(rows, cols, |_, _| rng::normal(&mut r));
        let a = linalg::effective_rank(&m).unwrap().value;
        let b = linalg::effective_rank(&m.scale(scale)).unwrap().value;
        prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn effective_rank_bounded_by_numerical_rank(
        rows in 2usize..8, inner in 1usize..4, cols in 2usize..8,
        seed in 0u64..1000
    ) {
        // Build a matrix of known rank <= inner.
        let mut r = rng::stream(&["prop-rank", &seed.to_string()]);
        let b = Matrix::from_fn(rows, inner, |_, _| rng::normal(&mut r));
        let a = Matrix::from_fn(inner, cols, |_, _| rng::normal(&mut r));
        let m = b.matmul(&a).unwrap();
        let s = linalg::svd(&m).unwrap().s;
        let numerical_rank = s.iter().filter(|&&x| x > 1e-12 * s[0].max(1e-300)).count();
        let er = linalg::effective_rank(&m).unwrap();
        prop_assert!(er.value <= numerical_rank as f64 + 1e-9);
    }

    #[test]
    fn eckart_young_dominates_random_factorizations(
        seed in 0u64..1000
    ) {
        let mut r = rng::stream(&["prop-ey", &seed.to_string()]);
        let m = Matrix::from_fn(10, 10, |_, _| rng::uniform01(&mut r));
        let rank = 3;
        let (_, optimal) = linalg::best_rank_r(&m, rank).unwrap();
        let b = Matrix::from_fn(10, rank, |_, _| rng::normal(&mut r));
        let a = Matrix::from_fn(rank, 10, |_, _| rng::normal(&mut r));
        let loss = m.sub(&b.matmul(&a).unwrap()).unwrap().frob_sq();
        prop_assert!(optimal <= loss * (1.0 + 1e-12));
    }

    #[test]
    fn svd_reconstructs_random_matrices(
        rows in 2usize..9, cols in 2usize..9, seed in 0u64..1000
    ) {
        let mut r = rng::stream(&["prop-svd", &seed.to_string()]);
        let m = Matrix::from_fn(rows, cols, |_, _| rng::normal(&mut r));
        let dec = linalg::svd(&m).unwrap();
        let rel = dec.reconstruct().sub(&m).unwrap().frob() / m.frob().max(1e-300);
        prop_assert!(rel < 1e-11, "residual {rel}");
    }
}
