//! Finite-difference oracle shared by the gradient and acceptance
//! suites. Central differences over every parameter entry, fully
//! independent of the backward implementation it checks.

use oplab::autodiff::{zero_grads, Graph, Tensor};
use oplab::matrix::Matrix;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Checks backward grads of `build_loss` against central finite
/// differences for every entry of every parameter. `build_loss` must
/// rebuild the loss from the parameters' current values.
pub fn check_gradients(
    graph: &Graph,
    params: &[Tensor],
    build_loss: &dyn Fn() -> oplab::Result<Tensor>,
    rel_tol: f64,
) {
    graph.clear_tape();
    zero_grads(params);
    let loss = build_loss().expect("loss builds");
    graph.backward(&loss).expect("backward succeeds");
    let grads: Vec<Matrix> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
        .collect();

    let eval = || -> f64 {
        graph.clear_tape();
        build_loss().expect("loss builds").scalar()
    };

    for (p, analytic) in params.iter().zip(&grads) {
        let (rows, cols) = p.shape();
        for i in 0..rows {
            for j in 0..cols {
                let orig = p.with_values(|m| m.get(i, j));
                p.update_values(|m| m.set(i, j, orig + FD_STEP));
                let up = eval();
                p.update_values(|m| m.set(i, j, orig - FD_STEP));
                let down = eval();
                p.update_values(|m| m.set(i, j, orig));
                let fd = (up - down) / (2.0 * FD_STEP);
                let g = analytic.get(i, j);
                let denom = g.abs().max(fd.abs());
                if denom > FD_ABS_FLOOR {
                    let rel = (g - fd).abs() / denom;
                    assert!(
                        rel < rel_tol,
                        "param '{}' entry ({i},{j}): analytic {g} vs fd {fd} (rel {rel:.3e})",
                        p.name()
                    );
                } else {
                    assert!(
                        (g - fd).abs() < FD_ABS_FLOOR,
                        "param '{}' entry ({i},{j}): analytic {g} vs fd {fd} below floor",
                        p.name()
                    );
                }
            }
        }
    }
    graph.clear_tape();
    zero_grads(params);
}
