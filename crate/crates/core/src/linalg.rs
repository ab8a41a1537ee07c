//! SVD oracle and spectral diagnostics.
//!
//! The decomposition is a one-sided Jacobi SVD implemented here so the
//! numerical baseline has no external dependency. Convergence: stop
//! when a full sweep applies no rotation (relative off-diagonal test at
//! `ROT_TOL`) or when the off-diagonal Gram mass drops below
//! `1e-14 * ||M||_F^2`, with a hard cap of 60 sweeps.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAX_SWEEPS: usize = 60;
const ROT_TOL: f64 = 1e-15;
const GRAM_MASS_TOL: f64 = 1e-14;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Orthonormal columns, m x k.
    pub u: Matrix,
    /// Singular values, descending, non-negative; k = min(m, n).
    pub s: Vec<f64>,
    /// Orthonormal rows, k x n.
    pub vt: Matrix,
}

impl SvdResult {
    /// u * diag(s) * vt.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let (m, n) = (self.u.rows(), self.vt.cols());
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let c = self.u.get(i, p) * self.s[p];
                if c == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = out.get(i, j) + c * self.vt.get(p, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }
}

/// One-sided Jacobi SVD of a dense matrix.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::contract("svd: input has non-finite entries"));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        // A = (A^T)^T: swap the roles of U and V^T.
        let r = svd_tall(&m.transpose())?;
        Ok(SvdResult {
            u: r.vt.transpose(),
            s: r.s,
            vt: r.u.transpose(),
        })
    }
}

fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let k = n; // m >= n
    let mut b = a.clone();
    let mut v = Matrix::identity(n);
    let mass_floor = GRAM_MASS_TOL * a.frob_sq();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        let mut off_mass = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let (app, aqq, apq) = gram_entries(&b, p, q);
                off_mass += apq * apq;
                if apq.abs() <= ROT_TOL * (app * aqq).sqrt() {
                    continue;
                }
                let (c, s) = jacobi_rotation(app, aqq, apq);
                rotate_columns(&mut b, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
                rotated = true;
            }
        }
        if !rotated || off_mass < mass_floor {
            break;
        }
    }

    // Column norms are the singular values; order descending.
    let mut norms: Vec<f64> = (0..n).map(|j| b.col_norm(j)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    norms.sort_by(|x, y| y.partial_cmp(x).unwrap());

    let s_max = norms.first().copied().unwrap_or(0.0);
    let null_tol = s_max * (m.max(n) as f64) * f64::EPSILON;

    let mut u = Matrix::zeros(m, k);
    let mut null_cols = Vec::new();
    for (new_j, &old_j) in order.iter().enumerate() {
        let s_j = norms[new_j];
        if s_j > null_tol && s_j > 0.0 {
            for i in 0..m {
                u.set(i, new_j, b.get(i, old_j) / s_j);
            }
        } else {
            null_cols.push(new_j);
        }
    }
    complete_basis(&mut u, &null_cols);

    let mut vt = Matrix::zeros(k, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vt.set(new_j, i, v.get(i, old_j));
        }
    }

    Ok(SvdResult { u, s: norms, vt })
}

fn gram_entries(b: &Matrix, p: usize, q: usize) -> (f64, f64, f64) {
    let (m, n) = b.shape();
    let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
    let data = b.data();
    for i in 0..m {
        let bp = data[i * n + p];
        let bq = data[i * n + q];
        app += bp * bp;
        aqq += bq * bq;
        apq += bp * bq;
    }
    (app, aqq, apq)
}

/// Stable rotation zeroing the (p,q) Gram entry.
fn jacobi_rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, c * t)
}

fn rotate_columns(b: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let (m, n) = b.shape();
    let data = b.data_mut();
    for i in 0..m {
        let bp = data[i * n + p];
        let bq = data[i * n + q];
        data[i * n + p] = c * bp - s * bq;
        data[i * n + q] = s * bp + c * bq;
    }
}

/// Fills the listed columns of `u` with vectors orthonormal to all the
/// others (rank-deficient inputs leave null directions behind).
fn complete_basis(u: &mut Matrix, null_cols: &[usize]) {
    let (m, k) = u.shape();
    let mut candidate = 0usize;
    for &j in null_cols {
        loop {
            assert!(candidate < m, "basis completion exhausted candidates");
            let mut vec = vec![0.0; m];
            vec[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against every column; not-yet
            // completed columns are zero and contribute nothing.
            for _ in 0..2 {
                for other in 0..k {
                    let mut dot = 0.0;
                    for i in 0..m {
                        dot += u.get(i, other) * vec[i];
                    }
                    for (i, vi) in vec.iter_mut().enumerate() {
                        *vi -= dot * u.get(i, other);
                    }
                }
            }
            let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (i, vi) in vec.iter().enumerate() {
                    u.set(i, j, vi / norm);
                }
                break;
            }
        }
    }
}

/// Truncated-SVD reconstruction at rank `r` plus its squared Frobenius
/// error `sum_{i>r} s_i^2` (the Eckart-Young optimum).
pub fn best_rank_r(m: &Matrix, r: usize) -> Result<(Matrix, f64)> {
    let k = m.rows().min(m.cols());
    if r < 1 || r > k {
        return Err(Error::contract(format!(
            "best_rank_r: rank {r} out of range [1, {k}]"
        )));
    }
    let dec = svd(m)?;
    let truncated = SvdResult {
        u: Matrix::from_fn(m.rows(), r, |i, j| dec.u.get(i, j)),
        s: dec.s[..r].to_vec(),
        vt: Matrix::from_fn(r, m.cols(), |i, j| dec.vt.get(i, j)),
    };
    let err: f64 = dec.s[r..].iter().map(|s| s * s).sum();
    Ok((truncated.reconstruct(), err))
}

/// How the singular values are normalized before the entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankNorm {
    /// sigma_i = s_i / sum_j s_j; bounded by the matrix rank.
    Sum,
    /// sigma_i = s_i / s_max; recorded alongside as the alternative
    /// convention.
    Max,
}

#[derive(Clone, Copy, Debug)]
pub struct EffectiveRank {
    pub value: f64,
    /// Set for the all-zero matrix, where the spectrum is empty and the
    /// value is pinned to 1 by convention.
    pub degenerate: bool,
}

/// exp of the spectral entropy of the normalized singular values.
/// 0 * log 0 contributes 0 by the limit convention.
pub fn effective_rank(m: &Matrix) -> Result<EffectiveRank> {
    let dec = svd(m)?;
    Ok(effective_rank_from_singular_values(
        &dec.s,
        RankNorm::Sum,
        m.rows().min(m.cols()),
    ))
}

pub fn effective_rank_from_singular_values(
    s: &[f64],
    norm: RankNorm,
    max_rank: usize,
) -> EffectiveRank {
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return EffectiveRank {
            value: 1.0,
            degenerate: true,
        };
    }
    let denom = match norm {
        RankNorm::Sum => total,
        RankNorm::Max => s.iter().cloned().fold(0.0, f64::max),
    };
    let mut entropy = 0.0;
    for &si in s {
        let sigma = si / denom;
        if sigma > 0.0 {
            entropy -= sigma * sigma.ln();
        }
    }
    let mut value = entropy.exp();
    if norm == RankNorm::Sum {
        // fp noise only; the sum-normalized value is bounded by rank.
        value = value.clamp(1.0, max_rank as f64);
    }
    EffectiveRank {
        value,
        degenerate: false,
    }
}

/// s_max / s_min over singular values above `1e-12 * s_max`; +infinity
/// when no second value survives the cutoff.
pub fn condition_number(m: &Matrix) -> Result<f64> {
    let dec = svd(m)?;
    let s_max = dec.s.first().copied().unwrap_or(0.0);
    if s_max == 0.0 {
        return Err(Error::contract("condition_number: zero matrix"));
    }
    let tol = 1e-12 * s_max;
    let s_min = dec
        .s
        .iter()
        .skip(1)
        .filter(|&&s| s > tol)
        .cloned()
        .fold(f64::NAN, f64::min);
    if s_min.is_nan() {
        Ok(f64::INFINITY)
    } else {
        Ok(s_max / s_min)
    }
}

/// Singular values of the product `b * a` (b: m x r, a: r x n) without
/// forming or decomposing the full m x n matrix: thin QR of `b` and of
/// `a^T`, then a Jacobi SVD of the r x r core `R_b * R_a^T`. Exact for
/// any rank; the nonzero spectrum of BA lives in an r-dimensional
/// subspace.
pub fn product_singular_values(b: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
    if b.cols() != a.rows() {
        return Err(Error::dim("product_singular_values", b.shape(), a.shape()));
    }
    let rb = thin_qr_r(b);
    let ra = thin_qr_r(&a.transpose());
    let core = rb.matmul_abt(&ra)?;
    let mut s = svd(&core)?.s;
    // Pad with exact zeros (or truncate) to min(m, n) so downstream
    // normalization sees the full spectrum length of BA.
    let k = b.rows().min(a.cols());
    s.resize(k, 0.0);
    Ok(s)
}

/// R factor of a thin QR via twice-iterated modified Gram-Schmidt.
/// Zero (or numerically null) columns yield zero rows in R.
fn thin_qr_r(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut r = Matrix::zeros(cols, cols);
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|i| m.get(i, j)).collect();
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let dot: f64 = qi.iter().zip(&v).map(|(&a, &b)| a * b).sum();
                if dot != 0.0 {
                    let prev = r.get(i, j);
                    r.set(i, j, prev + dot);
                    for (vk, &qk) in v.iter_mut().zip(qi) {
                        *vk -= dot * qk;
                    }
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            r.set(j, j, norm);
            for vk in v.iter_mut() {
                *vk /= norm;
            }
            q.push(v);
        } else {
            r.set(j, j, 0.0);
            q.push(vec![0.0; rows]);
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_matrix(rows: usize, cols: usize, tag: &str) -> Matrix {
        let mut r = rng::stream(&["linalg-test", tag]);
        Matrix::from_fn(rows, cols, |_, _| rng::uniform01(&mut r))
    }

    fn orthogonality_defect(m: &Matrix) -> f64 {
        // ||M^T M - I||_F for column-orthonormal M.
        let gram = m.matmul_atb(m).unwrap();
        gram.sub(&Matrix::identity(gram.rows())).unwrap().frob()
    }

    #[test]
    fn svd_identity_spectrum() {
        let r = svd(&Matrix::identity(3)).unwrap();
        for s in &r.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_recovers_planted_spectrum_under_rotation() {
        // Build M = U diag(3,2,1) V^T from random rotations and recover s.
        let q1 = orthogonal_from_seed(3, "q1");
        let q2 = orthogonal_from_seed(3, "q2");
        let d = Matrix::from_fn(3, 3, |i, j| if i == j { (3 - i) as f64 } else { 0.0 });
        let m = q1.matmul(&d).unwrap().matmul(&q2.transpose()).unwrap();
        let r = svd(&m).unwrap();
        for (got, want) in r.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    fn orthogonal_from_seed(n: usize, tag: &str) -> Matrix {
        // Orthonormalize a random Gaussian matrix.
        let mut r = rng::stream(&["ortho", tag]);
        let g = Matrix::from_fn(n, n, |_, _| rng::normal(&mut r));
        let dec = svd(&g).unwrap();
        dec.u.matmul(&dec.vt).unwrap()
    }

    #[test]
    fn svd_reconstruction_and_orthogonality_100x100() {
        let m = random_matrix(100, 100, "recon");
        let dec = svd(&m).unwrap();
        let rel = dec.reconstruct().sub(&m).unwrap().frob() / m.frob();
        assert!(rel < 1e-10, "relative residual {rel}");
        assert!(orthogonality_defect(&dec.u) < 1e-10);
        assert!(orthogonality_defect(&dec.vt.transpose()) < 1e-10);
        for w in dec.s.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(dec.s.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn svd_wide_matrix_matches_transpose_path() {
        let m = random_matrix(4, 9, "wide");
        let dec = svd(&m).unwrap();
        assert_eq!(dec.u.shape(), (4, 4));
        assert_eq!(dec.vt.shape(), (4, 9));
        let rel = dec.reconstruct().sub(&m).unwrap().frob() / m.frob();
        assert!(rel < 1e-12);
    }

    #[test]
    fn svd_rank_deficient_keeps_u_orthonormal() {
        // Rank-2 5x5 matrix; null columns of U come from basis completion.
        let b = random_matrix(5, 2, "lowrank-b");
        let a = random_matrix(2, 5, "lowrank-a");
        let m = b.matmul(&a).unwrap();
        let dec = svd(&m).unwrap();
        assert!(orthogonality_defect(&dec.u) < 1e-10);
        let rel = dec.reconstruct().sub(&m).unwrap().frob() / m.frob();
        assert!(rel < 1e-10);
        assert!(dec.s[2] < 1e-10 * dec.s[0]);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 0, f64::NAN);
        assert!(svd(&m).is_err());
    }

    #[test]
    fn best_rank_full_and_rank_one() {
        let m = random_matrix(6, 6, "best-rank");
        let (_, err) = best_rank_r(&m, 6).unwrap();
        assert!(err < 1e-18 * m.frob_sq() + 1e-24);

        let col = random_matrix(6, 1, "r1-col");
        let row = random_matrix(1, 6, "r1-row");
        let rank1 = col.matmul(&row).unwrap();
        let (recon, err) = best_rank_r(&rank1, 1).unwrap();
        assert!(err.abs() < 1e-12 * rank1.frob_sq());
        assert!(recon.sub(&rank1).unwrap().frob() < 1e-10);
    }

    #[test]
    fn best_rank_out_of_range_errors() {
        let m = Matrix::identity(3);
        assert!(best_rank_r(&m, 0).is_err());
        assert!(best_rank_r(&m, 4).is_err());
    }

    #[test]
    fn effective_rank_identity_is_n() {
        for n in [2usize, 8, 64] {
            let er = effective_rank(&Matrix::identity(n)).unwrap();
            assert!(!er.degenerate);
            assert!((er.value - n as f64).abs() < 1e-9, "n={n}: {}", er.value);
        }
    }

    #[test]
    fn effective_rank_rank_one_is_one() {
        let col = random_matrix(7, 1, "er-col");
        let row = random_matrix(1, 5, "er-row");
        let m = col.matmul(&row).unwrap();
        let er = effective_rank(&m).unwrap();
        assert!((er.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn effective_rank_hand_value_diag_2110() {
        // s = (2,1,1,0), sigma = (1/2, 1/4, 1/4), entropy = 1.5 ln 2.
        let d = Matrix::from_fn(4, 4, |i, j| {
            if i == j {
                [2.0, 1.0, 1.0, 0.0][i]
            } else {
                0.0
            }
        });
        let er = effective_rank(&d).unwrap();
        let expect = (1.5f64 * std::f64::consts::LN_2).exp();
        assert!((er.value - expect).abs() < 1e-12);
        assert!((er.value - 2.8284).abs() < 1e-3);
    }

    #[test]
    fn effective_rank_zero_matrix_flagged() {
        let er = effective_rank(&Matrix::zeros(3, 3)).unwrap();
        assert!(er.degenerate);
        assert_eq!(er.value, 1.0);
    }

    #[test]
    fn effective_rank_scale_invariant_and_bounded() {
        let m = random_matrix(12, 9, "er-scale");
        let a = effective_rank(&m).unwrap().value;
        let b = effective_rank(&m.scale(37.5)).unwrap().value;
        assert!((a - b).abs() < 1e-9);
        assert!((1.0..=9.0 + 1e-9).contains(&a));
    }

    #[test]
    fn condition_number_cases() {
        assert!((condition_number(&Matrix::identity(4)).unwrap() - 1.0).abs() < 1e-12);
        let d = Matrix::from_fn(2, 2, |i, j| {
            if i == j {
                [10.0, 0.1][i]
            } else {
                0.0
            }
        });
        assert!((condition_number(&d).unwrap() - 100.0).abs() < 1e-9);
        assert!(condition_number(&Matrix::zeros(2, 2)).is_err());
        // Rank-1: infinity marker.
        let col = random_matrix(3, 1, "cond-col");
        let row = random_matrix(1, 3, "cond-row");
        let r1 = col.matmul(&row).unwrap();
        assert!(condition_number(&r1).unwrap().is_infinite());
    }

    #[test]
    fn product_singular_values_match_full_svd() {
        let b = random_matrix(40, 8, "psv-b").scale(2.0);
        let a = random_matrix(8, 30, "psv-a");
        let fast = product_singular_values(&b, &a).unwrap();
        let full = svd(&b.matmul(&a).unwrap()).unwrap().s;
        assert_eq!(fast.len(), full.len());
        for (f, g) in fast.iter().zip(&full) {
            assert!((f - g).abs() <= 1e-9 * full[0].max(1.0), "{f} vs {g}");
        }
    }

    #[test]
    fn product_singular_values_zero_factor() {
        let b = Matrix::zeros(10, 3);
        let a = random_matrix(3, 10, "psv-zero");
        let s = product_singular_values(&b, &a).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
        let er = effective_rank_from_singular_values(&s, RankNorm::Sum, 10);
        assert!(er.degenerate);
    }
}
