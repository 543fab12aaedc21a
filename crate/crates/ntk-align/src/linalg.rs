//! Small dense linear algebra: norms, symmetric eigendecomposition, SVD
//! factors, QR orthonormalization, and deterministic power iteration.
//!
//! Dense decompositions go through nalgebra; matrices here are desk-scale
//! (P <= 4096), so conversion cost is irrelevant next to Gram assembly.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

pub fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn to_na(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().cloned())
}

pub fn from_na(m: &nalgebra::DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
/// Returns (eigenvalues, eigenvectors as columns).
pub fn sym_eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    assert_eq!(a.nrows(), a.ncols(), "sym_eigh needs a square matrix");
    let se = nalgebra::SymmetricEigen::new(to_na(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[j].partial_cmp(&se.eigenvalues[i]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&k| se.eigenvalues[k]));
    let vecs = Array2::from_shape_fn((n, n), |(i, j)| se.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

/// Largest two singular values and the top left/right singular vectors.
pub fn top_singular(a: &Array2<f64>) -> Result<(f64, f64, Array1<f64>, Array1<f64>)> {
    let svd = nalgebra::SVD::new(to_na(a), true, true);
    let sv = &svd.singular_values;
    if sv.len() == 0 || sv[0] <= 0.0 {
        return Err(Error::UndefinedMetric(
            "zero matrix has no defined rank-one factors".into(),
        ));
    }
    let s1 = sv[0];
    let s2 = if sv.len() > 1 { sv[1] } else { 0.0 };
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let u1 = Array1::from_iter((0..u.nrows()).map(|i| u[(i, 0)]));
    let v1 = Array1::from_iter((0..vt.ncols()).map(|j| vt[(0, j)]));
    Ok((s1, s2, u1, v1))
}

/// Orthonormal rows from QR of an i.i.d. Gaussian draw: a P x N matrix with
/// X X^T = I. Redraws on numerical rank deficiency.
pub fn qr_orthonormal_rows(
    rng: &mut rand_chacha::ChaCha8Rng,
    p: usize,
    n: usize,
) -> Result<Array2<f64>> {
    if p > n {
        return Err(Error::InvalidConfig(format!(
            "cannot build {p} orthonormal rows in dimension {n}"
        )));
    }
    for _ in 0..16 {
        // QR of an N x P Gaussian; Q's first P columns, transposed, are the rows.
        let g = crate::rng::gaussian_mat(rng, n, p, 1.0);
        let qr = to_na(&g).qr();
        let q = qr.q();
        let r = qr.r();
        let min_diag = (0..p).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if min_diag < 1e-10 {
            continue;
        }
        // Fix the sign so the decomposition (hence the output) is unique.
        let x = Array2::from_shape_fn((p, n), |(i, j)| {
            let s = if r[(i, i)] < 0.0 { -1.0 } else { 1.0 };
            s * q[(j, i)]
        });
        return Ok(x);
    }
    Err(Error::Divergence("repeated rank deficiency in QR draws".into()))
}

/// Result of power iteration on a symmetric matrix.
pub struct PowerIterResult {
    pub lambda1: f64,
    pub v1: Array1<f64>,
    /// Estimate of the second eigenvalue by one deflated iteration pass.
    pub lambda2: f64,
}

/// Power iteration with a deterministic start vector (normalized all-ones),
/// 1000 iterations with gap-based early stop.
pub fn power_iteration(k: &Array2<f64>, iters: usize, tol: f64) -> PowerIterResult {
    let n = k.nrows();
    assert_eq!(n, k.ncols(), "power iteration needs a square matrix");
    let run = |start: Array1<f64>, deflate: Option<(&Array1<f64>, f64)>| -> (f64, Array1<f64>) {
        let mut v = start;
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v /= norm;
        }
        let mut lambda = 0.0;
        for _ in 0..iters {
            let mut w = k.dot(&v);
            if let Some((d, l1)) = deflate {
                let c = d.dot(&v) * l1;
                w = &w - &(d * c);
            }
            let wn = w.dot(&w).sqrt();
            if wn < 1e-300 {
                return (0.0, v);
            }
            let next = &w / wn;
            let l = next.dot(&k.dot(&next));
            if (l - lambda).abs() <= tol * l.abs().max(1e-300) {
                return (l, next);
            }
            lambda = l;
            v = next;
        }
        (lambda, v)
    };
    let ones = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let (lambda1, v1) = run(ones.clone(), None);
    // Deflated second pass estimates the spectral gap for degeneracy checks.
    let mut start2 = ones;
    let c = v1.dot(&start2);
    start2 = &start2 - &(&v1 * c);
    if start2.dot(&start2).sqrt() < 1e-8 {
        start2 = Array1::from_shape_fn(n, |i| if i == 0 { 1.0 } else { 0.0 });
        let c = v1.dot(&start2);
        start2 = &start2 - &(&v1 * c);
    }
    let (lambda2_raw, v2) = run(start2, Some((&v1, lambda1)));
    // Rayleigh quotient on the deflated vector in the original matrix.
    let lambda2 = if v2.dot(&v2) > 0.0 { v2.dot(&k.dot(&v2)) } else { lambda2_raw };
    PowerIterResult { lambda1, v1, lambda2 }
}

/// Largest eigenvalue of a symmetric PSD matrix (power iteration shorthand).
pub fn lambda_max(k: &Array2<f64>) -> f64 {
    power_iteration(k, 1000, 1e-12).lambda1
}
