//! Empirical tangent-kernel Gram matrices and their decompositions.
//!
//! The multi-head kernel of a C-head network on P examples is a P x P x C x C
//! tensor stored as C^2 blocks of P x P matrices. Block (c, d) holds the
//! parameter-space inner products of head-c gradients against head-d
//! gradients. Assembly is factorized per layer (sensitivity inner product
//! times activation inner product), so no dense P x Q Jacobian is ever built
//! outside the quadratic-cost reference path used for validation.

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{per_example_gradients, Activation, NetworkParams};
use ndarray::{Array1, Array2};

/// Hard cap on Gram size; dense 64-bit storage beyond this is a config error.
pub const MAX_GRAM_P: usize = 4096;

/// V/W split of a two-layer kernel, per head-pair block.
#[derive(Clone, Debug)]
pub struct KernelSplit {
    pub gram_v: Vec<Array2<f64>>,
    pub gram_w: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct KernelSnapshot {
    pub step: usize,
    pub p: usize,
    pub c: usize,
    /// blocks[c * C + d] is the P x P block for head pair (c, d).
    pub gram: Vec<Array2<f64>>,
    pub split: Option<KernelSplit>,
}

impl KernelSnapshot {
    pub fn at_step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn block(&self, c: usize, d: usize) -> Result<&Array2<f64>> {
        if c >= self.c || d >= self.c {
            return Err(Error::InvalidConfig(format!(
                "head pair ({c},{d}) out of range for {} heads",
                self.c
            )));
        }
        Ok(&self.gram[c * self.c + d])
    }

    /// The single Gram matrix of a one-head snapshot.
    pub fn scalar_gram(&self) -> &Array2<f64> {
        assert_eq!(self.c, 1, "scalar_gram needs a single-head snapshot, C = {}", self.c);
        &self.gram[0]
    }

    /// Frobenius norm of the full P x P x C x C tensor.
    pub fn frob(&self) -> f64 {
        self.gram
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Head-pair block accessor with range checking.
pub fn subkernel(snapshot: &KernelSnapshot, c: usize, d: usize) -> Result<&Array2<f64>> {
    snapshot.block(c, d)
}

/// Mean of the diagonal blocks C^-1 sum_c K^{c,c}.
pub fn traced_kernel(snapshot: &KernelSnapshot) -> Array2<f64> {
    let mut out = Array2::zeros((snapshot.p, snapshot.p));
    for c in 0..snapshot.c {
        out += &snapshot.gram[c * snapshot.c + c];
    }
    out / snapshot.c as f64
}

/// Full multi-head Gram tensor, assembled layer by layer from factorized
/// per-example gradients. Entry (mu, nu, c, d) is the complete parameter-space
/// inner product of head-c and head-d gradients at gamma rescaling.
pub fn gram_matrix(params: &NetworkParams, inputs: &Array2<f64>, gamma: f64) -> Result<KernelSnapshot> {
    let p = inputs.nrows();
    if p > MAX_GRAM_P {
        return Err(Error::InvalidConfig(format!(
            "gram on {p} examples exceeds the dense-storage cap of {MAX_GRAM_P}"
        )));
    }
    let heads = params.heads();
    let gf = per_example_gradients(params, inputs, gamma)?;
    let nl = params.weights.len();
    let act_gram: Vec<Array2<f64>> = (0..nl).map(|l| gf.acts[l].dot(&gf.acts[l].t())).collect();
    let mut gram = vec![Array2::zeros((p, p)); heads * heads];
    for c in 0..heads {
        for d in 0..=c {
            let mut k = Array2::<f64>::zeros((p, p));
            for l in 0..nl {
                let sg = gf.sens[l][c].dot(&gf.sens[l][d].t());
                k += &(&sg * &act_gram[l]);
            }
            if d < c {
                gram[d * heads + c] = k.t().to_owned();
            }
            gram[c * heads + d] = k;
        }
    }
    Ok(KernelSnapshot { step: 0, p, c: heads, gram, split: None })
}

/// K_V / K_W decomposition of a single-hidden-layer ReLU network:
/// (K_V)^{c,d} = delta_{cd} phi phi^T and
/// (K_W)^{c,d}_{mu,nu} = (x^mu . x^nu) sum_i V_i^c V_i^d D_i^mu D_i^nu,
/// both at the same gamma rescaling as gram_matrix.
pub fn decompose_two_layer(params: &NetworkParams, inputs: &Array2<f64>, gamma: f64) -> Result<KernelSplit> {
    if params.activation != Activation::Relu || params.hidden_layers() != 1 {
        return Err(Error::InvalidConfig(format!(
            "two-layer split needs a single-hidden-layer relu network, got {:?} with {} hidden layers",
            params.activation,
            params.hidden_layers()
        )));
    }
    let (_, cache) = crate::models::forward(params, inputs, gamma)?;
    let heads = params.heads();
    let p = inputs.nrows();
    let g2 = gamma * gamma;
    let phi_gram = cache.phi().dot(&cache.phi().t()) / g2;
    let x_gram = inputs.dot(&inputs.t());
    let zero = Array2::zeros((p, p));
    let mut gram_v = vec![zero.clone(); heads * heads];
    let mut gram_w = vec![zero; heads * heads];
    for c in 0..heads {
        gram_v[c * heads + c] = phi_gram.clone();
        for d in 0..=c {
            // Z_c = D with columns scaled by V^c; the sensitivity gram is Z_c Z_d^T
            let vc = params.weights[1].row(c);
            let vd = params.weights[1].row(d);
            let mut zc = cache.d().clone();
            for mut row in zc.outer_iter_mut() {
                row *= &vc;
            }
            let mut zd = cache.d().clone();
            for mut row in zd.outer_iter_mut() {
                row *= &vd;
            }
            let kw = (&zc.dot(&zd.t()) * &x_gram) / g2;
            if d < c {
                gram_w[d * heads + c] = kw.t().to_owned();
            }
            gram_w[c * heads + d] = kw;
        }
    }
    Ok(KernelSplit { gram_v, gram_w })
}

/// Gram tensor with the V/W split attached (two-layer ReLU networks only).
pub fn gram_with_split(params: &NetworkParams, inputs: &Array2<f64>, gamma: f64) -> Result<KernelSnapshot> {
    let mut snap = gram_matrix(params, inputs, gamma)?;
    snap.split = Some(decompose_two_layer(params, inputs, gamma)?);
    Ok(snap)
}

/// Quadratic-cost reference: materializes the dense per-example Jacobian with
/// plain per-example loops and takes explicit inner products. Only sensible
/// for small instances; exists to validate gram_matrix.
pub fn jacobian_gram(params: &NetworkParams, inputs: &Array2<f64>, gamma: f64) -> Result<KernelSnapshot> {
    let p = inputs.nrows();
    let heads = params.heads();
    let q = params.param_count();
    let nl = params.weights.len();
    let widths = params.widths();
    let mut jac: Vec<Vec<f64>> = Vec::with_capacity(p * heads);
    for mu in 0..p {
        // forward one example with explicit loops
        let mut acts: Vec<Vec<f64>> = vec![inputs.row(mu).to_vec()];
        let mut gates: Vec<Vec<f64>> = Vec::new();
        for l in 0..nl - 1 {
            let w = &params.weights[l];
            let mut post = vec![0.0; w.nrows()];
            let mut gate = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut s = 0.0;
                for j in 0..w.ncols() {
                    s += w[[i, j]] * acts[l][j];
                }
                let g = match params.activation {
                    Activation::Linear => 1.0,
                    Activation::Relu => {
                        if s > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                post[i] = s * g;
                gate[i] = g;
            }
            acts.push(post);
            gates.push(gate);
        }
        for c in 0..heads {
            // backward for head c, writing the flat gradient in layer order
            let mut grad = vec![0.0; q];
            let mut sens = vec![0.0; heads];
            sens[c] = 1.0 / gamma;
            let mut offset = q;
            for l in (0..nl).rev() {
                let w = &params.weights[l];
                offset -= w.len();
                for i in 0..w.nrows() {
                    for j in 0..w.ncols() {
                        grad[offset + i * w.ncols() + j] = sens[i] * acts[l][j];
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; widths[l]];
                    for j in 0..widths[l] {
                        let mut s = 0.0;
                        for i in 0..w.nrows() {
                            s += sens[i] * w[[i, j]];
                        }
                        prev[j] = s * gates[l - 1][j];
                    }
                    sens = prev;
                }
            }
            jac.push(grad);
        }
    }
    let mut gram = vec![Array2::zeros((p, p)); heads * heads];
    for c in 0..heads {
        for d in 0..heads {
            let mut k = Array2::zeros((p, p));
            for mu in 0..p {
                for nu in 0..p {
                    let a = &jac[mu * heads + c];
                    let b = &jac[nu * heads + d];
                    let mut s = 0.0;
                    for t in 0..q {
                        s += a[t] * b[t];
                    }
                    k[[mu, nu]] = s;
                }
            }
            gram[c * heads + d] = k;
        }
    }
    Ok(KernelSnapshot { step: 0, p, c: heads, gram, split: None })
}

/// Rank-one structure of a deep linear network.
#[derive(Clone, Debug)]
pub struct LinearNetFactors {
    pub u: f64,
    pub r1: Array1<f64>,
    pub depth: usize,
}

/// Per-layer top singular triples of a linear network: u is the geometric
/// mean of top singular values, r1 the top right-singular vector of the first
/// layer, and the residual ratio is max over layers of sigma_2 / sigma_1.
pub fn extract_rank_one_factors(params: &NetworkParams) -> Result<(LinearNetFactors, f64)> {
    if params.activation != Activation::Linear {
        return Err(Error::InvalidConfig("rank-one extraction is defined for linear networks".into()));
    }
    let mut log_u = 0.0;
    let mut residual: f64 = 0.0;
    let mut r1 = None;
    for (l, w) in params.weights.iter().enumerate() {
        let (s1, s2, _, v1) = linalg::top_singular(w)?;
        if s1 <= 0.0 {
            return Err(Error::UndefinedMetric(format!("layer {l} is a zero matrix")));
        }
        log_u += s1.ln();
        residual = residual.max(s2 / s1);
        if l == 0 {
            // fix the sign so the largest-magnitude component is positive
            let mut v = v1;
            let top = v
                .iter()
                .cloned()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if top < 0.0 {
                v.mapv_inplace(|x| -x);
            }
            r1 = Some(v);
        }
    }
    let depth = params.weights.len();
    let u = (log_u / depth as f64).exp();
    Ok((
        LinearNetFactors { u, r1: r1.expect("at least one layer"), depth },
        residual,
    ))
}

/// Analytic deep-linear kernel K(x, x') = u^{2L-2} x^T [L r1 r1^T + I] x'.
pub fn linear_theoretical_kernel(factors: &LinearNetFactors, inputs: &Array2<f64>) -> Array2<f64> {
    let l = factors.depth as f64;
    let amp = factors.u.powi(2 * factors.depth as i32 - 2);
    let proj = inputs.dot(&factors.r1);
    let xg = inputs.dot(&inputs.t());
    let p = inputs.nrows();
    let mut k = Array2::zeros((p, p));
    for mu in 0..p {
        for nu in 0..p {
            k[[mu, nu]] = amp * (l * proj[mu] * proj[nu] + xg[[mu, nu]]);
        }
    }
    k
}

/// W^l W^l^T - W^{l+1}^T W^{l+1} for every adjacent layer pair; conserved
/// under gradient flow on linear networks.
pub fn layer_balance(params: &NetworkParams) -> Vec<Array2<f64>> {
    params
        .weights
        .windows(2)
        .map(|w| &w[0].dot(&w[0].t()) - &w[1].t().dot(&w[1]))
        .collect()
}

/// Max over layer pairs of ||M_l(now) - M_l(init)||_F / ||W^l(now)||_F^2.
pub fn layer_conservation_drift(now: &NetworkParams, init: &NetworkParams) -> f64 {
    let bn = layer_balance(now);
    let bi = layer_balance(init);
    let mut worst: f64 = 0.0;
    for (l, (a, b)) in bn.iter().zip(bi.iter()).enumerate() {
        let diff = linalg::frob(&(a - b));
        let scale = now.weights[l].iter().map(|v| v * v).sum::<f64>();
        worst = worst.max(diff / scale);
    }
    worst
}

/// Min eigenvalue check on every diagonal block: fails if any is below
/// -1e-8 * ||K||_F (round-off slack for large assemblies).
pub fn check_psd(snapshot: &KernelSnapshot) -> Result<()> {
    let tol = -1e-8 * snapshot.frob();
    for c in 0..snapshot.c {
        let block = &snapshot.gram[c * snapshot.c + c];
        let (evals, _) = linalg::sym_eigh(block);
        let min = evals[evals.len() - 1];
        if min < tol {
            return Err(Error::UndefinedMetric(format!(
                "diagonal block {c} has eigenvalue {min:.3e} below tolerance {tol:.3e}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_mlp, init_two_layer_relu};
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rel_frob_diff(a: &KernelSnapshot, b: &KernelSnapshot) -> f64 {
        let mut num = 0.0;
        for (x, y) in a.gram.iter().zip(b.gram.iter()) {
            num += (x - y).iter().map(|v| v * v).sum::<f64>();
        }
        num.sqrt() / b.frob().max(1e-300)
    }

    #[test]
    fn single_linear_layer_gram_is_xxt() {
        let params = init_mlp(&[6, 1], crate::models::Activation::Linear, 1.0, 4);
        let x = rng::gaussian_mat(&mut rng::stream(9, rng::STREAM_DATA), 5, 6, 1.0);
        let snap = gram_matrix(&params, &x, 1.0).unwrap();
        let xxt = x.dot(&x.t());
        let diff = snap.scalar_gram() - &xxt;
        assert!(diff.iter().all(|v| v.abs() < 1e-12), "gram of f = w.x must be X X^T");
    }

    #[test]
    fn two_layer_relu_matches_explicit_formula_and_jacobian() {
        let params = init_two_layer_relu(10, 20, 1, 17);
        let x = rng::gaussian_mat(&mut rng::stream(3, rng::STREAM_DATA), 8, 10, 1.0);
        let snap = gram_matrix(&params, &x, 1.0).unwrap();
        // explicit formula K = phi phi^T + (x.x') sum_i V_i^2 D^mu D^nu
        let (_, cache) = crate::models::forward(&params, &x, 1.0).unwrap();
        let v = params.weights[1].row(0);
        for mu in 0..8 {
            for nu in 0..8 {
                let mut want = 0.0;
                for i in 0..20 {
                    want += cache.phi()[[mu, i]] * cache.phi()[[nu, i]];
                    want += x.row(mu).dot(&x.row(nu))
                        * v[i]
                        * v[i]
                        * cache.d()[[mu, i]]
                        * cache.d()[[nu, i]];
                }
                // the cross x.x' must be averaged once, not per i
                let mut w2 = 0.0;
                let xdot = x.row(mu).dot(&x.row(nu));
                let mut vdd = 0.0;
                for i in 0..20 {
                    w2 += cache.phi()[[mu, i]] * cache.phi()[[nu, i]];
                    vdd += v[i] * v[i] * cache.d()[[mu, i]] * cache.d()[[nu, i]];
                }
                w2 += xdot * vdd;
                assert_abs_diff_eq!(want, w2, epsilon = 1e-12);
                assert_abs_diff_eq!(snap.scalar_gram()[[mu, nu]], w2, epsilon = 1e-10);
            }
        }
        let oracle = jacobian_gram(&params, &x, 1.0).unwrap();
        assert!(rel_frob_diff(&snap, &oracle) < 1e-10);
    }

    #[test]
    fn zero_readout_head_zeroes_cross_blocks() {
        let mut params = init_two_layer_relu(5, 12, 3, 8);
        params.weights[1].row_mut(2).fill(0.0);
        let x = rng::gaussian_mat(&mut rng::stream(6, rng::STREAM_DATA), 4, 5, 1.0);
        let snap = gram_matrix(&params, &x, 1.0).unwrap();
        let b02 = snap.block(0, 2).unwrap();
        assert!(b02.iter().all(|v| v.abs() < 1e-14), "cross block with a zero head must vanish");
    }

    #[test]
    fn subkernel_symmetry_and_bounds() {
        let params = init_two_layer_relu(5, 9, 2, 2);
        let x = rng::gaussian_mat(&mut rng::stream(7, rng::STREAM_DATA), 4, 5, 1.0);
        let snap = gram_matrix(&params, &x, 1.0).unwrap();
        let k01 = subkernel(&snap, 0, 1).unwrap();
        let k10 = subkernel(&snap, 1, 0).unwrap();
        let diff = k01 - &k10.t();
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
        assert!(subkernel(&snap, 0, 2).is_err());
        let c1 = init_two_layer_relu(5, 9, 1, 2);
        let s1 = gram_matrix(&c1, &x, 1.0).unwrap();
        let whole = s1.scalar_gram().clone();
        let sub = subkernel(&s1, 0, 0).unwrap();
        assert_eq!(&whole, sub);
    }

    #[test]
    fn wide_network_cross_head_blocks_are_small() {
        // infinite-width proxy: at M = 1e5 the off-diagonal block is < 5% of
        // the diagonal's Frobenius norm at initialization
        let params = init_two_layer_relu(10, 100_000, 2, 12);
        let x = crate::data::gen_sphere_inputs(6, 10, 5);
        let snap = gram_matrix(&params, &x, 1.0).unwrap();
        let diag = snap.block(0, 0).unwrap();
        let off = snap.block(0, 1).unwrap();
        let ratio = crate::linalg::frob(off) / crate::linalg::frob(diag);
        assert!(ratio < 0.05, "off-diagonal to diagonal ratio {ratio} not < 0.05");
    }

    #[test]
    fn split_invariants() {
        let params = init_two_layer_relu(7, 15, 3, 21);
        let x = rng::gaussian_mat(&mut rng::stream(11, rng::STREAM_DATA), 5, 7, 1.0);
        let snap = gram_with_split(&params, &x, 1.0).unwrap();
        let split = snap.split.as_ref().unwrap();
        // V-part is zero off the head diagonal, shared on it
        for c in 0..3 {
            for d in 0..3 {
                if c != d {
                    assert!(split.gram_v[c * 3 + d].iter().all(|&v| v == 0.0));
                }
            }
        }
        // sum reproduces the gram within 1e-10 relative Frobenius error
        let mut num = 0.0;
        for i in 0..9 {
            let s = &split.gram_v[i] + &split.gram_w[i];
            num += (&s - &snap.gram[i]).iter().map(|v| v * v).sum::<f64>();
        }
        assert!(num.sqrt() / snap.frob() < 1e-10);
    }

    #[test]
    fn split_with_zero_readout() {
        let mut params = init_two_layer_relu(4, 6, 1, 3);
        params.weights[1].fill(0.0);
        let x = rng::gaussian_mat(&mut rng::stream(13, rng::STREAM_DATA), 3, 4, 1.0);
        let split = decompose_two_layer(&params, &x, 1.0).unwrap();
        assert!(split.gram_w[0].iter().all(|&v| v == 0.0));
        assert!(split.gram_v[0].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn split_diag_on_orthonormal_inputs() {
        let params = init_two_layer_relu(8, 10, 1, 6);
        let x = crate::data::gen_orthonormal_inputs(4, 8, 2).unwrap();
        let split = decompose_two_layer(&params, &x, 1.0).unwrap();
        let (_, cache) = crate::models::forward(&params, &x, 1.0).unwrap();
        let v = params.weights[1].row(0);
        for mu in 0..4 {
            let mut want = 0.0;
            for i in 0..10 {
                want += v[i] * v[i] * cache.d()[[mu, i]];
            }
            assert_abs_diff_eq!(split.gram_w[0][[mu, mu]], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn split_rejects_wrong_architecture() {
        let deep = init_mlp(&[4, 5, 5, 1], crate::models::Activation::Relu, 1.0, 2);
        let x = rng::gaussian_mat(&mut rng::stream(1, rng::STREAM_DATA), 3, 4, 1.0);
        assert!(decompose_two_layer(&deep, &x, 1.0).is_err());
        let lin = init_mlp(&[4, 5, 1], crate::models::Activation::Linear, 1.0, 2);
        assert!(decompose_two_layer(&lin, &x, 1.0).is_err());
    }

    #[test]
    fn traced_kernel_averages_diagonal_blocks() {
        let params = init_two_layer_relu(5, 8, 2, 9);
        let x = rng::gaussian_mat(&mut rng::stream(15, rng::STREAM_DATA), 4, 5, 1.0);
        let snap = gram_matrix(&params, &x, 1.0).unwrap();
        let tr = traced_kernel(&snap);
        let want = (snap.block(0, 0).unwrap() + snap.block(1, 1).unwrap()) / 2.0;
        let diff = &tr - &want;
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
        let c1 = init_two_layer_relu(5, 8, 1, 9);
        let s1 = gram_matrix(&c1, &x, 1.0).unwrap();
        assert_eq!(&traced_kernel(&s1), s1.scalar_gram());
    }

    #[test]
    fn theoretical_kernel_hand_values() {
        let mut e1 = Array1::zeros(3);
        e1[0] = 1.0;
        let factors = LinearNetFactors { u: 1.0, r1: e1, depth: 1 };
        let x = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let k = linear_theoretical_kernel(&factors, &x);
        // x = r1: K = 1*(1*1 + 1) = 2; x perpendicular to r1: K = 1
        assert_abs_diff_eq!(k[[0, 0]], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(k[[1, 1]], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(k[[0, 1]], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn rank_one_extraction_exact_and_random() {
        // exactly rank-one layers recover u with zero residual
        let r1 = crate::rng::unit_vec(&mut rng::stream(2, rng::STREAM_MISC), 6);
        let r2 = crate::rng::unit_vec(&mut rng::stream(3, rng::STREAM_MISC), 5);
        let r3 = crate::rng::unit_vec(&mut rng::stream(4, rng::STREAM_MISC), 1);
        let u = 1.7;
        let w1 = Array2::from_shape_fn((5, 6), |(i, j)| u * r2[i] * r1[j]);
        let w2 = Array2::from_shape_fn((1, 5), |(i, j)| u * r3[i] * r2[j]);
        let params = NetworkParams {
            weights: vec![w1, w2],
            activation: crate::models::Activation::Linear,
        };
        let (factors, residual) = extract_rank_one_factors(&params).unwrap();
        assert_abs_diff_eq!(factors.u, u, epsilon = 1e-10);
        assert!(residual < 1e-12, "residual {residual} should vanish for exact rank-one layers");
        assert_abs_diff_eq!(factors.r1.dot(&r1).abs(), 1.0, epsilon = 1e-10);
        // a random square Gaussian matrix is far from rank-one
        let g = NetworkParams {
            weights: vec![rng::gaussian_mat(&mut rng::stream(5, rng::STREAM_MISC), 100, 100, 1.0)],
            activation: crate::models::Activation::Linear,
        };
        let (_, rr) = extract_rank_one_factors(&g).unwrap();
        assert!((0.90..=1.0).contains(&rr), "random-matrix residual {rr} outside [0.90, 1.0]");
        // zero matrix is an error
        let z = NetworkParams {
            weights: vec![Array2::zeros((3, 3))],
            activation: crate::models::Activation::Linear,
        };
        assert!(extract_rank_one_factors(&z).is_err());
    }

    #[test]
    fn conservation_holds_during_linear_training() {
        let widths = [6, 10, 10, 1];
        let mut params = crate::models::init_deep_linear(&widths, 0.3, 5);
        let init = params.clone();
        let x = crate::data::gen_sphere_inputs(8, 6, 3);
        let y = crate::data::gen_random_binary_labels(8, 4).insert_axis(ndarray::Axis(1));
        let data = crate::data::Dataset {
            inputs: x,
            targets: y,
            class_of: None,
            task_kind: crate::data::TaskKind::RandomBinary,
            teacher_weights: None,
        };
        let config = crate::models::TrainConfig::with_eta(1e-2, 1, crate::models::LossNormalization::MeanOverP);
        for _ in 0..500 {
            crate::models::gd_step(&mut params, &data, &config).unwrap();
            let drift = layer_conservation_drift(&params, &init);
            assert!(drift < 1e-3, "conservation drift {drift} at eta=1e-2 exceeds 1e-3");
        }
    }

    #[test]
    fn psd_check_accepts_real_grams() {
        let params = init_two_layer_relu(6, 14, 2, 33);
        let x = rng::gaussian_mat(&mut rng::stream(21, rng::STREAM_DATA), 6, 6, 1.0);
        let snap = gram_matrix(&params, &x, 1.0).unwrap();
        check_psd(&snap).unwrap();
    }

    #[test]
    fn gram_cap_enforced() {
        let params = init_mlp(&[2, 1], crate::models::Activation::Linear, 1.0, 1);
        let x = Array2::zeros((MAX_GRAM_P + 1, 2));
        assert!(gram_matrix(&params, &x, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

        #[test]
        fn gram_matches_jacobian_on_small_instances(
            seed in 0u64..1000,
            n in 2usize..5,
            m in 2usize..7,
            heads in 1usize..3,
            p in 1usize..5,
            relu in proptest::bool::ANY,
        ) {
            let act = if relu { crate::models::Activation::Relu } else { crate::models::Activation::Linear };
            let params = init_mlp(&[n, m, heads], act, 1.0, seed);
            prop_assume!(params.param_count() <= 500);
            let x = rng::gaussian_mat(&mut rng::stream(seed + 1, rng::STREAM_DATA), p, n, 1.0);
            let fast = gram_matrix(&params, &x, 1.0).unwrap();
            let slow = jacobian_gram(&params, &x, 1.0).unwrap();
            prop_assert!(rel_frob_diff(&fast, &slow) < 1e-10);
        }

        #[test]
        fn gram_permutation_equivariant(seed in 0u64..1000) {
            let params = init_two_layer_relu(5, 11, 2, seed);
            let x = rng::gaussian_mat(&mut rng::stream(seed, rng::STREAM_DATA), 6, 5, 1.0);
            let snap = gram_matrix(&params, &x, 1.0).unwrap();
            // reverse the example order
            let mut xr = Array2::zeros((6, 5));
            for mu in 0..6 {
                xr.row_mut(mu).assign(&x.row(5 - mu));
            }
            let snap_r = gram_matrix(&params, &xr, 1.0).unwrap();
            for c in 0..2 {
                for d in 0..2 {
                    let a = snap.block(c, d).unwrap();
                    let b = snap_r.block(c, d).unwrap();
                    for mu in 0..6 {
                        for nu in 0..6 {
                            prop_assert!((a[[mu, nu]] - b[[5 - mu, 5 - nu]]).abs() < 1e-12);
                        }
                    }
                }
            }
        }

        #[test]
        fn gram_scales_inverse_gamma_squared(seed in 0u64..1000) {
            let params = init_two_layer_relu(4, 9, 1, seed);
            let x = rng::gaussian_mat(&mut rng::stream(seed + 7, rng::STREAM_DATA), 4, 4, 1.0);
            let g1 = gram_matrix(&params, &x, 1.0).unwrap();
            let g2 = gram_matrix(&params, &x, 2.0).unwrap();
            for (a, b) in g1.scalar_gram().iter().zip(g2.scalar_gram().iter()) {
                prop_assert!((a - 4.0 * b).abs() < 1e-10 * a.abs().max(1.0));
            }
        }
    }
}
