//! Closed-form rate predictions for two-layer ReLU alignment, the gate
//! ansatz residual, specialization rates, gate statistics, and the
//! deep-linear no-specialization identity.

use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{ActivationCache, Activation, NetworkParams};
use crate::ntk::KernelSnapshot;
use ndarray::{Array1, Array2};

/// Predicted instantaneous rates. Alignment rates and specialization rates
/// come from separate predictors; fields the predictor does not produce are
/// left at zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct RatePrediction {
    /// d alpha/dt at z = y/||y||.
    pub dalpha_y: f64,
    /// Uniform-probe average of d alpha/dt.
    pub dalpha_mean: f64,
    /// d beta/dt for any unit probe (isotropic by construction).
    pub dbeta: f64,
    /// d B_W^c(y_c)/dt for the matched class.
    pub db_spec_same: f64,
    /// d B_W^c(y_d)/dt for d != c; half the matched rate by construction.
    pub db_spec_other: f64,
}

/// Alignment-rate predictor on orthonormal inputs with +-1 labels:
///   d alpha/dt (y/||y||)   = (eta/P) (y-f).f + (eta/P) [(y-f).y][y.f]
///   < d alpha/dt (z) >_z   = (2 eta/P) (y-f).f
///   d beta/dt (unit z)     = eta (y-f).f
/// The beta rate keeps the full coefficient its V-dynamics derivation
/// produces; a halved variant of the same expression circulates and is
/// rejected here because it contradicts the derivation's own ansatz algebra.
///
/// Rates are per unit gradient-flow time for the summed squared loss.
/// A finite GD step at rate eta_gd under the mean-over-P convention with
/// plain squared summands advances flow time by 2 eta_gd / P, and inputs of
/// squared norm s scale every measured rate by s (the input gram enters each
/// bilinear once); comparisons against measured finite differences must
/// apply both conversions.
pub fn predicted_alpha_beta_rates(f: &Array1<f64>, y: &Array1<f64>, eta: f64, p: usize) -> RatePrediction {
    let resid_dot_f = (y - f).dot(f);
    let resid_dot_y = (y - f).dot(y);
    let y_dot_f = y.dot(f);
    let pf = p as f64;
    RatePrediction {
        dalpha_y: eta / pf * resid_dot_f + eta / pf * resid_dot_y * y_dot_f,
        dalpha_mean: 2.0 * eta / pf * resid_dot_f,
        dbeta: eta * resid_dot_f,
        db_spec_same: 0.0,
        db_spec_other: 0.0,
    }
}

/// Specialization-rate predictor at a class center:
/// same = eta (P/C) [(P/C) + m P^2/C^2] f_c, other = same / 2.
pub fn predicted_specialization_rates(
    f_c_at_center: f64,
    p: usize,
    c: usize,
    m: f64,
    eta: f64,
) -> RatePrediction {
    let pc = p as f64 / c as f64;
    let same = eta * pc * (pc + m * pc * pc) * f_c_at_center;
    RatePrediction {
        dalpha_y: 0.0,
        dalpha_mean: 0.0,
        dbeta: 0.0,
        db_spec_same: same,
        db_spec_other: 0.5 * same,
    }
}

/// The cross term sum_i D_i^nu V_i phi_i^mu that the gate ansatz compresses.
pub fn ansatz_cross_term(cache: &ActivationCache, v: &Array1<f64>, mu: usize, nu: usize) -> f64 {
    let phi = cache.phi();
    let d = cache.d();
    let m = phi.ncols();
    let mut s = 0.0;
    for i in 0..m {
        s += d[[nu, i]] * v[i] * phi[[mu, i]];
    }
    s
}

/// Relative residual of the gate ansatz sum_i D_i^nu V_i phi_i^mu ~ f^mu / 2
/// for orthogonal x^mu, x^nu: |cross - f^mu/2| / max(|f^mu|, 1e-12).
///
/// Single pairs carry O(1) relative fluctuations at any width (numerator and
/// denominator shrink together), so smallness claims belong to the
/// partner-averaged statistic below, not to this per-pair value.
pub fn bernoulli_ansatz_residual(
    cache: &ActivationCache,
    v: &Array1<f64>,
    f: &Array1<f64>,
    mu: usize,
    nu: usize,
) -> f64 {
    let cross = ansatz_cross_term(cache, v, mu, nu);
    (cross - 0.5 * f[mu]).abs() / f[mu].abs().max(1e-12)
}

/// Partner-averaged ansatz residual:
/// mean_mu |mean_{nu != mu} cross(mu, nu) - f^mu/2| / rms(f).
/// Averaging over partners cancels the zero-mean gate fluctuations and
/// exposes the systematic part of the ansatz error.
pub fn ansatz_aggregate_residual(cache: &ActivationCache, v: &Array1<f64>, f: &Array1<f64>) -> f64 {
    let p = f.len();
    assert!(p >= 2, "aggregate residual needs at least two examples");
    let rms = (f.dot(f) / p as f64).sqrt().max(1e-12);
    let mut total = 0.0;
    for mu in 0..p {
        let mut s = 0.0;
        for nu in 0..p {
            if nu != mu {
                s += ansatz_cross_term(cache, v, mu, nu);
            }
        }
        total += (s / (p - 1) as f64 - 0.5 * f[mu]).abs();
    }
    total / p as f64 / rms
}

/// Fraction of gate entries (over all hidden layers, units, and examples)
/// that changed between two caches of the same architecture.
pub fn gate_flip_fraction(a: &ActivationCache, b: &ActivationCache) -> f64 {
    let mut flips = 0usize;
    let mut total = 0usize;
    for (ga, gb) in a.gates.iter().zip(b.gates.iter()) {
        for (x, y) in ga.iter().zip(gb.iter()) {
            total += 1;
            if x != y {
                flips += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        flips as f64 / total as f64
    }
}

/// Empirical covariance over hidden units between pairs of gate vectors,
/// averaged over same-class pairs and different-class pairs. A single-class
/// dataset has no different-class pairs; that average is absent.
pub fn gate_covariance(cache: &ActivationCache, class_of: &[usize]) -> (f64, Option<f64>) {
    let d = cache.d();
    let p = d.nrows();
    let m = d.ncols();
    assert_eq!(class_of.len(), p, "one class label per example");
    let means: Vec<f64> = (0..p).map(|mu| d.row(mu).sum() / m as f64).collect();
    let cov = |mu: usize, nu: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..m {
            s += (d[[mu, i]] - means[mu]) * (d[[nu, i]] - means[nu]);
        }
        s / m as f64
    };
    let mut same = (0.0, 0usize);
    let mut diff = (0.0, 0usize);
    for mu in 0..p {
        for nu in mu + 1..p {
            let c = cov(mu, nu);
            if class_of[mu] == class_of[nu] {
                same.0 += c;
                same.1 += 1;
            } else {
                diff.0 += c;
                diff.1 += 1;
            }
        }
    }
    let same_avg = if same.1 > 0 { same.0 / same.1 as f64 } else { 0.0 };
    let diff_avg = if diff.1 > 0 { Some(diff.0 / diff.1 as f64) } else { None };
    (same_avg, diff_avg)
}

/// Measured finite-difference counterparts of the alpha/beta rates between
/// two snapshots of one run, probes shared with the predictor conventions.
#[derive(Clone, Copy, Debug)]
pub struct MeasuredRates {
    pub dalpha_y: f64,
    pub dalpha_mean: f64,
    pub dbeta_y: f64,
    pub dbeta_mean: f64,
    /// Coefficient of variation of d beta/dt across the probe set.
    pub dbeta_cov: f64,
}

pub fn measured_rates(
    run_id_a: &str,
    snap_a: &KernelSnapshot,
    run_id_b: &str,
    snap_b: &KernelSnapshot,
    y: &Array1<f64>,
    probe_count: usize,
    probe_seed: u64,
    dt: f64,
) -> Result<MeasuredRates> {
    if run_id_a != run_id_b {
        return Err(Error::InvalidConfig(format!(
            "rate measurement across different runs ('{run_id_a}' vs '{run_id_b}')"
        )));
    }
    let sa = snap_a
        .split
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("first snapshot lacks a V/W split".into()))?;
    let sb = snap_b
        .split
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("second snapshot lacks a V/W split".into()))?;
    if snap_a.c != 1 || snap_b.c != 1 {
        return Err(Error::InvalidConfig("alpha/beta rates are defined for scalar-head runs".into()));
    }
    let yn = y.dot(y).sqrt();
    if yn <= 0.0 {
        return Err(Error::UndefinedMetric("rates against a zero target".into()));
    }
    let zy = y / yn;
    let gv_a = &sa.gram_v[0];
    let gw_a = &sa.gram_w[0];
    let gv_b = &sb.gram_v[0];
    let gw_b = &sb.gram_w[0];
    let dalpha_y = (metrics::bilinear(gv_b, &zy)? - metrics::bilinear(gv_a, &zy)?) / dt;
    let dbeta_y = (metrics::bilinear(gw_b, &zy)? - metrics::bilinear(gw_a, &zy)?) / dt;
    let probes = metrics::probe_directions(y.len(), probe_count, probe_seed);
    let mut da = 0.0;
    let mut db = 0.0;
    let mut db2 = 0.0;
    for z in &probes {
        da += (metrics::bilinear(gv_b, z)? - metrics::bilinear(gv_a, z)?) / dt;
        let b = (metrics::bilinear(gw_b, z)? - metrics::bilinear(gw_a, z)?) / dt;
        db += b;
        db2 += b * b;
    }
    let n = probe_count as f64;
    let dbeta_mean = db / n;
    let var = (db2 / n - dbeta_mean * dbeta_mean).max(0.0);
    let cov = if dbeta_mean.abs() > 0.0 { var.sqrt() / dbeta_mean.abs() } else { 0.0 };
    Ok(MeasuredRates {
        dalpha_y,
        dalpha_mean: da / n,
        dbeta_y,
        dbeta_mean,
        dbeta_cov: cov,
    })
}

/// Per-layer structure of a deep linear multi-head kernel: the C x C
/// matrices alpha_l and the P x P activation Grams, which reconstruct every
/// subkernel exactly.
#[derive(Clone, Debug)]
pub struct LinearSpecializationProbe {
    /// alpha_l[k] for hidden layer k+1 (k = 0..L-1), each C x C.
    pub alpha_l: Vec<Array2<f64>>,
    /// f_l_gram[l] = activations-at-layer-l Gram, l = 0 (inputs) .. L.
    pub f_l_gram: Vec<Array2<f64>>,
}

impl LinearSpecializationProbe {
    /// K^{c,c'} = delta_{cc'} f_L-gram + sum_k alpha_{k}(c,c') f_{k-1}-gram.
    pub fn reconstruct_subkernel(&self, c: usize, d: usize) -> Array2<f64> {
        let l = self.alpha_l.len();
        let mut k = if c == d {
            self.f_l_gram[l].clone()
        } else {
            Array2::zeros(self.f_l_gram[l].raw_dim())
        };
        for (idx, alpha) in self.alpha_l.iter().enumerate() {
            k.scaled_add(alpha[[c, d]], &self.f_l_gram[idx]);
        }
        k
    }
}

/// Computes every alpha_l(c,c') = V^c^T W^L ... W^{l+1} W^{l+1}^T ... W^L^T V^{c'}
/// and layer Grams for a linear multi-head network, plus the class-symmetry
/// deviation max |alpha_l(c,c) - alpha_l(c',c')| / mean over the diagonal.
pub fn linear_no_specialization_check(
    params: &NetworkParams,
    inputs: &Array2<f64>,
) -> Result<(LinearSpecializationProbe, f64)> {
    if params.activation != Activation::Linear {
        return Err(Error::InvalidConfig("specialization probe is defined for linear networks".into()));
    }
    if params.heads() < 2 {
        return Err(Error::InvalidConfig("specialization probe needs a multi-head network".into()));
    }
    let nl = params.weights.len();
    let l = nl - 1;
    // downstream products S^{(k)} = V W^L ... W^{k+1}, built from the readout
    let mut alpha_l = vec![Array2::zeros((0, 0)); l];
    let mut s = params.weights[nl - 1].clone(); // C x M_L
    for k in (1..=l).rev() {
        alpha_l[k - 1] = s.dot(&s.t());
        if k > 1 {
            s = s.dot(&params.weights[k - 1]);
        }
    }
    let (_, cache) = crate::models::forward(params, inputs, 1.0)?;
    let f_l_gram: Vec<Array2<f64>> = (0..=l).map(|idx| cache.acts[idx].dot(&cache.acts[idx].t())).collect();
    // class symmetry of the diagonals
    let c = params.heads();
    let mut deviation: f64 = 0.0;
    for alpha in &alpha_l {
        let mean = (0..c).map(|i| alpha[[i, i]]).sum::<f64>() / c as f64;
        for i in 0..c {
            for j in 0..c {
                let gap = (alpha[[i, i]] - alpha[[j, j]]).abs() / mean.abs().max(1e-300);
                deviation = deviation.max(gap);
            }
        }
    }
    Ok((LinearSpecializationProbe { alpha_l, f_l_gram }, deviation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_orthonormal_inputs, Dataset, TaskKind};
    use crate::models::{forward, gd_step, init_mlp, init_two_layer_relu, LossNormalization, TrainConfig};
    use crate::ntk::gram_with_split;
    use approx::assert_abs_diff_eq;
    use ndarray::Axis;

    #[test]
    fn alignment_rates_special_points() {
        let y = Array1::from_vec(vec![1.0, -1.0, 1.0, 1.0]);
        let zero = Array1::zeros(4);
        let r = predicted_alpha_beta_rates(&zero, &y, 0.5, 4);
        assert_eq!((r.dalpha_y, r.dalpha_mean, r.dbeta), (0.0, 0.0, 0.0));
        let conv = predicted_alpha_beta_rates(&y, &y, 0.5, 4);
        assert_eq!((conv.dalpha_y, conv.dalpha_mean, conv.dbeta), (0.0, 0.0, 0.0));
    }

    #[test]
    fn alignment_rates_worked_example() {
        // f = y/2, P = 100, eta = 0.1, ||y||^2 = 100: (y-f).f = 25
        let y = Array1::from_elem(100, 1.0);
        let f = &y / 2.0;
        let r = predicted_alpha_beta_rates(&f, &y, 0.1, 100);
        assert_abs_diff_eq!(r.dalpha_mean, 0.05, epsilon = 1e-14);
        // both terms of the y-direction rate: (0.1/100)*25 + (0.1/100)*50*50
        assert_abs_diff_eq!(r.dalpha_y, 0.025 + 2.5, epsilon = 1e-12);
        // the V-dynamics derivation gives eta (y-f).f = 2.5; the halved
        // variant (1.25) is inconsistent with that algebra and is rejected
        assert_abs_diff_eq!(r.dbeta, 2.5, epsilon = 1e-14);
    }

    #[test]
    fn specialization_rates_worked_example() {
        // m=0, P=500, C=10, eta=0.2, f_c=0.2: same = 0.2*50*50*0.2 = 100
        let r = predicted_specialization_rates(0.2, 500, 10, 0.0, 0.2);
        assert_abs_diff_eq!(r.db_spec_same, 100.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.db_spec_other, 50.0, epsilon = 1e-10);
        let z = predicted_specialization_rates(0.0, 500, 10, 0.5, 0.2);
        assert_eq!((z.db_spec_same, z.db_spec_other), (0.0, 0.0));
        // the half ratio holds for any m
        let m = predicted_specialization_rates(0.7, 300, 6, 0.9, 0.1);
        assert_abs_diff_eq!(m.db_spec_other, 0.5 * m.db_spec_same, epsilon = 1e-12);
    }

    #[test]
    fn ansatz_residual_edge_cases() {
        let params = init_two_layer_relu(6, 10, 1, 4);
        let x = gen_orthonormal_inputs(4, 6, 1).unwrap();
        let (out, cache) = forward(&params, &x, 1.0).unwrap();
        let f = out.column(0).to_owned();
        // V = 0 makes both the cross term and f vanish: 0 / epsilon = 0
        let vzero = Array1::zeros(10);
        assert_eq!(bernoulli_ansatz_residual(&cache, &vzero, &Array1::zeros(4), 0, 1), 0.0);
        // all-open gates turn the cross term into f^mu exactly: residual 1/2
        let mut open = cache.clone();
        open.gates[0].fill(1.0);
        // with D = 1 the cross term is sum_i V_i phi_i^mu which is f only if
        // phi was computed with the same open gates; rebuild phi = preacts
        let pre = x.dot(&params.weights[0].t());
        open.acts[1] = pre;
        let v = params.weights[1].row(0).to_owned();
        let fr = open.acts[1].dot(&v);
        let res = bernoulli_ansatz_residual(&open, &v, &fr, 0, 1);
        assert_abs_diff_eq!(res, 0.5, epsilon = 1e-12);
        let _ = f;
    }

    fn random_near_orthogonal_task(n: usize, p: usize, seed_x: u64, seed_y: u64) -> Dataset {
        // per-coordinate variance 1/sqrt(N): high-dimensional draws are
        // nearly orthogonal with squared norm about sqrt(N)
        let sigma = (n as f64).powf(-0.25);
        let x = crate::rng::gaussian_mat(&mut crate::rng::stream(seed_x, crate::rng::STREAM_DATA), p, n, sigma);
        let y = crate::data::gen_random_binary_labels(p, seed_y);
        Dataset {
            inputs: x,
            targets: y.insert_axis(Axis(1)),
            class_of: None,
            task_kind: TaskKind::RandomBinary,
            teacher_weights: None,
        }
    }

    #[test]
    fn ansatz_aggregate_residual_small_at_init() {
        let data = random_near_orthogonal_task(1000, 100, 101, 103);
        let params = init_two_layer_relu(1000, 2000, 1, 107);
        let (out, cache) = forward(&params, &data.inputs, 1.0).unwrap();
        let f = out.column(0).to_owned();
        let v = params.weights[1].row(0).to_owned();
        let agg = ansatz_aggregate_residual(&cache, &v, &f);
        assert!(agg < 0.1, "aggregate ansatz residual {agg} not < 0.1 at init");
        // the per-pair residual stays O(1) no matter the width; only the
        // partner average is small
        let mut per_pair = 0.0;
        for mu in 0..10 {
            for nu in 0..10 {
                if mu != nu {
                    per_pair += bernoulli_ansatz_residual(&cache, &v, &f, mu, nu);
                }
            }
        }
        assert!(per_pair / 90.0 > 0.3, "per-pair residual unexpectedly small: {}", per_pair / 90.0);
    }

    #[test]
    fn gate_flip_fraction_extremes() {
        let params = init_two_layer_relu(5, 8, 1, 2);
        let x = crate::rng::gaussian_mat(&mut crate::rng::stream(3, crate::rng::STREAM_DATA), 4, 5, 1.0);
        let (_, cache) = forward(&params, &x, 1.0).unwrap();
        assert_eq!(gate_flip_fraction(&cache, &cache), 0.0);
        let mut flipped = cache.clone();
        flipped.gates[0].mapv_inplace(|g| 1.0 - g);
        assert_eq!(gate_flip_fraction(&cache, &flipped), 1.0);
    }

    #[test]
    fn gate_flips_rare_during_training() {
        let data = random_near_orthogonal_task(300, 40, 201, 203);
        let mut params = init_two_layer_relu(300, 800, 1, 207);
        let (_, cache0) = forward(&params, &data.inputs, 1.0).unwrap();
        let config = TrainConfig::with_eta(0.1, 1, LossNormalization::MeanOverP);
        for _ in 0..64 {
            gd_step(&mut params, &data, &config).unwrap();
        }
        let (_, cache1) = forward(&params, &data.inputs, 1.0).unwrap();
        let frac = gate_flip_fraction(&cache0, &cache1);
        assert!(frac < 0.05, "gate flip fraction {frac} not < 0.05");
    }

    #[test]
    fn gate_covariance_identical_and_single_class() {
        let params = init_two_layer_relu(8, 2000, 1, 7);
        // two identical examples in one class: same-class covariance is the
        // Bernoulli variance of the gate vector, about 1/4
        let x0 = crate::rng::gaussian_vec(&mut crate::rng::stream(8, crate::rng::STREAM_DATA), 8, 1.0);
        let mut x = Array2::zeros((2, 8));
        x.row_mut(0).assign(&x0);
        x.row_mut(1).assign(&x0);
        let (_, cache) = forward(&params, &x, 1.0).unwrap();
        let (same, diff) = gate_covariance(&cache, &[0, 0]);
        assert!((same - 0.25).abs() < 0.05, "identical-example covariance {same} not near 1/4");
        assert!(diff.is_none(), "single class must leave the cross-class average absent");
    }

    #[test]
    fn gate_covariance_orthogonal_centers_uncorrelated() {
        let params = init_two_layer_relu(100, 3000, 2, 11);
        let x = gen_orthonormal_inputs(6, 100, 9).unwrap();
        let (_, cache) = forward(&params, &x, 1.0).unwrap();
        let (_, diff) = gate_covariance(&cache, &[0, 0, 0, 1, 1, 1]);
        let d = diff.unwrap();
        assert!(d.abs() < 0.05, "orthogonal-input cross-class covariance {d} not < 0.05");
    }

    #[test]
    fn measured_rates_static_run_is_zero() {
        let params = init_two_layer_relu(6, 12, 1, 13);
        let x = gen_orthonormal_inputs(5, 6, 2).unwrap();
        let snap = gram_with_split(&params, &x, 1.0).unwrap();
        let y = crate::data::gen_random_binary_labels(5, 3);
        let r = measured_rates("run", &snap, "run", &snap, &y, 8, 1, 1.0).unwrap();
        assert_eq!(r.dalpha_y, 0.0);
        assert_eq!(r.dbeta_mean, 0.0);
        assert!(measured_rates("a", &snap, "b", &snap, &y, 8, 1, 1.0).is_err());
    }

    #[test]
    fn measured_rates_match_theory_scalings() {
        // one warmup step moves f off the raw init, where (y-f).f can be
        // negative and the rate formulas do not apply yet; rates are then
        // measured across the next step
        let p = 100;
        let eta = 0.1;
        let data = random_near_orthogonal_task(1000, p, 17, 21);
        let y = data.scalar_targets().unwrap();
        let mut params = init_two_layer_relu(1000, 2000, 1, 23);
        let config = TrainConfig::with_eta(eta, 1, LossNormalization::MeanOverP);
        gd_step(&mut params, &data, &config).unwrap();
        let (out1, _) = forward(&params, &data.inputs, 1.0).unwrap();
        let snap1 = gram_with_split(&params, &data.inputs, 1.0).unwrap();
        gd_step(&mut params, &data, &config).unwrap();
        let snap2 = gram_with_split(&params, &data.inputs, 1.0).unwrap();
        let r = measured_rates("run", &snap1, "run", &snap2, &y, 64, 5, 1.0).unwrap();
        let ratio = r.dalpha_y / r.dalpha_mean;
        // the y-direction alpha rate runs about P/2 faster than the probe
        // mean; beta is isotropic
        assert!(
            ratio >= p as f64 / 4.0 && ratio <= p as f64,
            "anisotropy ratio {ratio} outside [P/4, P] at P = {p}"
        );
        let r16 = measured_rates("run", &snap1, "run", &snap2, &y, 16, 5, 1.0).unwrap();
        assert!(r16.dbeta_cov < 0.1, "beta probe coefficient of variation {} not < 0.1", r16.dbeta_cov);
        // predicted beta rate, converted to per-step units and to the run's
        // input scale, lands within a factor of two of the measurement
        let f1 = out1.column(0).to_owned();
        let mean_x2 = data.inputs.outer_iter().map(|row| row.dot(&row)).sum::<f64>() / p as f64;
        let pred = predicted_alpha_beta_rates(&f1, &y, 2.0 * eta / p as f64, p);
        let beta_ratio = pred.dbeta * mean_x2 / r16.dbeta_mean;
        assert!(
            (0.5..=2.0).contains(&beta_ratio),
            "predicted/measured beta rate {beta_ratio} outside [0.5, 2]"
        );
    }

    #[test]
    fn beta_isotropy_tightens_with_width() {
        let p = 60;
        let eta = 0.05;
        let data = random_near_orthogonal_task(500, p, 31, 35);
        let y = data.scalar_targets().unwrap();
        let mut covs = Vec::new();
        for m in [500usize, 2000, 8000] {
            let mut params = init_two_layer_relu(500, m, 1, 31);
            let config = TrainConfig::with_eta(eta, 1, LossNormalization::MeanOverP);
            gd_step(&mut params, &data, &config).unwrap();
            let snap1 = gram_with_split(&params, &data.inputs, 1.0).unwrap();
            gd_step(&mut params, &data, &config).unwrap();
            let snap2 = gram_with_split(&params, &data.inputs, 1.0).unwrap();
            let r = measured_rates("w", &snap1, "w", &snap2, &y, 16, 7, 1.0).unwrap();
            covs.push(r.dbeta_cov);
        }
        assert!(
            covs[0] > covs[1] && covs[1] > covs[2],
            "beta probe variation should shrink with width, got {covs:?}"
        );
    }

    #[test]
    fn linear_reconstruction_identity() {
        let params = init_mlp(&[50, 30, 30, 30, 4], Activation::Linear, 1.0, 41);
        let x = crate::rng::gaussian_mat(&mut crate::rng::stream(43, crate::rng::STREAM_DATA), 20, 50, 1.0);
        let (probe, _) = linear_no_specialization_check(&params, &x).unwrap();
        let snap = crate::ntk::gram_matrix(&params, &x, 1.0).unwrap();
        for c in 0..4 {
            for d in 0..4 {
                let rec = probe.reconstruct_subkernel(c, d);
                let truth = snap.block(c, d).unwrap();
                let num = (&rec - truth).iter().map(|v| v * v).sum::<f64>().sqrt();
                let den = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(
                    num / den.max(1e-300) < 1e-8,
                    "reconstruction error {:.3e} at block ({c},{d})",
                    num / den
                );
            }
        }
    }

    #[test]
    fn identical_readout_columns_have_zero_deviation() {
        let mut params = init_mlp(&[10, 8, 8, 3], Activation::Linear, 1.0, 47);
        let row = params.weights.last().unwrap().row(0).to_owned();
        for c in 1..3 {
            params.weights.last_mut().unwrap().row_mut(c).assign(&row);
        }
        let x = crate::rng::gaussian_mat(&mut crate::rng::stream(48, crate::rng::STREAM_DATA), 6, 10, 1.0);
        let (probe, dev) = linear_no_specialization_check(&params, &x).unwrap();
        assert!(dev < 1e-12, "identical readouts must have deviation 0, got {dev}");
        for alpha in &probe.alpha_l {
            let first = alpha[[0, 0]];
            for v in alpha.iter() {
                assert_abs_diff_eq!(*v, first, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn probe_rejects_wrong_architecture() {
        let relu = init_two_layer_relu(5, 6, 3, 1);
        let x = crate::rng::gaussian_mat(&mut crate::rng::stream(2, crate::rng::STREAM_DATA), 4, 5, 1.0);
        assert!(linear_no_specialization_check(&relu, &x).is_err());
        let single = init_mlp(&[5, 6, 1], Activation::Linear, 1.0, 1);
        assert!(linear_no_specialization_check(&single, &x).is_err());
    }

    #[test]
    fn trained_linear_multihead_shows_no_specialization() {
        // ten linear teachers, four-layer linear net: KSM stays flat
        let n = 20;
        let p = 40;
        let c = 10;
        let mut t_rng = crate::rng::stream(51, crate::rng::STREAM_TEACHER);
        let teachers = crate::rng::gaussian_mat(&mut t_rng, c, n, 1.0 / (n as f64).sqrt());
        let x = crate::rng::gaussian_mat(&mut crate::rng::stream(53, crate::rng::STREAM_DATA), p, n, 1.0 / (n as f64).sqrt());
        let targets = x.dot(&teachers.t());
        let data = Dataset {
            inputs: x.clone(),
            targets,
            class_of: None,
            task_kind: TaskKind::LinearTeacher,
            teacher_weights: Some(teachers),
        };
        let mut params = init_mlp(&[n, 24, 24, 24, c], Activation::Linear, 0.6, 55);
        let config = TrainConfig::with_eta(0.3, 1, LossNormalization::MeanOverP);
        for step in 0..20_000 {
            let last = gd_step(&mut params, &data, &config).unwrap();
            if last < 1e-8 {
                break;
            }
            assert!(step < 19_999, "linear training failed to converge, loss {last}");
        }
        let snap = crate::ntk::gram_matrix(&params, &x, 1.0).unwrap();
        let m = metrics::ksm(&snap, &data.targets).unwrap();
        let (diag, off) = metrics::diag_off_means(&m);
        let rel = (diag - off).abs() / off.abs();
        assert!(rel < 0.05, "linear net specialized: diag {diag} vs off {off} ({rel:.3})");
    }
}
