//! Optimal feature evolution: coupled dynamics of a feature matrix Psi (Q x P)
//! and error vector Delta (length P),
//!   dDelta/dt = -eta Psi^T Psi Delta,
//!   dPsi/dt   = gamma eta Psi Delta Delta^T,
//! with the conserved matrix C = gamma Delta Delta^T + Psi^T Psi. With zero
//! initial output (Delta_0 = -y) the kernel converges to gamma y y^T + K_0.

use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics;
use ndarray::{Array1, Array2};

#[derive(Clone, Debug)]
pub struct OfeState {
    pub psi: Array2<f64>,
    pub delta: Array1<f64>,
    pub gamma: f64,
    pub eta: f64,
    pub t: f64,
}

impl OfeState {
    pub fn new(psi: Array2<f64>, delta: Array1<f64>, gamma: f64, eta: f64) -> Self {
        assert_eq!(psi.ncols(), delta.len(), "Psi columns must match Delta length");
        OfeState { psi, delta, gamma, eta, t: 0.0 }
    }

    /// K = Psi^T Psi.
    pub fn kernel(&self) -> Array2<f64> {
        self.psi.t().dot(&self.psi)
    }

    /// Squared error ||Delta||^2.
    pub fn loss(&self) -> f64 {
        self.delta.dot(&self.delta)
    }

    pub fn is_finite(&self) -> bool {
        self.delta.iter().all(|v| v.is_finite()) && self.psi.iter().all(|v| v.is_finite())
    }
}

/// C = gamma Delta Delta^T + Psi^T Psi; constant along exact trajectories.
pub fn conserved_matrix(state: &OfeState) -> Array2<f64> {
    let p = state.delta.len();
    let mut c = state.kernel();
    for i in 0..p {
        for j in 0..p {
            c[[i, j]] += state.gamma * state.delta[i] * state.delta[j];
        }
    }
    c
}

/// One discrete update: Delta' = Delta - eta K Delta evaluated at the old
/// Psi, then Psi' = Psi - eta gamma d||Delta'(Psi)||^2/dPsi. The gradient
/// keeps the O(eta^2) terms, giving Psi' = Psi + 2 eta^2 gamma Psi
/// (Delta r^T + r Delta^T) with r = Delta'.
pub fn ofe_step_discrete(state: &OfeState) -> Result<OfeState> {
    let eta = state.eta;
    let gamma = state.gamma;
    let k_delta = state.psi.t().dot(&state.psi.dot(&state.delta));
    let r = &state.delta - &(k_delta * eta);
    // Psi (Delta r^T + r Delta^T) = (Psi Delta) r^T + (Psi r) Delta^T
    let pd = state.psi.dot(&state.delta);
    let pr = state.psi.dot(&r);
    let q = state.psi.nrows();
    let p = state.delta.len();
    let mut psi = state.psi.clone();
    let coef = 2.0 * eta * eta * gamma;
    for i in 0..q {
        for j in 0..p {
            psi[[i, j]] += coef * (pd[i] * r[j] + pr[i] * state.delta[j]);
        }
    }
    let next = OfeState { psi, delta: r, gamma, eta, t: state.t + 1.0 };
    if !next.is_finite() {
        return Err(Error::Divergence(format!("discrete update diverged at step {}", state.t as u64 + 1)));
    }
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMethod {
    Euler,
    Rk4,
}

fn rhs(psi: &Array2<f64>, delta: &Array1<f64>, gamma: f64, eta: f64) -> (Array2<f64>, Array1<f64>) {
    let d_delta = psi.t().dot(&psi.dot(delta)) * (-eta);
    let pd = psi.dot(delta);
    let q = psi.nrows();
    let p = delta.len();
    let mut d_psi = Array2::zeros((q, p));
    let coef = gamma * eta;
    for i in 0..q {
        for j in 0..p {
            d_psi[[i, j]] = coef * pd[i] * delta[j];
        }
    }
    (d_psi, d_delta)
}

/// Integrate the flow to time `t_horizon`, recording every `record_every`
/// steps (and always the initial and final states).
pub fn ofe_integrate(
    state0: &OfeState,
    t_horizon: f64,
    dt: f64,
    method: IntegrationMethod,
    record_every: usize,
) -> Result<Vec<OfeState>> {
    if dt <= 0.0 || t_horizon < 0.0 {
        return Err(Error::InvalidConfig(format!("need dt > 0 and T >= 0, got dt={dt}, T={t_horizon}")));
    }
    let steps = (t_horizon / dt).round() as usize;
    let every = record_every.max(1);
    let mut traj = Vec::with_capacity(steps / every + 2);
    let mut cur = state0.clone();
    traj.push(cur.clone());
    for s in 0..steps {
        cur = match method {
            IntegrationMethod::Euler => {
                let (dp, dd) = rhs(&cur.psi, &cur.delta, cur.gamma, cur.eta);
                OfeState {
                    psi: &cur.psi + &(dp * dt),
                    delta: &cur.delta + &(dd * dt),
                    gamma: cur.gamma,
                    eta: cur.eta,
                    t: cur.t + dt,
                }
            }
            IntegrationMethod::Rk4 => {
                let (kp1, kd1) = rhs(&cur.psi, &cur.delta, cur.gamma, cur.eta);
                let (kp2, kd2) = rhs(
                    &(&cur.psi + &(&kp1 * (dt / 2.0))),
                    &(&cur.delta + &(&kd1 * (dt / 2.0))),
                    cur.gamma,
                    cur.eta,
                );
                let (kp3, kd3) = rhs(
                    &(&cur.psi + &(&kp2 * (dt / 2.0))),
                    &(&cur.delta + &(&kd2 * (dt / 2.0))),
                    cur.gamma,
                    cur.eta,
                );
                let (kp4, kd4) = rhs(
                    &(&cur.psi + &(&kp3 * dt)),
                    &(&cur.delta + &(&kd3 * dt)),
                    cur.gamma,
                    cur.eta,
                );
                let psi = &cur.psi + &((kp1 + &(kp2 * 2.0) + &(kp3 * 2.0) + kp4) * (dt / 6.0));
                let delta = &cur.delta + &((kd1 + &(kd2 * 2.0) + &(kd3 * 2.0) + kd4) * (dt / 6.0));
                OfeState { psi, delta, gamma: cur.gamma, eta: cur.eta, t: cur.t + dt }
            }
        };
        if !cur.is_finite() {
            return Err(Error::Divergence(format!("flow diverged at t = {:.6}", cur.t)));
        }
        if (s + 1) % every == 0 && s + 1 < steps {
            traj.push(cur.clone());
        }
    }
    traj.push(cur);
    Ok(traj)
}

/// K_infinity = gamma y y^T + K_0, exact when the initial output is zero.
pub fn predicted_final_kernel(k0: &Array2<f64>, y: &Array1<f64>, gamma: f64) -> Array2<f64> {
    let p = y.len();
    let mut k = k0.clone();
    for i in 0..p {
        for j in 0..p {
            k[[i, j]] += gamma * y[i] * y[j];
        }
    }
    k
}

/// Closed-form scalar solution in (u, v) = (half squared error, half squared
/// feature) coordinates with conserved scalar C = gamma delta0^2 + psi0^2:
///   u(t) = (C / 2 gamma) A / (A + e^{2 C eta t}),  A = gamma delta0^2 / psi0^2,
///   v(t) = (C / 2) B / (B + e^{-2 C eta t}),       B = 1 / A.
/// Degenerate branches (gamma = 0, psi0 = 0, delta0 = 0, C = 0) are exact
/// fixed points or pure exponential decay and are returned without error.
pub fn scalar_closed_form(delta0: f64, psi0: f64, gamma: f64, eta: f64, t: f64) -> (f64, f64) {
    let u0 = 0.5 * delta0 * delta0;
    let v0 = 0.5 * psi0 * psi0;
    let c = gamma * delta0 * delta0 + psi0 * psi0;
    if c == 0.0 {
        return (u0, v0);
    }
    if gamma == 0.0 {
        // linear decay at fixed feature: u(t) = u0 e^{-2 eta psi0^2 t}
        return (u0 * (-2.0 * eta * psi0 * psi0 * t).exp(), v0);
    }
    if psi0 == 0.0 || delta0 == 0.0 {
        // either the feature is identically zero (nothing moves) or the error
        // already vanished (v stays at its fixed point)
        return (u0, v0);
    }
    let a = gamma * delta0 * delta0 / (psi0 * psi0);
    let e = (2.0 * c * eta * t).exp();
    let u = (c / (2.0 * gamma)) * a / (a + e);
    let v = (c / 2.0) * (1.0 / a) / (1.0 / a + 1.0 / e);
    (u, v)
}

/// Spectral coordinates of the flow in the eigenbasis of the conserved
/// matrix: eigenvalues c_k, error coordinates delta_k, initial diagonal
/// kernel values A_{kk}(0), and the logistic constants B_k.
#[derive(Clone, Debug)]
pub struct OfeSpectralState {
    pub c_k: Array1<f64>,
    pub delta_k0: Array1<f64>,
    pub a_diag0: Array1<f64>,
    pub b_k: Array1<f64>,
    pub gamma: f64,
    /// Columns are the conserved-matrix eigenvectors, descending eigenvalue.
    pub basis: Array2<f64>,
}

impl OfeSpectralState {
    pub fn from_initial(k0: &Array2<f64>, delta0: &Array1<f64>, gamma: f64) -> Self {
        let p = delta0.len();
        let mut c_mat = k0.clone();
        for i in 0..p {
            for j in 0..p {
                c_mat[[i, j]] += gamma * delta0[i] * delta0[j];
            }
        }
        let (c_k, basis) = linalg::sym_eigh(&c_mat);
        let mut delta_k0 = Array1::zeros(p);
        let mut a_diag0 = Array1::zeros(p);
        let mut b_k = Array1::zeros(p);
        for k in 0..p {
            let vk = basis.column(k);
            delta_k0[k] = vk.dot(delta0);
            a_diag0[k] = vk.dot(&k0.dot(&vk.to_owned()));
            let gap = c_k[k] - a_diag0[k]; // = gamma delta_k0^2 >= 0
            b_k[k] = if gap > 1e-300 { a_diag0[k] / gap } else { f64::INFINITY };
        }
        OfeSpectralState { c_k, delta_k0, a_diag0, b_k, gamma, basis }
    }
}

/// Logistic diagonal kernel coordinates A_{kk}(t) = B_k c_k / (B_k +
/// e^{-2 eta c_k t}) and error coordinates delta_k(t) from integrating
/// d/dt ln delta_k = -eta c_k + eta gamma sum_l delta_l^2 with rk4.
pub fn spectral_dynamics(spec: &OfeSpectralState, eta: f64, t: f64) -> (Array1<f64>, Array1<f64>) {
    let p = spec.c_k.len();
    let mut a_diag = Array1::zeros(p);
    for k in 0..p {
        a_diag[k] = if spec.b_k[k].is_infinite() || spec.c_k[k] <= 0.0 {
            spec.a_diag0[k]
        } else {
            let e = (-2.0 * eta * spec.c_k[k] * t).exp();
            spec.b_k[k] * spec.c_k[k] / (spec.b_k[k] + e)
        };
    }
    // delta_k dynamics: coupled through the shared ||Delta||^2 term
    let rhs = |d: &Array1<f64>| -> Array1<f64> {
        let norm2 = d.dot(d);
        Array1::from_shape_fn(p, |k| d[k] * (-eta * spec.c_k[k] + eta * spec.gamma * norm2))
    };
    let steps = ((t / 1e-3).ceil() as usize).max(1);
    let dt = t / steps as f64;
    let mut d = spec.delta_k0.clone();
    if t > 0.0 {
        for _ in 0..steps {
            let k1 = rhs(&d);
            let k2 = rhs(&(&d + &(&k1 * (dt / 2.0))));
            let k3 = rhs(&(&d + &(&k2 * (dt / 2.0))));
            let k4 = rhs(&(&d + &(&k3 * dt)));
            d = &d + &((k1 + &(k2 * 2.0) + &(k3 * 2.0) + k4) * (dt / 6.0));
        }
    }
    (d, a_diag)
}

/// Predicted alignment along the flow in the diagonal approximation:
///   A(t) = sum_k (c_k - A_{kk}(0)) A_{kk}(t) / (||K(t)||_F sum_k (c_k - A_{kk}(0)))
/// using gamma ||y||^2 = sum_k (c_k - A_{kk}(0)) and the Frobenius model
/// ||K(t)||^2 = ||K_0||^2 - sum A_{kk}(0)^2 + sum A_{kk}(t)^2 (off-diagonal
/// content frozen at its initial size).
pub fn ofe_alignment_curve(spec: &OfeSpectralState, k0_norm2: f64, eta: f64, t: f64) -> Result<f64> {
    let (_, a_diag) = spectral_dynamics(spec, eta, t);
    let p = spec.c_k.len();
    let mut num = 0.0;
    let mut weight = 0.0;
    let mut a2 = 0.0;
    let mut a02 = 0.0;
    for k in 0..p {
        let w = spec.c_k[k] - spec.a_diag0[k];
        num += w * a_diag[k];
        weight += w;
        a2 += a_diag[k] * a_diag[k];
        a02 += spec.a_diag0[k] * spec.a_diag0[k];
    }
    let frob2 = (k0_norm2 - a02 + a2).max(0.0);
    let denom = frob2.sqrt() * weight;
    if denom.abs() < 1e-300 {
        return Err(Error::UndefinedMetric("alignment curve with zero denominator".into()));
    }
    Ok(num / denom)
}

/// Largest gamma the bisection will consider.
pub const GAMMA_HAT_MAX: f64 = 1e6;

/// The unique gamma >= 0 with alignment(K_0 + gamma y y^T, y) = a_final,
/// found by bisection (alignment is monotone increasing in gamma). Tolerance
/// 1e-10 in gamma.
pub fn estimate_gamma_hat(k0: &Array2<f64>, y: &Array1<f64>, a_final: f64) -> Result<f64> {
    let a0 = metrics::alignment(k0, y)?;
    if a_final < a0 - 1e-12 {
        return Err(Error::NoSolution(format!(
            "target alignment {a_final:.6} is below the initial alignment {a0:.6}; no gamma >= 0 reaches it"
        )));
    }
    if a_final >= 1.0 {
        return Err(Error::NoSolution(format!(
            "target alignment {a_final} is not attainable by any finite gamma (supremum is 1)"
        )));
    }
    let eval = |g: f64| -> Result<f64> { metrics::alignment(&predicted_final_kernel(k0, y, g), y) };
    if a_final <= a0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while eval(hi)? < a_final {
        hi *= 2.0;
        if hi > GAMMA_HAT_MAX {
            return Err(Error::NoSolution(format!(
                "target alignment {a_final} needs gamma beyond {GAMMA_HAT_MAX:.0}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? < a_final {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    fn random_state(q: usize, p: usize, gamma: f64, eta: f64, seed: u64) -> OfeState {
        let mut r = rng::stream(seed, rng::STREAM_INIT);
        let psi = rng::gaussian_mat(&mut r, q, p, 1.0 / (q as f64).sqrt());
        let y = crate::data::gen_random_binary_labels(p, seed + 1);
        OfeState::new(psi, -y, gamma, eta)
    }

    #[test]
    fn discrete_step_gamma_zero_is_kgd() {
        let s = random_state(10, 4, 0.0, 0.3, 1);
        let next = ofe_step_discrete(&s).unwrap();
        assert_eq!(next.psi, s.psi, "gamma = 0 must leave Psi untouched");
        let want = &s.delta - &(s.kernel().dot(&s.delta) * 0.3);
        let diff = &next.delta - &want;
        assert!(diff.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn discrete_step_fixed_point_at_zero_error() {
        let mut s = random_state(8, 3, 2.0, 0.5, 2);
        s.delta.fill(0.0);
        let next = ofe_step_discrete(&s).unwrap();
        assert_eq!(next.psi, s.psi);
        assert!(next.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discrete_step_scalar_hand_values() {
        // psi=1, delta=1, eta=0.1, gamma=1:
        // r = 1 - 0.1 = 0.9, psi' = 1 + 2*0.01*(0.9 + 0.9) = 1.036
        let s = OfeState::new(
            Array2::from_shape_vec((1, 1), vec![1.0]).unwrap(),
            Array1::from_vec(vec![1.0]),
            1.0,
            0.1,
        );
        let next = ofe_step_discrete(&s).unwrap();
        assert_abs_diff_eq!(next.delta[0], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(next.psi[[0, 0]], 1.036, epsilon = 1e-12);
    }

    #[test]
    fn lazy_flow_matches_matrix_exponential() {
        let s = random_state(12, 5, 0.0, 0.7, 3);
        let traj = ofe_integrate(&s, 10.0, 1e-3, IntegrationMethod::Rk4, 1000).unwrap();
        let k0 = s.kernel();
        let (evals, evecs) = linalg::sym_eigh(&k0);
        let end = traj.last().unwrap();
        // Delta(t) = V exp(-eta L t) V^T Delta(0)
        let coords = evecs.t().dot(&s.delta);
        let mut want = Array1::zeros(5);
        for k in 0..5 {
            let decayed = coords[k] * (-0.7 * evals[k] * 10.0).exp();
            for i in 0..5 {
                want[i] += decayed * evecs[[i, k]];
            }
        }
        for i in 0..5 {
            assert_abs_diff_eq!(end.delta[i], want[i], epsilon = 1e-6);
        }
        assert_eq!(end.psi, s.psi, "gamma = 0 flow must not move Psi");
    }

    #[test]
    fn zero_error_trajectory_is_constant() {
        let mut s = random_state(6, 3, 3.0, 1.0, 4);
        s.delta.fill(0.0);
        let traj = ofe_integrate(&s, 1.0, 1e-2, IntegrationMethod::Rk4, 10).unwrap();
        for st in &traj {
            assert_eq!(st.psi, s.psi);
        }
    }

    #[test]
    fn scalar_flow_matches_closed_form() {
        let (delta0, psi0, gamma, eta) = (1.3, 0.7, 2.0, 1.0);
        let c = gamma * delta0 * delta0 + psi0 * psi0;
        let s = OfeState::new(
            Array2::from_shape_vec((1, 1), vec![psi0]).unwrap(),
            Array1::from_vec(vec![delta0]),
            gamma,
            eta,
        );
        let horizon = 10.0 / c;
        let traj = ofe_integrate(&s, horizon, 1e-3, IntegrationMethod::Rk4, 100).unwrap();
        let mut worst = 0.0f64;
        for st in &traj {
            let (u, v) = scalar_closed_form(delta0, psi0, gamma, eta, st.t);
            let ui = 0.5 * st.delta[0] * st.delta[0];
            let vi = 0.5 * st.psi[[0, 0]] * st.psi[[0, 0]];
            worst = worst.max((u - ui).abs()).max((v - vi).abs());
        }
        assert!(worst < 1e-8, "max closed-form error {worst:.3e} not < 1e-8");
    }

    #[test]
    fn scalar_closed_form_endpoints() {
        let (delta0, psi0, gamma, eta) = (1.3, 0.7, 2.0, 1.0);
        let c = gamma * delta0 * delta0 + psi0 * psi0;
        let (u0, v0) = scalar_closed_form(delta0, psi0, gamma, eta, 0.0);
        assert_abs_diff_eq!(u0, 0.5 * delta0 * delta0, epsilon = 1e-14);
        assert_abs_diff_eq!(v0, 0.5 * psi0 * psi0, epsilon = 1e-14);
        let (ui, vi) = scalar_closed_form(delta0, psi0, gamma, eta, 1e3 / c);
        assert!(ui < 1e-12, "u at t = 1e3/C is {ui:.3e}");
        // the conserved scalar forces v to C/2 once the error is gone
        assert_abs_diff_eq!(vi, c / 2.0, epsilon = 1e-8);
        // gamma = 0 branch: pure exponential decay, v constant
        let (ug, vg) = scalar_closed_form(1.0, 0.5, 0.0, 0.3, 2.0);
        assert_abs_diff_eq!(ug, 0.5 * (-2.0 * 0.3 * 0.25 * 2.0f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(vg, 0.125, epsilon = 1e-15);
        // degenerate C = 0
        let (uz, vz) = scalar_closed_form(0.0, 0.0, 1.0, 1.0, 5.0);
        assert_eq!((uz, vz), (0.0, 0.0));
    }

    #[test]
    fn conserved_matrix_definition_and_drift() {
        let s = random_state(10, 5, 1.5, 1.0, 5);
        // definition at t = 0
        let c = conserved_matrix(&s);
        let mut want = s.kernel();
        for i in 0..5 {
            for j in 0..5 {
                want[[i, j]] += 1.5 * s.delta[i] * s.delta[j];
            }
        }
        let diff = &c - &want;
        assert!(diff.iter().all(|v| v.abs() < 1e-14));
        // gamma = 0 reduces to the kernel
        let mut lazy = s.clone();
        lazy.gamma = 0.0;
        let diff0 = conserved_matrix(&lazy) - lazy.kernel();
        assert!(diff0.iter().all(|v| v.abs() < 1e-14));
        // rk4 drift over T = 20
        let c0 = conserved_matrix(&s);
        let n0 = linalg::frob(&c0);
        let traj = ofe_integrate(&s, 20.0, 1e-3, IntegrationMethod::Rk4, 2000).unwrap();
        for st in &traj {
            let drift = linalg::frob(&(&conserved_matrix(st) - &c0)) / n0;
            assert!(drift < 1e-6, "conservation drift {drift:.3e} at t = {}", st.t);
        }
    }

    #[test]
    fn loss_monotone_and_gamma_accelerates() {
        let base = random_state(14, 6, 0.0, 1.0, 6);
        let mut rich = base.clone();
        rich.gamma = 2.0;
        let lazy_traj = ofe_integrate(&base, 10.0, 1e-3, IntegrationMethod::Rk4, 100).unwrap();
        let rich_traj = ofe_integrate(&rich, 10.0, 1e-3, IntegrationMethod::Rk4, 100).unwrap();
        let mut prev = f64::INFINITY;
        for (lz, rc) in lazy_traj.iter().zip(rich_traj.iter()) {
            let rl = rc.loss();
            assert!(rl <= prev + 1e-12, "loss must be non-increasing");
            prev = rl;
            assert!(
                rl <= lz.loss() + 1e-10,
                "gamma > 0 loss {rl} exceeds the lazy loss {} at t = {}",
                lz.loss(),
                rc.t
            );
        }
    }

    #[test]
    fn final_kernel_prediction() {
        // hand case
        let k0 = Array2::eye(2);
        let y = Array1::from_vec(vec![1.0, -1.0]);
        let k = predicted_final_kernel(&k0, &y, 1.0);
        assert_eq!(k[[0, 0]], 2.0);
        assert_eq!(k[[0, 1]], -1.0);
        assert_eq!(k[[1, 0]], -1.0);
        assert_eq!(k[[1, 1]], 2.0);
        // gamma = 0 is the identity operation
        let same = predicted_final_kernel(&k0, &y, 0.0);
        assert_eq!(same, k0);
        // integrated flow converges onto the prediction
        let s = random_state(20, 5, 1.0, 1.0, 7);
        let y0 = -s.delta.clone();
        let k0 = s.kernel();
        let mut cur = s;
        while cur.loss() > 1e-10 {
            let traj = ofe_integrate(&cur, 5.0, 1e-3, IntegrationMethod::Rk4, usize::MAX).unwrap();
            cur = traj.into_iter().last().unwrap();
            assert!(cur.t < 200.0, "flow failed to converge by t = 200");
        }
        let predicted = predicted_final_kernel(&k0, &y0, 1.0);
        let err = linalg::frob(&(&cur.kernel() - &predicted)) / linalg::frob(&k0);
        assert!(err < 1e-3, "final kernel error {err:.3e} not < 1e-3");
    }

    #[test]
    fn spectral_special_cases() {
        let s = random_state(10, 4, 0.0, 0.8, 8);
        let spec = OfeSpectralState::from_initial(&s.kernel(), &s.delta, 0.0);
        // gamma = 0: delta_k(t) = delta_k(0) exp(-eta c_k t) exactly
        let t = 1.7;
        let (dk, ak) = spectral_dynamics(&spec, 0.8, t);
        for k in 0..4 {
            let want = spec.delta_k0[k] * (-0.8 * spec.c_k[k] * t).exp();
            assert_abs_diff_eq!(dk[k], want, epsilon = 1e-9);
            // B_k infinite at gamma = 0, so A stays at its initial value
            assert_abs_diff_eq!(ak[k], spec.a_diag0[k], epsilon = 1e-14);
        }
        // norm identity at t = 0
        let sum: f64 = spec.delta_k0.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(sum, s.loss(), epsilon = 1e-10);
    }

    #[test]
    fn spectral_matches_full_integration_after_transient() {
        let s = random_state(30, 5, 1.0, 1.0, 9);
        let k0 = s.kernel();
        let spec = OfeSpectralState::from_initial(&k0, &s.delta, 1.0);
        let c1 = spec.c_k[0];
        let horizon = 8.0 / c1;
        let traj = ofe_integrate(&s, horizon, 1e-3, IntegrationMethod::Rk4, 200).unwrap();
        for st in &traj {
            if st.t < 3.0 / c1 {
                continue;
            }
            let (_, a_pred) = spectral_dynamics(&spec, 1.0, st.t);
            let k = st.kernel();
            // project the integrated kernel onto the conserved eigenbasis
            for kidx in 0..2 {
                let vk = spec.basis.column(kidx).to_owned();
                let a_true = vk.dot(&k.dot(&vk));
                let rel = (a_pred[kidx] - a_true).abs() / a_true.abs().max(1e-12);
                assert!(
                    rel < 0.05,
                    "spectral A_{{{kidx},{kidx}}} off by {rel:.3} at t = {:.3}",
                    st.t
                );
            }
        }
    }

    #[test]
    fn logistic_coordinates_increase() {
        let s = random_state(16, 5, 2.0, 1.0, 10);
        let spec = OfeSpectralState::from_initial(&s.kernel(), &s.delta, 2.0);
        let mut prev = spec.a_diag0.clone();
        for i in 1..=20 {
            let t = i as f64 * 0.1;
            let (_, a) = spectral_dynamics(&spec, 1.0, t);
            for k in 0..5 {
                if spec.c_k[k] > 1e-12 && spec.b_k[k].is_finite() {
                    assert!(
                        a[k] >= prev[k] - 1e-12,
                        "A_{{{k},{k}}} decreased from {} to {} at t = {t}",
                        prev[k],
                        a[k]
                    );
                }
            }
            prev = a;
        }
    }

    #[test]
    fn alignment_curve_commuting_initial_value() {
        // K_0 built to commute with y y^T: K_0 = 2 y_hat y_hat^T + orthogonal content
        let p = 5;
        let y: Array1<f64> = Array1::from_vec(vec![2.0, 0.0, 0.0, 0.0, 1.0]);
        let yn = y.dot(&y).sqrt();
        let yh = &y / yn;
        let mut k0 = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                k0[[i, j]] += 2.0 * yh[i] * yh[j];
            }
        }
        // orthogonal rank-one piece
        let mut w: Array1<f64> = Array1::from_vec(vec![1.0, 1.0, -1.0, 0.5, -2.0]);
        let proj = w.dot(&yh);
        w = &w - &(&yh * proj);
        let wn = w.dot(&w).sqrt();
        let wh = &w / wn;
        for i in 0..p {
            for j in 0..p {
                k0[[i, j]] += 0.5 * wh[i] * wh[j];
            }
        }
        let spec = OfeSpectralState::from_initial(&k0, &(-y.clone()), 1.5);
        let k0n2 = linalg::frob(&k0).powi(2);
        let a0 = ofe_alignment_curve(&spec, k0n2, 1.0, 0.0).unwrap();
        let want = metrics::alignment(&k0, &y).unwrap();
        assert_abs_diff_eq!(a0, want, epsilon = 1e-6);
    }

    #[test]
    fn alignment_curve_saturates_at_large_gamma() {
        let s = random_state(20, 5, 50.0, 1.0, 11);
        let k0 = s.kernel();
        let spec = OfeSpectralState::from_initial(&k0, &s.delta, 50.0);
        let c1 = spec.c_k[0];
        let a = ofe_alignment_curve(&spec, linalg::frob(&k0).powi(2), 1.0, 50.0 / c1).unwrap();
        assert!(a > 0.95, "large-gamma asymptote {a} should approach 1");
    }

    #[test]
    fn alignment_curve_tracks_integration() {
        let s = random_state(30, 5, 2.0, 1.0, 12);
        let k0 = s.kernel();
        let y = -s.delta.clone();
        let spec = OfeSpectralState::from_initial(&k0, &s.delta, 2.0);
        let c1 = spec.c_k[0];
        let k0n2 = linalg::frob(&k0).powi(2);
        let traj = ofe_integrate(&s, 8.0 / c1, 1e-3, IntegrationMethod::Rk4, 500).unwrap();
        for st in &traj {
            if st.t < 3.0 / c1 {
                continue;
            }
            let predicted = ofe_alignment_curve(&spec, k0n2, 1.0, st.t).unwrap();
            let actual = metrics::alignment(&st.kernel(), &y).unwrap();
            let rel = (predicted - actual).abs() / actual.abs();
            assert!(
                rel < 0.10,
                "predicted alignment {predicted:.4} vs integrated {actual:.4} off {rel:.3} at t = {:.3}",
                st.t
            );
        }
    }

    #[test]
    fn gamma_hat_round_trip_and_errors() {
        let s = random_state(18, 6, 0.0, 1.0, 13);
        let k0 = s.kernel();
        let y = -s.delta.clone();
        let a0 = metrics::alignment(&k0, &y).unwrap();
        // initial alignment maps to gamma = 0
        assert_eq!(estimate_gamma_hat(&k0, &y, a0).unwrap(), 0.0);
        // forward-inverse consistency at gamma* = 3
        let target = metrics::alignment(&predicted_final_kernel(&k0, &y, 3.0), &y).unwrap();
        let got = estimate_gamma_hat(&k0, &y, target).unwrap();
        assert!((got - 3.0).abs() < 1e-8, "round trip gave {got}, want 3");
        // below initial alignment: no solution
        assert!(estimate_gamma_hat(&k0, &y, a0 - 0.1).is_err());
        // at or above 1: unbounded
        assert!(estimate_gamma_hat(&k0, &y, 1.0).is_err());
    }

    #[test]
    fn gamma_hat_spread() {
        let s = random_state(25, 8, 0.0, 1.0, 14);
        let k0 = s.kernel();
        let y = -s.delta.clone();
        for gstar in [0.1, 1.0, 10.0] {
            let target = metrics::alignment(&predicted_final_kernel(&k0, &y, gstar), &y).unwrap();
            let got = estimate_gamma_hat(&k0, &y, target).unwrap();
            assert!(
                (got - gstar).abs() / gstar < 1e-7,
                "gamma* = {gstar} recovered as {got}"
            );
        }
    }

    #[test]
    fn integrator_rejects_bad_steps() {
        let s = random_state(4, 2, 1.0, 1.0, 15);
        assert!(ofe_integrate(&s, 1.0, 0.0, IntegrationMethod::Rk4, 1).is_err());
        assert!(ofe_integrate(&s, -1.0, 0.1, IntegrationMethod::Rk4, 1).is_err());
    }

    #[test]
    fn euler_diverges_at_large_rate_with_error() {
        let mut s = random_state(6, 3, 0.0, 1e4, 16);
        s.psi *= 100.0;
        let r = ofe_integrate(&s, 60.0, 0.5, IntegrationMethod::Euler, 1);
        match r {
            Err(e) => assert!(format!("{e}").contains("diverged")),
            Ok(traj) => panic!("expected divergence, got {} finite states", traj.len()),
        }
    }
}
