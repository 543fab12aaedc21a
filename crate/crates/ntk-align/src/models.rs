//! Fully connected networks with exact per-example gradients.
//!
//! Weight matrices are stored (out x in) in layer order, the readout last,
//! so a network with hidden widths [M1, .., ML] on inputs of dimension N and
//! C heads has widths [N, M1, .., ML, C]. The forward pass applies the
//! activation after every layer except the readout. Output rescaling divides
//! the raw network output by gamma; training steps the gamma-rescaled loss
//! with step size eta0 * gamma^2.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// L = sum over examples and heads of squared error.
    Sum,
    /// L = P^-1 sum.
    MeanOverP,
    /// L = (P C)^-1 sum.
    MeanOverPAndC,
}

impl LossNormalization {
    pub fn factor(self, p: usize, c: usize) -> f64 {
        match self {
            LossNormalization::Sum => 1.0,
            LossNormalization::MeanOverP => 1.0 / p as f64,
            LossNormalization::MeanOverPAndC => 1.0 / (p * c) as f64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkParams {
    /// weights[l] has shape (widths[l+1], widths[l]); the last entry is the
    /// readout whose rows are the per-head weight vectors.
    pub weights: Vec<Array2<f64>>,
    pub activation: Activation,
}

impl NetworkParams {
    /// Per-layer dimensions [N, M1, .., ML, C].
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.weights.iter().map(|m| m.ncols()).collect();
        w.push(self.weights.last().expect("at least one layer").nrows());
        w
    }

    /// Number of hidden layers (weight count minus the readout).
    pub fn hidden_layers(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn heads(&self) -> usize {
        self.weights.last().expect("at least one layer").nrows()
    }

    /// Total parameter count Q.
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|m| m.len()).sum()
    }

    /// Readout row for head c, as the per-head vector V^c.
    pub fn readout_row(&self, c: usize) -> Array1<f64> {
        self.weights.last().expect("at least one layer").row(c).to_owned()
    }
}

/// Generic MLP initialization: every entry i.i.d. Gaussian with standard
/// deviation init_scale / sqrt(fan-in). Layers are drawn in order from a
/// single stream, each filled row-major.
pub fn init_mlp(widths: &[usize], activation: Activation, init_scale: f64, seed: u64) -> NetworkParams {
    assert!(widths.len() >= 2, "need at least input and output dims");
    assert!(init_scale > 0.0, "init_scale must be positive, got {init_scale}");
    let mut r = rng::stream(seed, rng::STREAM_INIT);
    let weights = (0..widths.len() - 1)
        .map(|l| {
            let fan_in = widths[l] as f64;
            rng::gaussian_mat(&mut r, widths[l + 1], widths[l], init_scale / fan_in.sqrt())
        })
        .collect();
    NetworkParams { weights, activation }
}

/// Deep linear network with small initialization (entry std init_scale/sqrt(fan-in)).
pub fn init_deep_linear(widths: &[usize], init_scale: f64, seed: u64) -> NetworkParams {
    init_mlp(widths, Activation::Linear, init_scale, seed)
}

/// Two-layer ReLU network: W entries variance 1/N, readout variance 1/M, no biases.
pub fn init_two_layer_relu(n: usize, m: usize, c: usize, seed: u64) -> NetworkParams {
    init_mlp(&[n, m, c], Activation::Relu, 1.0, seed)
}

/// Forward-pass byproducts: post-activation values and ReLU gates per hidden
/// layer. acts[0] is the input matrix; acts[l] for l >= 1 is hidden layer l's
/// output (P x M_l). gates[l-1] holds layer l's gate matrix with entries in
/// {0,1}; a zero preactivation gates to 0.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    pub acts: Vec<Array2<f64>>,
    pub gates: Vec<Array2<f64>>,
}

impl ActivationCache {
    /// Hidden activations phi (P x M) of a single-hidden-layer network.
    pub fn phi(&self) -> &Array2<f64> {
        &self.acts[1]
    }
    /// Gate matrix D (P x M) of a single-hidden-layer network.
    pub fn d(&self) -> &Array2<f64> {
        &self.gates[0]
    }
}

fn apply_activation(pre: Array2<f64>, activation: Activation) -> (Array2<f64>, Array2<f64>) {
    match activation {
        Activation::Linear => {
            let gates = Array2::from_elem(pre.raw_dim(), 1.0);
            (pre, gates)
        }
        Activation::Relu => {
            let gates = pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let post = &pre * &gates;
            (post, gates)
        }
    }
}

/// Evaluate the network on a batch. Outputs are the raw values divided by
/// gamma; the cache records activations and gates at this parameter value.
pub fn forward(params: &NetworkParams, inputs: &Array2<f64>, gamma: f64) -> Result<(Array2<f64>, ActivationCache)> {
    if inputs.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have dimension {}, network expects {}",
            inputs.ncols(),
            params.input_dim()
        )));
    }
    let l = params.hidden_layers();
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(l + 1);
    let mut gates: Vec<Array2<f64>> = Vec::with_capacity(l);
    acts.push(inputs.to_owned());
    for layer in 0..l {
        let pre = acts[layer].dot(&params.weights[layer].t());
        let (post, gate) = apply_activation(pre, params.activation);
        acts.push(post);
        gates.push(gate);
    }
    let raw = acts[l].dot(&params.weights[l].t());
    Ok((raw / gamma, ActivationCache { acts, gates }))
}

/// Factorized per-example gradients: for layer l and head c,
/// d f_c(x^mu) / d W_l[i,j] = sens[l][c][mu,i] * acts[l][mu,j].
/// The 1/gamma of the output rescaling is folded into the sensitivities.
pub struct GradientFactors {
    /// acts[l]: P x widths[l], input to layer l.
    pub acts: Vec<Array2<f64>>,
    /// sens[l][c]: P x widths[l+1] backpropagated head-c sensitivities.
    pub sens: Vec<Vec<Array2<f64>>>,
}

pub fn per_example_gradients(
    params: &NetworkParams,
    inputs: &Array2<f64>,
    gamma: f64,
) -> Result<GradientFactors> {
    let (_, cache) = forward(params, inputs, gamma)?;
    let nl = params.weights.len();
    let c = params.heads();
    let p = inputs.nrows();
    let mut sens: Vec<Vec<Array2<f64>>> = vec![Vec::new(); nl];
    for head in 0..c {
        // Readout sensitivity of head `head` is e_head / gamma per example.
        let mut s = Array2::zeros((p, c));
        s.column_mut(head).fill(1.0 / gamma);
        sens[nl - 1].push(s.clone());
        let mut cur = s;
        for l in (0..nl - 1).rev() {
            cur = cur.dot(&params.weights[l + 1]) * &cache.gates[l];
            sens[l].push(cur.clone());
        }
    }
    // The loop above pushes heads in order for the readout but reversed layer
    // traversal keeps per-layer vectors in head order already.
    Ok(GradientFactors { acts: cache.acts, sens })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Base learning rate eta0. The applied step size is eta0 * gamma^2.
    pub eta0: f64,
    /// Output-rescaling factor gamma (1 = no rescaling).
    pub gamma: f64,
    pub steps: usize,
    pub loss_normalization: LossNormalization,
    /// Steps at which kernel snapshots are captured, sorted ascending.
    pub snapshot_schedule: Vec<usize>,
}

impl TrainConfig {
    /// Plain gradient descent at rate eta without output rescaling.
    pub fn with_eta(eta: f64, steps: usize, loss_normalization: LossNormalization) -> Self {
        TrainConfig { eta0: eta, gamma: 1.0, steps, loss_normalization, snapshot_schedule: vec![] }
    }

    pub fn effective_step(&self) -> f64 {
        self.eta0 * self.gamma * self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0) {
            return Err(Error::InvalidConfig(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        let mut prev = None;
        for &s in &self.snapshot_schedule {
            if s > self.steps {
                return Err(Error::InvalidConfig(format!(
                    "snapshot step {s} beyond training horizon {}",
                    self.steps
                )));
            }
            if let Some(p) = prev {
                if s <= p {
                    return Err(Error::InvalidConfig("snapshot schedule must be strictly ascending".into()));
                }
            }
            prev = Some(s);
        }
        Ok(())
    }
}

/// Gamma-rescaled MSE loss of the network on the dataset.
pub fn loss(params: &NetworkParams, data: &Dataset, config: &TrainConfig) -> Result<f64> {
    let (out, _) = forward(params, &data.inputs, config.gamma)?;
    let nf = config.loss_normalization.factor(data.p(), data.c());
    let r = &out - &data.targets;
    Ok(nf * r.iter().map(|v| v * v).sum::<f64>())
}

/// One forward-Euler gradient step on the gamma-rescaled loss with step size
/// eta0 * gamma^2. Updates the parameters in place and returns the pre-step
/// loss. Non-finite loss aborts with a divergence error.
pub fn gd_step(params: &mut NetworkParams, data: &Dataset, config: &TrainConfig) -> Result<f64> {
    if data.targets.ncols() != params.heads() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} heads, network has {}",
            data.targets.ncols(),
            params.heads()
        )));
    }
    let gamma = config.gamma;
    let (out, cache) = forward(params, &data.inputs, gamma)?;
    let nf = config.loss_normalization.factor(data.p(), data.c());
    let resid = &out - &data.targets;
    let pre_loss = nf * resid.iter().map(|v| v * v).sum::<f64>();
    if !pre_loss.is_finite() {
        return Err(Error::Divergence("non-finite loss".into()));
    }
    let step = config.effective_step();
    // dL/df_raw = 2 nf (g - y) / gamma
    let mut g = resid * (2.0 * nf / gamma);
    let nl = params.weights.len();
    let mut grads: Vec<Array2<f64>> = Vec::with_capacity(nl);
    for l in (0..nl).rev() {
        grads.push(g.t().dot(&cache.acts[l]));
        if l > 0 {
            g = g.dot(&params.weights[l]) * &cache.gates[l - 1];
        }
    }
    grads.reverse();
    for (w, gr) in params.weights.iter_mut().zip(grads.iter()) {
        w.scaled_add(-step, gr);
    }
    Ok(pre_loss)
}

/// Train for config.steps steps, recording the pre-step loss at every step.
/// The returned vector has length steps + 1; the last entry is the final loss.
pub fn train_losses(params: &mut NetworkParams, data: &Dataset, config: &TrainConfig) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(config.steps + 1);
    for step in 0..config.steps {
        let l = gd_step(params, data, config)
            .map_err(|e| Error::Divergence(format!("step {step}: {e}")))?;
        losses.push(l);
    }
    losses.push(loss(params, data, config)?);
    Ok(losses)
}

/// Geometric snapshot schedule {0, 1, 2, 4, ...} up to and including `steps`.
pub fn geometric_schedule(steps: usize) -> Vec<usize> {
    let mut sched = vec![0];
    let mut s = 1;
    while s < steps {
        sched.push(s);
        s *= 2;
    }
    if steps > 0 {
        sched.push(steps);
    }
    sched
}
