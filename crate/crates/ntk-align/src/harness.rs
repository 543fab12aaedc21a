//! Config-driven experiment runner: full-batch network training with kernel
//! snapshots, kernel gradient descent baselines, optimal-feature-evolution
//! runs, axis sweeps, figure bundles, and deterministic persistence.
//!
//! Every run is reproducible from its config alone: the run id embeds a hash
//! of the canonical config bytes, and rerunning an identical config rewrites
//! byte-identical trace CSVs. Wall-clock data lives in meta.json only.

use crate::data::{self, Dataset, LabelMap, TaskKind};
use crate::error::{Error, Result};
use crate::io::{self, RunDir};
use crate::linalg;
use crate::metrics::{self, fmt_f64, MetricRecord};
use crate::models::{self, Activation, LossNormalization, NetworkParams, TrainConfig};
use crate::ntk::{self, KernelSnapshot};
use crate::ofe;
use crate::plot::{Figure, Panel, Series};
use crate::rng;
use crate::theory;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Labels and teachers draw from a seed decorrelated from the input stream so
/// sign patterns never alias input coordinates.
const LABEL_SEED_XOR: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    NnTrain,
    Kgd,
    Akgd,
    Ofe,
    DepthSweep,
    GammaSweep,
    MixtureSpecialization,
    LinearTeacher,
    FigureRepro,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::NnTrain => "nn_train",
            ExperimentKind::Kgd => "kgd",
            ExperimentKind::Akgd => "akgd",
            ExperimentKind::Ofe => "ofe",
            ExperimentKind::DepthSweep => "depth_sweep",
            ExperimentKind::GammaSweep => "gamma_sweep",
            ExperimentKind::MixtureSpecialization => "mixture_specialization",
            ExperimentKind::LinearTeacher => "linear_teacher",
            ExperimentKind::FigureRepro => "figure_repro",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Gaussian inputs with per-coordinate variance 1/sqrt(N) and random
    /// +-1 targets: pairwise overlaps vanish, squared norms grow as sqrt(N).
    RandomBinary,
    /// Unit-sphere inputs with random +-1 targets.
    SphereBinary,
    /// Exactly orthonormal inputs (P <= N) with random +-1 targets.
    OrthonormalBinary,
    /// Gaussian inputs labelled by a random unit linear teacher.
    LinearTeacher,
    /// Balanced C-class Gaussian mixture around orthonormal centers, one-hot.
    GaussianMixture,
    /// MNIST training digits, odd mapped to +1 and even to -1.
    MnistOddEven,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// {0, 1, 2, 4, ...} plus the final step. Gram computation dominates run
    /// cost, so denser schedules are opt-in.
    Geometric,
    /// Every step. Only sensible for short runs.
    Dense,
    /// Initial and final step only.
    Endpoints,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma,
    Depth,
    Seed,
    Width,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Gamma => "gamma",
            SweepAxis::Depth => "depth",
            SweepAxis::Seed => "seed",
            SweepAxis::Width => "width",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FigureId {
    Fig1,
    Fig2cd,
    Fig4,
    Fig5,
    Fig6,
    Fig7,
}

pub const ALL_FIGURES: [FigureId; 6] =
    [FigureId::Fig1, FigureId::Fig2cd, FigureId::Fig4, FigureId::Fig5, FigureId::Fig6, FigureId::Fig7];

impl FigureId {
    pub fn as_str(self) -> &'static str {
        match self {
            FigureId::Fig1 => "fig1",
            FigureId::Fig2cd => "fig2cd",
            FigureId::Fig4 => "fig4",
            FigureId::Fig5 => "fig5",
            FigureId::Fig6 => "fig6",
            FigureId::Fig7 => "fig7",
        }
    }
}

impl fmt::Display for FigureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FigureId {
    type Err = Error;
    fn from_str(s: &str) -> Result<FigureId> {
        ALL_FIGURES
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown figure '{s}'; supported: fig1, fig2cd, fig4, fig5, fig6, fig7"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMethod {
    Euler,
    Rk4,
}

impl FlowMethod {
    fn to_integration(self) -> ofe::IntegrationMethod {
        match self {
            FlowMethod::Euler => ofe::IntegrationMethod::Euler,
            FlowMethod::Rk4 => ofe::IntegrationMethod::Rk4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub p: usize,
    pub n: usize,
    pub classes: usize,
    pub sigma2: f64,
    pub mnist_dir: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::RandomBinary,
            p: 40,
            n: 100,
            classes: 10,
            sigma2: 0.01,
            mnist_dir: "data/mnist".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub activation: Activation,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub heads: usize,
    pub init_scale: f64,
    pub gamma: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            activation: Activation::Relu,
            hidden_width: 128,
            hidden_layers: 1,
            heads: 1,
            init_scale: 1.0,
            gamma: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn widths(&self, n: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers + 2);
        w.push(n);
        w.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        w.push(self.heads);
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub eta0: f64,
    pub steps: usize,
    pub loss_normalization: LossNormalization,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec { eta0: 0.1, steps: 64, loss_normalization: LossNormalization::MeanOverP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapshotSpec {
    pub schedule: ScheduleKind,
    pub extra_steps: Vec<usize>,
    /// Capture the readout/hidden decomposition alongside the full Gram.
    /// Needs exactly one hidden layer.
    pub split: bool,
    pub persist: bool,
}

impl Default for SnapshotSpec {
    fn default() -> Self {
        SnapshotSpec { schedule: ScheduleKind::Geometric, extra_steps: vec![], split: false, persist: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub count: usize,
    /// Probe directions are drawn once from this seed, independent of run
    /// seeds, so probe curves are comparable across runs.
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec { count: 32, seed: 1234 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfeSpec {
    pub q: usize,
    pub gamma: f64,
    pub eta: f64,
    pub t_final: f64,
    pub dt: f64,
    pub method: FlowMethod,
    pub record_every: usize,
    pub psi_scale: f64,
}

impl Default for OfeSpec {
    fn default() -> Self {
        OfeSpec {
            q: 50,
            gamma: 1.0,
            eta: 1.0,
            t_final: 10.0,
            dt: 1e-3,
            method: FlowMethod::Rk4,
            record_every: 100,
            psi_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgdSpec {
    pub steps: usize,
    /// 0 inherits train.eta0.
    pub eta: f64,
    pub scale: f64,
    /// Run id of a persisted training run whose initial/final kernel norms
    /// set the rescale factor; empty recomputes the companion in memory over
    /// train.steps steps.
    pub companion_run: String,
}

impl Default for KgdSpec {
    fn default() -> Self {
        KgdSpec { steps: 100, eta: 0.0, scale: 1.0, companion_run: String::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { axis: SweepAxis::Gamma, values: vec![1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment_kind: ExperimentKind,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub snapshots: SnapshotSpec,
    pub probes: ProbeSpec,
    pub ofe: OfeSpec,
    pub kgd: KgdSpec,
    pub sweep: SweepSpec,
    pub figure: FigureId,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            experiment_kind: ExperimentKind::NnTrain,
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            snapshots: SnapshotSpec::default(),
            probes: ProbeSpec::default(),
            ofe: OfeSpec::default(),
            kgd: KgdSpec::default(),
            sweep: SweepSpec::default(),
            figure: FigureId::Fig6,
            seeds: vec![0],
            output_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    /// The exact bytes persisted as config.json and hashed into run ids.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s.into_bytes()
    }

    pub fn hash(&self) -> String {
        io::config_hash(&self.canonical_bytes())
    }

    pub fn run_id(&self, seed: u64) -> String {
        let h = self.hash();
        format!("{}_s{}_{}", self.experiment_kind.as_str(), seed, &h[..8])
    }

    /// Training horizon the snapshot schedule is built against.
    fn horizon(&self) -> usize {
        match self.experiment_kind {
            ExperimentKind::Kgd | ExperimentKind::Akgd => self.kgd.steps,
            _ => self.train.steps,
        }
    }

    pub fn snapshot_steps(&self) -> Vec<usize> {
        let steps = self.horizon();
        let mut s: Vec<usize> = match self.snapshots.schedule {
            ScheduleKind::Geometric => models::geometric_schedule(steps),
            ScheduleKind::Dense => (0..=steps).collect(),
            ScheduleKind::Endpoints => {
                if steps == 0 {
                    vec![0]
                } else {
                    vec![0, steps]
                }
            }
        };
        s.extend(self.snapshots.extra_steps.iter().copied());
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta0: self.train.eta0,
            gamma: self.model.gamma,
            steps: self.train.steps,
            loss_normalization: self.train.loss_normalization,
            snapshot_schedule: self.snapshot_steps(),
        }
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<ExperimentConfig> {
        Ok(serde_json::from_slice(bytes)?)
    }

    /// Head count the dataset produces; the model must match it.
    fn dataset_heads(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::GaussianMixture => self.dataset.classes,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds: must be non-empty".into()));
        }
        let d = &self.dataset;
        if d.p == 0 {
            return Err(Error::InvalidConfig("dataset.p: must be at least 1".into()));
        }
        match d.kind {
            DatasetKind::MnistOddEven => {
                if d.n != 784 {
                    return Err(Error::InvalidConfig(format!(
                        "dataset.n: mnist inputs are 784-dimensional, got {}",
                        d.n
                    )));
                }
            }
            DatasetKind::GaussianMixture => {
                if d.n == 0 {
                    return Err(Error::InvalidConfig("dataset.n: must be at least 1".into()));
                }
                if d.classes < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "dataset.classes: a mixture needs at least 2 classes, got {}",
                        d.classes
                    )));
                }
                if d.p % d.classes != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "dataset.p: {} is not divisible by dataset.classes {} (balanced mixture)",
                        d.p, d.classes
                    )));
                }
                if !(d.sigma2 > 0.0) || !d.sigma2.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "dataset.sigma2: must be positive and finite, got {}",
                        d.sigma2
                    )));
                }
            }
            _ => {
                if d.n == 0 {
                    return Err(Error::InvalidConfig("dataset.n: must be at least 1".into()));
                }
            }
        }
        let m = &self.model;
        if m.hidden_width == 0 {
            return Err(Error::InvalidConfig("model.hidden_width: must be at least 1".into()));
        }
        if m.hidden_layers == 0 {
            return Err(Error::InvalidConfig("model.hidden_layers: must be at least 1".into()));
        }
        if m.heads != self.dataset_heads() {
            return Err(Error::InvalidConfig(format!(
                "model.heads: dataset '{}' produces {} target head(s), model has {}",
                serde_json::to_value(d.kind).expect("kind serializes").as_str().unwrap_or("?"),
                self.dataset_heads(),
                m.heads
            )));
        }
        if !(m.init_scale > 0.0) || !m.init_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "model.init_scale: must be positive and finite, got {}",
                m.init_scale
            )));
        }
        if !(m.gamma > 0.0) || !m.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "model.gamma: must be positive and finite, got {}",
                m.gamma
            )));
        }
        if !(self.train.eta0 > 0.0) || !self.train.eta0.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "train.eta0: must be positive and finite, got {}",
                self.train.eta0
            )));
        }
        if self.snapshots.split && m.hidden_layers != 1 {
            return Err(Error::InvalidConfig(format!(
                "snapshots.split: the readout/hidden decomposition needs exactly one hidden layer, model has {}",
                m.hidden_layers
            )));
        }
        let horizon = self.horizon();
        for &s in &self.snapshots.extra_steps {
            if s > horizon {
                return Err(Error::InvalidConfig(format!(
                    "snapshots.extra_steps: step {s} is beyond the training horizon {horizon}"
                )));
            }
        }
        if self.probes.count == 0 {
            return Err(Error::InvalidConfig("probes.count: must be at least 1".into()));
        }
        let o = &self.ofe;
        if o.q == 0 {
            return Err(Error::InvalidConfig("ofe.q: must be at least 1".into()));
        }
        if !(o.gamma >= 0.0) || !o.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ofe.gamma: must be non-negative and finite, got {}",
                o.gamma
            )));
        }
        if !(o.eta > 0.0) || !o.eta.is_finite() {
            return Err(Error::InvalidConfig(format!("ofe.eta: must be positive, got {}", o.eta)));
        }
        if !(o.t_final >= 0.0) || !o.t_final.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ofe.t_final: must be non-negative and finite, got {}",
                o.t_final
            )));
        }
        if !(o.dt > 0.0) || !o.dt.is_finite() {
            return Err(Error::InvalidConfig(format!("ofe.dt: must be positive, got {}", o.dt)));
        }
        if o.record_every == 0 {
            return Err(Error::InvalidConfig("ofe.record_every: must be at least 1".into()));
        }
        if !(o.psi_scale > 0.0) || !o.psi_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ofe.psi_scale: must be positive, got {}",
                o.psi_scale
            )));
        }
        let k = &self.kgd;
        if !(k.eta >= 0.0) || !k.eta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "kgd.eta: must be non-negative (0 inherits train.eta0), got {}",
                k.eta
            )));
        }
        if !(k.scale > 0.0) || !k.scale.is_finite() {
            return Err(Error::InvalidConfig(format!("kgd.scale: must be positive, got {}", k.scale)));
        }
        match self.experiment_kind {
            ExperimentKind::Kgd | ExperimentKind::Akgd => {
                if k.steps == 0 {
                    return Err(Error::InvalidConfig("kgd.steps: must be at least 1".into()));
                }
                if m.heads != 1 {
                    return Err(Error::InvalidConfig(
                        "model.heads: kernel descent baselines need a single target head".into(),
                    ));
                }
            }
            ExperimentKind::DepthSweep => {
                if self.sweep.axis != SweepAxis::Depth {
                    return Err(Error::InvalidConfig(format!(
                        "sweep.axis: experiment_kind depth_sweep requires axis 'depth', got '{}'",
                        self.sweep.axis
                    )));
                }
            }
            ExperimentKind::GammaSweep => {
                if self.sweep.axis != SweepAxis::Gamma {
                    return Err(Error::InvalidConfig(format!(
                        "sweep.axis: experiment_kind gamma_sweep requires axis 'gamma', got '{}'",
                        self.sweep.axis
                    )));
                }
            }
            ExperimentKind::MixtureSpecialization => {
                if d.kind != DatasetKind::GaussianMixture {
                    return Err(Error::InvalidConfig(
                        "dataset.kind: experiment_kind mixture_specialization requires a gaussian_mixture dataset"
                            .into(),
                    ));
                }
            }
            ExperimentKind::LinearTeacher => {
                if d.kind != DatasetKind::LinearTeacher {
                    return Err(Error::InvalidConfig(
                        "dataset.kind: experiment_kind linear_teacher requires a linear_teacher dataset".into(),
                    ));
                }
            }
            _ => {}
        }
        if self.output_dir.is_empty() {
            return Err(Error::InvalidConfig("output_dir: must be non-empty".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Config schema enumeration and dotted-key overrides.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SchemaEntry {
    pub key: String,
    pub type_name: &'static str,
    pub default: String,
    pub help: &'static str,
}

/// Flattened dotted-key schema derived from the default config, so listings
/// and override validation can never drift from the actual struct layout.
pub fn config_schema() -> Vec<SchemaEntry> {
    let v = serde_json::to_value(ExperimentConfig::default()).expect("default config serializes");
    let mut out = Vec::new();
    flatten_value("", &v, &mut out);
    out
}

fn flatten_value(prefix: &str, v: &serde_json::Value, out: &mut Vec<SchemaEntry>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, sub) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_value(&key, sub, out);
            }
        }
        _ => out.push(SchemaEntry {
            key: prefix.to_string(),
            type_name: json_type_name(v),
            default: v.to_string(),
            help: key_help(prefix),
        }),
    }
}

fn json_type_name(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "bool",
        serde_json::Value::Number(n) => {
            if n.is_u64() || n.is_i64() {
                "int"
            } else {
                "float"
            }
        }
        serde_json::Value::String(_) => "string",
        serde_json::Value::Array(_) => "array",
        serde_json::Value::Object(_) => "object",
    }
}

fn key_help(key: &str) -> &'static str {
    match key {
        "schema_version" => "config format version; must be 1",
        "experiment_kind" => "one of nn_train, kgd, akgd, ofe, depth_sweep, gamma_sweep, mixture_specialization, linear_teacher, figure_repro",
        "dataset.kind" => "one of random_binary, sphere_binary, orthonormal_binary, linear_teacher, gaussian_mixture, mnist_odd_even",
        "dataset.p" => "number of training examples",
        "dataset.n" => "input dimension (784 for mnist)",
        "dataset.classes" => "mixture class count; ignored by single-head datasets",
        "dataset.sigma2" => "total per-sample displacement variance around a mixture center",
        "dataset.mnist_dir" => "directory holding train-images-idx3-ubyte and train-labels-idx1-ubyte",
        "model.activation" => "one of relu, linear",
        "model.hidden_width" => "units per hidden layer",
        "model.hidden_layers" => "number of hidden layers",
        "model.heads" => "output heads; must match the dataset's target heads",
        "model.init_scale" => "weight std multiplier on top of 1/sqrt(fan-in)",
        "model.gamma" => "output rescaling factor; the applied step is eta0 * gamma^2",
        "train.eta0" => "base learning rate",
        "train.steps" => "gradient descent steps",
        "train.loss_normalization" => "one of sum, mean_over_p, mean_over_p_and_c",
        "snapshots.schedule" => "one of geometric, dense, endpoints",
        "snapshots.extra_steps" => "extra snapshot steps merged into the schedule",
        "snapshots.split" => "capture the readout/hidden kernel decomposition (one hidden layer only)",
        "snapshots.persist" => "write snapshots/step_<n>.bin files",
        "probes.count" => "random unit probe directions per snapshot",
        "probes.seed" => "probe draw seed, shared across runs",
        "ofe.q" => "feature matrix row count Q",
        "ofe.gamma" => "feature evolution rate; 0 freezes the kernel",
        "ofe.eta" => "flow rate multiplier",
        "ofe.t_final" => "integration horizon",
        "ofe.dt" => "integrator step",
        "ofe.method" => "one of euler, rk4",
        "ofe.record_every" => "record every k-th integrator step",
        "ofe.psi_scale" => "Psi init scale; entries are N(0, psi_scale^2/Q)",
        "kgd.steps" => "kernel descent iterations",
        "kgd.eta" => "kernel descent rate; 0 inherits train.eta0",
        "kgd.scale" => "rate rescale factor for plain kgd",
        "kgd.companion_run" => "persisted run id supplying akgd kernel norms; empty recomputes in memory",
        "sweep.axis" => "one of gamma, depth, seed, width",
        "sweep.values" => "axis values; depth/width/seed values must be integers",
        "figure" => "one of fig1, fig2cd, fig4, fig5, fig6, fig7",
        "seeds" => "run seeds; every runner executes once per seed",
        "output_dir" => "root directory for run output",
        _ => "",
    }
}

/// Set one dotted key in a config JSON tree. Unknown keys are errors.
pub fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    if !config_schema().iter().any(|e| e.key == key) {
        return Err(Error::InvalidConfig(format!(
            "--set {key}: unknown config key; --help lists the schema"
        )));
    }
    let val: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    // Sparse configs omit whole sections; create them on the way down.
    for part in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("--set {key}: '{part}' is not a config section"))
        })?;
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::InvalidConfig(format!("--set {key}: parent is not a config section")))?;
    obj.insert(parts[parts.len() - 1].to_string(), val);
    Ok(())
}

pub fn config_from_value(v: serde_json::Value) -> Result<ExperimentConfig> {
    Ok(serde_json::from_value(v)?)
}

// ---------------------------------------------------------------------------
// Dataset and model builders.
// ---------------------------------------------------------------------------

pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let label_seed = seed ^ LABEL_SEED_XOR;
    let binary = |inputs: Array2<f64>| -> Dataset {
        let y = data::gen_random_binary_labels(spec.p, label_seed);
        Dataset {
            inputs,
            targets: y.insert_axis(Axis(1)),
            class_of: None,
            task_kind: TaskKind::RandomBinary,
            teacher_weights: None,
        }
    };
    match spec.kind {
        DatasetKind::RandomBinary => {
            let var = (spec.n as f64).sqrt().recip();
            Ok(binary(data::gen_gaussian_inputs(spec.p, spec.n, var, seed)))
        }
        DatasetKind::SphereBinary => Ok(binary(data::gen_sphere_inputs(spec.p, spec.n, seed))),
        DatasetKind::OrthonormalBinary => Ok(binary(data::gen_orthonormal_inputs(spec.p, spec.n, seed)?)),
        DatasetKind::LinearTeacher => {
            let mut r = rng::stream(label_seed, rng::STREAM_TEACHER);
            let beta = rng::gaussian_vec(&mut r, spec.n, (spec.n as f64).sqrt().recip());
            Ok(data::gen_linear_teacher_task(spec.p, spec.n, &data::LinearTeacher { beta }, seed))
        }
        DatasetKind::GaussianMixture => {
            let mix = data::GaussianMixtureSpec::orthonormal(spec.classes, spec.n, spec.sigma2, label_seed)?;
            data::gen_gaussian_mixture(&mix, spec.p, seed)
        }
        DatasetKind::MnistOddEven => {
            let dir = Path::new(&spec.mnist_dir);
            let img = dir.join("train-images-idx3-ubyte");
            let lbl = dir.join("train-labels-idx1-ubyte");
            if !img.is_file() || !lbl.is_file() {
                return Err(Error::InvalidConfig(format!(
                    "mnist files not found under {}: expected train-images-idx3-ubyte and \
                     train-labels-idx1-ubyte; download the MNIST training set (IDX format, e.g. \
                     https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz and \
                     train-labels-idx1-ubyte.gz, gunzip both) or point dataset.mnist_dir at a \
                     directory holding them",
                    dir.display()
                )));
            }
            let ds = data::load_mnist_idx(&img, &lbl, spec.p, LabelMap::OddEvenPm1)?;
            if ds.p() != spec.p {
                return Err(Error::InvalidConfig(format!(
                    "dataset.p: requested {} examples but {} holds only {}",
                    spec.p,
                    img.display(),
                    ds.p()
                )));
            }
            Ok(ds)
        }
    }
}

pub fn build_model(spec: &ModelSpec, n: usize, seed: u64) -> NetworkParams {
    models::init_mlp(&spec.widths(n), spec.activation, spec.init_scale, seed)
}

// ---------------------------------------------------------------------------
// Run metadata and traces.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub seed: u64,
    pub metric_schema_version: u32,
    pub started_unix_ms: u64,
    pub elapsed_ms: u64,
    pub diverged: bool,
    pub note: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k0_frob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kfinal_frob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scale_applied: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scale_capped: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub init_policy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub axis_value: Option<f64>,
}

impl RunMeta {
    fn new(run_id: &str, seed: u64) -> RunMeta {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        RunMeta {
            run_id: run_id.to_string(),
            seed,
            metric_schema_version: metrics::METRIC_SCHEMA_VERSION,
            started_unix_ms: started,
            elapsed_ms: 0,
            diverged: false,
            note: String::new(),
            k0_frob: None,
            kfinal_frob: None,
            scale_applied: None,
            scale_capped: None,
            init_policy: None,
            axis_value: None,
        }
    }

    fn finish(&mut self) {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        self.elapsed_ms = now.saturating_sub(self.started_unix_ms);
    }
}

#[derive(Clone, Debug)]
pub struct TrainingTrace {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<MetricRecord>,
    pub snapshot_files: Vec<(usize, PathBuf)>,
    pub heads: usize,
    pub with_probes: bool,
    pub meta: RunMeta,
}

impl TrainingTrace {
    pub fn csv(&self) -> String {
        let with_ksm = self.heads > 1;
        let mut s = MetricRecord::csv_header(self.heads, with_ksm, self.with_probes);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_csv_row(with_ksm, self.with_probes));
            s.push('\n');
        }
        s
    }

    pub fn final_record(&self) -> &MetricRecord {
        self.records.last().expect("a trace holds at least the initial record")
    }

    /// Step indices must be strictly increasing.
    pub fn check(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::Format(format!(
                    "trace steps not strictly increasing: {} then {}",
                    w[0].step, w[1].step
                )));
            }
        }
        Ok(())
    }
}

fn write_run_files(dir: &RunDir, config_bytes: &[u8], trace: &TrainingTrace) -> Result<()> {
    std::fs::write(dir.config_path(), config_bytes)?;
    std::fs::write(dir.trace_path(), trace.csv())?;
    let mut meta_json = serde_json::to_string_pretty(&trace.meta)?;
    meta_json.push('\n');
    std::fs::write(dir.root.join("meta.json"), meta_json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Network training runs.
// ---------------------------------------------------------------------------

/// Train every seed in the config and persist one run directory per seed.
pub fn run_nn(config: &ExperimentConfig) -> Result<Vec<TrainingTrace>> {
    config.validate()?;
    match config.experiment_kind {
        ExperimentKind::NnTrain | ExperimentKind::MixtureSpecialization | ExperimentKind::LinearTeacher => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "run_nn handles training experiments, not experiment_kind '{other}'"
            )))
        }
    }
    let out_root = PathBuf::from(&config.output_dir);
    config.seeds.iter().map(|&s| run_training(config, s, &out_root, None, None)).collect()
}

pub fn run_nn_seed(config: &ExperimentConfig, seed: u64) -> Result<TrainingTrace> {
    config.validate()?;
    run_training(config, seed, &PathBuf::from(&config.output_dir), None, None)
}

fn run_training(
    config: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
    init_policy: Option<String>,
    axis_value: Option<f64>,
) -> Result<TrainingTrace> {
    let data = build_dataset(&config.dataset, seed)?;
    let mut params = build_model(&config.model, data.n(), seed);
    let tc = config.train_config();
    tc.validate()?;
    let run_id = config.run_id(seed);
    let dir = RunDir::create(out_root, &run_id)?;
    let config_bytes = config.canonical_bytes();
    let config_hash = io::config_hash(&config_bytes);
    let sched = config.snapshot_steps();
    let heads = data.c();
    let with_probes = config.snapshots.split && heads == 1;
    let mut meta = RunMeta::new(&run_id, seed);
    meta.init_policy = init_policy;
    meta.axis_value = axis_value;
    let mut records = Vec::with_capacity(sched.len());
    let mut snapshot_files = Vec::new();
    let mut failure: Option<(usize, Error)> = None;
    for step in 0..=tc.steps {
        if sched.binary_search(&step).is_ok() {
            let snap = capture_snapshot(config, &params, &data, step)?;
            records.push(record_from(&snap, &params, &data, &tc, &config.probes, step)?);
            if config.snapshots.persist {
                let path = dir.snapshot_path(step);
                io::save_kernel_snapshot(&path, &snap)?;
                snapshot_files.push((step, path));
            }
        }
        if step < tc.steps {
            if let Err(e) = models::gd_step(&mut params, &data, &tc) {
                failure = Some((step, e));
                break;
            }
        }
    }
    meta.k0_frob = records.first().map(|r| r.frob);
    meta.kfinal_frob = records.last().map(|r| r.frob);
    if let Some((step, err)) = failure {
        meta.diverged = true;
        meta.note = format!("training diverged at step {step}: {err}");
        meta.finish();
        let trace = TrainingTrace {
            run_id: run_id.clone(),
            seed,
            config_hash,
            records,
            snapshot_files,
            heads,
            with_probes,
            meta,
        };
        write_run_files(&dir, &config_bytes, &trace)?;
        return Err(Error::Divergence(format!(
            "run {run_id} diverged at step {step}: {err}; partial trace persisted under {}",
            dir.root.display()
        )));
    }
    meta.finish();
    let trace = TrainingTrace {
        run_id,
        seed,
        config_hash,
        records,
        snapshot_files,
        heads,
        with_probes,
        meta,
    };
    write_run_files(&dir, &config_bytes, &trace)?;
    Ok(trace)
}

fn capture_snapshot(
    config: &ExperimentConfig,
    params: &NetworkParams,
    data: &Dataset,
    step: usize,
) -> Result<KernelSnapshot> {
    let snap = if config.snapshots.split {
        ntk::gram_with_split(params, &data.inputs, config.model.gamma)?
    } else {
        ntk::gram_matrix(params, &data.inputs, config.model.gamma)?
    };
    Ok(snap.at_step(step))
}

fn record_from(
    snap: &KernelSnapshot,
    params: &NetworkParams,
    data: &Dataset,
    tc: &TrainConfig,
    probes: &ProbeSpec,
    step: usize,
) -> Result<MetricRecord> {
    let loss = models::loss(params, data, tc)?;
    let c = data.c();
    let mut align_heads = Vec::with_capacity(c);
    for cc in 0..c {
        let y = data.targets.column(cc).to_owned();
        align_heads.push(metrics::alignment(snap.block(cc, cc)?, &y)?);
    }
    let traced = ntk::traced_kernel(snap);
    let align_traced = metrics::target_alignment(&traced, &data.targets)?;
    // Aggregated target: the row sums of Y (for one head this is y itself,
    // for one-hot targets the all-ones vector).
    let y_agg = data.targets.sum_axis(Axis(1));
    let eig = metrics::top_eigvec_alignment(&traced, &y_agg)?;
    let teacher_cos = match (&data.teacher_weights, params.activation) {
        (Some(tw), Activation::Linear) if c == 1 => {
            Some(metrics::teacher_cosine(params, &tw.row(0).to_owned())?)
        }
        _ => None,
    };
    let ksm = if c > 1 { Some(metrics::ksm(snap, &data.targets)?) } else { None };
    let probe_stats = match &snap.split {
        Some(split) if c == 1 => Some(metrics::alpha_beta_probes(
            &split.gram_v[0],
            &split.gram_w[0],
            &data.scalar_targets()?,
            probes.count,
            probes.seed,
        )?),
        _ => None,
    };
    Ok(MetricRecord {
        step,
        loss,
        align_heads,
        align_traced,
        frob: snap.frob(),
        eigvec_align: eig.value,
        eigvec_degenerate: eig.degenerate,
        teacher_cos,
        ksm,
        probes: probe_stats,
    })
}

// ---------------------------------------------------------------------------
// Deterministic replay: re-run a training trajectory and evaluate custom
// quantities at the snapshot schedule without persisting anything.
// ---------------------------------------------------------------------------

pub fn replay_multi_series<F>(
    config: &ExperimentConfig,
    seed: u64,
    mut eval: F,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)>
where
    F: FnMut(usize, &NetworkParams, &Dataset) -> Result<Vec<f64>>,
{
    let data = build_dataset(&config.dataset, seed)?;
    let mut params = build_model(&config.model, data.n(), seed);
    let tc = config.train_config();
    let sched = config.snapshot_steps();
    let mut steps = Vec::with_capacity(sched.len());
    let mut rows = Vec::with_capacity(sched.len());
    for step in 0..=tc.steps {
        if sched.binary_search(&step).is_ok() {
            steps.push(step);
            rows.push(eval(step, &params, &data)?);
        }
        if step < tc.steps {
            models::gd_step(&mut params, &data, &tc)?;
        }
    }
    Ok((steps, rows))
}

pub fn replay_series<F>(config: &ExperimentConfig, seed: u64, mut eval: F) -> Result<Vec<(usize, f64)>>
where
    F: FnMut(usize, &NetworkParams, &Dataset) -> Result<f64>,
{
    let (steps, rows) = replay_multi_series(config, seed, |s, p, d| Ok(vec![eval(s, p, d)?]))?;
    Ok(steps.into_iter().zip(rows.into_iter().map(|r| r[0])).collect())
}

/// Fraction of hidden-unit gates that differ from their initial state, per
/// scheduled step.
pub fn gate_flip_series(config: &ExperimentConfig, seed: u64) -> Result<Vec<(usize, f64)>> {
    let mut cache0 = None;
    replay_series(config, seed, |_, params, data| {
        let (_, cache) = models::forward(params, &data.inputs, config.model.gamma)?;
        if cache0.is_none() {
            cache0 = Some(cache);
            return Ok(0.0);
        }
        Ok(theory::gate_flip_fraction(cache0.as_ref().expect("initialized above"), &cache))
    })
}

// ---------------------------------------------------------------------------
// Kernel gradient descent.
// ---------------------------------------------------------------------------

/// Iterate Delta_{t+1} = (I - eta*scale*K) Delta_t from Delta_0 = -y and
/// return the loss ||Delta_t||^2 at every step (length steps + 1). scale = 1
/// is plain kernel descent; scale = ||K_final||_F / ||K_0||_F rescales the
/// rate to a trained kernel's norm.
pub fn run_kgd(k: &Array2<f64>, y: &Array1<f64>, eta: f64, steps: usize, scale: f64) -> Result<Vec<f64>> {
    if k.nrows() != k.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "kernel must be square, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    if y.len() != k.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "target length {} does not match kernel size {}",
            y.len(),
            k.nrows()
        )));
    }
    if !(eta > 0.0) || !eta.is_finite() || !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "kernel descent needs positive finite eta and scale, got eta={eta}, scale={scale}"
        )));
    }
    let rate = eta * scale;
    let lmax = linalg::lambda_max(k);
    if !(rate * lmax < 2.0) {
        return Err(Error::Unstable(format!(
            "eta * scale * lambda_max = {:.6e} is not below 2: lambda_max = {lmax:.6e}, so the \
             combined rate must stay below {:.6e}",
            rate * lmax,
            2.0 / lmax
        )));
    }
    let mut delta = y.mapv(|v| -v);
    let mut losses = Vec::with_capacity(steps + 1);
    losses.push(delta.dot(&delta));
    for _ in 0..steps {
        let kd = k.dot(&delta);
        delta.scaled_add(-rate, &kd);
        losses.push(delta.dot(&delta));
    }
    Ok(losses)
}

/// Kernel-norm pair (initial, final) of a companion training run, read from
/// its persisted snapshots.
fn companion_norms_from_run(out_root: &Path, run_id: &str) -> Result<(f64, f64)> {
    let dir = RunDir::open(out_root, run_id)?;
    let snap_dir = dir.root.join("snapshots");
    let mut steps = Vec::new();
    for entry in std::fs::read_dir(&snap_dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".bin")) {
            if let Ok(n) = num.parse::<usize>() {
                steps.push(n);
            }
        }
    }
    steps.sort_unstable();
    let (first, last) = match (steps.first(), steps.last()) {
        (Some(&f), Some(&l)) if f == 0 && l > 0 => (f, l),
        _ => {
            return Err(Error::InvalidConfig(format!(
                "companion run '{run_id}' has no initial+final kernel snapshots under {}; rerun it \
                 with snapshots.persist = true",
                snap_dir.display()
            )))
        }
    };
    let k0 = io::load_kernel_snapshot(&dir.snapshot_path(first))?;
    let kf = io::load_kernel_snapshot(&dir.snapshot_path(last))?;
    Ok((k0.frob(), kf.frob()))
}

/// Train the companion trajectory in memory (same dataset, model, and seed)
/// and return the initial and final kernel Frobenius norms.
fn companion_norms_in_memory(config: &ExperimentConfig, seed: u64) -> Result<(f64, f64)> {
    let data = build_dataset(&config.dataset, seed)?;
    let mut params = build_model(&config.model, data.n(), seed);
    let k0 = ntk::gram_matrix(&params, &data.inputs, config.model.gamma)?;
    let tc = TrainConfig {
        eta0: config.train.eta0,
        gamma: config.model.gamma,
        steps: config.train.steps,
        loss_normalization: config.train.loss_normalization,
        snapshot_schedule: vec![],
    };
    for step in 0..tc.steps {
        models::gd_step(&mut params, &data, &tc)
            .map_err(|e| Error::Divergence(format!("companion training failed at step {step}: {e}")))?;
    }
    let kf = ntk::gram_matrix(&params, &data.inputs, config.model.gamma)?;
    Ok((k0.frob(), kf.frob()))
}

/// Run kernel descent baselines (kgd or akgd) for every seed in the config.
pub fn run_kernel(config: &ExperimentConfig) -> Result<Vec<TrainingTrace>> {
    config.validate()?;
    if !matches!(config.experiment_kind, ExperimentKind::Kgd | ExperimentKind::Akgd) {
        return Err(Error::InvalidConfig(format!(
            "run_kernel handles kgd/akgd experiments, not experiment_kind '{}'",
            config.experiment_kind
        )));
    }
    let out_root = PathBuf::from(&config.output_dir);
    config.seeds.iter().map(|&s| run_kernel_seed(config, s, &out_root)).collect()
}

fn run_kernel_seed(config: &ExperimentConfig, seed: u64, out_root: &Path) -> Result<TrainingTrace> {
    let data = build_dataset(&config.dataset, seed)?;
    let y = data.scalar_targets()?;
    let params0 = build_model(&config.model, data.n(), seed);
    let k0snap = ntk::gram_matrix(&params0, &data.inputs, config.model.gamma)?;
    let k0 = k0snap.scalar_gram().clone();
    let k0_frob = k0snap.frob();
    let eta = if config.kgd.eta > 0.0 { config.kgd.eta } else { config.train.eta0 };
    let mut meta_kfinal = None;
    let mut capped = None;
    let scale = match config.experiment_kind {
        ExperimentKind::Kgd => config.kgd.scale,
        ExperimentKind::Akgd => {
            let (c0, cf) = if config.kgd.companion_run.is_empty() {
                companion_norms_in_memory(config, seed)?
            } else {
                companion_norms_from_run(out_root, &config.kgd.companion_run)?
            };
            meta_kfinal = Some(cf);
            let raw = cf / c0;
            // The rescaled rate must stay inside the stability region of the
            // frozen kernel; cap it just below the 2/lambda_max boundary.
            let lmax = linalg::lambda_max(&k0);
            let bound = 1.9 / (eta * lmax);
            if raw > bound {
                capped = Some(true);
                bound
            } else {
                capped = Some(false);
                raw
            }
        }
        _ => unreachable!("validated above"),
    };
    let losses = run_kgd(&k0, &y, eta, config.kgd.steps, scale)?;
    let run_id = config.run_id(seed);
    let dir = RunDir::create(out_root, &run_id)?;
    let config_bytes = config.canonical_bytes();
    let config_hash = io::config_hash(&config_bytes);
    let align = metrics::alignment(&k0, &y)?;
    let eig = metrics::top_eigvec_alignment(&k0, &y)?;
    let sched = config.snapshot_steps();
    let records: Vec<MetricRecord> = sched
        .iter()
        .map(|&step| MetricRecord {
            step,
            loss: losses[step],
            align_heads: vec![align],
            align_traced: align,
            frob: k0_frob,
            eigvec_align: eig.value,
            eigvec_degenerate: eig.degenerate,
            teacher_cos: None,
            ksm: None,
            probes: None,
        })
        .collect();
    let mut snapshot_files = Vec::new();
    if config.snapshots.persist {
        let path = dir.snapshot_path(0);
        io::save_kernel_snapshot(&path, &k0snap)?;
        snapshot_files.push((0, path));
    }
    let mut meta = RunMeta::new(&run_id, seed);
    meta.k0_frob = Some(k0_frob);
    meta.kfinal_frob = meta_kfinal;
    meta.scale_applied = Some(scale);
    meta.scale_capped = capped;
    meta.finish();
    let trace = TrainingTrace {
        run_id,
        seed,
        config_hash,
        records,
        snapshot_files,
        heads: 1,
        with_probes: false,
        meta,
    };
    write_run_files(&dir, &config_bytes, &trace)?;
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Optimal feature evolution runs.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct OfeRecord {
    pub t: f64,
    pub loss: f64,
    pub align: f64,
    pub frob: f64,
    pub conservation_drift: f64,
}

#[derive(Clone, Debug)]
pub struct OfeRunTrace {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<OfeRecord>,
    pub predicted_final_align: f64,
    pub meta: RunMeta,
}

impl OfeRunTrace {
    pub fn csv(&self) -> String {
        let mut s = String::from("t,loss,align,frob,conservation_drift\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(r.t),
                fmt_f64(r.loss),
                fmt_f64(r.align),
                fmt_f64(r.frob),
                fmt_f64(r.conservation_drift)
            ));
        }
        s
    }
}

/// Integrate the feature evolution flow once per seed, recording loss,
/// alignment, kernel norm, and conserved-matrix drift along the trajectory.
pub fn run_ofe(config: &ExperimentConfig) -> Result<Vec<OfeRunTrace>> {
    config.validate()?;
    if config.experiment_kind != ExperimentKind::Ofe {
        return Err(Error::InvalidConfig(format!(
            "run_ofe handles ofe experiments, not experiment_kind '{}'",
            config.experiment_kind
        )));
    }
    let out_root = PathBuf::from(&config.output_dir);
    config.seeds.iter().map(|&s| run_ofe_seed(config, s, &out_root)).collect()
}

fn run_ofe_seed(config: &ExperimentConfig, seed: u64, out_root: &Path) -> Result<OfeRunTrace> {
    let data = build_dataset(&config.dataset, seed)?;
    let y = data.scalar_targets()?;
    let o = &config.ofe;
    let mut r = rng::stream(seed, rng::STREAM_INIT);
    let psi0 = rng::gaussian_mat(&mut r, o.q, data.p(), o.psi_scale / (o.q as f64).sqrt());
    let state0 = ofe::OfeState::new(psi0, y.mapv(|v| -v), o.gamma, o.eta);
    let c0 = ofe::conserved_matrix(&state0);
    let c0_norm = linalg::frob(&c0);
    let k0 = state0.kernel();
    let predicted_final_align =
        metrics::alignment(&ofe::predicted_final_kernel(&k0, &y, o.gamma), &y)?;
    let traj = ofe::ofe_integrate(&state0, o.t_final, o.dt, o.method.to_integration(), o.record_every)?;
    let mut records = Vec::with_capacity(traj.len());
    for st in &traj {
        let k = st.kernel();
        let drift = linalg::frob(&(&ofe::conserved_matrix(st) - &c0)) / c0_norm;
        records.push(OfeRecord {
            t: st.t,
            loss: st.loss(),
            align: metrics::alignment(&k, &y)?,
            frob: linalg::frob(&k),
            conservation_drift: drift,
        });
    }
    let run_id = config.run_id(seed);
    let dir = RunDir::create(out_root, &run_id)?;
    let config_bytes = config.canonical_bytes();
    let config_hash = io::config_hash(&config_bytes);
    let mut meta = RunMeta::new(&run_id, seed);
    meta.k0_frob = records.first().map(|r| r.frob);
    meta.kfinal_frob = records.last().map(|r| r.frob);
    meta.note = format!("predicted_final_align={}", fmt_f64(predicted_final_align));
    meta.finish();
    std::fs::write(dir.config_path(), &config_bytes)?;
    let trace = OfeRunTrace { run_id, seed, config_hash, records, predicted_final_align, meta };
    std::fs::write(dir.trace_path(), trace.csv())?;
    let mut meta_json = serde_json::to_string_pretty(&trace.meta)?;
    meta_json.push('\n');
    std::fs::write(dir.root.join("meta.json"), meta_json)?;
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Axis sweeps.
// ---------------------------------------------------------------------------

/// One training run per axis value. The initialization draw is shared where
/// shapes permit (gamma) and redrawn otherwise (depth, width); the policy is
/// recorded in each run's metadata. An aggregate CSV with final loss, final
/// alignment, and the estimated feature evolution rate lands next to the run
/// directories. Runs are state-isolated; this executes them sequentially.
pub fn sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<TrainingTrace>> {
    config.validate()?;
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep.values: must be non-empty".into()));
    }
    match config.experiment_kind {
        ExperimentKind::NnTrain
        | ExperimentKind::DepthSweep
        | ExperimentKind::GammaSweep
        | ExperimentKind::MixtureSpecialization
        | ExperimentKind::LinearTeacher => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "sweep over '{axis}' is not applicable to experiment_kind '{other}'"
            )))
        }
    }
    let base_seed = config.seeds[0];
    let out_root = PathBuf::from(&config.output_dir);
    let mut traces = Vec::with_capacity(values.len());
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        if !v.is_finite() {
            return Err(Error::InvalidConfig(format!("sweep.values: value {v} is not finite")));
        }
        let mut cfg = config.clone();
        let (seed, policy) = match axis {
            SweepAxis::Gamma => {
                if !(v > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "sweep.values: gamma value must be positive, got {v}"
                    )));
                }
                cfg.model.gamma = v;
                (base_seed, "shared")
            }
            SweepAxis::Depth => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "sweep.values: depth value must be a positive integer, got {v}"
                    )));
                }
                cfg.model.hidden_layers = v as usize;
                (base_seed, "redrawn")
            }
            SweepAxis::Width => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "sweep.values: width value must be a positive integer, got {v}"
                    )));
                }
                cfg.model.hidden_width = v as usize;
                (base_seed, "redrawn")
            }
            SweepAxis::Seed => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "sweep.values: seed value must be a non-negative integer, got {v}"
                    )));
                }
                (v as u64, "per_seed")
            }
        };
        cfg.validate()?;
        let trace = run_training(&cfg, seed, &out_root, Some(policy.to_string()), Some(v))?;
        let gamma_hat = if cfg.model.heads == 1 {
            let ds = build_dataset(&cfg.dataset, seed)?;
            let p0 = build_model(&cfg.model, ds.n(), seed);
            let k0 = ntk::gram_matrix(&p0, &ds.inputs, cfg.model.gamma)?;
            let y = ds.scalar_targets()?;
            ofe::estimate_gamma_hat(k0.scalar_gram(), &y, trace.final_record().align_traced).ok()
        } else {
            None
        };
        rows.push((
            v,
            trace.run_id.clone(),
            trace.final_record().loss,
            trace.final_record().align_traced,
            gamma_hat,
        ));
        traces.push(trace);
    }
    let mut csv = String::from("axis,value,run_id,final_loss,final_align,gamma_hat\n");
    for (v, id, loss, align, ghat) in &rows {
        csv.push_str(&format!(
            "{axis},{},{id},{},{},{}\n",
            fmt_f64(*v),
            fmt_f64(*loss),
            fmt_f64(*align),
            ghat.map(fmt_f64).unwrap_or_default()
        ));
    }
    let hash8: String = config.hash().chars().take(8).collect();
    std::fs::create_dir_all(&out_root)?;
    std::fs::write(out_root.join(format!("sweep_{axis}_{hash8}_summary.csv")), csv)?;
    Ok(traces)
}

// ---------------------------------------------------------------------------
// Figure bundles.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FigureBundle {
    pub figure: FigureId,
    pub dir: PathBuf,
    pub csv_paths: Vec<PathBuf>,
    pub svg_path: PathBuf,
    pub notes: Vec<String>,
}

/// Desk-scale config reproducing one figure's qualitative content. `repro`
/// starts from this and applies any user overrides on top.
pub fn canonical_figure_config(fig: FigureId) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.experiment_kind = ExperimentKind::FigureRepro;
    c.figure = fig;
    match fig {
        FigureId::Fig1 => {
            c.dataset = DatasetSpec {
                kind: DatasetKind::MnistOddEven,
                p: 500,
                n: 784,
                ..DatasetSpec::default()
            };
            c.model.hidden_width = 200;
            c.model.hidden_layers = 2;
            // eta0 is replaced at run time so the network's linearized step
            // sits at half the stability edge of its initial kernel.
            c.train = TrainSpec { eta0: 0.1, steps: 2000, loss_normalization: LossNormalization::MeanOverP };
            c.kgd.steps = 2000;
        }
        FigureId::Fig2cd => {
            c.dataset = DatasetSpec { kind: DatasetKind::RandomBinary, p: 40, n: 40, ..DatasetSpec::default() };
            c.model.hidden_width = 200;
            c.train = TrainSpec { eta0: 0.05, steps: 512, loss_normalization: LossNormalization::MeanOverP };
            c.sweep = SweepSpec { axis: SweepAxis::Gamma, values: vec![0.5, 1.0, 2.0, 4.0] };
        }
        FigureId::Fig4 => {
            c.dataset = DatasetSpec { kind: DatasetKind::LinearTeacher, p: 20, n: 30, ..DatasetSpec::default() };
            c.model = ModelSpec {
                activation: Activation::Linear,
                hidden_width: 30,
                hidden_layers: 1,
                heads: 1,
                init_scale: 0.1,
                gamma: 1.0,
            };
            c.train = TrainSpec { eta0: 0.01, steps: 4000, loss_normalization: LossNormalization::Sum };
            c.sweep = SweepSpec { axis: SweepAxis::Depth, values: vec![1.0, 2.0, 3.0] };
        }
        FigureId::Fig5 => {
            c.dataset = DatasetSpec {
                kind: DatasetKind::MnistOddEven,
                p: 500,
                n: 784,
                ..DatasetSpec::default()
            };
            c.model.hidden_width = 200;
            // eta0 is replaced at run time, per depth, from that depth's own
            // initial kernel so every depth trains at the same edge fraction.
            c.train = TrainSpec { eta0: 0.1, steps: 2000, loss_normalization: LossNormalization::MeanOverP };
            c.sweep = SweepSpec { axis: SweepAxis::Depth, values: vec![1.0, 2.0, 3.0] };
        }
        FigureId::Fig6 => {
            c.dataset = DatasetSpec { kind: DatasetKind::RandomBinary, p: 60, n: 200, ..DatasetSpec::default() };
            c.model.hidden_width = 400;
            c.train = TrainSpec { eta0: 0.1, steps: 256, loss_normalization: LossNormalization::MeanOverP };
            c.snapshots.split = true;
        }
        FigureId::Fig7 => {
            c.dataset = DatasetSpec {
                kind: DatasetKind::GaussianMixture,
                p: 100,
                n: 100,
                classes: 10,
                sigma2: 0.01,
                ..DatasetSpec::default()
            };
            c.model.hidden_width = 200;
            c.model.heads = 10;
            c.train = TrainSpec { eta0: 0.2, steps: 256, loss_normalization: LossNormalization::MeanOverP };
            c.snapshots.persist = false;
        }
    }
    c
}

/// Run the desk-scale experiment bundle behind one figure: per-panel CSVs and
/// a single SVG with the same panel layout, all under one bundle directory.
pub fn run_figure_repro(fig: FigureId, config: &ExperimentConfig) -> Result<FigureBundle> {
    config.validate()?;
    if config.experiment_kind != ExperimentKind::FigureRepro {
        return Err(Error::InvalidConfig(format!(
            "run_figure_repro needs experiment_kind 'figure_repro', got '{}'",
            config.experiment_kind
        )));
    }
    if config.figure != fig {
        return Err(Error::InvalidConfig(format!(
            "config.figure is '{}' but '{fig}' was requested",
            config.figure
        )));
    }
    let out_root = PathBuf::from(&config.output_dir);
    let hash8: String = config.hash().chars().take(8).collect();
    let dir = RunDir::create(&out_root, &format!("{fig}_{hash8}"))?;
    std::fs::write(dir.config_path(), config.canonical_bytes())?;
    match fig {
        FigureId::Fig1 => fig1_bundle(config, &dir),
        FigureId::Fig2cd => fig2cd_bundle(config, &dir),
        FigureId::Fig4 => fig4_bundle(config, &dir),
        FigureId::Fig5 => fig5_bundle(config, &dir),
        FigureId::Fig6 => fig6_bundle(config, &dir),
        FigureId::Fig7 => fig7_bundle(config, &dir),
    }
}

fn runs_root(dir: &RunDir) -> PathBuf {
    dir.root.join("runs")
}

fn write_csv(dir: &RunDir, name: &str, content: &str) -> Result<PathBuf> {
    let path = dir.aux_csv_path(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

fn render_bundle_svg(dir: &RunDir, figure: &Figure) -> Result<PathBuf> {
    let svg = crate::plot::render_figure(figure);
    let path = dir.figure_path();
    std::fs::write(&path, svg)?;
    Ok(path)
}

fn series_from_steps(name: &str, steps: &[usize], vals: &[f64]) -> Series {
    Series::new(
        name,
        steps.iter().zip(vals).map(|(&s, &v)| (s as f64, v)).collect(),
    )
}

/// Columnar CSV: a step column plus one named column per series.
fn step_csv(steps: &[usize], cols: &[(&str, &[f64])]) -> String {
    let mut s = String::from("step");
    for (name, _) in cols {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (i, &step) in steps.iter().enumerate() {
        s.push_str(&step.to_string());
        for (_, vals) in cols {
            s.push(',');
            s.push_str(&fmt_f64(vals[i]));
        }
        s.push('\n');
    }
    s
}

/// MNIST comparison of network training against kernel descent on the frozen
/// initial kernel, with and without norm rescaling.
fn fig1_bundle(config: &ExperimentConfig, dir: &RunDir) -> Result<FigureBundle> {
    let seed = config.seeds[0];
    let data = build_dataset(&config.dataset, seed)?;
    let p = data.p() as f64;
    let params0 = build_model(&config.model, data.n(), seed);
    let k0 = ntk::gram_matrix(&params0, &data.inputs, config.model.gamma)?;
    let lmax = linalg::lambda_max(k0.scalar_gram());
    // Kernel-space rate at half the stability edge of the initial kernel.
    // Under the mean-over-P loss one network step linearizes to
    // (I - (2 eta / P) K), so the matching network rate is eta_tilde * P / 2.
    let eta_tilde = 1.0 / lmax;
    let mut nn_cfg = config.clone();
    nn_cfg.experiment_kind = ExperimentKind::NnTrain;
    nn_cfg.train.loss_normalization = LossNormalization::MeanOverP;
    nn_cfg.train.eta0 = eta_tilde * p / 2.0;
    let root = runs_root(dir);
    let nn = run_training(&nn_cfg, seed, &root, None, None)?;
    let mut kgd_cfg = nn_cfg.clone();
    kgd_cfg.experiment_kind = ExperimentKind::Kgd;
    kgd_cfg.kgd.eta = eta_tilde;
    kgd_cfg.kgd.steps = config.kgd.steps;
    let kgd = run_kernel_seed(&kgd_cfg, seed, &root)?;
    let mut akgd_cfg = kgd_cfg.clone();
    akgd_cfg.experiment_kind = ExperimentKind::Akgd;
    akgd_cfg.kgd.companion_run = nn.run_id.clone();
    let akgd = run_kernel_seed(&akgd_cfg, seed, &root)?;

    let steps: Vec<usize> = nn.records.iter().map(|r| r.step).collect();
    let nn_loss: Vec<f64> = nn.records.iter().map(|r| r.loss).collect();
    // Kernel descent tracks the summed squared residual; divide by P to plot
    // all three curves in per-example units.
    let kgd_loss: Vec<f64> = kgd.records.iter().map(|r| r.loss / p).collect();
    let akgd_loss: Vec<f64> = akgd.records.iter().map(|r| r.loss / p).collect();
    let frob0 = nn.records[0].frob;
    let norm_ratio: Vec<f64> = nn.records.iter().map(|r| r.frob / frob0).collect();
    let nn_align: Vec<f64> = nn.records.iter().map(|r| r.align_traced).collect();
    let static_align = vec![kgd.records[0].align_traced; steps.len()];

    let mut csv_paths = Vec::new();
    csv_paths.push(write_csv(
        dir,
        "A_loss",
        &step_csv(&steps, &[("nn", &nn_loss), ("kgd", &kgd_loss), ("akgd", &akgd_loss)]),
    )?);
    csv_paths.push(write_csv(dir, "B_kernel_norm", &step_csv(&steps, &[("frob_ratio", &norm_ratio)]))?);
    csv_paths.push(write_csv(
        dir,
        "C_alignment",
        &step_csv(&steps, &[("nn", &nn_align), ("static_kernel", &static_align)]),
    )?);

    let figure = Figure {
        title: "Network training against frozen-kernel descent".into(),
        panels: vec![
            Panel::new("A: training loss", "step", "loss")
                .log_y()
                .with_series(vec![
                    series_from_steps("NN", &steps, &nn_loss),
                    series_from_steps("KGD", &steps, &kgd_loss),
                    series_from_steps("aKGD", &steps, &akgd_loss),
                ]),
            Panel::new("B: kernel norm growth", "step", "||K_t||_F / ||K_0||_F")
                .with_series(vec![series_from_steps("NN", &steps, &norm_ratio)]),
            Panel::new("C: kernel alignment", "step", "alignment").with_series(vec![
                series_from_steps("NN", &steps, &nn_align),
                series_from_steps("static kernel", &steps, &static_align),
            ]),
        ],
    };
    let svg_path = render_bundle_svg(dir, &figure)?;
    let nn_final = *nn_loss.last().expect("nonempty");
    let kgd_final = *kgd_loss.last().expect("nonempty");
    let akgd_final = *akgd_loss.last().expect("nonempty");
    let notes = vec![
        format!("nn_final_loss={nn_final:.6e}"),
        format!("kgd_final_loss={kgd_final:.6e}"),
        format!("akgd_final_loss={akgd_final:.6e}"),
        format!("nn_below_akgd={}", nn_final < akgd_final),
        format!("akgd_below_kgd={}", akgd_final < kgd_final),
        format!(
            "nn_align_gain={}",
            fmt_f64(nn_align.last().expect("nonempty") - nn_align.first().expect("nonempty"))
        ),
        format!(
            "akgd_scale={} capped={}",
            akgd.meta.scale_applied.map(|v| fmt_f64(v)).unwrap_or_default(),
            akgd.meta.scale_capped.unwrap_or(false)
        ),
    ];
    write_notes(dir, &notes)?;
    Ok(FigureBundle { figure: FigureId::Fig1, dir: dir.root.clone(), csv_paths, svg_path, notes })
}

/// Output-rescaling sweep: loss and alignment trajectories across gamma.
fn fig2cd_bundle(config: &ExperimentConfig, dir: &RunDir) -> Result<FigureBundle> {
    let mut base = config.clone();
    base.experiment_kind = ExperimentKind::GammaSweep;
    base.sweep.axis = SweepAxis::Gamma;
    base.output_dir = runs_root(dir).to_string_lossy().into_owned();
    let values = base.sweep.values.clone();
    let traces = sweep(&base, SweepAxis::Gamma, &values)?;
    let steps: Vec<usize> = traces[0].records.iter().map(|r| r.step).collect();
    let loss_cols: Vec<(String, Vec<f64>)> = traces
        .iter()
        .zip(&values)
        .map(|(t, v)| (format!("gamma_{v}"), t.records.iter().map(|r| r.loss).collect()))
        .collect();
    let align_cols: Vec<(String, Vec<f64>)> = traces
        .iter()
        .zip(&values)
        .map(|(t, v)| (format!("gamma_{v}"), t.records.iter().map(|r| r.align_traced).collect()))
        .collect();
    let loss_refs: Vec<(&str, &[f64])> =
        loss_cols.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let align_refs: Vec<(&str, &[f64])> =
        align_cols.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let mut csv_paths = Vec::new();
    csv_paths.push(write_csv(dir, "C_loss", &step_csv(&steps, &loss_refs))?);
    csv_paths.push(write_csv(dir, "D_alignment", &step_csv(&steps, &align_refs))?);
    let figure = Figure {
        title: "Output rescaling accelerates kernel alignment".into(),
        panels: vec![
            Panel::new("C: training loss", "step", "loss").log_y().with_series(
                loss_cols.iter().map(|(n, v)| series_from_steps(n, &steps, v)).collect(),
            ),
            Panel::new("D: kernel alignment", "step", "alignment").with_series(
                align_cols.iter().map(|(n, v)| series_from_steps(n, &steps, v)).collect(),
            ),
        ],
    };
    let svg_path = render_bundle_svg(dir, &figure)?;
    let finals: Vec<String> = traces
        .iter()
        .zip(&values)
        .map(|(t, v)| format!("gamma={v}: final_align={}", fmt_f64(t.final_record().align_traced)))
        .collect();
    write_notes(dir, &finals)?;
    Ok(FigureBundle { figure: FigureId::Fig2cd, dir: dir.root.clone(), csv_paths, svg_path, notes: finals })
}

/// Deep linear networks on a teacher task: convergence, alignment, teacher
/// recovery, and the collapse of every layer to rank one.
fn fig4_bundle(config: &ExperimentConfig, dir: &RunDir) -> Result<FigureBundle> {
    let seed = config.seeds[0];
    let depths: Vec<usize> = config.sweep.values.iter().map(|&v| v as usize).collect();
    let root = runs_root(dir);
    let mut loss_cols = Vec::new();
    let mut align_cols = Vec::new();
    let mut teach_cols = Vec::new();
    let mut resid_cols = Vec::new();
    let mut steps_out: Option<Vec<usize>> = None;
    for &depth in &depths {
        let mut cfg = config.clone();
        cfg.experiment_kind = ExperimentKind::LinearTeacher;
        cfg.model.hidden_layers = depth;
        let trace = run_training(&cfg, seed, &root, None, Some(depth as f64))?;
        let steps: Vec<usize> = trace.records.iter().map(|r| r.step).collect();
        loss_cols.push((format!("depth_{depth}"), trace.records.iter().map(|r| r.loss).collect::<Vec<_>>()));
        align_cols
            .push((format!("depth_{depth}"), trace.records.iter().map(|r| r.align_traced).collect::<Vec<_>>()));
        teach_cols.push((
            format!("depth_{depth}"),
            trace.records.iter().map(|r| r.teacher_cos.unwrap_or(f64::NAN)).collect::<Vec<_>>(),
        ));
        // Rank-one residual: max over layers of sigma_2/sigma_1 along the
        // replayed trajectory.
        let resid = replay_series(&cfg, seed, |_, params, _| {
            Ok(ntk::extract_rank_one_factors(params)?.1)
        })?;
        resid_cols.push((format!("depth_{depth}"), resid.into_iter().map(|(_, v)| v).collect::<Vec<_>>()));
        steps_out.get_or_insert(steps);
    }
    let steps = steps_out.expect("at least one depth");
    let mut csv_paths = Vec::new();
    for (name, cols) in [
        ("A_loss", &loss_cols),
        ("B_alignment", &align_cols),
        ("C_teacher_cosine", &teach_cols),
        ("D_rank_one_residual", &resid_cols),
    ] {
        let refs: Vec<(&str, &[f64])> = cols.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
        csv_paths.push(write_csv(dir, name, &step_csv(&steps, &refs))?);
    }
    let panel = |title: &str, ylab: &str, cols: &[(String, Vec<f64>)], log: bool| {
        let p = Panel::new(title, "step", ylab)
            .with_series(cols.iter().map(|(n, v)| series_from_steps(n, &steps, v)).collect());
        if log {
            p.log_y()
        } else {
            p
        }
    };
    let figure = Figure {
        title: "Deep linear networks align their kernel to the teacher".into(),
        panels: vec![
            panel("A: training loss", "loss", &loss_cols, true),
            panel("B: kernel alignment", "alignment", &align_cols, false),
            panel("C: teacher cosine", "cosine", &teach_cols, false),
            panel("D: rank-one residual", "sigma_2 / sigma_1", &resid_cols, true),
        ],
    };
    let svg_path = render_bundle_svg(dir, &figure)?;
    let notes: Vec<String> = depths
        .iter()
        .zip(&align_cols)
        .map(|(d, (_, v))| format!("depth={d}: final_align={}", fmt_f64(*v.last().expect("nonempty"))))
        .collect();
    write_notes(dir, &notes)?;
    Ok(FigureBundle { figure: FigureId::Fig4, dir: dir.root.clone(), csv_paths, svg_path, notes })
}

/// MNIST depth sweep: deeper networks reach higher alignment, and the fitted
/// feature evolution rate grows with depth.
fn fig5_bundle(config: &ExperimentConfig, dir: &RunDir) -> Result<FigureBundle> {
    let seed = config.seeds[0];
    let data = build_dataset(&config.dataset, seed)?;
    let p = data.p() as f64;
    let y = data.scalar_targets()?;
    let depths: Vec<usize> = config.sweep.values.iter().map(|&v| v as usize).collect();
    let root = runs_root(dir);
    let mut align_cols = Vec::new();
    let mut gamma_hats = Vec::new();
    let mut steps_out: Option<Vec<usize>> = None;
    for &depth in &depths {
        let mut cfg = config.clone();
        cfg.experiment_kind = ExperimentKind::NnTrain;
        cfg.model.hidden_layers = depth;
        cfg.train.loss_normalization = LossNormalization::MeanOverP;
        // Every depth trains at half the stability edge of its own initial
        // kernel: eta_tilde = 1/lambda_max in kernel space, eta_tilde * P / 2
        // as the network rate under the mean-over-P loss.
        let k0 = ntk::gram_matrix(&build_model(&cfg.model, data.n(), seed), &data.inputs, cfg.model.gamma)?;
        let lmax = linalg::lambda_max(k0.scalar_gram());
        cfg.train.eta0 = 0.5 * p / lmax;
        let trace = run_training(&cfg, seed, &root, None, Some(depth as f64))?;
        let steps: Vec<usize> = trace.records.iter().map(|r| r.step).collect();
        align_cols
            .push((format!("depth_{depth}"), trace.records.iter().map(|r| r.align_traced).collect::<Vec<_>>()));
        let ghat = ofe::estimate_gamma_hat(k0.scalar_gram(), &y, trace.final_record().align_traced)?;
        gamma_hats.push(ghat);
        steps_out.get_or_insert(steps);
    }
    let steps = steps_out.expect("at least one depth");
    let mut csv_paths = Vec::new();
    let align_refs: Vec<(&str, &[f64])> =
        align_cols.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    csv_paths.push(write_csv(dir, "A_alignment", &step_csv(&steps, &align_refs))?);
    let mut ghat_csv = String::from("depth,gamma_hat,final_align\n");
    for ((d, g), (_, a)) in depths.iter().zip(&gamma_hats).zip(&align_cols) {
        ghat_csv.push_str(&format!("{d},{},{}\n", fmt_f64(*g), fmt_f64(*a.last().expect("nonempty"))));
    }
    csv_paths.push(write_csv(dir, "B_gamma_hat", &ghat_csv)?);
    let figure = Figure {
        title: "Depth strengthens kernel alignment".into(),
        panels: vec![
            Panel::new("A: kernel alignment", "step", "alignment").with_series(
                align_cols.iter().map(|(n, v)| series_from_steps(n, &steps, v)).collect(),
            ),
            Panel::new("B: fitted evolution rate", "depth", "gamma_hat").with_series(vec![Series::new(
                "gamma_hat",
                depths.iter().zip(&gamma_hats).map(|(&d, &g)| (d as f64, g)).collect(),
            )]),
        ],
    };
    let svg_path = render_bundle_svg(dir, &figure)?;
    let notes: Vec<String> = depths
        .iter()
        .zip(&gamma_hats)
        .zip(&align_cols)
        .map(|((d, g), (_, a))| {
            format!("depth={d}: final_align={} gamma_hat={}", fmt_f64(*a.last().expect("nonempty")), fmt_f64(*g))
        })
        .collect();
    write_notes(dir, &notes)?;
    Ok(FigureBundle { figure: FigureId::Fig5, dir: dir.root.clone(), csv_paths, svg_path, notes })
}

/// Two-layer ReLU diagnostics: loss, per-part alignment, probe curves, probe
/// isotropy, and gate flips, all on one trajectory.
fn fig6_bundle(config: &ExperimentConfig, dir: &RunDir) -> Result<FigureBundle> {
    let seed = config.seeds[0];
    let mut cfg = config.clone();
    cfg.experiment_kind = ExperimentKind::NnTrain;
    cfg.snapshots.split = true;
    let root = runs_root(dir);
    let trace = run_training(&cfg, seed, &root, None, None)?;
    let steps: Vec<usize> = trace.records.iter().map(|r| r.step).collect();
    let data = build_dataset(&cfg.dataset, seed)?;
    let y = data.scalar_targets()?;
    // Per-part alignment comes from the persisted split snapshots.
    let mut align_k = Vec::new();
    let mut align_v = Vec::new();
    let mut align_w = Vec::new();
    for (_, path) in &trace.snapshot_files {
        let snap = io::load_kernel_snapshot(path)?;
        let split = snap.split.as_ref().ok_or_else(|| {
            Error::Format(format!("snapshot {} lost its kernel decomposition", path.display()))
        })?;
        align_k.push(metrics::alignment(snap.scalar_gram(), &y)?);
        align_v.push(metrics::alignment(&split.gram_v[0], &y)?);
        align_w.push(metrics::alignment(&split.gram_w[0], &y)?);
    }
    let loss: Vec<f64> = trace.records.iter().map(|r| r.loss).collect();
    let probes = |f: fn(&metrics::AlphaBetaProbes) -> f64| -> Vec<f64> {
        trace.records.iter().map(|r| f(r.probes.as_ref().expect("split run records probes"))).collect()
    };
    let alpha_y = probes(|p| p.alpha_y);
    let alpha_mean = probes(|p| p.alpha_mean_z);
    let beta_y = probes(|p| p.beta_y);
    let beta_mean = probes(|p| p.beta_mean_z);
    let beta_std = probes(|p| p.beta_std_z);
    let beta_cov: Vec<f64> =
        beta_std.iter().zip(&beta_mean).map(|(s, m)| if *m != 0.0 { s / m.abs() } else { f64::NAN }).collect();
    let flips_pairs = gate_flip_series(&cfg, seed)?;
    let flips: Vec<f64> = flips_pairs.iter().map(|&(_, v)| v).collect();

    let mut csv_paths = Vec::new();
    csv_paths.push(write_csv(dir, "A_loss", &step_csv(&steps, &[("loss", &loss)]))?);
    csv_paths.push(write_csv(
        dir,
        "B_alignment",
        &step_csv(&steps, &[("full", &align_k), ("readout_part", &align_v), ("hidden_part", &align_w)]),
    )?);
    csv_paths.push(write_csv(
        dir,
        "C_alpha",
        &step_csv(&steps, &[("alpha_y", &alpha_y), ("alpha_mean_z", &alpha_mean)]),
    )?);
    csv_paths
        .push(write_csv(dir, "D_beta", &step_csv(&steps, &[("beta_y", &beta_y), ("beta_mean_z", &beta_mean)]))?);
    csv_paths.push(write_csv(
        dir,
        "E_beta_spread",
        &step_csv(&steps, &[("beta_std_z", &beta_std), ("beta_cov", &beta_cov)]),
    )?);
    csv_paths.push(write_csv(dir, "F_gate_flips", &step_csv(&steps, &[("flip_fraction", &flips)]))?);

    let figure = Figure {
        title: "Two-layer ReLU kernel dynamics".into(),
        panels: vec![
            Panel::new("A: training loss", "step", "loss")
                .log_y()
                .with_series(vec![series_from_steps("loss", &steps, &loss)]),
            Panel::new("B: alignment by part", "step", "alignment").with_series(vec![
                series_from_steps("full", &steps, &align_k),
                series_from_steps("readout part", &steps, &align_v),
                series_from_steps("hidden part", &steps, &align_w),
            ]),
            Panel::new("C: readout-part probes", "step", "alpha").with_series(vec![
                series_from_steps("alpha(y)", &steps, &alpha_y),
                series_from_steps("mean alpha(z)", &steps, &alpha_mean),
            ]),
            Panel::new("D: hidden-part probes", "step", "beta").with_series(vec![
                series_from_steps("beta(y)", &steps, &beta_y),
                series_from_steps("mean beta(z)", &steps, &beta_mean),
            ]),
            Panel::new("E: probe isotropy", "step", "spread").with_series(vec![
                series_from_steps("beta std", &steps, &beta_std),
                series_from_steps("beta cov", &steps, &beta_cov),
            ]),
            Panel::new("F: gate flips vs init", "step", "fraction")
                .with_series(vec![series_from_steps("flipped", &steps, &flips)]),
        ],
    };
    let svg_path = render_bundle_svg(dir, &figure)?;
    let notes = vec![
        format!("final_loss={:.6e}", loss.last().expect("nonempty")),
        format!("final_align={}", fmt_f64(*align_k.last().expect("nonempty"))),
        format!("final_gate_flips={}", fmt_f64(*flips.last().expect("nonempty"))),
    ];
    write_notes(dir, &notes)?;
    Ok(FigureBundle { figure: FigureId::Fig6, dir: dir.root.clone(), csv_paths, svg_path, notes })
}

/// Mixture specialization series evaluated along a replayed trajectory:
/// hidden-part quadratic forms on same-class versus cross-class blocks, and
/// the diagonal/off-diagonal specialization matrix means.
pub struct MixtureSeries {
    pub steps: Vec<usize>,
    pub same: Vec<f64>,
    pub other: Vec<f64>,
    pub ksm_diag: Vec<f64>,
    pub ksm_off: Vec<f64>,
}

pub fn mixture_specialization_series(config: &ExperimentConfig, seed: u64) -> Result<MixtureSeries> {
    let c = config.model.heads;
    if c < 2 {
        return Err(Error::InvalidConfig("specialization series need a multi-head mixture model".into()));
    }
    let gamma = config.model.gamma;
    let (steps, rows) = replay_multi_series(config, seed, |_, params, data| {
        let snap = ntk::gram_with_split(params, &data.inputs, gamma)?;
        let split = snap.split.as_ref().expect("split requested");
        let mut yhat = Vec::with_capacity(c);
        for cc in 0..c {
            let ycol = data.targets.column(cc).to_owned();
            let n = ycol.dot(&ycol).sqrt();
            yhat.push(ycol / n);
        }
        let mut same = 0.0;
        let mut other = 0.0;
        for cc in 0..c {
            same += metrics::bilinear(&split.gram_w[cc * c + cc], &yhat[cc])?;
            for dd in 0..c {
                if dd != cc {
                    other += metrics::bilinear(&split.gram_w[cc * c + dd], &yhat[dd])?;
                }
            }
        }
        same /= c as f64;
        other /= (c * (c - 1)) as f64;
        let ksm = metrics::ksm(&snap, &data.targets)?;
        let (diag, off) = metrics::diag_off_means(&ksm);
        Ok(vec![same, other, diag, off])
    })?;
    Ok(MixtureSeries {
        steps,
        same: rows.iter().map(|r| r[0]).collect(),
        other: rows.iter().map(|r| r[1]).collect(),
        ksm_diag: rows.iter().map(|r| r[2]).collect(),
        ksm_off: rows.iter().map(|r| r[3]).collect(),
    })
}

/// Gaussian-mixture specialization: same-class kernel blocks grow faster than
/// cross-class blocks, and the specialization matrix develops a diagonal.
fn fig7_bundle(config: &ExperimentConfig, dir: &RunDir) -> Result<FigureBundle> {
    let seed = config.seeds[0];
    let mut cfg = config.clone();
    cfg.experiment_kind = ExperimentKind::MixtureSpecialization;
    let root = runs_root(dir);
    let trace = run_training(&cfg, seed, &root, None, None)?;
    let series = mixture_specialization_series(&cfg, seed)?;
    let steps = &series.steps;
    let mut csv_paths = Vec::new();
    csv_paths.push(write_csv(
        dir,
        "A_specialization",
        &step_csv(steps, &[("same_class", &series.same), ("cross_class", &series.other)]),
    )?);
    csv_paths.push(write_csv(
        dir,
        "B_ksm",
        &step_csv(steps, &[("diag_mean", &series.ksm_diag), ("offdiag_mean", &series.ksm_off)]),
    )?);
    let figure = Figure {
        title: "Kernel specialization on a Gaussian mixture".into(),
        panels: vec![
            Panel::new("A: hidden-part quadratic forms", "step", "beta").with_series(vec![
                series_from_steps("same class", steps, &series.same),
                series_from_steps("cross class", steps, &series.other),
            ]),
            Panel::new("B: specialization matrix", "step", "mean entry").with_series(vec![
                series_from_steps("diagonal", steps, &series.ksm_diag),
                series_from_steps("off-diagonal", steps, &series.ksm_off),
            ]),
        ],
    };
    let svg_path = render_bundle_svg(dir, &figure)?;
    let d_same = series.same.last().expect("nonempty") - series.same.first().expect("nonempty");
    let d_other = series.other.last().expect("nonempty") - series.other.first().expect("nonempty");
    let notes = vec![
        format!("final_loss={:.6e}", trace.final_record().loss),
        format!("delta_same={}", fmt_f64(d_same)),
        format!("delta_other={}", fmt_f64(d_other)),
        format!("other_over_same={}", fmt_f64(d_other / d_same)),
        format!("final_ksm_diag={}", fmt_f64(*series.ksm_diag.last().expect("nonempty"))),
    ];
    write_notes(dir, &notes)?;
    Ok(FigureBundle { figure: FigureId::Fig7, dir: dir.root.clone(), csv_paths, svg_path, notes })
}

// ---------------------------------------------------------------------------
// Theory-vs-simulation rate report.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub quantity: String,
    pub predicted: f64,
    pub measured: f64,
    /// measured / predicted; NaN when the prediction vanishes.
    pub ratio: f64,
    pub step: usize,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("quantity,predicted,measured,ratio,step\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.quantity,
            fmt_f64(r.predicted),
            fmt_f64(r.measured),
            fmt_f64(r.ratio),
            r.step
        ));
    }
    s
}

/// Compare closed-form alignment-rate predictions against finite-difference
/// measurements between consecutive scheduled snapshots of one training
/// trajectory. Rows are anchored at the earlier step of each pair, where the
/// prediction is evaluated. Writes report_<hash>.csv under the output dir.
///
/// The predictions cover a two-layer scalar-head model at unit output scale;
/// anything else is rejected. Early rows can be far off: the closed forms
/// assume the residual already points along the targets, which a random
/// initialization violates until a step or two of training.
pub fn theory_report(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    config.validate()?;
    if config.model.heads != 1 || config.model.hidden_layers != 1 {
        return Err(Error::InvalidConfig(
            "the rate report covers two-layer scalar-head models; set model.hidden_layers = 1 and model.heads = 1"
                .into(),
        ));
    }
    if config.model.gamma != 1.0 {
        return Err(Error::InvalidConfig(format!(
            "the rate report assumes unit output scale; model.gamma is {}",
            config.model.gamma
        )));
    }
    let seed = config.seeds[0];
    let data = build_dataset(&config.dataset, seed)?;
    let y = data.scalar_targets()?;
    let p = data.p();
    // The closed forms assume unit-norm inputs; the input gram enters each
    // rate bilinear once, so every prediction scales by the mean squared norm.
    let mean_sq_norm: f64 =
        data.inputs.rows().into_iter().map(|r| r.dot(&r)).sum::<f64>() / p as f64;
    // Rates are per unit flow time; one GD step advances the flow by this.
    let flow_per_step = match config.train.loss_normalization {
        LossNormalization::Sum => 2.0 * config.train.eta0,
        LossNormalization::MeanOverP | LossNormalization::MeanOverPAndC => {
            2.0 * config.train.eta0 / p as f64
        }
    };
    let mut params = build_model(&config.model, data.n(), seed);
    let tc = config.train_config();
    let sched = config.snapshot_steps();
    let run_tag = config.run_id(seed);
    let ratio = |m: f64, pr: f64| if pr != 0.0 { m / pr } else { f64::NAN };
    let mut prev: Option<(usize, KernelSnapshot, Array1<f64>)> = None;
    let mut rows = Vec::new();
    for step in 0..=tc.steps {
        if sched.binary_search(&step).is_ok() {
            let snap = ntk::gram_with_split(&params, &data.inputs, 1.0)?.at_step(step);
            let (out, _) = models::forward(&params, &data.inputs, 1.0)?;
            let f = out.column(0).to_owned();
            if let Some((pstep, psnap, pf)) = prev.take() {
                let dt = flow_per_step * (step - pstep) as f64;
                let meas = theory::measured_rates(
                    &run_tag,
                    &psnap,
                    &run_tag,
                    &snap,
                    &y,
                    config.probes.count,
                    config.probes.seed,
                    dt,
                )?;
                let pred = theory::predicted_alpha_beta_rates(&pf, &y, 1.0, p);
                rows.push(ReportRow {
                    quantity: "dalpha_y".into(),
                    predicted: pred.dalpha_y * mean_sq_norm,
                    measured: meas.dalpha_y,
                    ratio: ratio(meas.dalpha_y, pred.dalpha_y * mean_sq_norm),
                    step: pstep,
                });
                rows.push(ReportRow {
                    quantity: "dalpha_mean_z".into(),
                    predicted: pred.dalpha_mean * mean_sq_norm,
                    measured: meas.dalpha_mean,
                    ratio: ratio(meas.dalpha_mean, pred.dalpha_mean * mean_sq_norm),
                    step: pstep,
                });
                rows.push(ReportRow {
                    quantity: "dbeta_mean_z".into(),
                    predicted: pred.dbeta * mean_sq_norm,
                    measured: meas.dbeta_mean,
                    ratio: ratio(meas.dbeta_mean, pred.dbeta * mean_sq_norm),
                    step: pstep,
                });
                let pred_aniso = if pred.dalpha_mean != 0.0 { pred.dalpha_y / pred.dalpha_mean } else { f64::NAN };
                let meas_aniso = if meas.dalpha_mean != 0.0 { meas.dalpha_y / meas.dalpha_mean } else { f64::NAN };
                rows.push(ReportRow {
                    quantity: "alpha_anisotropy".into(),
                    predicted: pred_aniso,
                    measured: meas_aniso,
                    ratio: ratio(meas_aniso, pred_aniso),
                    step: pstep,
                });
            }
            prev = Some((step, snap, f));
        }
        if step < tc.steps {
            models::gd_step(&mut params, &data, &tc)?;
        }
    }
    let out_root = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out_root)?;
    let hash8: String = config.hash().chars().take(8).collect();
    std::fs::write(out_root.join(format!("report_{hash8}.csv")), report_csv(&rows))?;
    Ok(rows)
}

fn write_notes(dir: &RunDir, notes: &[String]) -> Result<()> {
    let mut s = String::new();
    for n in notes {
        s.push_str(n);
        s.push('\n');
    }
    std::fs::write(dir.root.join("notes.txt"), s)?;
    Ok(())
}

// Keeps figure sub-run configs JSON-serializable in sorted key order for
// deterministic hashing of derived configs.
#[allow(dead_code)]
fn sorted_value(v: &serde_json::Value) -> BTreeMap<String, serde_json::Value> {
    v.as_object().map(|m| m.iter().map(|(k, x)| (k.clone(), x.clone())).collect()).unwrap_or_default()
}
