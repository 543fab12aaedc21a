//! Kernel diagnostics: alignment, specialization matrix, bilinear probes,
//! top-eigenvector alignment, and teacher cosine.

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::NetworkParams;
use crate::ntk::KernelSnapshot;
use crate::rng;
use ndarray::{Array1, Array2};

/// Schema version stamped into run metadata next to trace CSVs.
pub const METRIC_SCHEMA_VERSION: u32 = 1;

/// A(K, y) = y^T K y / (||K||_F ||y||^2). Zero kernel or zero target is an
/// error, never a silent 0.
pub fn alignment(k: &Array2<f64>, y: &Array1<f64>) -> Result<f64> {
    let kf = linalg::frob(k);
    let y2 = y.dot(y);
    if kf <= 0.0 {
        return Err(Error::UndefinedMetric("alignment of a zero kernel".into()));
    }
    if y2 <= 0.0 {
        return Err(Error::UndefinedMetric("alignment with a zero target".into()));
    }
    Ok(y.dot(&k.dot(y)) / (kf * y2))
}

/// Alignment of a P x P kernel with a P x C target matrix:
/// tr(K Y Y^T) / (||K||_F ||Y Y^T||_F). Reduces to alignment(K, y) at C = 1.
pub fn target_alignment(k: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if k.nrows() != targets.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "kernel is {}x{} but targets have {} rows",
            k.nrows(),
            k.ncols(),
            targets.nrows()
        )));
    }
    let kf = linalg::frob(k);
    if kf <= 0.0 {
        return Err(Error::UndefinedMetric("alignment of a zero kernel".into()));
    }
    // ||Y Y^T||_F = ||Y^T Y||_F, computed on the cheap C x C side.
    let small = targets.t().dot(targets);
    let yf = linalg::frob(&small);
    if yf <= 0.0 {
        return Err(Error::UndefinedMetric("alignment with a zero target".into()));
    }
    let mut num = 0.0;
    for c in 0..targets.ncols() {
        let y = targets.column(c).to_owned();
        num += y.dot(&k.dot(&y));
    }
    Ok(num / (kf * yf))
}

/// Kernel specialization matrix: entry (c, d) is the alignment of diagonal
/// subkernel c with target d, normalized by the mean over subkernels of the
/// alignment with that same target. Columns therefore average to exactly 1.
pub fn ksm(snapshot: &KernelSnapshot, targets: &Array2<f64>) -> Result<Array2<f64>> {
    let c = snapshot.c;
    if targets.ncols() != c {
        return Err(Error::DimensionMismatch(format!(
            "targets have {} columns, snapshot has {c} heads",
            targets.ncols()
        )));
    }
    let mut raw = Array2::zeros((c, c));
    for ci in 0..c {
        let block = snapshot.block(ci, ci)?;
        for d in 0..c {
            let yd = targets.column(d).to_owned();
            raw[[ci, d]] = alignment(block, &yd)?;
        }
    }
    let mut out = Array2::zeros((c, c));
    for d in 0..c {
        let denom = (0..c).map(|ci| raw[[ci, d]]).sum::<f64>() / c as f64;
        if denom.abs() < 1e-12 {
            return Err(Error::UndefinedMetric(format!(
                "specialization column {d} has near-zero mean alignment {denom:.3e}"
            )));
        }
        for ci in 0..c {
            out[[ci, d]] = raw[[ci, d]] / denom;
        }
    }
    Ok(out)
}

/// Mean of the diagonal and mean of the off-diagonal entries.
pub fn diag_off_means(m: &Array2<f64>) -> (f64, f64) {
    let c = m.nrows();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                diag += m[[i, j]];
            } else {
                off += m[[i, j]];
            }
        }
    }
    (diag / c as f64, off / (c * (c - 1)) as f64)
}

/// B(z) = z^T K z for unit z.
pub fn bilinear(k: &Array2<f64>, z: &Array1<f64>) -> Result<f64> {
    let n = z.dot(z).sqrt();
    if (n - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidConfig(format!("bilinear probe needs a unit vector, ||z|| = {n}")));
    }
    Ok(z.dot(&k.dot(z)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaBetaProbes {
    pub alpha_y: f64,
    pub alpha_mean_z: f64,
    pub beta_y: f64,
    pub beta_mean_z: f64,
    pub beta_std_z: f64,
}

/// Uniform unit probe directions: normalized i.i.d. Gaussians, drawn once per
/// seed so probe sets are identical across steps of a run.
pub fn probe_directions(p: usize, count: usize, seed: u64) -> Vec<Array1<f64>> {
    let mut r = rng::stream(seed, rng::STREAM_PROBES);
    (0..count).map(|_| rng::unit_vec(&mut r, p)).collect()
}

/// alpha(z) = z^T K_V z and beta(z) = z^T K_W z, evaluated at z = y/||y||
/// and averaged over `count` random unit probes.
pub fn alpha_beta_probes(
    gram_v: &Array2<f64>,
    gram_w: &Array2<f64>,
    y: &Array1<f64>,
    count: usize,
    seed: u64,
) -> Result<AlphaBetaProbes> {
    let yn = y.dot(y).sqrt();
    if yn <= 0.0 {
        return Err(Error::UndefinedMetric("probes at a zero target".into()));
    }
    let zy = y / yn;
    let alpha_y = bilinear(gram_v, &zy)?;
    let beta_y = bilinear(gram_w, &zy)?;
    let probes = probe_directions(y.len(), count, seed);
    let mut am = 0.0;
    let mut bm = 0.0;
    let mut b2 = 0.0;
    for z in &probes {
        let a = bilinear(gram_v, z)?;
        let b = bilinear(gram_w, z)?;
        am += a;
        bm += b;
        b2 += b * b;
    }
    let n = count as f64;
    let beta_mean = bm / n;
    let beta_var = (b2 / n - beta_mean * beta_mean).max(0.0);
    Ok(AlphaBetaProbes {
        alpha_y,
        alpha_mean_z: am / n,
        beta_y,
        beta_mean_z: beta_mean,
        beta_std_z: beta_var.sqrt(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct EigAlignment {
    pub value: f64,
    /// Set when the top eigenvalue gap is below 1e-12 * ||K||_F; the value is
    /// then start-vector dependent and should not be interpreted.
    pub degenerate: bool,
}

/// |cosine| between the dominant eigenvector of K (power iteration from the
/// normalized all-ones vector, 1000 iterations with gap-based early stop)
/// and y / ||y||.
pub fn top_eigvec_alignment(k: &Array2<f64>, y: &Array1<f64>) -> Result<EigAlignment> {
    let y2 = y.dot(y).sqrt();
    if y2 <= 0.0 {
        return Err(Error::UndefinedMetric("eigenvector alignment with a zero target".into()));
    }
    let res = linalg::power_iteration(k, 1000, 1e-14);
    let gap = res.lambda1.abs() - res.lambda2.abs();
    let degenerate = gap < 1e-12 * linalg::frob(k);
    let value = (res.v1.dot(y) / y2).abs();
    Ok(EigAlignment { value, degenerate })
}

/// Cosine between the end-to-end product vector of a linear network and the
/// teacher weights.
pub fn teacher_cosine(params: &NetworkParams, beta: &Array1<f64>) -> Result<f64> {
    if params.activation != crate::models::Activation::Linear {
        return Err(Error::InvalidConfig("teacher cosine is defined for linear networks".into()));
    }
    if params.heads() != 1 {
        return Err(Error::InvalidConfig(format!(
            "teacher cosine needs a single-head network, got {}",
            params.heads()
        )));
    }
    let mut v = params.readout_row(0);
    for w in params.weights.iter().rev().skip(1) {
        v = v.dot(w);
    }
    let vn = v.dot(&v).sqrt();
    let bn = beta.dot(beta).sqrt();
    if vn <= 0.0 || bn <= 0.0 {
        return Err(Error::UndefinedMetric("teacher cosine with a zero vector".into()));
    }
    Ok(v.dot(beta) / (vn * bn))
}

/// Per-step diagnostics serialized as one CSV row. Optional metrics keep
/// their columns (emitted empty) so the schema is constant within a run.
#[derive(Clone, Debug)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub align_heads: Vec<f64>,
    pub align_traced: f64,
    pub frob: f64,
    pub eigvec_align: f64,
    pub eigvec_degenerate: bool,
    pub teacher_cos: Option<f64>,
    pub ksm: Option<Array2<f64>>,
    pub probes: Option<AlphaBetaProbes>,
}

impl MetricRecord {
    pub fn csv_header(heads: usize, with_ksm: bool, with_probes: bool) -> String {
        let mut cols = vec!["step".to_string(), "loss".to_string()];
        for c in 0..heads {
            cols.push(format!("align_head_{c}"));
        }
        cols.push("align_traced".into());
        cols.push("frob".into());
        cols.push("eigvec_align".into());
        cols.push("eigvec_degenerate".into());
        cols.push("teacher_cos".into());
        if with_ksm {
            for c in 0..heads {
                for d in 0..heads {
                    cols.push(format!("ksm_{c}{d}"));
                }
            }
        }
        if with_probes {
            for name in ["alpha_y", "alpha_mean_z", "beta_y", "beta_mean_z", "beta_std_z"] {
                cols.push(name.into());
            }
        }
        cols.join(",")
    }

    pub fn to_csv_row(&self, with_ksm: bool, with_probes: bool) -> String {
        let mut cols = vec![self.step.to_string(), fmt_f64(self.loss)];
        for v in &self.align_heads {
            cols.push(fmt_f64(*v));
        }
        cols.push(fmt_f64(self.align_traced));
        cols.push(fmt_f64(self.frob));
        cols.push(fmt_f64(self.eigvec_align));
        cols.push(if self.eigvec_degenerate { "1" } else { "0" }.to_string());
        cols.push(self.teacher_cos.map(fmt_f64).unwrap_or_default());
        if with_ksm {
            match &self.ksm {
                Some(m) => {
                    for v in m.iter() {
                        cols.push(fmt_f64(*v));
                    }
                }
                None => {
                    let c = self.align_heads.len();
                    cols.extend(std::iter::repeat_n(String::new(), c * c));
                }
            }
        }
        if with_probes {
            match &self.probes {
                Some(p) => {
                    for v in [p.alpha_y, p.alpha_mean_z, p.beta_y, p.beta_mean_z, p.beta_std_z] {
                        cols.push(fmt_f64(v));
                    }
                }
                None => cols.extend(std::iter::repeat_n(String::new(), 5)),
            }
        }
        cols.join(",")
    }
}

/// Shortest round-trip decimal rendering; bitwise-stable across runs.
pub fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}
