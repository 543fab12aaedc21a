//! Dataset generators and the IDX-format MNIST reader.
//!
//! All generators are pure functions of their arguments including the seed;
//! identical calls produce bitwise-identical outputs.

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    RandomBinary,
    LinearTeacher,
    GaussianMixture,
    MnistBinary,
    MnistMulticlass,
}

/// Linear teacher weights for scalar-target regression tasks.
#[derive(Clone, Debug)]
pub struct LinearTeacher {
    pub beta: Array1<f64>,
}

/// A full-batch training set: P inputs of dimension N, P x C targets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    /// Class index per example for classification tasks, absent for regression.
    pub class_of: Option<Vec<usize>>,
    pub task_kind: TaskKind,
    /// Teacher weight rows (C x N) when targets are linear functions of inputs.
    pub teacher_weights: Option<Array2<f64>>,
}

impl Dataset {
    pub fn p(&self) -> usize {
        self.inputs.nrows()
    }
    pub fn n(&self) -> usize {
        self.inputs.ncols()
    }
    pub fn c(&self) -> usize {
        self.targets.ncols()
    }

    /// Single-head target vector; errors if C != 1.
    pub fn scalar_targets(&self) -> Result<Array1<f64>> {
        if self.c() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "expected a single target head, found C={}",
                self.c()
            )));
        }
        Ok(self.targets.column(0).to_owned())
    }
}

/// Random +-1 labels, each sign with probability 1/2.
pub fn gen_random_binary_labels(p: usize, seed: u64) -> Array1<f64> {
    let mut r = rng::stream(seed, rng::STREAM_DATA);
    Array1::from_shape_fn(p, |_| {
        if rng::standard_normal(&mut r) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    })
}

/// P rows drawn i.i.d. uniformly from the unit sphere in dimension N.
pub fn gen_sphere_inputs(p: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, rng::STREAM_DATA);
    let mut x = Array2::zeros((p, n));
    for mut row in x.rows_mut() {
        row.assign(&rng::unit_vec(&mut r, n));
    }
    x
}

/// P i.i.d. Gaussian rows with a given per-coordinate variance.
pub fn gen_gaussian_inputs(p: usize, n: usize, var_per_coord: f64, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, rng::STREAM_DATA);
    rng::gaussian_mat(&mut r, p, n, var_per_coord.sqrt())
}

/// P pairwise-orthonormal rows in dimension N (QR of a Gaussian draw).
/// Rejects P > N, where no orthonormal set exists.
pub fn gen_orthonormal_inputs(p: usize, n: usize, seed: u64) -> Result<Array2<f64>> {
    let mut r = rng::stream(seed, rng::STREAM_DATA);
    linalg::qr_orthonormal_rows(&mut r, p, n)
}

/// Inputs i.i.d. Gaussian with per-coordinate variance 1/N; targets are the
/// exact teacher responses y = beta . x.
pub fn gen_linear_teacher_task(p: usize, n: usize, teacher: &LinearTeacher, seed: u64) -> Dataset {
    assert_eq!(teacher.beta.len(), n, "teacher dimension must match inputs");
    let inputs = gen_gaussian_inputs(p, n, 1.0 / n as f64, seed);
    let y = inputs.dot(&teacher.beta);
    let targets = y.insert_axis(ndarray::Axis(1));
    let mut tw = Array2::zeros((1, n));
    tw.row_mut(0).assign(&teacher.beta);
    Dataset {
        inputs,
        targets,
        class_of: None,
        task_kind: TaskKind::LinearTeacher,
        teacher_weights: Some(tw),
    }
}

/// Specification of a C-class Gaussian mixture with orthonormal unit centers.
#[derive(Clone, Debug)]
pub struct GaussianMixtureSpec {
    /// C x N, rows unit and pairwise orthogonal.
    pub centers: Array2<f64>,
    /// Total displacement variance of one sample around its center. The
    /// per-coordinate noise variance is sigma2/N, so input norms stay near 1
    /// and the class correlation structure {1, m, 0} survives at large N.
    pub sigma2: f64,
    /// Expected normalized overlap of two distinct same-class samples.
    pub within_class_overlap_m: f64,
}

impl GaussianMixtureSpec {
    /// Draw C orthonormal centers in dimension N.
    pub fn orthonormal(c: usize, n: usize, sigma2: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, rng::STREAM_TEACHER);
        let centers = linalg::qr_orthonormal_rows(&mut r, c, n)?;
        Ok(GaussianMixtureSpec {
            centers,
            sigma2,
            within_class_overlap_m: 1.0 / (1.0 + sigma2),
        })
    }
}

/// Balanced C-class mixture: class c occupies the contiguous row block
/// [c*P/C, (c+1)*P/C); targets are one-hot columns.
pub fn gen_gaussian_mixture(spec: &GaussianMixtureSpec, p: usize, seed: u64) -> Result<Dataset> {
    let c = spec.centers.nrows();
    let n = spec.centers.ncols();
    if p % c != 0 {
        return Err(Error::InvalidConfig(format!(
            "P={p} not divisible by C={c} for a balanced mixture"
        )));
    }
    let per = p / c;
    let noise_sigma = (spec.sigma2 / n as f64).sqrt();
    let mut r = rng::stream(seed, rng::STREAM_DATA);
    let mut inputs = Array2::zeros((p, n));
    let mut targets = Array2::zeros((p, c));
    let mut class_of = Vec::with_capacity(p);
    for cls in 0..c {
        for k in 0..per {
            let row = cls * per + k;
            let noise = rng::gaussian_vec(&mut r, n, noise_sigma);
            let x = &spec.centers.row(cls).to_owned() + &noise;
            inputs.row_mut(row).assign(&x);
            targets[[row, cls]] = 1.0;
            class_of.push(cls);
        }
    }
    Ok(Dataset {
        inputs,
        targets,
        class_of: Some(class_of),
        task_kind: TaskKind::GaussianMixture,
        teacher_weights: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMap {
    /// Odd digits map to +1, even digits to -1; single head.
    OddEvenPm1,
    /// Ten one-hot heads.
    OneHot10,
}

fn read_be_u32(bytes: &[u8], off: usize, path: &str) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!("{path}: truncated header")));
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Read an IDX image/label file pair into a Dataset.
///
/// Pixels are scaled to [0,1] and rows flattened to length 784. The first
/// `max_examples` examples are retained in file order.
pub fn load_mnist_idx(
    images_path: &std::path::Path,
    labels_path: &std::path::Path,
    max_examples: usize,
    label_map: LabelMap,
) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;
    let ip = images_path.display().to_string();
    let lp = labels_path.display().to_string();

    let img_magic = read_be_u32(&img_bytes, 0, &ip)?;
    if img_magic != 0x0000_0803 {
        return Err(Error::Format(format!(
            "{ip}: bad magic {img_magic:#010x}, expected 0x00000803 (IDX u8 images, 3 dims)"
        )));
    }
    let lbl_magic = read_be_u32(&lbl_bytes, 0, &lp)?;
    if lbl_magic != 0x0000_0801 {
        return Err(Error::Format(format!(
            "{lp}: bad magic {lbl_magic:#010x}, expected 0x00000801 (IDX u8 labels, 1 dim)"
        )));
    }
    let n_img = read_be_u32(&img_bytes, 4, &ip)? as usize;
    let rows = read_be_u32(&img_bytes, 8, &ip)? as usize;
    let cols = read_be_u32(&img_bytes, 12, &ip)? as usize;
    let n_lbl = read_be_u32(&lbl_bytes, 4, &lp)? as usize;
    if n_img != n_lbl {
        return Err(Error::Format(format!(
            "image count {n_img} in {ip} does not match label count {n_lbl} in {lp}"
        )));
    }
    let dim = rows * cols;
    let take = max_examples.min(n_img);
    if img_bytes.len() < 16 + n_img * dim {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("{ip}: file shorter than header claims"),
        )));
    }
    if lbl_bytes.len() < 8 + n_lbl {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("{lp}: file shorter than header claims"),
        )));
    }

    let mut inputs = Array2::zeros((take, dim));
    for i in 0..take {
        let base = 16 + i * dim;
        for j in 0..dim {
            inputs[[i, j]] = img_bytes[base + j] as f64 / 255.0;
        }
    }
    let labels: Vec<u8> = lbl_bytes[8..8 + take].to_vec();
    for (i, &d) in labels.iter().enumerate() {
        if d > 9 {
            return Err(Error::Format(format!("{lp}: label {d} at index {i} out of range 0-9")));
        }
    }

    let (targets, c, kind) = match label_map {
        LabelMap::OddEvenPm1 => {
            let mut t = Array2::zeros((take, 1));
            for (i, &d) in labels.iter().enumerate() {
                t[[i, 0]] = if d % 2 == 1 { 1.0 } else { -1.0 };
            }
            (t, 1, TaskKind::MnistBinary)
        }
        LabelMap::OneHot10 => {
            let mut t = Array2::zeros((take, 10));
            for (i, &d) in labels.iter().enumerate() {
                t[[i, d as usize]] = 1.0;
            }
            (t, 10, TaskKind::MnistMulticlass)
        }
    };
    let _ = c;
    Ok(Dataset {
        inputs,
        targets,
        class_of: Some(labels.iter().map(|&d| d as usize).collect()),
        task_kind: kind,
        teacher_weights: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn binary_labels_are_pm1_with_norm_p() {
        let y = gen_random_binary_labels(64, 9);
        assert!(y.iter().all(|&v| v == 1.0 || v == -1.0));
        assert_abs_diff_eq!(y.dot(&y), 64.0, epsilon = 0.0);
    }

    #[test]
    fn binary_labels_balanced_at_large_p() {
        let p = 10_000;
        let y = gen_random_binary_labels(p, 3);
        let mean = y.sum() / p as f64;
        assert!(mean.abs() < 3.0 / (p as f64).sqrt(), "mean {mean} outside 3/sqrt(P)");
    }

    #[test]
    fn sphere_rows_are_unit_and_reproducible() {
        let x1 = gen_sphere_inputs(20, 40, 5);
        let x2 = gen_sphere_inputs(20, 40, 5);
        assert_eq!(x1, x2);
        for row in x1.rows() {
            assert_abs_diff_eq!(row.dot(&row), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_rows_nearly_orthogonal_at_high_dim() {
        let x = gen_sphere_inputs(50, 1000, 6);
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..50 {
            for j in 0..i {
                total += x.row(i).dot(&x.row(j)).abs();
                count += 1;
            }
        }
        assert!(total / (count as f64) < 0.1);
    }

    #[test]
    fn orthonormal_inputs_gram_is_identity() {
        let x = gen_orthonormal_inputs(30, 60, 2).unwrap();
        let g = x.dot(&x.t());
        for i in 0..30 {
            for j in 0..30 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-10, "gram[{i},{j}]={}", g[[i, j]]);
            }
        }
        assert!(gen_orthonormal_inputs(10, 4, 0).is_err());
    }

    #[test]
    fn teacher_targets_match_recomputation() {
        let n = 25;
        let mut r = rng::stream(17, rng::STREAM_TEACHER);
        let beta = rng::unit_vec(&mut r, n);
        let ds = gen_linear_teacher_task(12, n, &LinearTeacher { beta: beta.clone() }, 8);
        for mu in 0..12 {
            let want = ds.inputs.row(mu).dot(&beta);
            assert_abs_diff_eq!(ds.targets[[mu, 0]], want, epsilon = 1e-14);
        }
        let zero = LinearTeacher { beta: Array1::zeros(n) };
        let ds0 = gen_linear_teacher_task(5, n, &zero, 8);
        assert!(ds0.targets.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixture_zero_noise_reproduces_centers() {
        let spec = GaussianMixtureSpec::orthonormal(4, 32, 0.0, 11).unwrap();
        let ds = gen_gaussian_mixture(&spec, 12, 1).unwrap();
        for mu in 0..12 {
            let cls = ds.class_of.as_ref().unwrap()[mu];
            let diff = &ds.inputs.row(mu).to_owned() - &spec.centers.row(cls).to_owned();
            assert!(diff.dot(&diff).sqrt() < 1e-14);
            // one-hot target
            assert_eq!(ds.targets[[mu, cls]], 1.0);
            assert_abs_diff_eq!(ds.targets.row(mu).sum(), 1.0, epsilon = 0.0);
        }
        // orthonormal centers with zero noise: inner products are 1 or 0
        let g = ds.inputs.dot(&ds.inputs.t());
        for i in 0..12 {
            for j in 0..12 {
                let same = ds.class_of.as_ref().unwrap()[i] == ds.class_of.as_ref().unwrap()[j];
                let want = if same { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mixture_overlap_near_one_at_small_noise() {
        let spec = GaussianMixtureSpec::orthonormal(5, 1000, 0.01, 7).unwrap();
        let ds = gen_gaussian_mixture(&spec, 250, 3).unwrap();
        let class_of = ds.class_of.as_ref().unwrap();
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..250 {
            for j in 0..i {
                if class_of[i] == class_of[j] {
                    sum += ds.inputs.row(i).dot(&ds.inputs.row(j));
                    count += 1;
                }
            }
        }
        let m = sum / count as f64;
        assert!((m - 1.0).abs() < 0.02, "within-class overlap {m} too far from 1");
    }

    #[test]
    fn mixture_rejects_unbalanced() {
        let spec = GaussianMixtureSpec::orthonormal(3, 16, 0.0, 1).unwrap();
        assert!(gen_gaussian_mixture(&spec, 10, 0).is_err());
    }

    fn write_idx(dir: &std::path::Path, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = labels.len();
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for i in 0..n {
            img.extend_from_slice(&[i as u8, 255, 0, 128]);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&(n as u32).to_be_bytes());
        lbl.extend_from_slice(labels);
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_reader_maps_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[7, 3, 0]);
        let ds = load_mnist_idx(&ip, &lp, 3, LabelMap::OddEvenPm1).unwrap();
        assert_eq!(ds.targets[[0, 0]], 1.0, "label 7 is odd, target +1");
        assert_eq!(ds.targets[[1, 0]], 1.0);
        assert_eq!(ds.targets[[2, 0]], -1.0);
        assert_abs_diff_eq!(ds.inputs[[0, 1]], 1.0, epsilon = 1e-15); // pixel 255
        let ds10 = load_mnist_idx(&ip, &lp, 2, LabelMap::OneHot10).unwrap();
        assert_eq!(ds10.c(), 10);
        assert_eq!(ds10.targets[[1, 3]], 1.0, "label 3 one-hot at index 3");
        assert_eq!(ds10.targets.row(1).sum(), 1.0);
    }

    #[test]
    fn idx_reader_rejects_bad_magic_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[1, 2]);
        // corrupt the image magic
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        let bad = dir.path().join("bad.idx");
        std::fs::write(&bad, &bytes).unwrap();
        let err = load_mnist_idx(&bad, &lp, 2, LabelMap::OddEvenPm1).unwrap_err();
        assert!(format!("{err}").contains("bad magic"), "unexpected error: {err}");
        // label count mismatch
        let (ip2, _) = write_idx(dir.path(), &[1, 2]);
        let (_, lp3) = {
            let d2 = dir.path().join("other");
            std::fs::create_dir(&d2).unwrap();
            write_idx(&d2, &[1, 2, 3])
        };
        let err = load_mnist_idx(&ip2, &lp3, 3, LabelMap::OddEvenPm1).unwrap_err();
        assert!(format!("{err}").contains("does not match"), "unexpected error: {err}");
    }
}
