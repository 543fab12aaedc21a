//! File formats and run-directory persistence: network checkpoints, kernel
//! snapshot containers, config hashing, and the per-run output layout.
//!
//! Both binary formats share one container: a little-endian u32 header
//! length, a JSON header, then raw little-endian f64 blocks. Floats are
//! stored by bit pattern, so every round trip is bit-exact.

use crate::error::{Error, Result};
use crate::models::{Activation, NetworkParams};
use crate::ntk::{KernelSnapshot, KernelSplit};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT: &str = "ntk-align/checkpoint";
pub const SNAPSHOT_FORMAT: &str = "ntk-align/kernel-snapshot";
pub const CONTAINER_VERSION: u32 = 1;
/// Largest header accepted when reading; a corrupt length field fails fast
/// instead of attempting a giant allocation.
const MAX_HEADER_BYTES: u32 = 1 << 20;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    step: usize,
    activation: String,
    widths: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    version: u32,
    step: usize,
    p: usize,
    c: usize,
    split: bool,
}

fn write_container(path: &Path, header_json: &[u8], blocks: &[&Array2<f64>]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(header_json)?;
    let mut buf = Vec::new();
    for block in blocks {
        buf.clear();
        buf.reserve(block.len() * 8);
        for v in block.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
    }
    Ok(())
}

fn read_container(path: &Path) -> Result<(Vec<u8>, Vec<f64>)> {
    let name = path.display();
    let mut file = fs::File::open(path)?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format(format!("{name}: truncated before header length")))?;
    let header_len = u32::from_le_bytes(len_bytes);
    if header_len == 0 || header_len > MAX_HEADER_BYTES {
        return Err(Error::Format(format!("{name}: implausible header length {header_len}")));
    }
    let mut header = vec![0u8; header_len as usize];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format(format!("{name}: truncated inside header")))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{name}: payload length {} is not a multiple of 8",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, values))
}

/// Checks the header's format tag before full deserialization so that a file
/// of the wrong kind reports what it is, not a missing field.
fn check_format(header_bytes: &[u8], expected: &str, kind: &str, name: &str) -> Result<()> {
    #[derive(Deserialize)]
    struct Probe {
        format: String,
    }
    let probe: Probe =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("{name}: bad header: {e}")))?;
    if probe.format != expected {
        return Err(Error::Format(format!("{name}: not a {kind} (format '{}')", probe.format)));
    }
    Ok(())
}

fn take_matrix(values: &[f64], offset: &mut usize, rows: usize, cols: usize, name: &str) -> Result<Array2<f64>> {
    let n = rows * cols;
    let end = *offset + n;
    if end > values.len() {
        return Err(Error::Format(format!(
            "{name}: payload ends at {} values, need {end}",
            values.len()
        )));
    }
    let m = Array2::from_shape_vec((rows, cols), values[*offset..end].to_vec()).expect("shape matches slice");
    *offset = end;
    Ok(m)
}

/// Writes a network checkpoint: JSON header (architecture, step), then each
/// weight matrix row-major in layer order.
pub fn save_params(path: &Path, params: &NetworkParams, step: usize) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CONTAINER_VERSION,
        step,
        activation: match params.activation {
            Activation::Linear => "linear".to_string(),
            Activation::Relu => "relu".to_string(),
        },
        widths: params.widths(),
    };
    let json = serde_json::to_vec(&header)?;
    let blocks: Vec<&Array2<f64>> = params.weights.iter().collect();
    write_container(path, &json, &blocks)
}

pub fn load_params(path: &Path) -> Result<(NetworkParams, usize)> {
    let name = path.display().to_string();
    let (header_bytes, values) = read_container(path)?;
    check_format(&header_bytes, CHECKPOINT_FORMAT, "checkpoint", &name)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Format(format!("{name}: bad header: {e}")))?;
    if header.version != CONTAINER_VERSION {
        return Err(Error::Format(format!("{name}: unsupported version {}", header.version)));
    }
    if header.widths.len() < 2 {
        return Err(Error::Format(format!("{name}: architecture needs at least two widths")));
    }
    let activation = match header.activation.as_str() {
        "linear" => Activation::Linear,
        "relu" => Activation::Relu,
        other => return Err(Error::Format(format!("{name}: unknown activation '{other}'"))),
    };
    let mut offset = 0;
    let mut weights = Vec::with_capacity(header.widths.len() - 1);
    for l in 0..header.widths.len() - 1 {
        weights.push(take_matrix(&values, &mut offset, header.widths[l + 1], header.widths[l], &name)?);
    }
    if offset != values.len() {
        return Err(Error::Format(format!(
            "{name}: {} trailing values after the declared architecture",
            values.len() - offset
        )));
    }
    Ok((NetworkParams { weights, activation }, header.step))
}

/// Writes a kernel snapshot: JSON header (step, P, C, split flag), then the
/// C^2 Gram blocks row-major in (c, d) order, then the split blocks in the
/// same order when present.
pub fn save_kernel_snapshot(path: &Path, snap: &KernelSnapshot) -> Result<()> {
    let header = SnapshotHeader {
        format: SNAPSHOT_FORMAT.to_string(),
        version: CONTAINER_VERSION,
        step: snap.step,
        p: snap.p,
        c: snap.c,
        split: snap.split.is_some(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut blocks: Vec<&Array2<f64>> = snap.gram.iter().collect();
    if let Some(split) = &snap.split {
        blocks.extend(split.gram_v.iter());
        blocks.extend(split.gram_w.iter());
    }
    write_container(path, &json, &blocks)
}

pub fn load_kernel_snapshot(path: &Path) -> Result<KernelSnapshot> {
    let name = path.display().to_string();
    let (header_bytes, values) = read_container(path)?;
    check_format(&header_bytes, SNAPSHOT_FORMAT, "kernel snapshot", &name)?;
    let header: SnapshotHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Format(format!("{name}: bad header: {e}")))?;
    if header.version != CONTAINER_VERSION {
        return Err(Error::Format(format!("{name}: unsupported version {}", header.version)));
    }
    let (p, c) = (header.p, header.c);
    let mut offset = 0;
    let read_blocks = |offset: &mut usize| -> Result<Vec<Array2<f64>>> {
        (0..c * c).map(|_| take_matrix(&values, offset, p, p, &name)).collect()
    };
    let gram = read_blocks(&mut offset)?;
    let split = if header.split {
        let gram_v = read_blocks(&mut offset)?;
        let gram_w = read_blocks(&mut offset)?;
        Some(KernelSplit { gram_v, gram_w })
    } else {
        None
    };
    if offset != values.len() {
        return Err(Error::Format(format!(
            "{name}: {} trailing values after the declared blocks",
            values.len() - offset
        )));
    }
    Ok(KernelSnapshot { step: header.step, p, c, gram, split })
}

/// SHA-256 of the exact bytes, hex-encoded. Traces store this for their
/// config file so reruns can detect byte-level drift.
pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Output layout of a single run:
/// <root>/<run_id>/{config.json, trace.csv, snapshots/step_<n>.bin, figure.svg}.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the run directory and its snapshots/ subdirectory.
    pub fn create(out_root: &Path, run_id: &str) -> Result<RunDir> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!("run id '{run_id}' is not a single path component")));
        }
        let root = out_root.join(run_id);
        fs::create_dir_all(root.join("snapshots"))?;
        Ok(RunDir { root })
    }

    /// Opens an existing run directory without creating anything.
    pub fn open(out_root: &Path, run_id: &str) -> Result<RunDir> {
        let root = out_root.join(run_id);
        if !root.is_dir() {
            return Err(Error::InvalidConfig(format!("run directory {} does not exist", root.display())));
        }
        Ok(RunDir { root })
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.root.join("trace.csv")
    }

    pub fn snapshot_path(&self, step: usize) -> PathBuf {
        self.root.join("snapshots").join(format!("step_{step}.bin"))
    }

    pub fn figure_path(&self) -> PathBuf {
        self.root.join("figure.svg")
    }

    /// Extra CSV emitted next to the trace (figure panels, sweep summaries).
    pub fn aux_csv_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_mlp, init_two_layer_relu};
    use crate::ntk::{gram_matrix, gram_with_split};
    use tempfile::tempdir;

    fn bits(m: &Array2<f64>) -> Vec<u64> {
        m.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn params_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        for (i, params) in [
            init_two_layer_relu(7, 5, 3, 11),
            init_mlp(&[4, 6, 6, 1], Activation::Linear, 0.01, 12),
        ]
        .into_iter()
        .enumerate()
        {
            let path = dir.path().join(format!("ckpt_{i}.bin"));
            save_params(&path, &params, 42).unwrap();
            let (loaded, step) = load_params(&path).unwrap();
            assert_eq!(step, 42);
            assert_eq!(loaded.activation, params.activation);
            assert_eq!(loaded.widths(), params.widths());
            for (a, b) in loaded.weights.iter().zip(params.weights.iter()) {
                assert_eq!(bits(a), bits(b), "weight bits changed in round trip");
            }
        }
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let params = init_two_layer_relu(6, 10, 2, 3);
        let x = crate::rng::gaussian_mat(&mut crate::rng::stream(5, crate::rng::STREAM_DATA), 4, 6, 1.0);
        for (name, snap) in [
            ("plain", gram_matrix(&params, &x, 1.0).unwrap()),
            ("split", gram_with_split(&params, &x, 2.0).unwrap()),
        ] {
            let path = dir.path().join(format!("{name}.bin"));
            save_kernel_snapshot(&path, &snap).unwrap();
            let loaded = load_kernel_snapshot(&path).unwrap();
            assert_eq!((loaded.step, loaded.p, loaded.c), (snap.step, snap.p, snap.c));
            assert_eq!(loaded.split.is_some(), snap.split.is_some());
            for (a, b) in loaded.gram.iter().zip(snap.gram.iter()) {
                assert_eq!(bits(a), bits(b));
            }
            if let (Some(ls), Some(ss)) = (&loaded.split, &snap.split) {
                for (a, b) in ls.gram_v.iter().chain(ls.gram_w.iter()).zip(ss.gram_v.iter().chain(ss.gram_w.iter())) {
                    assert_eq!(bits(a), bits(b));
                }
            }
        }
    }

    #[test]
    fn special_float_bits_survive() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("special.bin");
        let mut snap = gram_matrix(&init_two_layer_relu(3, 4, 1, 1), &Array2::eye(3), 1.0).unwrap();
        snap.gram[0][[0, 0]] = -0.0;
        snap.gram[0][[0, 1]] = f64::MIN_POSITIVE / 4.0; // subnormal
        save_kernel_snapshot(&path, &snap).unwrap();
        let loaded = load_kernel_snapshot(&path).unwrap();
        assert_eq!(loaded.gram[0][[0, 0]].to_bits(), (-0.0f64).to_bits());
        assert_eq!(loaded.gram[0][[0, 1]].to_bits(), (f64::MIN_POSITIVE / 4.0).to_bits());
    }

    #[test]
    fn corrupt_files_are_rejected_with_the_path() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let params = init_two_layer_relu(4, 3, 1, 7);
        save_params(&path, &params, 0).unwrap();

        // truncation inside the payload
        let bytes = fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bin");
        fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_params(&cut).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "expected format error, got {err:?}");
        assert!(err.to_string().contains("cut.bin"), "message must name the file: {err}");

        // a checkpoint loaded as a kernel snapshot
        let err = load_kernel_snapshot(&path).unwrap_err();
        assert!(err.to_string().contains("not a kernel snapshot"), "got: {err}");

        // garbage header length
        let bad = dir.path().join("bad.bin");
        fs::write(&bad, [0xffu8; 16]).unwrap();
        assert!(matches!(load_params(&bad).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn config_hash_known_answer_and_sensitivity() {
        assert_eq!(
            config_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_ne!(config_hash(b"{\"a\":1}"), config_hash(b"{\"a\":1} "));
    }

    #[test]
    fn run_dir_layout() {
        let dir = tempdir().unwrap();
        let run = RunDir::create(dir.path(), "run_007").unwrap();
        assert!(run.root.join("snapshots").is_dir());
        assert_eq!(run.config_path().file_name().unwrap(), "config.json");
        assert_eq!(run.trace_path().file_name().unwrap(), "trace.csv");
        assert_eq!(run.snapshot_path(16).file_name().unwrap(), "step_16.bin");
        assert_eq!(run.figure_path().file_name().unwrap(), "figure.svg");
        assert!(RunDir::create(dir.path(), "a/b").is_err());
        assert!(RunDir::open(dir.path(), "missing").is_err());
        assert!(RunDir::open(dir.path(), "run_007").is_ok());
    }
}
