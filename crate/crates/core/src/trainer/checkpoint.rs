//! Checkpoints: `state.bin` holds the exact `f64` training state,
//! `manifest.json` the config, per-component digests and the loss trace.
//!
//! `state.bin` layout (little-endian): magic `MTCK`, `u32` version, `u64`
//! step, `u32` tensor count, then per tensor `u32 rows`, `u32 cols` and the
//! `f64` values; `u64` Adam update count; the first and second moments of
//! every tensor as `f64`; `u32` codebook size and one `u64` idle counter per
//! codeword; `u64` trace length and per record a `u64` step and five `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LossRecord, TrainConfig, TrainError, TrainState};
use crate::binio::{put_f64s, put_u32, put_u64, sha256_hex, ByteReader};
use crate::numcore::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MTCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub config: TrainConfig,
    /// SHA-256 of the `f64` bytes of each component.
    pub digests: BTreeMap<String, String>,
    pub state_sha256: String,
    pub loss_trace: Vec<LossRecord>,
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

fn f64_bytes<'a>(tensors: impl IntoIterator<Item = &'a Matrix>) -> Vec<u8> {
    let mut out = Vec::new();
    for m in tensors {
        put_f64s(&mut out, m.data());
    }
    out
}

fn digests(state: &TrainState) -> BTreeMap<String, String> {
    let tensors = state.model.tensors();
    let n_graph = 1 + 2 * state.model.graph.layers.len();
    let mut usage = Vec::new();
    for &v in &state.idle {
        put_u64(&mut usage, v);
    }
    BTreeMap::from([
        ("codebook".to_string(), sha256_hex(&f64_bytes([tensors[0]]))),
        ("graph_encoder".to_string(), sha256_hex(&f64_bytes(tensors[1..1 + n_graph].iter().copied()))),
        ("fusion".to_string(), sha256_hex(&f64_bytes(tensors[1 + n_graph..].iter().copied()))),
        (
            "optimizer".to_string(),
            sha256_hex(&f64_bytes(state.adam.m.iter().chain(&state.adam.v))),
        ),
        ("usage".to_string(), sha256_hex(&usage)),
    ])
}

fn encode_state(state: &TrainState) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, state.step);
    let tensors = state.model.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for m in &tensors {
        put_u32(&mut out, m.rows() as u32);
        put_u32(&mut out, m.cols() as u32);
        put_f64s(&mut out, m.data());
    }
    put_u64(&mut out, state.adam.t);
    for m in state.adam.m.iter().chain(&state.adam.v) {
        put_f64s(&mut out, m.data());
    }
    put_u32(&mut out, state.idle.len() as u32);
    for &v in &state.idle {
        put_u64(&mut out, v);
    }
    put_u64(&mut out, state.trace.len() as u64);
    for r in &state.trace {
        put_u64(&mut out, r.step);
        put_f64s(&mut out, &[r.vq, r.kl, r.token_c, r.token_s, r.total]);
    }
    out
}

/// Writes `state.bin` and `manifest.json` into `dir`.
pub fn write_checkpoint(dir: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<(), TrainError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let bytes = encode_state(state);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        step: state.step,
        config: cfg.clone(),
        digests: digests(state),
        state_sha256: sha256_hex(&bytes),
        loss_trace: state.trace.clone(),
    };
    let state_path = dir.join("state.bin");
    fs::write(&state_path, &bytes).map_err(io(&state_path))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(io(&manifest_path))?;
    Ok(())
}

/// Reads a checkpoint into a state shaped like `template`.
pub fn load_checkpoint(dir: &Path, template: &TrainState) -> Result<(CheckpointManifest, TrainState), TrainError> {
    let fail = |message: String| TrainError::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|source| TrainError::Io { path, source })
    };
    let manifest: CheckpointManifest =
        serde_json::from_slice(&read("manifest.json")?).map_err(|e| fail(format!("manifest.json: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported format version {}", manifest.format_version)));
    }
    let bytes = read("state.bin")?;
    if sha256_hex(&bytes) != manifest.state_sha256 {
        return Err(fail("state.bin does not match the manifest hash".into()));
    }
    let state = decode_state(&bytes, template).map_err(|e| fail(format!("state.bin: {e}")))?;
    if state.step != manifest.step {
        return Err(fail(format!("manifest step {} but state step {}", manifest.step, state.step)));
    }
    if digests(&state) != manifest.digests {
        return Err(fail("component digests do not match".into()));
    }
    Ok((manifest, state))
}

fn decode_state(bytes: &[u8], template: &TrainState) -> Result<TrainState, String> {
    let mut r = ByteReader::new(bytes);
    let e = |e: crate::binio::BinFormatError| e.to_string();
    r.expect_magic(MAGIC).map_err(e)?;
    let version = r.u32("version").map_err(e)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported state version {version}"));
    }
    let mut state = template.clone();
    state.step = r.u64("step").map_err(e)?;
    let count = r.u32("tensor count").map_err(e)? as usize;
    let shapes: Vec<(usize, usize)> = template.model.tensors().iter().map(|m| m.shape()).collect();
    if count != shapes.len() {
        return Err(format!("{count} tensors, expected {}", shapes.len()));
    }
    let mut values = Vec::with_capacity(count);
    for &(rows, cols) in &shapes {
        let got = (r.u32("rows").map_err(e)? as usize, r.u32("cols").map_err(e)? as usize);
        if got != (rows, cols) {
            return Err(format!("tensor shape {got:?}, expected {:?}", (rows, cols)));
        }
        values.push(r.f64s(rows * cols, "tensor").map_err(e)?);
    }
    for (m, v) in state.model.tensors_mut().into_iter().zip(values) {
        m.data_mut().copy_from_slice(&v);
    }
    state.adam.t = r.u64("adam step").map_err(e)?;
    for m in state.adam.m.iter_mut().chain(state.adam.v.iter_mut()) {
        let v = r.f64s(m.len(), "moment").map_err(e)?;
        m.data_mut().copy_from_slice(&v);
    }
    let n = r.u32("codebook size").map_err(e)? as usize;
    if n != template.idle.len() {
        return Err(format!("{n} usage counters, expected {}", template.idle.len()));
    }
    state.idle = (0..n).map(|_| r.u64("usage")).collect::<Result<_, _>>().map_err(e)?;
    let len = r.u64("trace length").map_err(e)?;
    state.trace = Vec::with_capacity(len as usize);
    for _ in 0..len {
        let step = r.u64("trace step").map_err(e)?;
        let v = r.f64s(5, "trace record").map_err(e)?;
        state.trace.push(LossRecord {
            step,
            vq: v[0],
            kl: v[1],
            token_c: v[2],
            token_s: v[3],
            total: v[4],
        });
    }
    r.finish().map_err(e)?;
    Ok(state)
}
