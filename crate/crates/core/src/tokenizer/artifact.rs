//! Artifact directory layout.
//!
//! * `codebook.bin`: magic `MTCB`, `u32` version 1, `u32 N`, `u32 d`, four
//!   `u32` region offsets, `u32 K`, `N x d` `f32`, then a `u64` hash of all
//!   preceding bytes (first eight bytes of their SHA-256, little-endian).
//! * `params.bin`: magic `MTPR`, `u32` version 1, `u32 d_g`, `u32` type
//!   count and the type labels, the type table as `f32`, `u32` layer count
//!   and each layer's `w_self`, `w_nbr`; then `u32 d`, `u32 d_t` and the
//!   eight fusion matrices in the order `f_t, f_g, wq_t, wk_t, wv_t, wq_g,
//!   wk_g, wv_g`.
//! * `fused.bin`: magic `MTFE`, `u32` version 1, `u64` count, `u32 d`, then
//!   per code its id and the four fused vectors as `f32`.
//! * `config.json`: the training config.
//! * `manifest.json`: format version, SHA-256 of every file above and a
//!   digest of the manifest itself.
//!
//! All strings are `u32`-length-prefixed UTF-8; all numbers little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TokenizerError, TrainedTokenizer};
use crate::binio::{hash64, put_f32s, put_string, put_u32, put_u64, sha256_hex, BinFormatError, ByteReader};
use crate::fusion::{FusedEmbeddings, FusionParams};
use crate::graphenc::{GnnLayer, GraphEncoderParams};
use crate::numcore::Matrix;
use crate::quantizer::{Codebook, RegionLayout};
use crate::trainer::{Model, TrainConfig};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"MTCB";
const PARAMS_MAGIC: &[u8; 4] = b"MTPR";
const FUSED_MAGIC: &[u8; 4] = b"MTFE";
const BIN_VERSION: u32 = 1;

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;

/// Files covered by the manifest, in the order they are verified.
pub const ARTIFACT_FILES: [&str; 4] = ["codebook.bin", "params.bin", "fused.bin", "config.json"];
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactManifest {
    /// `"major.minor"`.
    pub format_version: String,
    pub codebook_size: usize,
    pub dim: usize,
    pub topk: usize,
    pub codes: usize,
    /// SHA-256 per file.
    pub files: BTreeMap<String, String>,
    /// SHA-256 of this manifest serialized with this field empty.
    pub manifest_sha256: String,
}

impl ArtifactManifest {
    fn to_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s.into_bytes()
    }

    fn self_digest(&self) -> String {
        let blank = ArtifactManifest {
            manifest_sha256: String::new(),
            ..self.clone()
        };
        sha256_hex(&blank.to_bytes())
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_f32s(out, &m.to_f32());
}

pub fn codebook_bytes(cb: &Codebook, k: usize) -> Vec<u8> {
    let mut out = CODEBOOK_MAGIC.to_vec();
    put_u32(&mut out, BIN_VERSION);
    put_u32(&mut out, cb.len() as u32);
    put_u32(&mut out, cb.dim() as u32);
    for o in cb.layout().offsets() {
        put_u32(&mut out, o as u32);
    }
    put_u32(&mut out, k as u32);
    put_matrix(&mut out, cb.matrix());
    let h = hash64(&out);
    put_u64(&mut out, h);
    out
}

fn version(r: &mut ByteReader<'_>) -> Result<(), BinFormatError> {
    let at = r.offset();
    let v = r.u32("version")?;
    if v != BIN_VERSION {
        return Err(BinFormatError {
            offset: at,
            message: format!("unsupported version {v}"),
        });
    }
    Ok(())
}

fn matrix(r: &mut ByteReader<'_>, rows: usize, cols: usize, what: &str) -> Result<Matrix, BinFormatError> {
    let at = r.offset();
    let v = r.f32s(rows * cols, what)?;
    Matrix::from_f32(rows, cols, &v).map_err(|e| BinFormatError {
        offset: at,
        message: e.to_string(),
    })
}

/// Parses `codebook.bin`; returns the codebook and `K`.
pub fn parse_codebook(bytes: &[u8]) -> Result<(Codebook, usize), TokenizerError> {
    let file = "codebook.bin";
    if bytes.len() < 8 || hash64(&bytes[..bytes.len() - 8]) != u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes")) {
        return Err(TokenizerError::Corruption { file: file.into() });
    }
    let fmt = |e: BinFormatError| TokenizerError::Format {
        file: file.into(),
        message: e.to_string(),
    };
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CODEBOOK_MAGIC).map_err(fmt)?;
    version(&mut r).map_err(fmt)?;
    let n = r.u32("N").map_err(fmt)? as usize;
    let d = r.u32("d").map_err(fmt)? as usize;
    let mut offsets = [0usize; 4];
    for o in &mut offsets {
        *o = r.u32("region offset").map_err(fmt)? as usize;
    }
    let k = r.u32("K").map_err(fmt)? as usize;
    let rows = matrix(&mut r, n, d, "codewords").map_err(fmt)?;
    r.u64("hash").map_err(fmt)?;
    r.finish().map_err(fmt)?;
    let layout = RegionLayout::from_offsets(offsets, n).map_err(|e| TokenizerError::Format {
        file: file.into(),
        message: e.to_string(),
    })?;
    Ok((Codebook::new(rows, layout)?, k))
}

fn params_bytes(model: &Model) -> Vec<u8> {
    let g = &model.graph;
    let mut out = PARAMS_MAGIC.to_vec();
    put_u32(&mut out, BIN_VERSION);
    put_u32(&mut out, g.dim() as u32);
    put_u32(&mut out, g.type_labels().len() as u32);
    for t in g.type_labels() {
        put_string(&mut out, t);
    }
    put_matrix(&mut out, &g.type_embedding);
    put_u32(&mut out, g.layers.len() as u32);
    for l in &g.layers {
        put_matrix(&mut out, &l.w_self);
        put_matrix(&mut out, &l.w_nbr);
    }
    let f = &model.fusion;
    put_u32(&mut out, f.dim() as u32);
    put_u32(&mut out, f.text_dim() as u32);
    for m in f.matrices() {
        put_matrix(&mut out, m);
    }
    out
}

fn parse_params(bytes: &[u8]) -> Result<(GraphEncoderParams, FusionParams), String> {
    let e = |e: BinFormatError| e.to_string();
    let mut r = ByteReader::new(bytes);
    r.expect_magic(PARAMS_MAGIC).map_err(e)?;
    version(&mut r).map_err(e)?;
    let d_g = r.u32("d_g").map_err(e)? as usize;
    let n_types = r.u32("type count").map_err(e)? as usize;
    let labels = (0..n_types).map(|_| r.string("type label")).collect::<Result<Vec<_>, _>>().map_err(e)?;
    let table = matrix(&mut r, n_types, d_g, "type embedding").map_err(e)?;
    let n_layers = r.u32("layer count").map_err(e)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(GnnLayer {
            w_self: matrix(&mut r, d_g, d_g, "w_self").map_err(e)?,
            w_nbr: matrix(&mut r, d_g, d_g, "w_nbr").map_err(e)?,
        });
    }
    let graph = GraphEncoderParams::from_parts(labels, table, layers).map_err(|x| x.to_string())?;
    let d = r.u32("d").map_err(e)? as usize;
    let d_t = r.u32("d_t").map_err(e)? as usize;
    let mut fusion = FusionParams::zeros(d, d_t, d_g);
    for m in fusion.matrices_mut() {
        let (rows, cols) = m.shape();
        *m = matrix(&mut r, rows, cols, "fusion weight").map_err(e)?;
    }
    r.finish().map_err(e)?;
    Ok((graph, fusion))
}

fn fused_bytes(tk: &TrainedTokenizer) -> Vec<u8> {
    let mut out = FUSED_MAGIC.to_vec();
    put_u32(&mut out, BIN_VERSION);
    put_u64(&mut out, tk.len() as u64);
    put_u32(&mut out, tk.model.fusion.dim() as u32);
    for (id, f) in tk.code_ids().iter().zip(tk.fused_all()) {
        put_string(&mut out, id);
        for v in [&f.e_t_s, &f.e_g_s, &f.e_t_c, &f.e_g_c] {
            let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            put_f32s(&mut out, &v32);
        }
    }
    out
}

fn parse_fused(bytes: &[u8]) -> Result<(Vec<String>, Vec<FusedEmbeddings>), String> {
    let e = |e: BinFormatError| e.to_string();
    let mut r = ByteReader::new(bytes);
    r.expect_magic(FUSED_MAGIC).map_err(e)?;
    version(&mut r).map_err(e)?;
    let count = r.u64("count").map_err(e)? as usize;
    let d = r.u32("d").map_err(e)? as usize;
    let mut ids = Vec::with_capacity(count);
    let mut fused = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(r.string("code id").map_err(e)?);
        let mut vec = || -> Result<Vec<f64>, String> {
            Ok(r.f32s(d, "fused vector").map_err(e)?.into_iter().map(f64::from).collect())
        };
        fused.push(FusedEmbeddings {
            e_t_s: vec()?,
            e_g_s: vec()?,
            e_t_c: vec()?,
            e_g_c: vec()?,
        });
    }
    r.finish().map_err(e)?;
    Ok((ids, fused))
}

fn config_bytes(cfg: &TrainConfig) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s.into_bytes()
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), TokenizerError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| TokenizerError::Io { path, source })
}

pub fn save_artifact(tk: &TrainedTokenizer, dir: &Path) -> Result<(), TokenizerError> {
    fs::create_dir_all(dir).map_err(|source| TokenizerError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let contents = [
        codebook_bytes(tk.codebook(), tk.topk()),
        params_bytes(&tk.model),
        fused_bytes(tk),
        config_bytes(&tk.config),
    ];
    let mut files = BTreeMap::new();
    for (name, bytes) in ARTIFACT_FILES.iter().zip(&contents) {
        write(dir, name, bytes)?;
        files.insert(name.to_string(), sha256_hex(bytes));
    }
    let mut manifest = ArtifactManifest {
        format_version: format!("{FORMAT_MAJOR}.{FORMAT_MINOR}"),
        codebook_size: tk.codebook().len(),
        dim: tk.codebook().dim(),
        topk: tk.topk(),
        codes: tk.len(),
        files,
        manifest_sha256: String::new(),
    };
    manifest.manifest_sha256 = manifest.self_digest();
    write(dir, MANIFEST, &manifest.to_bytes())
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>, TokenizerError> {
    let path = dir.join(name);
    fs::read(&path).map_err(|source| TokenizerError::Io { path, source })
}

fn major_version(v: &str) -> Option<(u32, u32)> {
    let (a, b) = v.split_once('.')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// Reads and verifies the manifest: a newer major version is a format
/// error; any other inconsistency is corruption of the manifest.
fn read_manifest(dir: &Path) -> Result<ArtifactManifest, TokenizerError> {
    let bytes = read(dir, MANIFEST)?;
    let corrupt = || TokenizerError::Corruption { file: MANIFEST.into() };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|_| corrupt())?;
    if let Some((major, _)) = value.get("format_version").and_then(|v| v.as_str()).and_then(major_version) {
        if major > FORMAT_MAJOR {
            return Err(TokenizerError::Format {
                file: MANIFEST.into(),
                message: format!("artifact format {major}.x is newer than supported {FORMAT_MAJOR}.{FORMAT_MINOR}"),
            });
        }
    }
    let manifest: ArtifactManifest = serde_json::from_value(value).map_err(|_| corrupt())?;
    if manifest.to_bytes() != bytes || manifest.self_digest() != manifest.manifest_sha256 {
        return Err(corrupt());
    }
    match major_version(&manifest.format_version) {
        Some((FORMAT_MAJOR, _)) => Ok(manifest),
        _ => Err(TokenizerError::Format {
            file: MANIFEST.into(),
            message: format!("unsupported artifact format {:?}", manifest.format_version),
        }),
    }
}

pub fn load_artifact(dir: &Path) -> Result<TrainedTokenizer, TokenizerError> {
    let manifest = read_manifest(dir)?;
    let mut contents = BTreeMap::new();
    for name in ARTIFACT_FILES {
        let bytes = read(dir, name)?;
        if manifest.files.get(name) != Some(&sha256_hex(&bytes)) {
            return Err(TokenizerError::Corruption { file: name.into() });
        }
        contents.insert(name, bytes);
    }
    let format = |file: &str| {
        let file = file.to_string();
        move |message: String| TokenizerError::Format { file, message }
    };

    let (codebook, k) = parse_codebook(&contents["codebook.bin"])?;
    let (graph, fusion) = parse_params(&contents["params.bin"]).map_err(format("params.bin"))?;
    let (codes, fused) = parse_fused(&contents["fused.bin"]).map_err(format("fused.bin"))?;
    let config: TrainConfig =
        serde_json::from_slice(&contents["config.json"]).map_err(|e| format("config.json")(e.to_string()))?;

    let consistent = config.topk == k
        && config.codebook_size == codebook.len()
        && config.dim == codebook.dim()
        && fusion.dim() == codebook.dim()
        && fusion.graph_dim() == graph.dim()
        && fusion.validate().is_ok()
        && fused.iter().all(|f| f.e_t_s.len() == codebook.dim())
        && manifest.codes == codes.len()
        && manifest.codebook_size == codebook.len();
    if !consistent {
        return Err(TokenizerError::Format {
            file: MANIFEST.into(),
            message: "artifact files disagree on shapes".into(),
        });
    }
    let model = Model {
        graph,
        fusion,
        codebook,
    };
    Ok(TrainedTokenizer::from_parts(config, model, codes, fused))
}
