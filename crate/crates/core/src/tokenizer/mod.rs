//! Frozen tokenizer: code id to a fixed-length token sequence.
//!
//! Fused embeddings of every corpus code are computed once at freeze time
//! and stored with the artifact, so tokenizing needs neither the knowledge
//! graph nor the text embeddings. All parameters and cached vectors are
//! held at `f32` precision, the precision they are saved with, which makes
//! a freshly frozen tokenizer and a reloaded one behave identically.

mod artifact;

pub use artifact::{
    codebook_bytes, load_artifact, parse_codebook, save_artifact, ArtifactManifest, ARTIFACT_FILES, CODEBOOK_MAGIC,
    FORMAT_MAJOR, FORMAT_MINOR,
};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fusion::FusedEmbeddings;
use crate::graphenc::encode_on_tape;
use crate::numcore::{NumError, Tape};
use crate::quantizer::{quantize_all, Codebook, QuantError, QuantizedBundle};
use crate::textenc::{TextEmbeddingSet, TextEncError};
use crate::trainer::{Model, TrainConfig, TrainError, TrainingData};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("unknown code {0:?}")]
    UnknownCode(String),
    #[error("token id {id} out of range for a codebook of {n}")]
    UnknownToken { id: usize, n: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: format error: {message}")]
    Format { file: String, message: String },
    #[error("{file}: content does not match its recorded hash (corrupted artifact)")]
    Corruption { file: String },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Text(#[from] TextEncError),
}

/// Token ids of one code in group order text specific, graph specific,
/// text cross, graph cross; `K` per group.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub code_id: String,
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
    pub k: usize,
}

impl TokenSequence {
    pub const GROUPS: [&'static str; 4] = ["text_specific", "graph_specific", "text_cross", "graph_cross"];

    pub fn from_bundle(code_id: &str, b: &QuantizedBundle) -> Self {
        let groups = [&b.ts, &b.gs, &b.tc, &b.gc];
        Self {
            code_id: code_id.to_string(),
            ids: groups.iter().flat_map(|g| g.token_ids.iter().copied()).collect(),
            weights: groups.iter().flat_map(|g| g.weights.iter().copied()).collect(),
            k: b.ts.token_ids.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Start of each group: `0, K, 2K, 3K`.
    pub fn offsets(&self) -> [usize; 4] {
        [0, self.k, 2 * self.k, 3 * self.k]
    }

    /// Ids and weights of group `g` (0..4).
    pub fn group(&self, g: usize) -> (&[usize], &[f64]) {
        let r = g * self.k..(g + 1) * self.k;
        (&self.ids[r.clone()], &self.weights[r])
    }
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedTokenizer {
    config: TrainConfig,
    model: Model,
    codes: Vec<String>,
    index: HashMap<String, usize>,
    fused: Vec<FusedEmbeddings>,
}

impl TrainedTokenizer {
    /// Rounds `model` to `f32` and caches the fused embeddings of every
    /// code in `data`.
    pub fn freeze(cfg: &TrainConfig, model: &Model, data: &TrainingData) -> Result<Self, TrainError> {
        let model = model.rounded_to_f32();
        let mut codes = Vec::with_capacity(data.len());
        let mut fused = Vec::with_capacity(data.len());
        for c in &data.codes {
            let mut tape = Tape::new();
            let vars = model.graph.register(&mut tape, false);
            let (x_g, states) = encode_on_tape(&mut tape, &vars, &c.graph)?;
            let (x_g, states) = (tape.value(x_g).clone(), tape.value(states).clone());
            let f = model.fusion.fuse(&c.text_states, &c.x_t, &states, &x_g)?;
            codes.push(c.code_id.clone());
            fused.push(FusedEmbeddings {
                e_t_s: round_f32(&f.e_t_s),
                e_g_s: round_f32(&f.e_g_s),
                e_t_c: round_f32(&f.e_t_c),
                e_g_c: round_f32(&f.e_g_c),
            });
        }
        Ok(Self::from_parts(cfg.clone(), model, codes, fused))
    }

    pub(crate) fn from_parts(config: TrainConfig, model: Model, codes: Vec<String>, fused: Vec<FusedEmbeddings>) -> Self {
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self {
            config,
            model,
            codes,
            index,
            fused,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn codebook(&self) -> &Codebook {
        &self.model.codebook
    }

    pub fn topk(&self) -> usize {
        self.config.topk
    }

    pub fn code_ids(&self) -> &[String] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn fused(&self, code_id: &str) -> Option<&FusedEmbeddings> {
        self.index.get(code_id).map(|&i| &self.fused[i])
    }

    pub(crate) fn fused_all(&self) -> &[FusedEmbeddings] {
        &self.fused
    }

    pub fn quantize(&self, code_id: &str) -> Result<QuantizedBundle, TokenizerError> {
        let f = self
            .fused(code_id)
            .ok_or_else(|| TokenizerError::UnknownCode(code_id.to_string()))?;
        Ok(quantize_all(f, &self.model.codebook, self.config.topk, self.config.cross_scope)?)
    }

    pub fn tokenize(&self, code_id: &str) -> Result<TokenSequence, TokenizerError> {
        Ok(TokenSequence::from_bundle(code_id, &self.quantize(code_id)?))
    }

    /// Codeword `id` as stored.
    pub fn embedding(&self, id: usize) -> Result<&[f64], TokenizerError> {
        let n = self.model.codebook.len();
        if id >= n {
            return Err(TokenizerError::UnknownToken { id, n });
        }
        Ok(self.model.codebook.row(id))
    }

    /// The codebook as an `MTEB` file whose ids are the row numbers.
    pub fn token_embeddings(&self) -> TextEmbeddingSet {
        let cb = &self.model.codebook;
        let mut set = TextEmbeddingSet::new(cb.dim());
        for i in 0..cb.len() {
            let row: Vec<f32> = cb.row(i).iter().map(|&v| v as f32).collect();
            set.insert_pooled(&i.to_string(), &row).expect("unique ids, uniform dim");
        }
        set
    }

    pub fn export_token_embeddings(&self, path: &Path) -> Result<(), TokenizerError> {
        Ok(self.token_embeddings().save(path, None)?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), TokenizerError> {
        save_artifact(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self, TokenizerError> {
        load_artifact(dir)
    }
}

/// Jaccard index of the token id sets of two sequences.
pub fn token_jaccard(a: &TokenSequence, b: &TokenSequence) -> f64 {
    let sa: std::collections::BTreeSet<usize> = a.ids.iter().copied().collect();
    let sb: std::collections::BTreeSet<usize> = b.ids.iter().copied().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_synthetic;
    use crate::textenc::load_text_embeddings;
    use crate::trainer::{train, TrainConfig};

    pub(super) fn small() -> TrainedTokenizer {
        let c = gen_synthetic(2, 10, 1).unwrap();
        let cfg = TrainConfig {
            codebook_size: 32,
            dim: 8,
            graph_dim: 8,
            topk: 4,
            batch: 8,
            steps: 3,
            cap: 16,
            checkpoint_every: 0,
            ..TrainConfig::desk()
        };
        let data = TrainingData::build(&c.registry, &c.kg, &c.text, cfg.hops, cfg.cap).unwrap();
        train(&cfg, &data, None).unwrap()
    }

    #[test]
    fn sequences_have_fixed_layout() {
        let tk = small();
        let id = tk.code_ids()[3].clone();
        let s = tk.tokenize(&id).unwrap();
        assert_eq!(s.len(), 16);
        assert_eq!(s.offsets(), [0, 4, 8, 12]);
        assert_eq!(s, tk.tokenize(&id).unwrap());
        let layout = tk.codebook().layout();
        let (ts, w) = s.group(0);
        assert!(ts.iter().all(|&t| layout.region_of(t) == Some(0)));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(s.group(1).0.iter().all(|&t| layout.region_of(t) == Some(1)));
        assert!(s.ids[8..].iter().all(|&t| t >= layout.offsets()[2]));
        assert!(matches!(tk.tokenize("ICD9:nope"), Err(TokenizerError::UnknownCode(_))));
    }

    #[test]
    fn export_roundtrip() {
        let tk = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tokens.bin");
        tk.export_token_embeddings(&p).unwrap();
        let back = load_text_embeddings(&p, None).unwrap();
        assert_eq!((back.len(), back.dim()), (32, 8));
        for i in 0..32 {
            let row: Vec<f32> = tk.embedding(i).unwrap().iter().map(|&v| v as f32).collect();
            assert_eq!(back.pooled(&i.to_string()).unwrap(), &row[..]);
        }
        assert_eq!(back, tk.token_embeddings());
        assert!(tk.embedding(32).is_err());
    }

    #[test]
    fn jaccard_of_sets() {
        let a = TokenSequence {
            code_id: "a".into(),
            ids: vec![1, 2, 3, 3],
            weights: vec![0.25; 4],
            k: 1,
        };
        let b = TokenSequence {
            ids: vec![2, 3, 4, 5],
            ..a.clone()
        };
        assert_eq!(token_jaccard(&a, &b), 2.0 / 5.0);
        assert_eq!(token_jaccard(&a, &a), 1.0);
    }
}
