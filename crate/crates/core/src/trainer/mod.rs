//! End-to-end optimisation of the graph encoder, fusion weights and codebook
//! under `L = L_vq + L_KL + L_token`.
//!
//! Randomness is drawn from ChaCha8 streams keyed by `(seed, purpose,
//! index)` rather than one long-lived generator, so a run restarted from a
//! checkpoint draws exactly the numbers the uninterrupted run would have.

mod adam;
mod checkpoint;
mod config;

pub use adam::Adam;
pub use checkpoint::{checkpoint_dir, load_checkpoint, write_checkpoint, CheckpointManifest, CHECKPOINT_VERSION};
pub use config::TrainConfig;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeRegistry, KnowledgeGraph};
use crate::fusion::{fuse_on_tape, FusionParams};
use crate::graphenc::{encode_on_tape, extract_subgraph, GraphEncoderParams, GraphError, PreparedGraph, NULL_TYPE};
use crate::numcore::{Matrix, NumError, Tape, Var};
use crate::packing::{kl_alignment_loss, token_packing_loss, PackingError, PackingInputs};
use crate::quantizer::{quantize_rows_on_tape, select_topk, vq_loss, Codebook, QuantError, Region};
use crate::textenc::TextEmbeddingSet;
use crate::tokenizer::TrainedTokenizer;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite value in {component}: {detail}")]
    NonFinite { component: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Num(#[from] NumError),
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_RESEED: u64 = 2;

/// Generator for `(seed, purpose, index)`; independent of call history.
fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// Standard deviation of the noise added to a re-seeded codeword.
pub const RESEED_NOISE: f64 = 0.01;

/// The trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub graph: GraphEncoderParams,
    pub fusion: FusionParams,
    pub codebook: Codebook,
}

impl Model {
    pub fn init(cfg: &TrainConfig, type_labels: &[String], text_dim: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, STREAM_INIT, 0);
        let graph = GraphEncoderParams::init(type_labels, cfg.graph_dim, cfg.graph_layers, &mut rng)?;
        let fusion = FusionParams::init(cfg.dim, text_dim, cfg.graph_dim, &mut rng);
        let codebook = Codebook::init(cfg.layout()?, cfg.dim, &mut rng);
        Ok(Self { graph, fusion, codebook })
    }

    /// Parameter tensors in fixed order: codebook, type embedding, each
    /// graph layer's `w_self` and `w_nbr`, then the eight fusion matrices.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![self.codebook.matrix(), &self.graph.type_embedding];
        for l in &self.graph.layers {
            out.push(&l.w_self);
            out.push(&l.w_nbr);
        }
        out.extend(self.fusion.matrices());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![self.codebook.matrix_mut(), &mut self.graph.type_embedding];
        for l in &mut self.graph.layers {
            out.push(&mut l.w_self);
            out.push(&mut l.w_nbr);
        }
        out.extend(self.fusion.matrices_mut());
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["codebook".to_string(), "type_embedding".to_string()];
        for i in 0..self.graph.layers.len() {
            out.push(format!("graph_layer{i}.w_self"));
            out.push(format!("graph_layer{i}.w_nbr"));
        }
        out.extend(["f_t", "f_g", "wq_t", "wk_t", "wv_t", "wq_g", "wk_g", "wv_g"].map(String::from));
        out
    }

    /// Copy with every entry rounded to `f32`, the artifact precision.
    pub fn rounded_to_f32(&self) -> Model {
        let mut out = self.clone();
        for m in out.tensors_mut() {
            for v in m.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
        out
    }
}

/// Everything the model reads for one code.
#[derive(Clone, Debug)]
pub struct CodeInputs {
    pub code_id: String,
    /// `len x d_t`, or the pooled vector when the code has no states.
    pub text_states: Matrix,
    /// `1 x d_t`.
    pub x_t: Matrix,
    pub graph: PreparedGraph,
}

/// Per-code model inputs in registry (code id) order.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub codes: Vec<CodeInputs>,
    /// Sorted node types including [`NULL_TYPE`]; row order of the type
    /// embedding table.
    pub type_labels: Vec<String>,
    pub text_dim: usize,
}

impl TrainingData {
    pub fn build(
        registry: &CodeRegistry,
        kg: &KnowledgeGraph,
        text: &TextEmbeddingSet,
        hops: usize,
        cap: usize,
    ) -> Result<Self, TrainError> {
        text.check_covers(registry).map_err(|e| TrainError::Data(e.to_string()))?;
        registry.check_against(kg).map_err(TrainError::Data)?;
        let mut labels: BTreeSet<String> = kg.type_labels().into_iter().collect();
        labels.insert(NULL_TYPE.to_string());
        let type_labels: Vec<String> = labels.into_iter().collect();
        let type_index: HashMap<&str, usize> = type_labels.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

        let mut codes = Vec::with_capacity(registry.len());
        for code in registry.iter() {
            let g = extract_subgraph(code, kg, hops, cap).canonical();
            let type_ids = g.nodes.iter().map(|n| type_index[n.type_label.as_str()]).collect();
            codes.push(CodeInputs {
                code_id: code.code_id.clone(),
                text_states: text.state_matrix(&code.code_id).expect("coverage checked"),
                x_t: text.pooled_matrix(&code.code_id).expect("coverage checked"),
                graph: PreparedGraph {
                    type_ids,
                    adjacency: Rc::new(g.adjacency),
                },
            });
        }
        Ok(Self {
            codes,
            type_labels,
            text_dim: text.dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Loss scalars of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub vq: f64,
    pub kl: f64,
    pub token_c: f64,
    pub token_s: f64,
    pub total: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,L_vq,L_KL,L_token_c,L_token_s,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.vq, self.kl, self.token_c, self.token_s, self.total
        )
    }
}

/// Mutable training state; everything a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Steps completed.
    pub step: u64,
    pub model: Model,
    pub adam: Adam,
    /// Steps since each codeword was last selected.
    pub idle: Vec<u64>,
    pub trace: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let shapes: Vec<_> = model.tensors().iter().map(|m| m.shape()).collect();
        let idle = vec![0; model.codebook.len()];
        Self {
            step: 0,
            adam: Adam::new(&shapes),
            model,
            idle,
            trace: Vec::new(),
        }
    }
}

/// Result of one forward and backward pass.
struct Pass {
    losses: LossRecord,
    grads: Vec<Matrix>,
    /// Selected ids per group (`ts, gs, tc, gc`), one list per batch row.
    selected: [Vec<Vec<usize>>; 4],
    /// Batch embedding values per group.
    embeddings: [Matrix; 4],
}

fn non_finite(component: &str) -> impl Fn(NumError) -> TrainError + '_ {
    move |e| match e {
        NumError::NonFinite { op } => TrainError::NonFinite {
            component: component.to_string(),
            detail: format!("produced by {op}"),
        },
        other => TrainError::Num(other),
    }
}

fn packing_err(e: PackingError) -> TrainError {
    match e {
        PackingError::Num(n) => non_finite("L_token")(n),
        other => TrainError::Packing(other),
    }
}

fn forward_backward(model: &Model, data: &TrainingData, batch: &[usize], cfg: &TrainConfig) -> Result<Pass, TrainError> {
    let mut tape = Tape::new();
    let codebook = tape.param(model.codebook.matrix().clone());
    let gvars = model.graph.register(&mut tape, true);
    let fvars = model.fusion.register(&mut tape, true);

    let mut rows: [Vec<Var>; 4] = Default::default();
    {
        let encode = non_finite("encoder");
        for &i in batch {
            let c = &data.codes[i];
            let (x_g, states) = encode_on_tape(&mut tape, &gvars, &c.graph).map_err(&encode)?;
            let ts = tape.constant(c.text_states.clone());
            let xt = tape.constant(c.x_t.clone());
            let f = fuse_on_tape(&mut tape, &fvars, ts, xt, states, x_g).map_err(&encode)?;
            for (slot, v) in rows.iter_mut().zip([f.e_t_s, f.e_g_s, f.e_t_c, f.e_g_c]) {
                slot.push(v);
            }
        }
    }
    let e: Vec<Var> = rows
        .iter()
        .map(|r| tape.concat_rows(r))
        .collect::<Result<_, _>>()
        .map_err(non_finite("encoder"))?;

    let layout = *model.codebook.layout();
    let regions = [
        Region::TextSpecific,
        Region::GraphSpecific,
        cfg.cross_scope.text_cross(),
        cfg.cross_scope.graph_cross(),
    ];
    let mut selected: [Vec<Vec<usize>>; 4] = Default::default();
    let mut raw = Vec::with_capacity(4);
    let mut st = Vec::with_capacity(4);
    for g in 0..4 {
        let values = tape.value(e[g]).clone();
        for r in 0..values.rows() {
            let (ids, _) = select_topk(values.row(r), &model.codebook, layout.range(regions[g]), cfg.topk)?;
            selected[g].push(ids);
        }
        let q = quantize_rows_on_tape(&mut tape, e[g], codebook, &selected[g]).map_err(non_finite("quantizer"))?;
        raw.push(q);
        st.push(tape.straight_through(e[g], q)?);
    }

    let pairs: Vec<(Var, Var)> = (0..4).map(|g| (e[g], raw[g])).collect();
    let l_vq = vq_loss(&mut tape, &pairs, cfg.alpha).map_err(non_finite("L_vq"))?;
    let l_kl = kl_alignment_loss(&mut tape, e[2], e[3], codebook).map_err(non_finite("L_KL"))?;
    let packing = token_packing_loss(
        &mut tape,
        &PackingInputs {
            e_ts: e[0],
            e_gs: e[1],
            e_tc: e[2],
            e_gc: e[3],
            q_ts: st[0],
            q_gs: st[1],
            q_tc: st[2],
            q_gc: st[3],
        },
        &cfg.packing(),
    )
    .map_err(packing_err)?;
    let parts = tape.concat_rows(&[l_vq, l_kl, packing.total])?;
    let total = tape.sum(parts).map_err(non_finite("total loss"))?;

    let losses = LossRecord {
        step: 0,
        vq: tape.scalar(l_vq),
        kl: tape.scalar(l_kl),
        token_c: tape.scalar(packing.token_c),
        token_s: tape.scalar(packing.token_s),
        total: tape.scalar(total),
    };
    for (name, v) in [
        ("L_vq", losses.vq),
        ("L_KL", losses.kl),
        ("L_token_c", losses.token_c),
        ("L_token_s", losses.token_s),
        ("total loss", losses.total),
    ] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                component: name.into(),
                detail: format!("value {v}"),
            });
        }
    }

    let g = tape.backward(total).map_err(non_finite("backward pass"))?;
    let mut param_vars = vec![codebook, gvars.type_embedding];
    for &(s, n) in &gvars.layers {
        param_vars.push(s);
        param_vars.push(n);
    }
    param_vars.extend([
        fvars.f_t, fvars.f_g, fvars.wq_t, fvars.wk_t, fvars.wv_t, fvars.wq_g, fvars.wk_g, fvars.wv_g,
    ]);
    let grads: Vec<Matrix> = param_vars.iter().map(|&v| g.get_or_zeros(v)).collect();
    for (grad, name) in grads.iter().zip(model.tensor_names()) {
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                component: format!("gradient of {name}"),
                detail: "NaN or infinite entry".into(),
            });
        }
    }
    let embeddings = std::array::from_fn(|g| tape.value(e[g]).clone());
    Ok(Pass {
        losses,
        grads,
        selected,
        embeddings,
    })
}

/// Drives [`TrainState`] over a fixed [`TrainingData`].
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a TrainingData,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainingData) -> Result<Self, TrainError> {
        if data.len() < 2 {
            return Err(TrainError::Data(format!("need at least 2 codes, got {}", data.len())));
        }
        let model = Model::init(&cfg, &data.type_labels, data.text_dim)?;
        Ok(Self {
            cfg,
            data,
            state: TrainState::new(model),
        })
    }

    /// Continues from a checkpoint directory written by an earlier run with
    /// the same config (the step budget and checkpoint cadence may differ).
    pub fn resume(cfg: TrainConfig, data: &'a TrainingData, dir: &Path) -> Result<Self, TrainError> {
        let mut t = Self::new(cfg, data)?;
        let (manifest, state) = load_checkpoint(dir, &t.state)?;
        let comparable = |c: &TrainConfig| TrainConfig {
            steps: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        if comparable(&manifest.config) != comparable(&t.cfg) {
            return Err(TrainError::Checkpoint {
                path: dir.to_path_buf(),
                message: "checkpoint was written under a different config".into(),
            });
        }
        t.state = state;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn data(&self) -> &TrainingData {
        self.data
    }

    /// Batch rows for step `step`: an epoch-seeded permutation cut into
    /// `n / batch` full batches (the remainder of each epoch is dropped).
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.data.len();
        let b = self.cfg.batch.min(n);
        let per_epoch = (n / b) as u64;
        let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, STREAM_SHUFFLE, epoch));
        order[pos * b..(pos + 1) * b].to_vec()
    }

    /// One optimisation step; returns its loss record.
    pub fn step(&mut self) -> Result<LossRecord, TrainError> {
        let step = self.state.step;
        let batch = self.batch_indices(step);
        let pass = forward_backward(&self.state.model, self.data, &batch, &self.cfg)?;
        let losses = LossRecord { step, ..pass.losses };

        if self.cfg.lr > 0.0 {
            let mut params = self.state.model.tensors_mut();
            self.state.adam.update(&mut params, &pass.grads, self.cfg.lr);
            self.track_usage(&pass);
            self.reseed_dead_codes(step, &pass)?;
        }
        self.state.step += 1;
        self.state.trace.push(losses);
        debug!(
            "step {step}: total {:.5} vq {:.5} kl {:.5} token_c {:.5} token_s {:.5}",
            losses.total, losses.vq, losses.kl, losses.token_c, losses.token_s
        );
        Ok(losses)
    }

    fn track_usage(&mut self, pass: &Pass) {
        for v in &mut self.state.idle {
            *v += 1;
        }
        for ids in pass.selected.iter().flatten().flatten() {
            self.state.idle[*ids] = 0;
        }
    }

    /// Moves long-unused codewords onto a random batch embedding of the
    /// group that queries their region, plus small noise.
    fn reseed_dead_codes(&mut self, step: u64, pass: &Pass) -> Result<(), TrainError> {
        let after = self.cfg.dead_code_after;
        if after == 0 {
            return Ok(());
        }
        let layout = *self.state.model.codebook.layout();
        let mut rng = stream_rng(self.cfg.seed, STREAM_RESEED, step);
        let noise = Normal::new(0.0, RESEED_NOISE).expect("valid normal");
        for j in 0..self.state.idle.len() {
            if self.state.idle[j] < after {
                continue;
            }
            let region = layout.region_of(j).expect("layout covers the codebook");
            let source = &pass.embeddings[region];
            let row = rng.random_range(0..source.rows());
            let values: Vec<f64> = source.row(row).iter().map(|&v| v + noise.sample(&mut rng)).collect();
            self.state.model.codebook.matrix_mut().set_row(j, &values)?;
            self.state.adam.reset_row(0, j);
            self.state.idle[j] = 0;
        }
        Ok(())
    }

    /// Runs until `cfg.steps`, writing a checkpoint every
    /// `cfg.checkpoint_every` steps and at the end when `out` is given.
    pub fn run(&mut self, out: Option<&Path>) -> Result<(), TrainError> {
        while self.state.step < self.cfg.steps {
            let rec = self.step()?;
            if rec.step % 50 == 0 {
                info!("step {} total loss {:.5}", rec.step, rec.total);
            }
            let done = self.state.step;
            if let Some(out) = out {
                if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 {
                    write_checkpoint(&checkpoint_dir(out, done), &self.cfg, &self.state)?;
                }
            }
        }
        // the final state is always resumable
        if let Some(out) = out {
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.state.step % every != 0 {
                write_checkpoint(&checkpoint_dir(out, self.state.step), &self.cfg, &self.state)?;
            }
        }
        Ok(())
    }

    /// Frozen tokenizer from the current parameters.
    pub fn freeze(&self) -> Result<TrainedTokenizer, TrainError> {
        TrainedTokenizer::freeze(&self.cfg, &self.state.model, self.data)
    }
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    writeln!(f, "{}", LossRecord::CSV_HEADER).map_err(io)?;
    for r in trace {
        writeln!(f, "{}", r.csv_row()).map_err(io)?;
    }
    Ok(())
}

/// Full run: train, checkpoint under `out/checkpoints`, write the loss
/// trace and return the frozen tokenizer.
pub fn train(cfg: &TrainConfig, data: &TrainingData, out: Option<&Path>) -> Result<TrainedTokenizer, TrainError> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    trainer.run(out)?;
    if let Some(out) = out {
        write_loss_csv(&out.join("loss_trace.csv"), &trainer.state.trace)?;
    }
    trainer.freeze()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_synthetic;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            codebook_size: 32,
            dim: 8,
            graph_dim: 8,
            topk: 2,
            batch: 8,
            steps: 6,
            cap: 16,
            checkpoint_every: 0,
            dead_code_after: 3,
            lr: 1e-2,
            ..TrainConfig::desk()
        }
    }

    fn data(cfg: &TrainConfig) -> TrainingData {
        let c = gen_synthetic(2, 12, 3).unwrap();
        TrainingData::build(&c.registry, &c.kg, &c.text, cfg.hops, cfg.cap).unwrap()
    }

    #[test]
    fn batches_cover_each_epoch_without_repeats() {
        let cfg = small_cfg();
        let d = data(&cfg);
        let t = Trainer::new(cfg, &d).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..24).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(0), t.batch_indices(3));
    }

    #[test]
    fn zero_lr_leaves_parameters_alone() {
        let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
        let d = data(&cfg);
        let mut t = Trainer::new(cfg, &d).unwrap();
        let before = t.state().clone();
        for _ in 0..4 {
            t.step().unwrap();
        }
        assert_eq!(t.state().model, before.model);
        assert_eq!(t.state().adam, before.adam);
        assert_eq!(t.state().idle, before.idle);
        assert_eq!(t.state().trace.len(), 4);
    }

    #[test]
    fn same_state_same_update() {
        let cfg = small_cfg();
        let d = data(&cfg);
        let mut a = Trainer::new(cfg.clone(), &d).unwrap();
        let mut b = Trainer::new(cfg, &d).unwrap();
        for _ in 0..6 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
        assert_eq!(a.state(), b.state());
        assert_ne!(a.state().model, Trainer::new(small_cfg(), &d).unwrap().state().model);
    }

    #[test]
    fn idle_codewords_are_reseeded() {
        let cfg = small_cfg();
        let d = data(&cfg);
        let mut t = Trainer::new(cfg, &d).unwrap();
        for _ in 0..6 {
            t.step().unwrap();
        }
        assert!(t.state().idle.iter().all(|&v| v < 3));
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let cfg = small_cfg();
        let d = data(&cfg);
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &d, Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("loss_trace.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], LossRecord::CSV_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("0,"));
    }
}
