//! Region-partitioned codebook with top-K selection and distance-softmax
//! aggregation.
//!
//! Rows `[0, N)` are split into four contiguous regions, in order: text
//! specific, graph specific, text shared, graph shared. A vector `e` picks
//! its `K` nearest rows inside a region and is replaced by
//! `ê = Σ_k softmax(-dist)_k · C_k`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusedEmbeddings;
use crate::numcore::{sqdist, Matrix, NumError, Tape, Var};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("quantizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    TextSpecific,
    GraphSpecific,
    TextShared,
    GraphShared,
    /// Text shared and graph shared together.
    Shared,
}

/// Which rows the cross-modal vectors query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedScope {
    /// Both cross vectors search the whole shared region.
    #[default]
    Full,
    /// Text cross searches text shared only, graph cross graph shared only.
    OwnSubregion,
}

impl SharedScope {
    pub fn text_cross(self) -> Region {
        match self {
            SharedScope::Full => Region::Shared,
            SharedScope::OwnSubregion => Region::TextShared,
        }
    }

    pub fn graph_cross(self) -> Region {
        match self {
            SharedScope::Full => Region::Shared,
            SharedScope::OwnSubregion => Region::GraphShared,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    /// Start offsets of the four regions; the last region ends at `n`.
    offsets: [usize; 4],
    n: usize,
}

impl RegionLayout {
    pub fn from_offsets(offsets: [usize; 4], n: usize) -> Result<Self, QuantError> {
        if offsets[0] != 0 {
            return Err(QuantError::Config("first region must start at 0".into()));
        }
        let ends = [offsets[1], offsets[2], offsets[3], n];
        if offsets.iter().zip(ends).any(|(&s, e)| s >= e) {
            return Err(QuantError::Config(format!(
                "region offsets {offsets:?} do not split [0, {n}) into four nonempty ranges"
            )));
        }
        Ok(Self { offsets, n })
    }

    /// Sizes proportional to `fractions`; the last region takes the
    /// rounding remainder.
    pub fn from_fractions(n: usize, fractions: [f64; 4]) -> Result<Self, QuantError> {
        if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(QuantError::Config(format!("region fractions must be positive, got {fractions:?}")));
        }
        let total: f64 = fractions.iter().sum();
        let mut offsets = [0usize; 4];
        let mut acc = 0.0;
        for i in 1..4 {
            acc += fractions[i - 1];
            offsets[i] = (n as f64 * acc / total).round() as usize;
        }
        Self::from_offsets(offsets, n)
    }

    pub fn quarters(n: usize) -> Result<Self, QuantError> {
        Self::from_fractions(n, [0.25; 4])
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn offsets(&self) -> [usize; 4] {
        self.offsets
    }

    pub fn range(&self, region: Region) -> Range<usize> {
        let [a, b, c, d] = self.offsets;
        match region {
            Region::TextSpecific => a..b,
            Region::GraphSpecific => b..c,
            Region::TextShared => c..d,
            Region::GraphShared => d..self.n,
            Region::Shared => c..self.n,
        }
    }

    /// The four base regions, in index order.
    pub fn ranges(&self) -> [Range<usize>; 4] {
        [
            self.range(Region::TextSpecific),
            self.range(Region::GraphSpecific),
            self.range(Region::TextShared),
            self.range(Region::GraphShared),
        ]
    }

    /// Index (0..4) of the base region containing row `id`.
    pub fn region_of(&self, id: usize) -> Option<usize> {
        self.ranges().iter().position(|r| r.contains(&id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    rows: Matrix,
    layout: RegionLayout,
}

impl Codebook {
    pub fn new(rows: Matrix, layout: RegionLayout) -> Result<Self, QuantError> {
        if rows.rows() != layout.size() {
            return Err(QuantError::Config(format!(
                "codebook has {} rows but the layout covers {}",
                rows.rows(),
                layout.size()
            )));
        }
        Ok(Self { rows, layout })
    }

    /// Rows uniform in `[-1/√d, 1/√d]`.
    pub fn init(layout: RegionLayout, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let data = (0..layout.size() * d).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            rows: Matrix::new(layout.size(), d, data).expect("finite by construction"),
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn layout(&self) -> &RegionLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.rows
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.rows.row(id)
    }
}

/// `K` token ids of one vector with their aggregation weights and `ê`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGroup {
    pub token_ids: Vec<usize>,
    pub weights: Vec<f64>,
    pub e_hat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBundle {
    pub ts: TokenGroup,
    pub gs: TokenGroup,
    pub tc: TokenGroup,
    pub gc: TokenGroup,
}

/// The `k` rows of `range` nearest to `e`, ascending by squared distance,
/// ties to the lower index.
pub fn select_topk(e: &[f64], cb: &Codebook, range: Range<usize>, k: usize) -> Result<(Vec<usize>, Vec<f64>), QuantError> {
    if k == 0 || k > range.len() {
        return Err(QuantError::Config(format!("K={k} but the region holds {} rows", range.len())));
    }
    if e.len() != cb.dim() {
        return Err(NumError::Dimension {
            op: "select_topk",
            left: (1, e.len()),
            right: (cb.len(), cb.dim()),
        }
        .into());
    }
    let mut scored: Vec<(f64, usize)> = range.map(|j| (sqdist(e, cb.row(j)), j)).collect();
    if scored.iter().any(|(d, _)| !d.is_finite()) {
        return Err(NumError::NonFinite { op: "select_topk" }.into());
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(scored.into_iter().map(|(d, j)| (j, d)).unzip())
}

/// Softmax of `-dists` over the selected rows and the weighted sum of those
/// rows. Uses the same kernels as [`quantize_rows_on_tape`], so both give
/// bitwise equal `ê`.
pub fn aggregate_quantize(ids: &[usize], dists: &[f64], cb: &Codebook) -> Result<TokenGroup, QuantError> {
    let neg = Matrix::row_vector(dists)?.scale(-1.0)?;
    let weights = neg.softmax_rows()?;
    let e_hat = weights.matmul(&cb.rows.gather_rows(ids)?)?;
    Ok(TokenGroup {
        token_ids: ids.to_vec(),
        weights: weights.into_data(),
        e_hat: e_hat.into_data(),
    })
}

pub fn quantize(e: &[f64], cb: &Codebook, region: Region, k: usize) -> Result<TokenGroup, QuantError> {
    let (ids, dists) = select_topk(e, cb, cb.layout.range(region), k)?;
    aggregate_quantize(&ids, &dists, cb)
}

pub fn quantize_all(f: &FusedEmbeddings, cb: &Codebook, k: usize, scope: SharedScope) -> Result<QuantizedBundle, QuantError> {
    Ok(QuantizedBundle {
        ts: quantize(&f.e_t_s, cb, Region::TextSpecific, k)?,
        gs: quantize(&f.e_g_s, cb, Region::GraphSpecific, k)?,
        tc: quantize(&f.e_t_c, cb, scope.text_cross(), k)?,
        gc: quantize(&f.e_g_c, cb, scope.graph_cross(), k)?,
    })
}

/// Records `ê` for every row of `e` (`B x d`) given already selected ids.
///
/// Distances are taken against `sg[e]`, so the codebook is the only
/// gradient path of the returned `B x d` value.
pub fn quantize_rows_on_tape(tape: &mut Tape, e: Var, codebook: Var, ids: &[Vec<usize>]) -> Result<Var, NumError> {
    let frozen = tape.stop_gradient(e);
    let mut rows = Vec::with_capacity(ids.len());
    for (i, row_ids) in ids.iter().enumerate() {
        let query = tape.gather_rows(frozen, &[i])?;
        let picked = tape.gather_rows(codebook, row_ids)?;
        let dist = tape.pairwise_sqdist(query, picked)?;
        let neg = tape.scale(dist, -1.0)?;
        let w = tape.softmax_rows(neg)?;
        rows.push(tape.matmul(w, picked)?);
    }
    tape.concat_rows(&rows)
}

/// `Σ_pairs ‖sg[e] − ê‖² + α‖e − sg[ê]‖²`, each squared norm averaged over
/// the batch rows. `ê` must be the raw quantized value, not the
/// straight-through output.
pub fn vq_loss(tape: &mut Tape, pairs: &[(Var, Var)], alpha: f64) -> Result<Var, NumError> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(e, e_hat) in pairs {
        let batch = tape.value(e).rows() as f64;
        let e_sg = tape.stop_gradient(e);
        let q_sg = tape.stop_gradient(e_hat);
        let codebook_diff = tape.sub(e_sg, e_hat)?;
        let codebook_sq = tape.mul(codebook_diff, codebook_diff)?;
        let codebook_term = tape.sum(codebook_sq)?;
        let commit_diff = tape.sub(e, q_sg)?;
        let commit_sq = tape.mul(commit_diff, commit_diff)?;
        let commit_sum = tape.sum(commit_sq)?;
        let commit_term = tape.scale(commit_sum, alpha)?;
        let both = tape.add(codebook_term, commit_term)?;
        terms.push(tape.scale(both, 1.0 / batch)?);
    }
    let stacked = tape.concat_rows(&terms)?;
    tape.sum(stacked)
}
