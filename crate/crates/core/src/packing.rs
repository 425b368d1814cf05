//! Token-packing objectives over a batch: KL alignment of codebook distance
//! distributions, in-batch InfoNCE and a squared-cosine orthogonality
//! penalty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{NumError, Tape, Var};

#[derive(Debug, Error)]
pub enum PackingError {
    #[error("InfoNCE needs at least 2 rows per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("{name} must be nonnegative and finite, got {value}")]
    Weight { name: &'static str, value: f64 },
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackingConfig {
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda: 0.1,
            tau: 0.07,
        }
    }
}

impl PackingConfig {
    pub fn validate(&self) -> Result<(), PackingError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(PackingError::Temperature(self.tau));
        }
        for (name, value) in [("beta", self.beta), ("lambda", self.lambda)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(PackingError::Weight { name, value });
            }
        }
        Ok(())
    }
}

/// Batch tensors feeding [`token_packing_loss`], all `B x d`. The `q_*`
/// fields are the straight-through quantized vectors.
#[derive(Clone, Copy, Debug)]
pub struct PackingInputs {
    pub e_ts: Var,
    pub e_gs: Var,
    pub e_tc: Var,
    pub e_gc: Var,
    pub q_ts: Var,
    pub q_gs: Var,
    pub q_tc: Var,
    pub q_gc: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PackingLosses {
    pub token_c: Var,
    pub token_s: Var,
    pub total: Var,
}

/// Batch mean of `KL(softmax(-dist(e_tc, C)) ‖ softmax(-dist(e_gc, C)))`.
pub fn kl_alignment_loss(tape: &mut Tape, e_tc: Var, e_gc: Var, codebook: Var) -> Result<Var, NumError> {
    let d_t = tape.pairwise_sqdist(e_tc, codebook)?;
    let d_g = tape.pairwise_sqdist(e_gc, codebook)?;
    let l_t = tape.scale(d_t, -1.0)?;
    let l_g = tape.scale(d_g, -1.0)?;
    let log_p = tape.log_softmax_rows(l_t)?;
    let log_q = tape.log_softmax_rows(l_g)?;
    let p = tape.exp(log_p)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    let batch = tape.value(e_tc).rows() as f64;
    tape.scale(total, 1.0 / batch)
}

/// Mean over rows of `-log softmax_j(cos(a_i, p_j) / τ)` at `j = i`.
pub fn infonce(tape: &mut Tape, anchors: Var, positives: Var, tau: f64) -> Result<Var, PackingError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(PackingError::Temperature(tau));
    }
    let batch = tape.value(anchors).rows();
    if batch < 2 {
        return Err(PackingError::BatchTooSmall(batch));
    }
    let a = tape.normalize_rows(anchors)?;
    let p = tape.normalize_rows(positives)?;
    let sims = tape.linear(a, p)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let log_probs = tape.log_softmax_rows(logits)?;
    let diag = tape.diagonal(log_probs)?;
    let mean = tape.mean(diag)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Mean over rows of `cos(a_i, b_i)`.
pub fn mean_cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var, NumError> {
    let a = tape.normalize_rows(a)?;
    let b = tape.normalize_rows(b)?;
    let cos = tape.row_dot(a, b)?;
    tape.mean(cos)
}

/// Mean over rows of `cos(a_i, b_i)²`.
pub fn orthogonal_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var, NumError> {
    let a = tape.normalize_rows(a)?;
    let b = tape.normalize_rows(b)?;
    let cos = tape.row_dot(a, b)?;
    let sq = tape.mul(cos, cos)?;
    tape.mean(sq)
}

/// `L_token_c = NCE(q_tc, q_gc) + NCE(q_gc, q_tc) - 2β·mean cos(e_tc, e_gc)`
///
/// `L_token_s = NCE(q_ts, e_ts) + λ·orth(e_ts, q_gc) + NCE(q_gs, e_gs) + λ·orth(e_gs, q_tc)`
pub fn token_packing_loss(tape: &mut Tape, x: &PackingInputs, cfg: &PackingConfig) -> Result<PackingLosses, PackingError> {
    cfg.validate()?;
    let nce_tg = infonce(tape, x.q_tc, x.q_gc, cfg.tau)?;
    let nce_gt = infonce(tape, x.q_gc, x.q_tc, cfg.tau)?;
    let agree = mean_cosine(tape, x.e_tc, x.e_gc)?;
    let agree = tape.scale(agree, -2.0 * cfg.beta)?;
    let cross = tape.concat_rows(&[nce_tg, nce_gt, agree])?;
    let token_c = tape.sum(cross)?;

    let nce_t = infonce(tape, x.q_ts, x.e_ts, cfg.tau)?;
    let orth_t = orthogonal_loss(tape, x.e_ts, x.q_gc)?;
    let orth_t = tape.scale(orth_t, cfg.lambda)?;
    let nce_g = infonce(tape, x.q_gs, x.e_gs, cfg.tau)?;
    let orth_g = orthogonal_loss(tape, x.e_gs, x.q_tc)?;
    let orth_g = tape.scale(orth_g, cfg.lambda)?;
    let specific = tape.concat_rows(&[nce_t, orth_t, nce_g, orth_g])?;
    let token_s = tape.sum(specific)?;

    let total = tape.add(token_c, token_s)?;
    Ok(PackingLosses {
        token_c,
        token_s,
        total,
    })
}
