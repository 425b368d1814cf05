//! Modality-specific projections and bidirectional cross-attention.
//!
//! All weight matrices are stored `out x in` and applied to row vectors, so
//! `f_t` maps a `1 x d_t` text vector to `1 x d`.

use rand::Rng;

use crate::numcore::{Matrix, NumError, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub f_t: Matrix,
    pub f_g: Matrix,
    pub wq_t: Matrix,
    pub wk_t: Matrix,
    pub wv_t: Matrix,
    pub wq_g: Matrix,
    pub wk_g: Matrix,
    pub wv_g: Matrix,
}

/// Tape handles for [`FusionParams`], same field names.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub f_t: Var,
    pub f_g: Var,
    pub wq_t: Var,
    pub wk_t: Var,
    pub wv_t: Var,
    pub wq_g: Var,
    pub wk_g: Var,
    pub wv_g: Var,
}

/// The four fused vectors of one code, each of length `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbeddings {
    pub e_t_s: Vec<f64>,
    pub e_g_s: Vec<f64>,
    pub e_t_c: Vec<f64>,
    pub e_g_c: Vec<f64>,
}

/// Tape handles of the four fused vectors (`1 x d` each).
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub e_t_s: Var,
    pub e_g_s: Var,
    pub e_t_c: Var,
    pub e_g_c: Var,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::new(rows, cols, data).expect("finite by construction")
}

impl FusionParams {
    pub fn init(d: usize, d_t: usize, d_g: usize, rng: &mut impl Rng) -> Self {
        Self {
            f_t: uniform(rng, d, d_t),
            f_g: uniform(rng, d, d_g),
            wq_t: uniform(rng, d, d_t),
            wk_t: uniform(rng, d, d_t),
            wv_t: uniform(rng, d, d_t),
            wq_g: uniform(rng, d, d_g),
            wk_g: uniform(rng, d, d_g),
            wv_g: uniform(rng, d, d_g),
        }
    }

    pub fn zeros(d: usize, d_t: usize, d_g: usize) -> Self {
        Self {
            f_t: Matrix::zeros(d, d_t),
            f_g: Matrix::zeros(d, d_g),
            wq_t: Matrix::zeros(d, d_t),
            wk_t: Matrix::zeros(d, d_t),
            wv_t: Matrix::zeros(d, d_t),
            wq_g: Matrix::zeros(d, d_g),
            wk_g: Matrix::zeros(d, d_g),
            wv_g: Matrix::zeros(d, d_g),
        }
    }

    pub fn dim(&self) -> usize {
        self.f_t.rows()
    }

    pub fn text_dim(&self) -> usize {
        self.f_t.cols()
    }

    pub fn graph_dim(&self) -> usize {
        self.f_g.cols()
    }

    /// Parameters in fixed order: `f_t, f_g, wq_t, wk_t, wv_t, wq_g, wk_g, wv_g`.
    pub fn matrices(&self) -> [&Matrix; 8] {
        [
            &self.f_t, &self.f_g, &self.wq_t, &self.wk_t, &self.wv_t, &self.wq_g, &self.wk_g, &self.wv_g,
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.f_t,
            &mut self.f_g,
            &mut self.wq_t,
            &mut self.wk_t,
            &mut self.wv_t,
            &mut self.wq_g,
            &mut self.wk_g,
            &mut self.wv_g,
        ]
    }

    /// Checks that all shapes agree with `f_t` and `f_g`.
    pub fn validate(&self) -> Result<(), NumError> {
        let (d, d_t, d_g) = (self.dim(), self.text_dim(), self.graph_dim());
        let expect = [(d, d_t), (d, d_g), (d, d_t), (d, d_t), (d, d_t), (d, d_g), (d, d_g), (d, d_g)];
        for (m, want) in self.matrices().into_iter().zip(expect) {
            if m.shape() != want {
                return Err(NumError::Dimension {
                    op: "fusion params",
                    left: m.shape(),
                    right: want,
                });
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> FusionVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        FusionVars {
            f_t: leaf(&self.f_t),
            f_g: leaf(&self.f_g),
            wq_t: leaf(&self.wq_t),
            wk_t: leaf(&self.wk_t),
            wv_t: leaf(&self.wv_t),
            wq_g: leaf(&self.wq_g),
            wk_g: leaf(&self.wk_g),
            wv_g: leaf(&self.wv_g),
        }
    }

    /// `(e_t_s, e_g_s)` for pooled `x_t` (`1 x d_t`) and `x_g` (`1 x d_g`).
    pub fn project_specific(&self, x_t: &Matrix, x_g: &Matrix) -> Result<(Matrix, Matrix), NumError> {
        Ok((x_t.matmul_nt(&self.f_t)?, x_g.matmul_nt(&self.f_g)?))
    }

    /// Forward pass outside training.
    pub fn fuse(
        &self,
        text_states: &Matrix,
        x_t: &Matrix,
        graph_states: &Matrix,
        x_g: &Matrix,
    ) -> Result<FusedEmbeddings, NumError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let ts = tape.constant(text_states.clone());
        let xt = tape.constant(x_t.clone());
        let gs = tape.constant(graph_states.clone());
        let xg = tape.constant(x_g.clone());
        let out = fuse_on_tape(&mut tape, &vars, ts, xt, gs, xg)?;
        let row = |v: Var| tape.value(v).data().to_vec();
        Ok(FusedEmbeddings {
            e_t_s: row(out.e_t_s),
            e_g_s: row(out.e_g_s),
            e_t_c: row(out.e_t_c),
            e_g_c: row(out.e_g_c),
        })
    }
}

/// Single-head attention pooled over query rows.
///
/// Returns the `1 x d` output and the `L_q x L_k` attention weights.
pub fn cross_attend(
    tape: &mut Tape,
    queries: Var,
    keys_values: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<(Var, Var), NumError> {
    let q = tape.linear(queries, wq)?;
    let k = tape.linear(keys_values, wk)?;
    let v = tape.linear(keys_values, wv)?;
    let d = tape.value(q).cols();
    let scores = tape.linear(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    let attended = tape.matmul(weights, v)?;
    Ok((tape.mean_rows(attended)?, weights))
}

/// Records the four fused vectors of one code on `tape`.
///
/// `text_states` is `L_t x d_t` (pass the pooled vector when no states
/// exist); `graph_states` is `n x d_g`.
pub fn fuse_on_tape(
    tape: &mut Tape,
    p: &FusionVars,
    text_states: Var,
    x_t: Var,
    graph_states: Var,
    x_g: Var,
) -> Result<FusedVars, NumError> {
    let e_t_s = tape.linear(x_t, p.f_t)?;
    let e_g_s = tape.linear(x_g, p.f_g)?;
    let (e_t_c, _) = cross_attend(tape, text_states, graph_states, p.wq_t, p.wk_g, p.wv_g)?;
    let (e_g_c, _) = cross_attend(tape, graph_states, text_states, p.wq_g, p.wk_t, p.wv_t)?;
    Ok(FusedVars {
        e_t_s,
        e_g_s,
        e_t_c,
        e_g_c,
    })
}
