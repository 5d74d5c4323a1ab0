//! Three interchangeable attention engines over a shared Q/K/V interface:
//! exact softmax attention (the oracle), vanilla Nystrom with contiguous
//! segment landmarks, and feature-aware landmarks (cluster-derived segment
//! means with the CLS token kept as its own landmark).
//!
//! The approximation never materializes an N x N matrix: the three factors
//! are applied right-to-left, so peak working space stays O(N * m).

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::clustering::{segment_means, SegmentAssignment};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, pinv_iterative, pinv_oracle, softmax_rows, Matrix};

/// Which attention engine to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Exact,
    Nystrom,
    Falsa,
}

impl AttentionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::Exact => "exact",
            AttentionMode::Nystrom => "nystrom",
            AttentionMode::Falsa => "falsa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(AttentionMode::Exact),
            "nystrom" => Ok(AttentionMode::Nystrom),
            "falsa" => Ok(AttentionMode::Falsa),
            other => Err(Error::InvalidArg(format!(
                "unknown attention mode {other:?} (expected exact, nystrom or falsa)"
            ))),
        }
    }
}

/// Pseudoinverse route for the landmark kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pinv {
    /// Differentiable unrolled iteration; the only route the training path
    /// accepts.
    Iterative { iters: usize },
    /// Decomposition-based; tests and benchmarks only.
    Oracle,
}

/// Per-head projections plus the output mix.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// One d_model x d_head matrix per head.
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// (heads * d_head) x d_model output projection.
    pub wo: Matrix,
}

impl AttentionParams {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn d_head(&self) -> usize {
        self.wq[0].cols()
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.wq.is_empty() || self.wq.len() != self.wk.len() || self.wq.len() != self.wv.len() {
            return Err(Error::LengthMismatch {
                what: "attention head count",
                expected: self.wq.len(),
                got: self.wk.len().min(self.wv.len()),
            });
        }
        let d_head = self.d_head();
        if d_head * self.heads() != d_model {
            return Err(Error::ConfigMismatch(format!(
                "d_model {d_model} must equal heads {} * d_head {d_head}",
                self.heads()
            )));
        }
        for m in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            if m.rows() != d_model || m.cols() != d_head {
                return Err(Error::ConfigMismatch(format!(
                    "projection must be {d_model}x{d_head}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if self.wo.rows() != d_model || self.wo.cols() != d_model {
            return Err(Error::ConfigMismatch(format!(
                "output projection must be {d_model}x{d_model}, got {}x{}",
                self.wo.rows(),
                self.wo.cols()
            )));
        }
        Ok(())
    }
}

/// The three Nystrom factors of one attention evaluation.
#[derive(Debug, Clone)]
pub struct NystromFactors {
    /// softmax(Q Kl^T / sqrt(d)); rows are stochastic.
    pub f: Matrix,
    /// Pseudoinverse of softmax(Ql Kl^T / sqrt(d)).
    pub a: Matrix,
    /// softmax(Ql K^T / sqrt(d)); rows are stochastic.
    pub b: Matrix,
}

impl NystromFactors {
    pub fn landmarks(&self) -> usize {
        self.f.cols()
    }
}

/// Exact softmax attention `softmax(q k^T / sqrt(d_q)) v`; the oracle both
/// approximations are judged against.
pub fn exact_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let att = softmax_rows(matmul_nt(q, k)?, scale);
    matmul(&att, v)
}

/// Landmarks from contiguous index ranges in original token order; uneven
/// remainders go to the leading segments. Returns the (Q~, K~) pair.
pub fn contiguous_landmarks(q: &Matrix, k: &Matrix, n_landmarks: usize) -> Result<(Matrix, Matrix)> {
    if n_landmarks == 0 {
        return Err(Error::InvalidArg("need at least one landmark".into()));
    }
    if q.rows() != k.rows() {
        return Err(Error::ShapeMismatch {
            op: "contiguous_landmarks",
            lhs_rows: q.rows(),
            lhs_cols: q.cols(),
            rhs_rows: k.rows(),
            rhs_cols: k.cols(),
        });
    }
    let assignment = SegmentAssignment::contiguous(q.rows(), n_landmarks);
    Ok((segment_means(q, &assignment)?, segment_means(k, &assignment)?))
}

/// Feature-aware landmarks: per-segment means of the non-CLS query and key
/// rows by segment ID, with the CLS rows prepended as their own landmark.
pub fn falsa_landmarks(
    q: &Matrix,
    k: &Matrix,
    assignment: &SegmentAssignment,
    cls_q: &Matrix,
    cls_k: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if cls_q.rows() != 1 || cls_k.rows() != 1 {
        return Err(Error::LengthMismatch {
            what: "cls row",
            expected: 1,
            got: cls_q.rows().max(cls_k.rows()),
        });
    }
    let q_l = Matrix::concat_rows(cls_q, &segment_means(q, assignment)?)?;
    let k_l = Matrix::concat_rows(cls_k, &segment_means(k, assignment)?)?;
    Ok((q_l, k_l))
}

/// Nystrom-approximated attention through landmark matrices.
///
/// `F = softmax(q kl^T / sqrt(d))`, `A = pinv(softmax(ql kl^T / sqrt(d)))`,
/// `B = softmax(ql k^T / sqrt(d))`; the output applies the factors
/// right-to-left as `F (A (B v))`, which keeps both time and working memory
/// at O(N * m) and never forms an N x N matrix.
pub fn nystrom_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    q_l: &Matrix,
    k_l: &Matrix,
    pinv: Pinv,
) -> Result<(Matrix, NystromFactors)> {
    if q_l.rows() != k_l.rows() {
        return Err(Error::ShapeMismatch {
            op: "nystrom_attention landmarks",
            lhs_rows: q_l.rows(),
            lhs_cols: q_l.cols(),
            rhs_rows: k_l.rows(),
            rhs_cols: k_l.cols(),
        });
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let b = softmax_rows(matmul_nt(q_l, k)?, scale);
    let bv = matmul(&b, v)?;
    let a_kernel = softmax_rows(matmul_nt(q_l, k_l)?, scale);
    let a = match pinv {
        Pinv::Iterative { iters } => pinv_iterative(&a_kernel, iters)?,
        Pinv::Oracle => pinv_oracle(&a_kernel),
    };
    drop(a_kernel);
    let abv = matmul(&a, &bv)?;
    drop(bv);
    let f = softmax_rows(matmul_nt(q, k_l)?, scale);
    let out = matmul(&f, &abv)?;
    Ok((out, NystromFactors { f, a, b }))
}

// ---------------------------------------------------------------------------
// Tape builders shared by the functional API and the model forward pass.
// ---------------------------------------------------------------------------

/// Tape handles of one head's projection matrices.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Tape handles of one head's Nystrom factors.
#[derive(Debug, Clone, Copy)]
pub struct FactorVars {
    pub f: Var,
    pub a: Var,
    pub b: Var,
}

/// Multi-head attention output plus per-head factors (approximate modes).
pub struct TapeAttention {
    pub output: Var,
    pub factors: Vec<FactorVars>,
}

fn build_nystrom(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    q_l: Var,
    k_l: Var,
    scale: f64,
    pinv: Pinv,
) -> Result<(Var, FactorVars)> {
    let b_logits = tape.matmul_nt(q_l, k)?;
    let b = tape.softmax_rows(b_logits, scale);
    let bv = tape.matmul(b, v)?;
    let a_logits = tape.matmul_nt(q_l, k_l)?;
    let a_kernel = tape.softmax_rows(a_logits, scale);
    let a = match pinv {
        Pinv::Iterative { iters } => tape.pinv_iterative(a_kernel, iters)?,
        Pinv::Oracle => tape.pinv_oracle(a_kernel),
    };
    let abv = tape.matmul(a, bv)?;
    let f_logits = tape.matmul_nt(q, k_l)?;
    let f = tape.softmax_rows(f_logits, scale);
    let out = tape.matmul(f, abv)?;
    Ok((out, FactorVars { f, a, b }))
}

/// Builds the full multi-head attention sub-graph on `tape`.
///
/// Row 0 of `tokens` is the CLS token. The segment assignment covers the
/// non-CLS rows and is shared across heads; means are taken per head in each
/// head's projected space. `n_landmarks` is only read in nystrom mode, where
/// contiguous segments span all rows including CLS.
pub fn build_multi_head(
    tape: &mut Tape,
    tokens: Var,
    heads: &[HeadVars],
    wo: Var,
    mode: AttentionMode,
    assignment: Option<&SegmentAssignment>,
    n_landmarks: usize,
    pinv: Pinv,
) -> Result<TapeAttention> {
    let n_rows = tape.value(tokens).rows();
    let falsa_ids: Option<(Rc<Vec<usize>>, usize)> = match mode {
        AttentionMode::Falsa => {
            let a = assignment.ok_or(Error::MissingAssignment)?;
            if a.ids.len() != n_rows - 1 {
                return Err(Error::LengthMismatch {
                    what: "falsa segment assignment (non-CLS rows)",
                    expected: n_rows - 1,
                    got: a.ids.len(),
                });
            }
            Some((Rc::new(a.ids.clone()), a.n_segments()))
        }
        _ => None,
    };
    let contig: Option<(Rc<Vec<usize>>, usize)> = match mode {
        AttentionMode::Nystrom => {
            if n_landmarks == 0 {
                return Err(Error::InvalidArg("need at least one landmark".into()));
            }
            let c = SegmentAssignment::contiguous(n_rows, n_landmarks);
            let k = c.n_segments();
            Some((Rc::new(c.ids), k))
        }
        _ => None,
    };

    let mut head_outs = Vec::with_capacity(heads.len());
    let mut factors = Vec::new();
    for h in heads {
        let q = tape.matmul(tokens, h.wq)?;
        let k = tape.matmul(tokens, h.wk)?;
        let v = tape.matmul(tokens, h.wv)?;
        let scale = 1.0 / (tape.value(q).cols() as f64).sqrt();
        match mode {
            AttentionMode::Exact => {
                let logits = tape.matmul_nt(q, k)?;
                let att = tape.softmax_rows(logits, scale);
                head_outs.push(tape.matmul(att, v)?);
            }
            AttentionMode::Nystrom => {
                let (ids, seg) = contig.as_ref().unwrap();
                let q_l = tape.segment_mean(q, ids.clone(), *seg)?;
                let k_l = tape.segment_mean(k, ids.clone(), *seg)?;
                let (out, fac) = build_nystrom(tape, q, k, v, q_l, k_l, scale, pinv)?;
                head_outs.push(out);
                factors.push(fac);
            }
            AttentionMode::Falsa => {
                let (ids, seg) = falsa_ids.as_ref().unwrap();
                let q_cls = tape.slice_rows(q, 0, 1);
                let q_rest = tape.slice_rows(q, 1, n_rows - 1);
                let q_means = tape.segment_mean(q_rest, ids.clone(), *seg)?;
                let q_l = tape.concat_rows(q_cls, q_means)?;
                let k_cls = tape.slice_rows(k, 0, 1);
                let k_rest = tape.slice_rows(k, 1, n_rows - 1);
                let k_means = tape.segment_mean(k_rest, ids.clone(), *seg)?;
                let k_l = tape.concat_rows(k_cls, k_means)?;
                let (out, fac) = build_nystrom(tape, q, k, v, q_l, k_l, scale, pinv)?;
                head_outs.push(out);
                factors.push(fac);
            }
        }
    }
    let concat = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)?
    };
    let output = tape.matmul(concat, wo)?;
    Ok(TapeAttention { output, factors })
}

/// One multi-head attention evaluation over `tokens` (row 0 = CLS).
///
/// Functional wrapper around the tape builder, so the model forward pass and
/// this entry point share one implementation.
pub fn multi_head_attend(
    tokens: &Matrix,
    params: &AttentionParams,
    mode: AttentionMode,
    assignment: Option<&SegmentAssignment>,
    n_landmarks: usize,
    pinv: Pinv,
) -> Result<Matrix> {
    params.validate(tokens.cols())?;
    let mut tape = Tape::new();
    let tokens_var = tape.leaf(tokens.clone());
    let heads: Vec<HeadVars> = (0..params.heads())
        .map(|h| HeadVars {
            wq: tape.leaf(params.wq[h].clone()),
            wk: tape.leaf(params.wk[h].clone()),
            wv: tape.leaf(params.wv[h].clone()),
        })
        .collect();
    let wo = tape.leaf(params.wo.clone());
    let built = build_multi_head(&mut tape, tokens_var, &heads, wo, mode, assignment, n_landmarks, pinv)?;
    Ok(tape.value(built.output).clone())
}
