//! Minimal reverse-mode differentiation over matrix-valued nodes.
//!
//! A `Tape` records every operation as it runs forward; `backward` walks the
//! node list in reverse and accumulates gradients. The op set is exactly what
//! the model needs: products, row softmax, LayerNorm, GELU, segment means,
//! row/column concatenation and the pseudoinverse initialization. The
//! iterative pseudoinverse itself is expressed as a composition of these
//! primitives, so its gradient falls out of the unrolled steps.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::pinv::{pinv_init, pinv_oracle};
use crate::numerics::{
    gelu, gelu_grad, layer_norm, matmul, matmul_nt, matmul_tn, softmax_rows, Matrix,
};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position of this node on its tape; indexes the gradient vector
    /// returned by `Tape::backward`.
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    /// `x + bias` with `bias` a 1 x cols row broadcast over rows.
    AddBiasRow(Var, Var),
    Softmax {
        x: Var,
        scale: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    /// Per-segment means of the input rows; `ids[i]` is row i's segment.
    SegmentMean {
        x: Var,
        ids: Rc<Vec<usize>>,
        counts: Rc<Vec<usize>>,
    },
    ConcatRows(Var, Var),
    ConcatCols(Rc<Vec<Var>>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    /// `c * I - x`; the scalar is baked into the forward value and the
    /// backward pass is just negation, so only `x` is stored.
    IdentityMinus {
        x: Var,
    },
    /// `x^T / (|x|_1 |x|_inf)`
    PinvInit(Var),
    /// Decomposition pseudoinverse; forward-only.
    PinvOracle,
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Forward tape. Nodes are appended in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).clone().scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xm = self.value(x);
        let bm = self.value(bias);
        if bm.rows() != 1 || bm.cols() != xm.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                lhs_rows: xm.rows(),
                lhs_cols: xm.cols(),
                rhs_rows: bm.rows(),
                rhs_cols: bm.cols(),
            });
        }
        let mut v = xm.clone();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(bm.row(0)) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddBiasRow(x, bias)))
    }

    pub fn softmax_rows(&mut self, x: Var, scale: f64) -> Var {
        let v = softmax_rows(self.value(x).clone(), scale);
        self.push(v, Op::Softmax { x, scale })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = layer_norm(
            self.value(x).clone(),
            self.value(gamma).row(0),
            self.value(beta).row(0),
            eps,
        )?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = gelu(self.value(x).clone());
        self.push(v, Op::Gelu(x))
    }

    pub fn segment_mean(&mut self, x: Var, ids: Rc<Vec<usize>>, n_segments: usize) -> Result<Var> {
        let xm = self.value(x);
        if ids.len() != xm.rows() {
            return Err(Error::LengthMismatch {
                what: "segment ids",
                expected: xm.rows(),
                got: ids.len(),
            });
        }
        let mut counts = vec![0usize; n_segments];
        let mut out = Matrix::zeros(n_segments, xm.cols());
        for (i, &s) in ids.iter().enumerate() {
            counts[s] += 1;
            for (o, &v) in out.row_mut(s).iter_mut().zip(xm.row(i)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(Error::EmptyInput("segment with no members"));
            }
            let inv = 1.0 / c as f64;
            for o in out.row_mut(s) {
                *o *= inv;
            }
        }
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                ids,
                counts: Rc::new(counts),
            },
        ))
    }

    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Result<Var> {
        let v = Matrix::concat_rows(self.value(top), self.value(bottom))?;
        Ok(self.push(v, Op::ConcatRows(top, bottom)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total_cols);
        let mut col = 0;
        for &p in parts {
            let pm = self.value(p);
            if pm.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs_rows: rows,
                    lhs_cols: total_cols,
                    rhs_rows: pm.rows(),
                    rhs_cols: pm.cols(),
                });
            }
            for i in 0..rows {
                out.row_mut(i)[col..col + pm.cols()].copy_from_slice(pm.row(i));
            }
            col += pm.cols();
        }
        Ok(self.push(out, Op::ConcatCols(Rc::new(parts.to_vec()))))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        self.push(v, Op::SliceRows { x, start, len })
    }

    pub fn identity_minus(&mut self, c: f64, x: Var) -> Result<Var> {
        let xm = self.value(x);
        let v = Matrix::identity(xm.rows()).scale(c).sub(xm)?;
        Ok(self.push(v, Op::IdentityMinus { x }))
    }

    pub fn pinv_init(&mut self, a: Var) -> Result<Var> {
        let v = pinv_init(self.value(a))?;
        Ok(self.push(v, Op::PinvInit(a)))
    }

    pub fn pinv_oracle(&mut self, a: Var) -> Var {
        let v = pinv_oracle(self.value(a));
        self.push(v, Op::PinvOracle)
    }

    /// Unrolled iterative pseudoinverse; differentiable through every step.
    pub fn pinv_iterative(&mut self, a: Var, iters: usize) -> Result<Var> {
        assert!(iters >= 1);
        let mut z = self.pinv_init(a)?;
        for _ in 0..iters {
            let az = self.matmul(a, z)?;
            let t1 = self.identity_minus(7.0, az)?;
            let t2 = self.matmul(az, t1)?;
            let t3 = self.identity_minus(15.0, t2)?;
            let t4 = self.matmul(az, t3)?;
            let t5 = self.identity_minus(13.0, t4)?;
            let zt = self.matmul(z, t5)?;
            z = self.scale(zt, 0.25);
        }
        Ok(z)
    }

    /// Reverse pass from `seed` (the cotangent of `output`). Returns one
    /// gradient slot per node; untouched nodes stay `None`.
    pub fn backward(&self, output: Var, seed: Matrix) -> Result<Vec<Option<Matrix>>> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        {
            let out_val = self.value(output);
            assert_eq!(
                (seed.rows(), seed.cols()),
                (out_val.rows(), out_val.cols()),
                "seed shape must match output shape"
            );
        }
        grads[output.0] = Some(seed);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&g, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &g)?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::MatMulNT(a, b) => {
                    let da = matmul(&g, self.value(*b))?;
                    let db = matmul_tn(&g, self.value(*a))?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone())?;
                    accumulate(&mut grads[b.0], g)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[a.0], g.scale(*c))?;
                }
                Op::AddBiasRow(x, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], db)?;
                    accumulate(&mut grads[x.0], g)?;
                }
                Op::Softmax { x, scale } => {
                    let y = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (&yv, &gv)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = scale * yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let d = xv.cols() as f64;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dgamma = Matrix::zeros(1, xv.cols());
                    let mut dbeta = Matrix::zeros(1, xv.cols());
                    for i in 0..xv.rows() {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let gr = g.row(i);
                        // gg = g .* gamma; m1 = mean(gg); m2 = mean(gg .* xhat)
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..xv.cols() {
                            let xhat = (row[j] - mean) * inv_std;
                            let gg = gr[j] * gv.get(0, j);
                            m1 += gg;
                            m2 += gg * xhat;
                        }
                        m1 /= d;
                        m2 /= d;
                        for j in 0..xv.cols() {
                            let xhat = (row[j] - mean) * inv_std;
                            let gg = gr[j] * gv.get(0, j);
                            dx.set(i, j, (gg - m1 - xhat * m2) * inv_std);
                            dgamma.set(0, j, dgamma.get(0, j) + gr[j] * xhat);
                            dbeta.set(0, j, dbeta.get(0, j) + gr[j]);
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                    accumulate(&mut grads[gamma.0], dgamma)?;
                    accumulate(&mut grads[beta.0], dbeta)?;
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for i in 0..xv.rows() {
                        for (o, &v) in dx.row_mut(i).iter_mut().zip(xv.row(i)) {
                            *o *= gelu_grad(v);
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::SegmentMean { x, ids, counts } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (i, &s) in ids.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for (o, &gv) in dx.row_mut(i).iter_mut().zip(g.row(s)) {
                            *o = gv * inv;
                        }
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::ConcatRows(top, bottom) => {
                    let nt = self.value(*top).rows();
                    let nb = self.value(*bottom).rows();
                    accumulate(&mut grads[top.0], g.slice_rows(0, nt))?;
                    accumulate(&mut grads[bottom.0], g.slice_rows(nt, nb))?;
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts.iter() {
                        let pc = self.value(p).cols();
                        let mut dp = Matrix::zeros(g.rows(), pc);
                        for i in 0..g.rows() {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[col..col + pc]);
                        }
                        accumulate(&mut grads[p.0], dp)?;
                        col += pc;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..*len {
                        dx.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::IdentityMinus { x } => {
                    accumulate(&mut grads[x.0], g.scale(-1.0))?;
                }
                Op::PinvInit(a) => {
                    let av = self.value(*a);
                    let n1 = av.norm_one();
                    let ninf = av.norm_inf();
                    let s = 1.0 / (n1 * ninf);
                    // value = a^T * s with s = 1/(n1 * ninf); the norms are
                    // piecewise differentiable through their arg-max row and
                    // column.
                    let mut t = 0.0; // sum_ij g_ij a_ji
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            t += g.get(i, j) * av.get(j, i);
                        }
                    }
                    let mut da = g.transpose().scale(s);
                    // d n1 / d a: sign at the arg-max column; d ninf: arg-max row
                    let jmax = argmax_abs_col_sum(av);
                    let imax = argmax_abs_row_sum(av);
                    let coef = -t * s;
                    for i in 0..av.rows() {
                        let v = da.get(i, jmax) + coef / n1 * av.get(i, jmax).signum_or_zero();
                        da.set(i, jmax, v);
                    }
                    for j in 0..av.cols() {
                        let v = da.get(imax, j) + coef / ninf * av.get(imax, j).signum_or_zero();
                        da.set(imax, j, v);
                    }
                    accumulate(&mut grads[a.0], da)?;
                }
                Op::PinvOracle => {
                    return Err(Error::NotDifferentiable(
                        "oracle pseudoinverse has no backward pass; use the iterative scheme",
                    ));
                }
            }
            grads[idx] = None;
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Matrix>, m: Matrix) -> Result<()> {
    match slot {
        Some(existing) => {
            *slot = Some(existing.add(&m)?);
        }
        None => *slot = Some(m),
    }
    Ok(())
}

fn argmax_abs_col_sum(a: &Matrix) -> usize {
    let mut sums = vec![0.0; a.cols()];
    for i in 0..a.rows() {
        for (j, v) in a.row(i).iter().enumerate() {
            sums[j] += v.abs();
        }
    }
    sums.iter()
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
        .map(|(j, _)| j)
        .unwrap()
}

fn argmax_abs_row_sum(a: &Matrix) -> usize {
    (0..a.rows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}
