//! Rectified Adam.
//!
//! The variance-rectification term rho_t decides the branch: while
//! rho_t <= 4 the update is plain bias-corrected momentum with no adaptive
//! scaling; beyond that the step is rescaled by the rectification factor.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Matrix;
use crate::training::Gradients;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for RadamHyper {
    fn default() -> Self {
        RadamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment accumulators mirroring the parameter tensors, plus
/// the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub hyper: RadamHyper,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, hyper: RadamHyper) -> OptimizerState {
        let zeros: Vec<Matrix> = params
            .tensor_list()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        OptimizerState {
            step: 0,
            hyper,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// rho_t for a given step (1-based).
    pub fn rho_t(beta2: f64, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let b2t = beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Whether step `t` takes the rectified (adaptive) branch.
    pub fn rectified_at(beta2: f64, t: u64) -> bool {
        Self::rho_t(beta2, t) > 4.0
    }
}

/// One optimizer step over every parameter tensor.
pub fn radam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    let tensors = params.tensor_list_mut();
    if tensors.len() != grads.tensors.len() || tensors.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            what: "optimizer tensor count",
            expected: tensors.len(),
            got: grads.tensors.len().min(state.m.len()),
        });
    }
    for (i, g) in grads.tensors.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                tensor: grads.names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let h = state.hyper;
    let bias1 = 1.0 - h.beta1.powi(t as i32);
    let bias2 = 1.0 - h.beta2.powi(t as i32);
    let rho_inf = 2.0 / (1.0 - h.beta2) - 1.0;
    let rho_t = OptimizerState::rho_t(h.beta2, t);
    let rectified = rho_t > 4.0;
    let r_t = if rectified {
        (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            .sqrt()
    } else {
        0.0
    };
    for (i, theta) in tensors.into_iter().enumerate() {
        let g = &grads.tensors[i];
        if g.rows() != theta.rows() || g.cols() != theta.cols() {
            return Err(Error::ShapeMismatch {
                op: "radam_step",
                lhs_rows: theta.rows(),
                lhs_cols: theta.cols(),
                rhs_rows: g.rows(),
                rhs_cols: g.cols(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let td = theta.data_mut();
        for j in 0..td.len() {
            let gj = g.data()[j];
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
            let m_hat = m[j] / bias1;
            let update = if rectified {
                let v_hat = (v[j] / bias2).sqrt();
                r_t * m_hat / (v_hat + h.eps)
            } else {
                m_hat
            };
            td[j] -= h.lr * update;
            if h.weight_decay > 0.0 {
                td[j] -= h.lr * h.weight_decay * td[j];
            }
        }
    }
    Ok(())
}
