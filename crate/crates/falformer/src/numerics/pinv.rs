//! Moore-Penrose pseudoinverse.
//!
//! Two routes:
//! - `pinv_iterative`: a Newton-Schulz-style third-order polynomial fixed
//!   point, initialized with `a^T / (|a|_1 * |a|_inf)`. Every step is a
//!   composition of matrix products, so the whole thing is differentiable
//!   when unrolled; this is the route the training path uses.
//! - `pinv_oracle`: one-sided Jacobi SVD with rank truncation. Slow and
//!   rock solid; used by tests and benchmarks only, never in training.

use super::{matmul, matmul_nt, Matrix};
use crate::error::{Error, Result};

/// Initialization for the iterative scheme: `a^T` scaled by
/// `1 / (|a|_1 * |a|_inf)`, which guarantees the spectrum of `a * z0` lies
/// in (0, 1].
pub(crate) fn pinv_init(a: &Matrix) -> Result<Matrix> {
    let n1 = a.norm_one();
    let ninf = a.norm_inf();
    if n1 == 0.0 || ninf == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    Ok(a.transpose().scale(1.0 / (n1 * ninf)))
}

/// One iteration step: `z * (13 I - az * (15 I - az * (7 I - az))) / 4`
/// where `az = a * z`. Third-order convergence to `a^+`.
pub(crate) fn pinv_step(a: &Matrix, z: &Matrix) -> Result<Matrix> {
    let az = matmul(a, z)?;
    let n = az.rows();
    let t1 = Matrix::identity(n).scale(7.0).sub(&az)?;
    let t2 = matmul(&az, &t1)?;
    let t3 = Matrix::identity(n).scale(15.0).sub(&t2)?;
    let t4 = matmul(&az, &t3)?;
    let t5 = Matrix::identity(n).scale(13.0).sub(&t4)?;
    Ok(matmul(z, &t5)?.scale(0.25))
}

/// Iterative pseudoinverse of `a` with `iters` unrolled steps.
pub fn pinv_iterative(a: &Matrix, iters: usize) -> Result<Matrix> {
    assert!(iters >= 1, "pinv_iterative requires at least one iteration");
    let mut z = pinv_init(a)?;
    for _ in 0..iters {
        z = pinv_step(a, &z)?;
    }
    Ok(z)
}

/// Singular value decomposition by one-sided Jacobi rotations.
///
/// Returns `(u, sigma, v)` with `a = u * diag(sigma) * v^T`; `u` is
/// `rows x k`, `v` is `cols x k` with `k = min(rows, cols)`.
fn jacobi_svd(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    if a.rows() < a.cols() {
        let (u, s, v) = jacobi_svd(&a.transpose());
        return (v, s, u);
    }
    let m = a.rows();
    let n = a.cols();
    // Work on columns of `w`; accumulate rotations into `v`.
    let mut w = a.clone();
    let mut v = Matrix::identity(n);
    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    w.set(i, p, c * wp - s * wq);
                    w.set(i, q, s * wp + c * wq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = vec![0.0; n];
    let mut u = Matrix::zeros(m, n);
    for j in 0..n {
        let norm = (0..m).map(|i| w.get(i, j) * w.get(i, j)).sum::<f64>().sqrt();
        sigma[j] = norm;
        if norm > 0.0 {
            for i in 0..m {
                u.set(i, j, w.get(i, j) / norm);
            }
        }
    }
    (u, sigma, v)
}

/// Decomposition-based pseudoinverse with rank truncation at
/// `sigma_max * max(rows, cols) * 1e-14`.
pub fn pinv_oracle(a: &Matrix) -> Matrix {
    let (u, sigma, v) = jacobi_svd(a);
    let smax = sigma.iter().fold(0.0_f64, |m, &s| m.max(s));
    if smax == 0.0 {
        return Matrix::zeros(a.cols(), a.rows());
    }
    let cutoff = smax * a.rows().max(a.cols()) as f64 * 1e-14;
    // a^+ = v * diag(1/sigma) * u^T, dropping directions below the cutoff.
    let k = sigma.len();
    let mut v_scaled = Matrix::zeros(v.rows(), k);
    for j in 0..k {
        if sigma[j] > cutoff {
            let inv = 1.0 / sigma[j];
            for i in 0..v.rows() {
                v_scaled.set(i, j, v.get(i, j) * inv);
            }
        }
    }
    matmul_nt(&v_scaled, &u).expect("pinv_oracle inner shapes")
}

/// The four Penrose residuals of `z` as a candidate pseudoinverse of `a`,
/// each normalized: `|aza - a|/|a|`, `|zaz - z|/|z|`, `|az - (az)^T|/|az|`,
/// `|za - (za)^T|/|za|`.
pub fn penrose_residuals(a: &Matrix, z: &Matrix) -> Result<[f64; 4]> {
    let az = matmul(a, z)?;
    let za = matmul(z, a)?;
    let aza = matmul(&az, a)?;
    let zaz = matmul(&za, z)?;
    let rel = |num: f64, den: f64| if den == 0.0 { num } else { num / den };
    Ok([
        rel(aza.sub(a)?.frobenius_norm(), a.frobenius_norm()),
        rel(zaz.sub(z)?.frobenius_norm(), z.frobenius_norm()),
        rel(az.sub(&az.transpose())?.frobenius_norm(), az.frobenius_norm()),
        rel(za.sub(&za.transpose())?.frobenius_norm(), za.frobenius_norm()),
    ])
}
