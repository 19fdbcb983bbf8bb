//! Low-rank weight perturbation of a frozen base layer.
//!
//! A task's layer weights are expressed as `diag(r) * W_base * diag(s) + B`
//! where B is the residual left after the two diagonal scalings. The r and s
//! vectors come from closed-form least-squares solutions (one alternating
//! pass: r, then s, then the exact residual), and B is stored through its
//! truncated SVD. Convolution kernels get the same treatment with the sums
//! running over the spatial dimensions and the residual averaged down to an
//! out-by-in matrix that is broadcast back over all kernel positions.

use crate::error::{Error, Result};
use crate::linalg::{self, LowRankFactors, Matrix, SVDFactors, Tensor4};

/// Per-layer task-private parameters: row/column scales plus the truncated
/// residual factors.
#[derive(Debug, Clone)]
pub struct TaskLayerParams {
    pub layer_index: usize,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub low_rank: LowRankFactors,
    pub k: usize,
}

/// Everything stored for one task: layer params in base-layer order,
/// task-private bias vectors, and the classifier head.
#[derive(Debug, Clone)]
pub struct TaskPrivateParams {
    pub task_id: usize,
    pub layers: Vec<TaskLayerParams>,
    pub biases: Vec<Vec<f64>>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Row scales: r_j = (Σ_i wf_ji · wb_ji) / (Σ_i wb_ji²). Rows whose base
/// entries are all zero fall back to 1 so the residual stays exact.
pub fn solve_r(w_free: &Matrix, w_base: &Matrix) -> Result<Vec<f64>> {
    check_same_shape(w_free, w_base)?;
    let mut r = Vec::with_capacity(w_base.rows());
    for j in 0..w_base.rows() {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..w_base.cols() {
            let wb = w_base.get(j, i);
            num += w_free.get(j, i) * wb;
            den += wb * wb;
        }
        r.push(if den == 0.0 { 1.0 } else { num / den });
    }
    Ok(r)
}

/// Column scales with r fixed: s_i = (Σ_j r_j·wf_ji·wb_ji) / (Σ_j (r_j·wb_ji)²),
/// with the same all-zero-denominator fallback to 1.
pub fn solve_s(w_free: &Matrix, w_base: &Matrix, r: &[f64]) -> Result<Vec<f64>> {
    check_same_shape(w_free, w_base)?;
    if r.len() != w_base.rows() {
        return Err(Error::ShapeMismatch(format!(
            "r has length {}, expected {}",
            r.len(),
            w_base.rows()
        )));
    }
    let mut s = Vec::with_capacity(w_base.cols());
    for i in 0..w_base.cols() {
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, &rj) in r.iter().enumerate() {
            let scaled = rj * w_base.get(j, i);
            num += scaled * w_free.get(j, i);
            den += scaled * scaled;
        }
        s.push(if den == 0.0 { 1.0 } else { num / den });
    }
    Ok(s)
}

/// Exact residual B = W_free − diag(r)·W_base·diag(s).
pub fn residual_b(w_free: &Matrix, w_base: &Matrix, r: &[f64], s: &[f64]) -> Matrix {
    Matrix::from_fn(w_base.rows(), w_base.cols(), |j, i| {
        w_free.get(j, i) - r[j] * w_base.get(j, i) * s[i]
    })
}

/// One alternating pass for a dense layer: r, then s, then SVD of the
/// residual.
pub fn decompose_fc(w_free: &Matrix, w_base: &Matrix) -> Result<(Vec<f64>, Vec<f64>, SVDFactors)> {
    let r = solve_r(w_free, w_base)?;
    let s = solve_s(w_free, w_base, &r)?;
    let b = residual_b(w_free, w_base, &r, &s);
    let factors = linalg::svd(&b)?;
    Ok((r, s, factors))
}

/// Convolutional variant. The scales solve the same least-squares problems
/// with sums running over both spatial dimensions as well; the residual is
/// averaged over the kernel positions down to an out-by-in matrix before the
/// SVD, and reconstruction broadcasts that matrix back to every position.
pub fn decompose_conv(
    w_free: &Tensor4,
    w_base: &Tensor4,
) -> Result<(Vec<f64>, Vec<f64>, SVDFactors)> {
    if w_free.dims() != w_base.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            w_free.dims(),
            w_base.dims()
        )));
    }
    let (kh, kw, out_ch, in_ch) = w_base.dims();

    let mut r = Vec::with_capacity(out_ch);
    for j in 0..out_ch {
        let mut num = 0.0;
        let mut den = 0.0;
        for h in 0..kh {
            for w in 0..kw {
                for i in 0..in_ch {
                    let wb = w_base.get(h, w, j, i);
                    num += w_free.get(h, w, j, i) * wb;
                    den += wb * wb;
                }
            }
        }
        r.push(if den == 0.0 { 1.0 } else { num / den });
    }

    let mut s = Vec::with_capacity(in_ch);
    for i in 0..in_ch {
        let mut num = 0.0;
        let mut den = 0.0;
        for h in 0..kh {
            for w in 0..kw {
                for (j, &rj) in r.iter().enumerate() {
                    let scaled = rj * w_base.get(h, w, j, i);
                    num += scaled * w_free.get(h, w, j, i);
                    den += scaled * scaled;
                }
            }
        }
        s.push(if den == 0.0 { 1.0 } else { num / den });
    }

    let inv = 1.0 / (kh * kw) as f64;
    let avg_residual = Matrix::from_fn(out_ch, in_ch, |j, i| {
        let mut acc = 0.0;
        for h in 0..kh {
            for w in 0..kw {
                acc += w_free.get(h, w, j, i) - r[j] * w_base.get(h, w, j, i) * s[i];
            }
        }
        acc * inv
    });
    let factors = linalg::svd(&avg_residual)?;
    Ok((r, s, factors))
}

/// Materialize dense task weights: diag(r)·W_base·diag(s) + U_k·diag(σ_k)·V_kᵀ.
pub fn reconstruct_weights(w_base: &Matrix, p: &TaskLayerParams) -> Matrix {
    let b = p.low_rank.reconstruct();
    Matrix::from_fn(w_base.rows(), w_base.cols(), |j, i| {
        p.r[j] * w_base.get(j, i) * p.s[i] + b.get(j, i)
    })
}

/// Materialize conv task weights, broadcasting the out-by-in residual over
/// every kernel position.
pub fn reconstruct_conv_weights(w_base: &Tensor4, p: &TaskLayerParams) -> Tensor4 {
    let (kh, kw, out_ch, in_ch) = w_base.dims();
    let b = p.low_rank.reconstruct();
    Tensor4::from_fn(kh, kw, out_ch, in_ch, |h, w, j, i| {
        p.r[j] * w_base.get(h, w, j, i) * p.s[i] + b.get(j, i)
    })
}

/// Extra parameters stored per task for one layer: r (J) + s (I) + U (Jk)
/// + σ (k) + V (Ik) = (I+J)(k+1) + k.
pub fn param_count(out_dim: usize, in_dim: usize, k: usize) -> usize {
    (in_dim + out_dim) * (k + 1) + k
}

/// Per-layer increment ratio: added parameters over the base layer's J·I.
pub fn increment_ratio(out_dim: usize, in_dim: usize, k: usize) -> f64 {
    param_count(out_dim, in_dim, k) as f64 / (out_dim * in_dim) as f64
}
