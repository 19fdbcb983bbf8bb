//! Gradient-weighted rank selection.
//!
//! The damage a rank truncation does to the loss is bounded by the layer
//! Hessian norm times the squared singular-value tail. Approximating the
//! Hessian norm by the squared gradient norm (the Frobenius norm of the
//! empirical Fisher outer product) gives each candidate rank a scalar
//! importance `‖g_l‖₂² · σ_{l,i}²`. Ranks are then granted greedily, largest
//! importance first, until a fraction alpha of the total importance mass is
//! covered.

use crate::error::{Error, Result};
use crate::linalg::{self, frobenius_norm, Matrix};

/// One candidate rank: the i-th singular direction of layer `layer_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceItem {
    pub layer_index: usize,
    /// 1-based position within the layer's spectrum.
    pub rank_index: usize,
    pub score: f64,
}

/// Result of the greedy budget solve.
#[derive(Debug, Clone)]
pub struct RankBudget {
    pub alpha: f64,
    pub k_per_layer: Vec<usize>,
    pub total_score: f64,
    pub selected_score: f64,
}

/// Squared L2 norm of a flattened gradient. Equal to the Frobenius norm of
/// the outer product g·gᵀ, which is the empirical-Fisher stand-in for ‖H‖_F.
pub fn fisher_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum()
}

/// Expand per-layer squared gradient norms and residual spectra into one
/// importance item per (layer, rank). Within a layer the scores inherit the
/// descending order of the singular values.
pub fn importance_scores(grad_norms_sq: &[f64], spectra: &[Vec<f64>]) -> Vec<ImportanceItem> {
    assert_eq!(
        grad_norms_sq.len(),
        spectra.len(),
        "one gradient norm per spectrum"
    );
    let mut items = Vec::new();
    for (layer_index, (gn, sigma)) in grad_norms_sq.iter().zip(spectra).enumerate() {
        for (idx, &sv) in sigma.iter().enumerate() {
            items.push(ImportanceItem {
                layer_index,
                rank_index: idx + 1,
                score: gn * sv * sv,
            });
        }
    }
    items
}

/// Greedy rank selection: sort all items by descending score (ties broken by
/// lower layer index, then lower rank index) and keep taking items until the
/// selected mass reaches `alpha` of the total. Because per-layer scores are
/// non-increasing in rank and the tie rule is positional, the selected items
/// always form a leading prefix in every layer, so `k_per_layer` is just the
/// per-layer count.
pub fn select_ranks(
    items: &[ImportanceItem],
    alpha: f64,
    r_per_layer: &[usize],
) -> Result<RankBudget> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    for it in items {
        if it.layer_index >= r_per_layer.len() || it.rank_index > r_per_layer[it.layer_index] {
            return Err(Error::InvalidInput(format!(
                "item (layer {}, rank {}) outside the declared layer ranks",
                it.layer_index, it.rank_index
            )));
        }
        if it.score.is_nan() || it.score < 0.0 {
            return Err(Error::InvalidInput(format!(
                "importance scores must be nonnegative, got {}",
                it.score
            )));
        }
    }

    let mut order: Vec<&ImportanceItem> = items.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.layer_index.cmp(&b.layer_index))
            .then(a.rank_index.cmp(&b.rank_index))
    });

    // Summing the total in the same (sorted) order the greedy accumulates in
    // makes "selected everything" reach the total bit-for-bit even at
    // alpha = 1.
    let total_score: f64 = {
        let mut acc = 0.0;
        for it in &order {
            acc += it.score;
        }
        acc
    };
    let threshold = alpha * total_score;

    let mut k_per_layer = vec![0usize; r_per_layer.len()];
    let mut selected_score = 0.0f64;
    for it in &order {
        if selected_score >= threshold {
            break;
        }
        selected_score += it.score;
        k_per_layer[it.layer_index] += 1;
    }

    Ok(RankBudget {
        alpha,
        k_per_layer,
        total_score,
        selected_score,
    })
}

/// Half of Hessian norm times squared perturbation size: the bound's leading
/// term, used ordinally (the o(·) remainder is not estimated).
pub fn loss_perturbation_bound(h_norm: f64, sigma_tail_sq: f64) -> f64 {
    debug_assert!(h_norm >= 0.0 && sigma_tail_sq >= 0.0);
    0.5 * h_norm * sigma_tail_sq
}

/// Numerical check of the quadratic-loss perturbation bound. For
/// L(w) = ½ (w−w*)ᵀ H (w−w*) with H symmetric PSD, returns
/// (actual, bound) = (L(w*−δ) − L(w*), ½‖H‖_F‖δ‖²). The remainder vanishes
/// for quadratics, so actual ≤ bound holds without slack.
pub fn verify_quadratic_bound(h: &Matrix, w_star: &[f64], delta: &[f64]) -> Result<(f64, f64)> {
    let n = h.rows();
    if h.cols() != n {
        return Err(Error::InvalidInput("hessian must be square".into()));
    }
    if w_star.len() != n || delta.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "hessian is {n}x{n} but w* has length {} and delta {}",
            w_star.len(),
            delta.len()
        )));
    }
    let eig = linalg::symmetric_eigenvalues(h).map_err(|_| Error::NotPsd)?;
    let lead = eig.first().copied().unwrap_or(0.0).abs().max(1.0);
    if eig.last().copied().unwrap_or(0.0) < -1e-8 * lead {
        return Err(Error::NotPsd);
    }

    // L(w* − δ) − L(w*) = ½ δᵀ H δ.
    let mut hd = vec![0.0f64; n];
    for (r, out) in hd.iter_mut().enumerate() {
        for (c, &d) in delta.iter().enumerate() {
            *out += h.get(r, c) * d;
        }
    }
    let actual = 0.5 * delta.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>();
    let bound = 0.5 * frobenius_norm(h) * delta.iter().map(|x| x * x).sum::<f64>();
    Ok((actual, bound))
}
