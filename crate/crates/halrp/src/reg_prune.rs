//! Regularization and pruning of task-private parameters.
//!
//! The fine-tuning objective adds an L1 penalty on the low-rank factors U and
//! V (to push them sparse) and an L2 penalty on r, s, U and V. The sigma
//! vector, biases and heads are left unregularized. Pruning zeroes low-rank
//! entries below a threshold chosen by absolute value, by a nearest-rank
//! percentile over the pooled entries of all tasks, or by the maximum of the
//! two.

use crate::error::{Error, Result};
use crate::perturb::{TaskLayerParams, TaskPrivateParams};

/// Balancing coefficients: lambda0 scales the L1 term, lambda1 the L2 term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegCoefficients {
    pub lambda0: f64,
    pub lambda1: f64,
}

impl RegCoefficients {
    pub fn new(lambda0: f64, lambda1: f64) -> Self {
        assert!(lambda0 >= 0.0 && lambda1 >= 0.0 && lambda0.is_finite() && lambda1.is_finite());
        RegCoefficients { lambda0, lambda1 }
    }
}

/// Threshold policy for pruning low-rank entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    Absolute,
    Percentile,
    Mixed,
}

/// Pruning configuration. `tau` is the absolute threshold, `gamma` the target
/// retention fraction for the percentile policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneSpec {
    pub mode: PruneMode,
    pub tau: f64,
    pub gamma: f64,
}

/// Default absolute threshold.
pub const DEFAULT_PRUNE_TAU: f64 = 1e-5;

fn l1_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.abs()).sum()
}

fn sq_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum()
}

/// Regularization loss over one layer's task-private parameters.
pub fn reg_loss_layer(p: &TaskLayerParams, c: &RegCoefficients) -> f64 {
    let u = p.low_rank.u_k.data();
    let v = p.low_rank.v_k.data();
    c.lambda0 * (l1_norm(u) + l1_norm(v))
        + c.lambda1 * (sq_norm(&p.r) + sq_norm(&p.s) + sq_norm(u) + sq_norm(v))
}

/// Total regularization loss over a task's layers. Sigma, biases and the head
/// do not contribute.
pub fn reg_loss(params: &TaskPrivateParams, c: &RegCoefficients) -> f64 {
    params.layers.iter().map(|p| reg_loss_layer(p, c)).sum()
}

/// Subgradient of the penalty with respect to a U or V entry:
/// lambda0·sign(x) + 2·lambda1·x, with sign(0) = 0.
pub fn uv_subgrad(x: f64, c: &RegCoefficients) -> f64 {
    let sign = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    c.lambda0 * sign + 2.0 * c.lambda1 * x
}

/// Subgradient with respect to an r or s entry: 2·lambda1·x.
pub fn rs_subgrad(x: f64, c: &RegCoefficients) -> f64 {
    2.0 * c.lambda1 * x
}

/// Zero every entry with |x| strictly below tau.
pub fn prune_absolute(values: &mut [f64], tau: f64) {
    assert!(tau > 0.0, "pruning threshold must be positive");
    for v in values.iter_mut() {
        if v.abs() < tau {
            *v = 0.0;
        }
    }
}

/// Nearest-rank (1-gamma)-percentile of the pooled absolute values. Pruning
/// strictly below the returned threshold keeps at least a gamma fraction of
/// the entries.
pub fn prune_percentile(pool: &[f64], gamma: f64) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    let mut abs: Vec<f64> = pool.iter().map(|x| x.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = abs.len();
    let rank = ((1.0 - gamma) * n as f64).ceil() as usize;
    let idx = rank.max(1) - 1;
    Ok(abs[idx])
}

/// Mixed policy: absolute pruning at max(tau, percentile threshold).
pub fn prune_mixed(values: &mut [f64], tau: f64, gamma: f64) -> Result<f64> {
    let tau_p = prune_percentile(values, gamma)?;
    let threshold = tau.max(tau_p);
    if threshold > 0.0 {
        prune_absolute(values, threshold);
    }
    Ok(threshold)
}
