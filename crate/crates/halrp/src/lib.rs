//! Continual learning with Hessian-aware low-rank weight perturbations.
//!
//! A base network is trained on the first task and frozen. Every later task
//! stores only a diagonal-scaled transform of the base weights plus a
//! truncated-SVD residual per layer: `W_t = diag(r)·W_base·diag(s) +
//! U·diag(σ)·Vᵀ`. The scales come from closed-form least squares against a
//! briefly warm-up-trained copy of the network, and the retained ranks are
//! chosen globally by greedy coverage of gradient-weighted singular-value
//! importance, so layers whose truncation would hurt the loss most keep more
//! ranks. Because the base never changes and task parameters are private,
//! earlier tasks are reproduced exactly unless pruning is enabled.
//!
//! Module map:
//! - [`linalg`]: dense matrices, one-sided Jacobi SVD, truncation and the
//!   exact tail-error identity.
//! - [`nn`]: a small deterministic training core (dense/conv/relu/pool) with
//!   both free and low-rank-reparameterized layers and plain SGD.
//! - [`perturb`]: the closed-form decomposition, its convolutional variant,
//!   reconstruction, and parameter accounting.
//! - [`rank_select`]: Fisher-style importance scores, the greedy rank
//!   budget, and a numerical verifier for the quadratic perturbation bound.
//! - [`reg_prune`]: the L1/L2 penalty on task-private parameters and three
//!   pruning policies.
//! - [`cl_engine`]: the per-task pipeline (warm-up, decompose, select,
//!   fine-tune, prune) plus single-task and sequential-fine-tuning reference
//!   modes.
//! - [`tasks`]: deterministic synthetic task generators, task orders, and
//!   the dataset file format.
//! - [`metrics`]: accuracy matrix, backward transfer, order-disparity
//!   statistics, and increment reporting.
//! - [`cli`]: config files, checkpoints, result emission, and the functions
//!   behind the `halrp` binary.
//! - [`verify`]: self-contained oracle suites (`halrp verify`).
//!
//! The runnable examples under `examples/` walk through each capability;
//! start with `continual_run` and `forgetting_contrast`.

// Index-style loops mirror the matrix math throughout the kernels.
#![allow(clippy::needless_range_loop)]

pub mod cl_engine;
pub mod cli;
pub mod error;
mod hash;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod perturb;
pub mod rank_select;
pub mod reg_prune;
pub mod rng;
pub mod tasks;
pub mod verify;
