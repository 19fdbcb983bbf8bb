//! Continual-learning orchestration.
//!
//! The main mode trains a base network on the first task and freezes it. Each
//! later task runs: warm-up training from the base weights, closed-form
//! decomposition of every layer against the base, a full-train-set gradient
//! pass for the Fisher scores, global rank selection, re-initialization from
//! the truncated factors, regularized fine-tuning of the task-private
//! parameters, and optionally pruning once the parameter growth passes its
//! trigger. Two reference modes bracket the behavior: independent
//! single-task models, and naive sequential fine-tuning of one shared trunk.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::linalg::Matrix;
use crate::metrics::{self, AccuracyMatrix, IncrementReport, LayerRank};
use crate::nn::{train, Batch, Head, LayerSpec, LayerWeights, Network, Shape, TaskId, TrainOpts};
use crate::perturb::{self, TaskLayerParams, TaskPrivateParams};
use crate::rank_select::{importance_scores, select_ranks};
use crate::reg_prune::{self, PruneMode, PruneSpec, RegCoefficients};
use crate::rng::Rng;
use crate::tasks::TaskDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Halrp,
    Stl,
    SeqFinetune,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Halrp => "halrp",
            Mode::Stl => "stl",
            Mode::SeqFinetune => "seq_finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "halrp" => Ok(Mode::Halrp),
            "stl" => Ok(Mode::Stl),
            "seq_finetune" => Ok(Mode::SeqFinetune),
            other => Err(Error::InvalidInput(format!(
                "unknown mode {other:?} (expected halrp, stl or seq_finetune)"
            ))),
        }
    }
}

/// Experiment hyperparameters. Defaults: 20 epochs per task with one
/// warm-up epoch, alpha 0.9, lr 1e-3, both penalty coefficients 1e-4,
/// batch size 128, pruning off.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Total epochs per task (n).
    pub epochs: usize,
    /// Warm-up epochs before decomposition (n_r).
    pub warmup_epochs: usize,
    /// Importance-mass coverage for rank selection.
    pub alpha: f64,
    pub lr: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// None disables pruning.
    pub prune: Option<PruneSpec>,
    /// Cumulative increment ratio beyond which pruning fires (p).
    pub prune_trigger: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Halrp,
            epochs: 20,
            warmup_epochs: 1,
            alpha: 0.9,
            lr: 1e-3,
            lambda0: 1e-4,
            lambda1: 1e-4,
            batch_size: 128,
            seed: 0,
            prune: None,
            prune_trigger: 1.0,
        }
    }
}

impl ExperimentConfig {
    /// Checks ranges before a full sequence run.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidInput(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lambda0 >= 0.0 && self.lambda1 >= 0.0) {
            return Err(Error::InvalidInput("bad lr or lambda values".into()));
        }
        if self.mode == Mode::Halrp && (self.warmup_epochs < 1 || self.warmup_epochs > self.epochs)
        {
            return Err(Error::InvalidInput(format!(
                "warm-up epochs must satisfy 1 <= n_r <= n, got n_r = {}, n = {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if let Some(p) = &self.prune {
            if p.tau <= 0.0 && matches!(p.mode, PruneMode::Absolute | PruneMode::Mixed) {
                return Err(Error::InvalidInput("prune tau must be positive".into()));
            }
            if !(p.gamma > 0.0 && p.gamma <= 1.0)
                && matches!(p.mode, PruneMode::Percentile | PruneMode::Mixed)
            {
                return Err(Error::InvalidInput("prune gamma must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Model storage per mode.
#[derive(Debug, Clone)]
pub enum ModelState {
    Halrp {
        base: Network,
        tasks: Vec<TaskPrivateParams>,
    },
    SingleTask {
        nets: Vec<Network>,
    },
    SeqFinetune {
        net: Network,
    },
}

/// A pruning application, recorded for the run report.
#[derive(Debug, Clone, Serialize)]
pub struct PruneEvent {
    pub after_task: usize,
    pub threshold: f64,
    pub zeroed: usize,
    pub pool_size: usize,
}

/// Full state of a continual run.
#[derive(Debug, Clone)]
pub struct ContinualState {
    pub config: ExperimentConfig,
    pub model: ModelState,
    pub history: AccuracyMatrix,
    /// Canonical dataset identity per trained position.
    pub task_ids: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub warnings: Vec<String>,
    pub prune_events: Vec<PruneEvent>,
    test_sets: Vec<Batch>,
}

fn subseed(seed: u64, tag: u64) -> u64 {
    Rng::derive(seed, tag).next_u64()
}

const TAG_NET: u64 = 0x100;
const TAG_TRAIN: u64 = 0x1000;
const TAG_FINETUNE: u64 = 0x2000;
const TAG_STL_NET: u64 = 0x7000;

impl ContinualState {
    /// Rebuild a state from persisted parts. History and cached test sets
    /// start empty; accuracies are re-derived by evaluating against
    /// regenerated datasets.
    pub fn from_parts(
        config: ExperimentConfig,
        model: ModelState,
        task_ids: Vec<usize>,
        class_counts: Vec<usize>,
    ) -> Self {
        ContinualState {
            config,
            model,
            history: AccuracyMatrix::new(),
            task_ids,
            class_counts,
            warnings: Vec::new(),
            prune_events: Vec::new(),
            test_sets: Vec::new(),
        }
    }

    /// FNV-1a over every base array (weights, biases, heads). Only defined
    /// for the main mode.
    pub fn base_weight_hash(&self) -> Result<u64> {
        let ModelState::Halrp { base, .. } = &self.model else {
            return Err(Error::InvalidInput(
                "base hash is only defined for halrp mode".into(),
            ));
        };
        let mut h = Fnv1a::new();
        for lw in base.layer_weights().iter().flatten() {
            match lw {
                LayerWeights::Dense { w, b } => {
                    h.update_f64s(w.data());
                    h.update_f64s(b);
                }
                LayerWeights::Conv { w, b } => {
                    h.update_f64s(w.data());
                    h.update_f64s(b);
                }
                _ => {
                    return Err(Error::InvalidInput(
                        "base network holds reparameterized layers".into(),
                    ))
                }
            }
        }
        for (task, head) in base.heads() {
            h.update(&task.to_le_bytes());
            h.update_f64s(head.w.data());
            h.update_f64s(&head.b);
        }
        Ok(h.finish())
    }

    /// (out_dim, in_dim, k) per stored low-rank layer, per task position.
    pub fn ranks_per_task(&self) -> Vec<Vec<LayerRank>> {
        match &self.model {
            ModelState::Halrp { tasks, .. } => tasks
                .iter()
                .map(|t| {
                    t.layers
                        .iter()
                        .map(|p| (p.r.len(), p.s.len(), p.k))
                        .collect()
                })
                .collect(),
            ModelState::SingleTask { nets } => nets.iter().map(|_| Vec::new()).collect(),
            ModelState::SeqFinetune { .. } => self.task_ids.iter().map(|_| Vec::new()).collect(),
        }
    }

    /// Weight-parameter count of the base model (biases and heads excluded).
    pub fn base_weight_params(&self) -> usize {
        let net = match &self.model {
            ModelState::Halrp { base, .. } => base,
            ModelState::SingleTask { nets } => &nets[0],
            ModelState::SeqFinetune { net } => net,
        };
        net.layer_weights()
            .iter()
            .flatten()
            .map(|lw| match lw {
                LayerWeights::Dense { w, .. } => w.rows() * w.cols(),
                LayerWeights::Conv { w, .. } => {
                    let (a, b, c, d) = w.dims();
                    a * b * c * d
                }
                LayerWeights::DenseLowRank { base, .. } => base.rows() * base.cols(),
                LayerWeights::ConvLowRank { base, .. } => {
                    let (a, b, c, d) = base.dims();
                    a * b * c * d
                }
            })
            .sum()
    }

    /// Parameter-growth report; for the reference modes the per-task cost is
    /// a whole extra model (single-task) or nothing (sequential fine-tune).
    pub fn increment_report(&self) -> IncrementReport {
        match &self.model {
            ModelState::Halrp { .. } => {
                metrics::increment_report(&self.ranks_per_task(), self.base_weight_params())
            }
            ModelState::SingleTask { nets } => {
                let per_task: Vec<f64> = (0..nets.len())
                    .map(|p| if p == 0 { 0.0 } else { 1.0 })
                    .collect();
                let cumulative: Vec<f64> = (0..nets.len()).map(|p| p as f64).collect();
                IncrementReport {
                    per_task,
                    cumulative,
                }
            }
            ModelState::SeqFinetune { .. } => IncrementReport {
                per_task: vec![0.0; self.task_ids.len()],
                cumulative: vec![0.0; self.task_ids.len()],
            },
        }
    }

    pub fn tasks_trained(&self) -> usize {
        self.task_ids.len()
    }
}

/// Build a network whose parametric layers carry the frozen base plus the
/// task's low-rank parameters, with the task's biases and head attached.
fn lowrank_network(
    base: &Network,
    task: TaskId,
    layers: &[TaskLayerParams],
    biases: &[Vec<f64>],
    head: Head,
) -> Result<Network> {
    let mut net = base.clone();
    net.clear_heads();
    let parametric = net.parametric_layers();
    if parametric.len() != layers.len() || parametric.len() != biases.len() {
        return Err(Error::ShapeMismatch(format!(
            "task stores {} layer records for {} parametric layers",
            layers.len(),
            parametric.len()
        )));
    }
    for (slot, (params, bias)) in parametric.iter().zip(layers.iter().zip(biases)) {
        if params.layer_index != *slot {
            return Err(Error::ShapeMismatch(format!(
                "layer record {} does not match network layer {}",
                params.layer_index, slot
            )));
        }
        let current = net.layer_weights()[*slot].as_ref().unwrap();
        let replacement = match current {
            LayerWeights::Dense { w, .. } => LayerWeights::DenseLowRank {
                base: w.clone(),
                params: params.clone(),
                b: bias.clone(),
            },
            LayerWeights::Conv { w, .. } => LayerWeights::ConvLowRank {
                base: w.clone(),
                params: params.clone(),
                b: bias.clone(),
            },
            _ => {
                return Err(Error::InvalidInput(
                    "base network already reparameterized".into(),
                ))
            }
        };
        net.layer_weights_mut()[*slot] = Some(replacement);
    }
    net.set_head(task, head);
    Ok(net)
}

/// Materialize the network that serves predictions for a trained position.
pub fn materialized_network(state: &ContinualState, position: usize) -> Result<Network> {
    if position >= state.tasks_trained() {
        return Err(Error::UnknownTask(position));
    }
    match &state.model {
        ModelState::Halrp { base, tasks } => {
            if position == 0 {
                return Ok(base.clone());
            }
            let t = &tasks[position];
            lowrank_network(
                base,
                position,
                &t.layers,
                &t.biases,
                Head {
                    w: t.head_w.clone(),
                    b: t.head_b.clone(),
                },
            )
        }
        ModelState::SingleTask { nets } => Ok(nets[position].clone()),
        ModelState::SeqFinetune { net } => {
            net.head(position)?;
            Ok(net.clone())
        }
    }
}

/// Task-conditioned inference: reconstruct the position's weights and return
/// argmax labels. Never mutates the state.
pub fn predict(state: &ContinualState, position: usize, inputs: &Matrix) -> Result<Vec<usize>> {
    materialized_network(state, position)?.predict(position, inputs)
}

/// Accuracy of every trained position on the provided datasets (same order
/// the sequence was trained in).
pub fn evaluate_tasks(state: &ContinualState, tasks: &[TaskDataset]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(state.tasks_trained());
    for (pos, task) in tasks.iter().enumerate().take(state.tasks_trained()) {
        let net = materialized_network(state, pos)?;
        out.push(net.accuracy(pos, &task.test)?);
    }
    Ok(out)
}

fn evaluate_row(state: &ContinualState) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(state.test_sets.len());
    for (pos, test) in state.test_sets.iter().enumerate() {
        let net = materialized_network(state, pos)?;
        row.push(net.accuracy(pos, test)?);
    }
    Ok(row)
}

/// Train the base network on the first task. The task-0 record stores only
/// its bias and head; predictions for task 0 use the base weights directly.
pub fn train_base(
    cfg: &ExperimentConfig,
    arch: &[LayerSpec],
    input_shape: Shape,
    d0: &TaskDataset,
) -> Result<ContinualState> {
    if d0.train.is_empty() {
        return Err(Error::InvalidInput("base task has no training data".into()));
    }
    let mut net = Network::new(arch.to_vec(), input_shape, subseed(cfg.seed, TAG_NET))?;
    net.add_head(0, d0.class_count, cfg.seed);
    let opts = TrainOpts::new(
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        subseed(cfg.seed, TAG_TRAIN),
    );
    let base = train(&net, 0, &d0.train, &opts)?;

    let biases: Vec<Vec<f64>> = base
        .parametric_layers()
        .iter()
        .map(|&i| base.layer_weights()[i].as_ref().unwrap().bias().to_vec())
        .collect();
    let head = base.head(0)?.clone();
    let task0 = TaskPrivateParams {
        task_id: 0,
        layers: Vec::new(),
        biases,
        head_w: head.w,
        head_b: head.b,
    };

    let mut state = ContinualState {
        config: cfg.clone(),
        model: ModelState::Halrp {
            base,
            tasks: vec![task0],
        },
        history: AccuracyMatrix::new(),
        task_ids: vec![d0.task_id],
        class_counts: vec![d0.class_count],
        warnings: Vec::new(),
        prune_events: Vec::new(),
        test_sets: vec![d0.test.clone()],
    };
    let row = evaluate_row(&state)?;
    state.history.push_row(row);
    Ok(state)
}

/// Learn one more task: warm-up, decompose, score, select ranks,
/// re-initialize, fine-tune, maybe prune, then refresh the accuracy row.
pub fn learn_task(state: &mut ContinualState, t: usize, dt: &TaskDataset) -> Result<()> {
    let cfg = state.config.clone();
    cfg.validate()?;
    let ModelState::Halrp { base, tasks } = &mut state.model else {
        return Err(Error::InvalidInput(
            "learn_task applies to halrp mode only".into(),
        ));
    };
    if t != tasks.len() {
        return Err(Error::InvalidInput(format!(
            "task {t} is not the next position ({} trained so far)",
            tasks.len()
        )));
    }
    if dt.train.is_empty() {
        return Err(Error::InvalidInput(format!(
            "task {t} has no training data"
        )));
    }

    // (a) Warm-up from the frozen base weights.
    let mut warm_net = base.clone();
    warm_net.clear_heads();
    warm_net.add_head(t, dt.class_count, cfg.seed);
    let warm_opts = TrainOpts::new(
        cfg.warmup_epochs,
        cfg.lr,
        cfg.batch_size,
        subseed(cfg.seed, TAG_TRAIN + t as u64),
    );
    let free = train(&warm_net, t, &dt.train, &warm_opts)?;

    // (b) Closed-form decomposition of every parametric layer against base.
    let parametric = base.parametric_layers();
    let mut factors = Vec::with_capacity(parametric.len());
    for &idx in &parametric {
        let base_w = base.layer_weights()[idx].as_ref().unwrap();
        let free_w = free.layer_weights()[idx].as_ref().unwrap();
        let decomposed = match (base_w, free_w) {
            (LayerWeights::Dense { w: bw, .. }, LayerWeights::Dense { w: fw, .. }) => {
                perturb::decompose_fc(fw, bw)?
            }
            (LayerWeights::Conv { w: bw, .. }, LayerWeights::Conv { w: fw, .. }) => {
                perturb::decompose_conv(fw, bw)?
            }
            _ => unreachable!("warm-up preserves layer kinds"),
        };
        factors.push(decomposed);
    }

    // (c) Full-train-set mean gradient at the free weights.
    let (_, grads) = free.backward(t, &dt.train)?;
    let grad_sq: Vec<f64> = parametric
        .iter()
        .map(|&idx| {
            let n = grads.weight_norm(idx).expect("parametric layer gradient");
            n * n
        })
        .collect();

    // (d) Global rank selection over the residual spectra. Spectra stop at
    // the numerical rank so zero singular values never consume budget.
    let spectra: Vec<Vec<f64>> = factors
        .iter()
        .map(|(_, _, f)| f.sigma[..f.rank()].to_vec())
        .collect();
    let items = importance_scores(&grad_sq, &spectra);
    let r_per_layer: Vec<usize> = spectra.iter().map(|s| s.len()).collect();
    let budget = select_ranks(&items, cfg.alpha, &r_per_layer)?;
    if budget.total_score == 0.0 {
        state.warnings.push(format!(
            "task {t}: degenerate importance mass (all-zero gradients or spectra); \
             selected rank 0 everywhere"
        ));
    }

    // (e) Re-initialize task parameters from the truncated factors.
    let mut layers = Vec::with_capacity(parametric.len());
    for (slot, ((r, s, f), &idx)) in factors.into_iter().zip(&parametric).enumerate() {
        let k = budget.k_per_layer[slot];
        layers.push(TaskLayerParams {
            layer_index: idx,
            low_rank: crate::linalg::truncate(&f, k)?,
            r,
            s,
            k,
        });
    }
    let biases: Vec<Vec<f64>> = parametric
        .iter()
        .map(|&i| free.layer_weights()[i].as_ref().unwrap().bias().to_vec())
        .collect();
    let head = free.head(t)?.clone();

    // (f) Fine-tune r, s, U, sigma, V, biases and head; base stays frozen.
    let ft_net = lowrank_network(base, t, &layers, &biases, head)?;
    let ft_opts = TrainOpts {
        epochs: cfg.epochs - cfg.warmup_epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        momentum: 0.0,
        shuffle_seed: subseed(cfg.seed, TAG_FINETUNE + t as u64),
        reg: Some(RegCoefficients::new(cfg.lambda0, cfg.lambda1)),
    };
    let tuned = train(&ft_net, t, &dt.train, &ft_opts)?;

    let mut tuned_layers = Vec::with_capacity(parametric.len());
    let mut tuned_biases = Vec::with_capacity(parametric.len());
    for &idx in &parametric {
        match tuned.layer_weights()[idx].as_ref().unwrap() {
            LayerWeights::DenseLowRank { params, b, .. }
            | LayerWeights::ConvLowRank { params, b, .. } => {
                tuned_layers.push(params.clone());
                tuned_biases.push(b.clone());
            }
            _ => unreachable!("fine-tune net is reparameterized"),
        }
    }
    let tuned_head = tuned.head(t)?.clone();
    tasks.push(TaskPrivateParams {
        task_id: t,
        layers: tuned_layers,
        biases: tuned_biases,
        head_w: tuned_head.w,
        head_b: tuned_head.b,
    });
    state.task_ids.push(dt.task_id);
    state.class_counts.push(dt.class_count);
    state.test_sets.push(dt.test.clone());

    // (g) Prune once the cumulative growth passes the trigger.
    maybe_prune(state, t)?;

    let row = evaluate_row(state)?;
    state.history.push_row(row);
    Ok(())
}

/// Pool every task's U/V entries, derive the threshold for the configured
/// policy, and zero small entries in place across all stored tasks.
fn maybe_prune(state: &mut ContinualState, after_task: usize) -> Result<()> {
    let Some(spec) = state.config.prune else {
        return Ok(());
    };
    let cumulative = self_cumulative_ratio(state);
    if cumulative <= state.config.prune_trigger {
        return Ok(());
    }
    let ModelState::Halrp { tasks, .. } = &mut state.model else {
        return Ok(());
    };

    let mut pool = Vec::new();
    for task in tasks.iter() {
        for layer in &task.layers {
            pool.extend_from_slice(layer.low_rank.u_k.data());
            pool.extend_from_slice(layer.low_rank.v_k.data());
        }
    }
    if pool.is_empty() {
        return Ok(());
    }
    let threshold = match spec.mode {
        PruneMode::Absolute => spec.tau,
        PruneMode::Percentile => reg_prune::prune_percentile(&pool, spec.gamma)?,
        PruneMode::Mixed => spec
            .tau
            .max(reg_prune::prune_percentile(&pool, spec.gamma)?),
    };
    let mut zeroed = 0usize;
    for task in tasks.iter_mut() {
        for layer in &mut task.layers {
            for arr in [layer.low_rank.u_k.data_mut(), layer.low_rank.v_k.data_mut()] {
                for v in arr.iter_mut() {
                    if v.abs() < threshold && *v != 0.0 {
                        *v = 0.0;
                        zeroed += 1;
                    }
                }
            }
        }
    }
    state.prune_events.push(PruneEvent {
        after_task,
        threshold,
        zeroed,
        pool_size: pool.len(),
    });
    Ok(())
}

fn self_cumulative_ratio(state: &ContinualState) -> f64 {
    state
        .increment_report()
        .cumulative
        .last()
        .copied()
        .unwrap_or(0.0)
}

/// Per-task report row mirroring the results CSV.
#[derive(Debug, Clone, Serialize)]
pub struct TaskRow {
    pub task_index: usize,
    pub canonical_task_id: usize,
    pub tasks_seen: usize,
    pub accuracies: Vec<f64>,
    pub avg_accuracy: f64,
    pub bwt: f64,
    pub increment_ratio: f64,
    pub wall_ms: u64,
    pub selected_ranks: Vec<SelectedRank>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectedRank {
    pub layer_index: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    pub k: usize,
}

/// Aggregated outcome of a sequence run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub mode: &'static str,
    /// Stated so downstream readers know which convention the bwt column uses.
    pub bwt_definition: &'static str,
    pub rows: Vec<TaskRow>,
    pub final_avg_accuracy: f64,
    pub final_bwt: f64,
    pub cumulative_increment_ratio: f64,
    pub warnings: Vec<String>,
    pub prune_events: Vec<PruneEvent>,
}

pub const BWT_DEFINITION: &str =
    "bwt = mean over j < T-1 of (A[T-1][j] - A[j][j]); 0 when fewer than 2 tasks";

/// Run a full task sequence under the configured mode and report metrics.
pub fn run_sequence(
    cfg: &ExperimentConfig,
    arch: &[LayerSpec],
    input_shape: Shape,
    task_list: &[TaskDataset],
) -> Result<(ContinualState, RunReport)> {
    cfg.validate()?;
    if task_list.is_empty() {
        return Err(Error::InvalidInput("need at least one task".into()));
    }
    let mut wall = Vec::with_capacity(task_list.len());
    let state = match cfg.mode {
        Mode::Halrp => {
            let start = Instant::now();
            let mut state = train_base(cfg, arch, input_shape, &task_list[0])?;
            wall.push(start.elapsed().as_millis() as u64);
            for (t, dt) in task_list.iter().enumerate().skip(1) {
                let start = Instant::now();
                learn_task(&mut state, t, dt)?;
                wall.push(start.elapsed().as_millis() as u64);
            }
            state
        }
        Mode::Stl => run_single_task(cfg, arch, input_shape, task_list, &mut wall)?,
        Mode::SeqFinetune => run_seq_finetune(cfg, arch, input_shape, task_list, &mut wall)?,
    };
    let report = build_report(&state, &wall);
    Ok((state, report))
}

fn run_single_task(
    cfg: &ExperimentConfig,
    arch: &[LayerSpec],
    input_shape: Shape,
    task_list: &[TaskDataset],
    wall: &mut Vec<u64>,
) -> Result<ContinualState> {
    let mut state = ContinualState {
        config: cfg.clone(),
        model: ModelState::SingleTask { nets: Vec::new() },
        history: AccuracyMatrix::new(),
        task_ids: Vec::new(),
        class_counts: Vec::new(),
        warnings: Vec::new(),
        prune_events: Vec::new(),
        test_sets: Vec::new(),
    };
    let mut diag = Vec::new();
    for (p, task) in task_list.iter().enumerate() {
        let start = Instant::now();
        let mut net = Network::new(
            arch.to_vec(),
            input_shape,
            subseed(cfg.seed, TAG_STL_NET + p as u64),
        )?;
        net.add_head(p, task.class_count, cfg.seed);
        let opts = TrainOpts::new(
            cfg.epochs,
            cfg.lr,
            cfg.batch_size,
            subseed(cfg.seed, TAG_TRAIN + p as u64),
        );
        let trained = train(&net, p, &task.train, &opts)?;
        diag.push(trained.accuracy(p, &task.test)?);
        let ModelState::SingleTask { nets } = &mut state.model else {
            unreachable!()
        };
        nets.push(trained);
        state.task_ids.push(task.task_id);
        state.class_counts.push(task.class_count);
        state.test_sets.push(task.test.clone());
        // Independent models cannot interfere: earlier entries repeat.
        state.history.push_row(diag.clone());
        wall.push(start.elapsed().as_millis() as u64);
    }
    Ok(state)
}

fn run_seq_finetune(
    cfg: &ExperimentConfig,
    arch: &[LayerSpec],
    input_shape: Shape,
    task_list: &[TaskDataset],
    wall: &mut Vec<u64>,
) -> Result<ContinualState> {
    let mut net = Network::new(arch.to_vec(), input_shape, subseed(cfg.seed, TAG_NET))?;
    let mut state = ContinualState {
        config: cfg.clone(),
        model: ModelState::SeqFinetune { net: net.clone() },
        history: AccuracyMatrix::new(),
        task_ids: Vec::new(),
        class_counts: Vec::new(),
        warnings: Vec::new(),
        prune_events: Vec::new(),
        test_sets: Vec::new(),
    };
    for (p, task) in task_list.iter().enumerate() {
        let start = Instant::now();
        net.add_head(p, task.class_count, cfg.seed);
        let opts = TrainOpts::new(
            cfg.epochs,
            cfg.lr,
            cfg.batch_size,
            subseed(cfg.seed, TAG_TRAIN + p as u64),
        );
        net = train(&net, p, &task.train, &opts)?;
        state.model = ModelState::SeqFinetune { net: net.clone() };
        state.task_ids.push(task.task_id);
        state.class_counts.push(task.class_count);
        state.test_sets.push(task.test.clone());
        let row = evaluate_row(&state)?;
        state.history.push_row(row);
        wall.push(start.elapsed().as_millis() as u64);
    }
    Ok(state)
}

fn build_report(state: &ContinualState, wall: &[u64]) -> RunReport {
    let increments = state.increment_report();
    let ranks = state.ranks_per_task();
    let mut rows = Vec::with_capacity(state.tasks_trained());
    let mut partial = AccuracyMatrix::new();
    for t in 0..state.tasks_trained() {
        let acc_row = state.history.rows()[t].clone();
        partial.push_row(acc_row.clone());
        let avg = acc_row.iter().sum::<f64>() / acc_row.len() as f64;
        let selected = ranks[t]
            .iter()
            .enumerate()
            .map(|(slot, &(j, i, k))| SelectedRank {
                layer_index: match &state.model {
                    ModelState::Halrp { tasks, .. } => tasks[t].layers[slot].layer_index,
                    _ => slot,
                },
                out_dim: j,
                in_dim: i,
                k,
            })
            .collect();
        rows.push(TaskRow {
            task_index: t,
            canonical_task_id: state.task_ids[t],
            tasks_seen: t + 1,
            accuracies: acc_row,
            avg_accuracy: avg,
            bwt: metrics::bwt(&partial),
            increment_ratio: increments.cumulative[t],
            wall_ms: wall.get(t).copied().unwrap_or(0),
            selected_ranks: selected,
        });
    }
    RunReport {
        mode: state.config.mode.as_str(),
        bwt_definition: BWT_DEFINITION,
        final_avg_accuracy: metrics::final_avg_accuracy(&state.history),
        final_bwt: metrics::bwt(&state.history),
        cumulative_increment_ratio: increments.cumulative.last().copied().unwrap_or(0.0),
        rows,
        warnings: state.warnings.clone(),
        prune_events: state.prune_events.clone(),
    }
}
