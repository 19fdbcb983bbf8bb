//! Evaluation metrics: accuracy matrix, backward transfer, order-disparity
//! statistics, and parameter-growth accounting.
//!
//! BWT here is the final-row convention: the mean over earlier tasks of
//! (accuracy at the end of the sequence − accuracy right after the task was
//! learned). Zero means no forgetting; the output headers repeat the formula.

use serde::Serialize;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::perturb::param_count;

/// Lower-triangular accuracy record: row i holds the accuracy on tasks
/// 0..=i measured after finishing training task i.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Append the row recorded after task `rows.len()` finished; must hold
    /// one accuracy per task seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) {
        assert_eq!(
            row.len(),
            self.rows.len() + 1,
            "row {} must cover tasks 0..={}",
            self.rows.len(),
            self.rows.len()
        );
        assert!(
            row.iter().all(|a| (0.0..=1.0).contains(a)),
            "accuracies live in [0, 1]"
        );
        self.rows.push(row);
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(j <= i, "accuracy matrix is lower-triangular");
        self.rows[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(|r| r.as_slice())
    }
}

/// Mean of the final row: the usual "average accuracy after the last task".
pub fn final_avg_accuracy(a: &AccuracyMatrix) -> f64 {
    match a.last_row() {
        Some(row) if !row.is_empty() => row.iter().sum::<f64>() / row.len() as f64,
        _ => 0.0,
    }
}

/// Backward transfer: `(1/(T-1)) * Σ_{j<T-1} (A[T-1][j] − A[j][j])`.
/// By convention 0 for fewer than two tasks.
pub fn bwt(a: &AccuracyMatrix) -> f64 {
    let t = a.tasks();
    if t < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for j in 0..t - 1 {
        acc += a.get(t - 1, j) - a.get(j, j);
    }
    acc / (t - 1) as f64
}

/// Final per-task accuracies of several runs of the same task set under
/// different orders, keyed by canonical task identity.
#[derive(Debug, Clone, Default)]
pub struct OrderRunSet {
    runs: Vec<BTreeMap<usize, f64>>,
}

impl OrderRunSet {
    pub fn new() -> Self {
        OrderRunSet { runs: Vec::new() }
    }

    pub fn add_run(&mut self, final_accuracies: BTreeMap<usize, f64>) {
        self.runs.push(final_accuracies);
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Per-task order disparity: max − min of the task's final accuracy across
/// runs. Errors if the runs do not cover identical task sets.
pub fn opd(runs: &OrderRunSet) -> Result<BTreeMap<usize, f64>> {
    let first = runs
        .runs
        .first()
        .ok_or_else(|| Error::InvalidInput("opd needs at least one run".into()))?;
    for run in &runs.runs[1..] {
        if run.keys().ne(first.keys()) {
            return Err(Error::InvalidInput("runs cover different task sets".into()));
        }
    }
    let mut out = BTreeMap::new();
    for task in first.keys() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for run in &runs.runs {
            let v = run[task];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        out.insert(*task, hi - lo);
    }
    Ok(out)
}

/// Maximum and mean of the per-task disparities.
pub fn mopd_aopd(opds: &[f64]) -> (f64, f64) {
    assert!(!opds.is_empty(), "mopd/aopd need at least one task");
    let max = opds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = opds.iter().sum::<f64>() / opds.len() as f64;
    (max, mean)
}

/// Shape-and-rank summary of one stored layer: (out_dim, in_dim, k).
pub type LayerRank = (usize, usize, usize);

/// Parameter-growth report. Ratios are task-private parameter counts (r, s,
/// U, σ, V; biases and heads excluded) over the base network's weight
/// parameter count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncrementReport {
    pub per_task: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// Compute the report from per-task layer ranks. `ranks_per_task[t]` lists
/// (J, I, k) for every low-rank layer stored by task t (empty for the base
/// task); `base_weight_params` is the total weight count of the base model.
pub fn increment_report(
    ranks_per_task: &[Vec<LayerRank>],
    base_weight_params: usize,
) -> IncrementReport {
    assert!(base_weight_params > 0, "base model has no weights");
    let mut per_task = Vec::with_capacity(ranks_per_task.len());
    let mut cumulative = Vec::with_capacity(ranks_per_task.len());
    let mut total: usize = 0;
    for layers in ranks_per_task {
        let added: usize = layers.iter().map(|&(j, i, k)| param_count(j, i, k)).sum();
        total += added;
        per_task.push(added as f64 / base_weight_params as f64);
        cumulative.push(total as f64 / base_weight_params as f64);
    }
    IncrementReport {
        per_task,
        cumulative,
    }
}
