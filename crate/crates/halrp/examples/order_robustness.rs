//! Task-order robustness.
//!
//! The same task set runs under three seeded orders. Final accuracies are
//! keyed by canonical task identity, so the per-task order disparity (OPD)
//! and its maximum/average (MOPD/AOPD) measure how much the outcome depends
//! on when each task arrived.

use std::collections::BTreeMap;

use halrp::cl_engine::{run_sequence, ExperimentConfig};
use halrp::metrics::{mopd_aopd, opd, OrderRunSet};
use halrp::nn::{LayerSpec, Shape};
use halrp::tasks::{gen_permuted, gen_synthetic, TaskOrder};

fn main() {
    let base = gen_synthetic(4, 24, 300, 0.15, 42);
    let tasks = gen_permuted(&base, 5, 7);
    let arch = vec![
        LayerSpec::Dense {
            in_dim: 24,
            out_dim: 16,
        },
        LayerSpec::Relu,
    ];
    let cfg = ExperimentConfig {
        lr: 0.02,
        batch_size: 64,
        ..ExperimentConfig::default()
    };

    let mut runs = OrderRunSet::new();
    for seed in 0..3u64 {
        let order = TaskOrder::seeded(tasks.len(), seed);
        let ordered = order.apply(&tasks).unwrap();
        let (state, report) = run_sequence(&cfg, &arch, Shape::Flat(24), &ordered).unwrap();
        let keyed: BTreeMap<usize, f64> = state
            .task_ids
            .iter()
            .zip(state.history.last_row().unwrap())
            .map(|(&id, &acc)| (id, acc))
            .collect();
        println!(
            "order {:?}: final avg accuracy {:.4}",
            order.as_slice(),
            report.final_avg_accuracy
        );
        runs.add_run(keyed);
    }

    let per_task = opd(&runs).unwrap();
    println!("\nper-task OPD:");
    for (task, v) in &per_task {
        println!("  task {task}: {v:.4}");
    }
    let opds: Vec<f64> = per_task.values().copied().collect();
    let (mopd, aopd) = mopd_aopd(&opds);
    println!("MOPD = {mopd:.4}, AOPD = {aopd:.4}");
}
