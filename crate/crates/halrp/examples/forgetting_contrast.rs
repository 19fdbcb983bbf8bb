//! Forgetting comparison: low-rank task adaptation vs the two references.
//!
//! The same five permuted tasks run under three modes. Independent per-task
//! models (stl) and the low-rank mode cannot forget; naive sequential
//! fine-tuning overwrites the shared trunk and its backward transfer goes
//! negative.

use halrp::cl_engine::{run_sequence, ExperimentConfig, Mode};
use halrp::nn::{LayerSpec, Shape};
use halrp::tasks::{gen_permuted, gen_synthetic};

fn main() {
    let base = gen_synthetic(6, 48, 800, 0.2, 42);
    let tasks = gen_permuted(&base, 5, 7);
    let arch = vec![
        LayerSpec::Dense {
            in_dim: 48,
            out_dim: 16,
        },
        LayerSpec::Relu,
    ];

    println!(
        "{:>14} {:>10} {:>10} {:>12}",
        "mode", "avg acc", "bwt", "extra params"
    );
    for mode in [Mode::Halrp, Mode::Stl, Mode::SeqFinetune] {
        let cfg = ExperimentConfig {
            mode,
            lr: 5e-3,
            batch_size: 128,
            ..ExperimentConfig::default()
        };
        let (_, report) = run_sequence(&cfg, &arch, Shape::Flat(48), &tasks).unwrap();
        println!(
            "{:>14} {:>10.4} {:>10.4} {:>11.2}x",
            report.mode,
            report.final_avg_accuracy,
            report.final_bwt,
            report.cumulative_increment_ratio
        );
    }
}
