//! The three pruning policies on a pool of low-rank entries.
//!
//! Absolute thresholding zeroes tiny entries, the nearest-rank percentile
//! targets a retention fraction over the pooled entries of all tasks, and
//! the mixed policy takes the larger threshold of the two.

use halrp::reg_prune::{prune_absolute, prune_mixed, prune_percentile};
use halrp::rng::Rng;

fn stats(name: &str, values: &[f64], original_l1: f64) {
    let kept = values.iter().filter(|v| **v != 0.0).count();
    let l1: f64 = values.iter().map(|v| v.abs()).sum();
    println!(
        "{name:<12} kept {kept:>4}/{} entries, L1 {l1:.3} (was {original_l1:.3})",
        values.len()
    );
}

fn main() {
    let mut rng = Rng::new(5);
    // A pool shaped like trained factors: many near-zero entries, some large.
    let pool: Vec<f64> = (0..400)
        .map(|_| {
            let v = rng.uniform(-1.0, 1.0);
            v * v * v // cube concentrates mass near zero
        })
        .collect();
    let l1: f64 = pool.iter().map(|v| v.abs()).sum();

    let mut absolute = pool.clone();
    prune_absolute(&mut absolute, 0.05);
    stats("absolute", &absolute, l1);

    let gamma = 0.5;
    let tau_p = prune_percentile(&pool, gamma).unwrap();
    let mut percentile = pool.clone();
    prune_absolute(&mut percentile, tau_p);
    println!("percentile threshold for gamma={gamma}: {tau_p:.5}");
    stats("percentile", &percentile, l1);

    let mut mixed = pool.clone();
    let threshold = prune_mixed(&mut mixed, 0.05, gamma).unwrap();
    println!("mixed threshold: {threshold:.5}");
    stats("mixed", &mixed, l1);

    // Idempotence: pruning again at the same threshold changes nothing.
    let mut twice = mixed.clone();
    prune_absolute(&mut twice, threshold);
    assert_eq!(twice, mixed);
    println!("re-pruning at the same threshold is a no-op");
}
