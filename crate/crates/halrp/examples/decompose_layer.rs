//! Closed-form layer decomposition.
//!
//! Given frozen base weights and freely trained task weights, solve the row
//! and column scales in closed form, factor the residual, and show how the
//! reconstruction error and parameter cost trade off with the retained rank.

use halrp::linalg::{frobenius_norm, truncate, truncation_error, Matrix};
use halrp::perturb::{
    decompose_fc, increment_ratio, param_count, reconstruct_weights, TaskLayerParams,
};
use halrp::rng::Rng;

fn main() {
    let mut rng = Rng::new(11);
    let (out_dim, in_dim) = (10, 8);
    let base = Matrix::random(out_dim, in_dim, -1.0, 1.0, &mut rng);
    // The "free" weights: scaled base rows/cols plus a rank-2 disturbance.
    let free = Matrix::from_fn(out_dim, in_dim, |j, i| {
        let scale = 1.0 + 0.1 * (j as f64 - 4.5) / 4.5;
        let bump = 0.3
            * ((j as f64 * 0.7).sin() * (i as f64 * 0.9).cos()
                + 0.5 * (j as f64 * 1.3).cos() * (i as f64 * 0.4).sin());
        scale * base.get(j, i) + bump
    });

    let (r, s, factors) = decompose_fc(&free, &base).unwrap();
    println!("row scales r:    {:?}", &r[..4.min(r.len())]);
    println!("column scales s: {:?}", &s[..4.min(s.len())]);
    println!("residual spectrum: {:?}\n", factors.sigma);

    println!(
        "{:>4} {:>14} {:>12} {:>10}",
        "k", "recon error", "params", "ratio"
    );
    for k in 0..=factors.sigma.len() {
        let p = TaskLayerParams {
            layer_index: 0,
            r: r.clone(),
            s: s.clone(),
            low_rank: truncate(&factors, k).unwrap(),
            k,
        };
        let gap = frobenius_norm(&reconstruct_weights(&base, &p).sub(&free));
        let tail = truncation_error(&factors, k).unwrap();
        assert!((gap - tail).abs() < 1e-9);
        println!(
            "{k:>4} {gap:>14.8} {:>12} {:>10.4}",
            param_count(out_dim, in_dim, k),
            increment_ratio(out_dim, in_dim, k)
        );
    }
}
