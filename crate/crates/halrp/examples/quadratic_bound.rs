//! The quadratic perturbation bound and its Fisher stand-in.
//!
//! On a quadratic loss the change from perturbing the optimum is exactly
//! ½ δᵀHδ, which the Frobenius bound ½‖H‖_F‖δ‖² dominates with zero
//! remainder. The same Monte-Carlo sweep the verification suite runs is
//! shown here at a few perturbation scales.

use halrp::linalg::Matrix;
use halrp::rank_select::{fisher_norm, loss_perturbation_bound, verify_quadratic_bound};
use halrp::rng::Rng;

fn main() {
    let mut rng = Rng::new(3);
    let a = Matrix::random(5, 5, -1.0, 1.0, &mut rng);
    let h = a.transpose().matmul(&a); // symmetric PSD
    let w_star: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();

    println!(
        "{:>10} {:>14} {:>14} {:>8}",
        "|delta|", "actual", "bound", "holds"
    );
    for scale in [0.01, 0.05, 0.2, 0.5, 1.0] {
        let delta: Vec<f64> = (0..5).map(|_| scale * rng.uniform(-1.0, 1.0)).collect();
        let (actual, bound) = verify_quadratic_bound(&h, &w_star, &delta).unwrap();
        let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!(
            "{norm:>10.4} {actual:>14.8} {bound:>14.8} {:>8}",
            actual <= bound
        );
    }

    // The Fisher approximation: ‖g·gᵀ‖_F collapses to ‖g‖₂².
    let g: Vec<f64> = (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let outer = Matrix::from_fn(20, 20, |r, c| g[r] * g[c]);
    println!(
        "\nfisher_norm(g) = {:.10}, ‖g gᵀ‖_F = {:.10}",
        fisher_norm(&g),
        halrp::linalg::frobenius_norm(&outer)
    );
    println!(
        "bound for h_norm = 2, tail = 0.01: {}",
        loss_perturbation_bound(2.0, 0.01)
    );
}
