//! Gradient-weighted global rank selection.
//!
//! Three layers with different gradient norms and residual spectra compete
//! for ranks. Sweeping the coverage rate alpha shows how the budget
//! concentrates on the layers whose truncation would hurt the loss most.

use halrp::rank_select::{importance_scores, select_ranks};

fn main() {
    // Squared gradient norms per layer and residual singular values.
    let grad_sq = vec![4.0, 0.5, 1.5];
    let spectra = vec![
        vec![3.0, 1.2, 0.4, 0.1],
        vec![2.5, 2.0, 0.6],
        vec![1.8, 0.9],
    ];
    let items = importance_scores(&grad_sq, &spectra);
    println!("importance items (layer, rank, score):");
    for it in &items {
        println!("  L{} #{}  {:.3}", it.layer_index, it.rank_index, it.score);
    }

    let ranks: Vec<usize> = spectra.iter().map(|s| s.len()).collect();
    println!(
        "\n{:>6} {:>12} {:>18}",
        "alpha", "k per layer", "covered / total"
    );
    for alpha in [0.0, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0] {
        let budget = select_ranks(&items, alpha, &ranks).unwrap();
        println!(
            "{alpha:>6} {:>12} {:>10.3} / {:.3}",
            format!("{:?}", budget.k_per_layer),
            budget.selected_score,
            budget.total_score
        );
    }
}
