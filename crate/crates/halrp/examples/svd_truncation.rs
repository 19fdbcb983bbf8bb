//! SVD truncation and the exact tail-error identity.
//!
//! Decomposes a random matrix, prints the truncation error at every rank
//! (both the closed-form tail and the directly measured residual), and shows
//! that random rank-k factor pairs never beat the SVD truncation.

use halrp::linalg::{frobenius_norm, svd, truncate, truncation_error, Matrix};
use halrp::rng::Rng;

fn main() {
    let mut rng = Rng::new(7);
    let m = Matrix::random(8, 6, -1.0, 1.0, &mut rng);
    let f = svd(&m).unwrap();

    println!("singular values: {:?}", f.sigma);
    println!("{:>4} {:>14} {:>14}", "k", "tail formula", "direct norm");
    for k in 0..=f.sigma.len() {
        let tail = truncation_error(&f, k).unwrap();
        let low = truncate(&f, k).unwrap();
        let direct = frobenius_norm(&m.sub(&low.reconstruct()));
        println!("{k:>4} {tail:>14.8} {direct:>14.8}");
    }

    // No random rank-2 competitor gets closer than the truncated SVD.
    let k = 2;
    let best = truncation_error(&f, k).unwrap();
    let mut closest = f64::INFINITY;
    for _ in 0..1000 {
        let x = Matrix::random(8, k, -2.0, 2.0, &mut rng);
        let y = Matrix::random(6, k, -2.0, 2.0, &mut rng);
        closest = closest.min(frobenius_norm(&m.sub(&x.matmul(&y.transpose()))));
    }
    println!("\nrank-{k} SVD residual:            {best:.8}");
    println!("best of 1000 random rank-{k} pairs: {closest:.8}");
}
