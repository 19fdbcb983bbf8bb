//! Self-contained verification suites.
//!
//! Each suite checks one numerical contract against an independent oracle:
//! direct residual norms for the SVD truncation identity, a golden-section
//! scalar minimizer for the closed-form scale solutions, exhaustive
//! enumeration for the greedy rank budget, Monte-Carlo quadratic models for
//! the perturbation bound, and central finite differences for every gradient
//! path. `halrp verify` runs them all and fails the process if any suite
//! reports a failure.

use serde::Serialize;

use crate::linalg::{self, frobenius_norm, Matrix, SVDFactors, Tensor4};
use crate::nn::{self, Batch, LayerSpec, LayerWeights, Network, ParamView, Shape};
use crate::perturb::{self, TaskLayerParams};
use crate::rank_select::{self, fisher_norm, select_ranks, ImportanceItem};
use crate::reg_prune::{reg_loss_layer, RegCoefficients};
use crate::rng::Rng;

/// Outcome of one verification suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub failures: usize,
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:\u{20}<22} trials={:<6} max_error={:<12.3e} failures={:<4} {}",
            self.name,
            self.trials,
            self.max_error,
            self.failures,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Run every suite with deterministic seeding.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        eckart_young_suite(seed, 100),
        lse_closed_form_suite(seed, 100),
        scaling_invariance_suite(seed, 20),
        rank_greedy_suite(seed, 1000),
        quadratic_bound_suite(seed, 1000),
        gradient_check_suite(seed),
    ]
}

// ---------------------------------------------------------------------------
// Eckart-Young / truncation identity
// ---------------------------------------------------------------------------

/// Check one matrix against its factors: the tail formula must match the
/// directly computed residual norm for every k, non-increasingly.
/// Returns the largest relative deviation or an error message.
pub fn eckart_young_case(m: &Matrix, f: &SVDFactors) -> Result<f64, String> {
    let r = f.sigma.len();
    // Near-zero residuals (k at or past the numerical rank) are compared
    // relative to the matrix scale, not to themselves.
    let scale = frobenius_norm(m);
    let mut max_rel = 0.0f64;
    let mut prev = f64::INFINITY;
    for k in 0..=r {
        let tail = linalg::truncation_error(f, k).map_err(|e| e.to_string())?;
        if tail > prev + 1e-12 * prev.max(1.0) {
            return Err(format!("tail not monotone at k={k}: {tail} > {prev}"));
        }
        prev = tail;
        // Direct residual norm, computed with plain loops.
        let mut resid_sq = 0.0f64;
        for row in 0..m.rows() {
            for col in 0..m.cols() {
                let mut rec = 0.0;
                for t in 0..k {
                    rec += f.u.get(row, t) * f.sigma[t] * f.v.get(col, t);
                }
                let d = m.get(row, col) - rec;
                resid_sq += d * d;
            }
        }
        let direct = resid_sq.sqrt();
        let rel = (tail - direct).abs() / direct.max(1e-6 * scale).max(f64::MIN_POSITIVE);
        max_rel = max_rel.max(rel);
        if rel > 1e-6 {
            return Err(format!(
                "tail formula off at k={k}: tail={tail}, direct={direct}, rel={rel}"
            ));
        }
    }
    Ok(max_rel)
}

/// Random-matrix sweep of the truncation identity (shapes up to 64x48) plus
/// a small-scale check that no random rank-k factor pair beats the SVD
/// truncation.
pub fn eckart_young_suite(seed: u64, trials: usize) -> SuiteReport {
    let mut rng = Rng::derive(seed, 0xe1);
    let mut max_error = 0.0f64;
    let mut failures = 0usize;
    let mut detail = String::new();
    for trial in 0..trials {
        let rows = 1 + rng.below(64);
        let cols = 1 + rng.below(48);
        let m = Matrix::random(rows, cols, -1.0, 1.0, &mut rng);
        match linalg::svd(&m)
            .map_err(|e| e.to_string())
            .and_then(|f| eckart_young_case(&m, &f))
        {
            Ok(rel) => max_error = max_error.max(rel),
            Err(msg) => {
                failures += 1;
                if detail.is_empty() {
                    detail = format!("trial {trial} ({rows}x{cols}): {msg}");
                }
            }
        }
    }
    // Optimality spot-check on small matrices: 100 random competitors per k.
    let mut competitor_trials = 0usize;
    for _ in 0..5 {
        let m = Matrix::random(8, 6, -1.0, 1.0, &mut rng);
        let f = match linalg::svd(&m) {
            Ok(f) => f,
            Err(e) => {
                failures += 1;
                detail = e.to_string();
                continue;
            }
        };
        for k in 0..=6 {
            let best = linalg::truncation_error(&f, k).unwrap();
            for _ in 0..100 {
                competitor_trials += 1;
                let x = Matrix::random(8, k, -2.0, 2.0, &mut rng);
                let y = Matrix::random(6, k, -2.0, 2.0, &mut rng);
                let cand = frobenius_norm(&m.sub(&x.matmul(&y.transpose())));
                if cand < best - 1e-9 {
                    failures += 1;
                    if detail.is_empty() {
                        detail = format!("random rank-{k} pair beat the SVD: {cand} < {best}");
                    }
                }
            }
        }
    }
    SuiteReport {
        name: "eckart-young",
        trials: trials + competitor_trials,
        max_error,
        failures,
        detail,
    }
}

// ---------------------------------------------------------------------------
// Closed-form least-squares scales
// ---------------------------------------------------------------------------

/// Golden-section search over a unimodal objective.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..220 {
        if hi - lo < 1e-11 {
            break;
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Closed-form r and s against the scalar minimizer, the exact residual
/// identity, and the conv variant's per-channel solution.
pub fn lse_closed_form_suite(seed: u64, trials: usize) -> SuiteReport {
    let mut rng = Rng::derive(seed, 0x15e);
    let mut max_error = 0.0f64;
    let mut failures = 0usize;
    let mut detail = String::new();
    let fail = |msg: String, detail: &mut String, failures: &mut usize| {
        *failures += 1;
        if detail.is_empty() {
            *detail = msg;
        }
    };

    for trial in 0..trials {
        let rows = 2 + rng.below(10);
        let cols = 2 + rng.below(9);
        let wb = Matrix::random(rows, cols, -1.0, 1.0, &mut rng);
        let wf = Matrix::random(rows, cols, -1.0, 1.0, &mut rng);
        let r = match perturb::solve_r(&wf, &wb) {
            Ok(r) => r,
            Err(e) => {
                fail(format!("trial {trial}: {e}"), &mut detail, &mut failures);
                continue;
            }
        };
        let s = perturb::solve_s(&wf, &wb, &r).unwrap();

        for (j, &rj) in r.iter().enumerate() {
            let objective = |x: f64| -> f64 {
                (0..cols)
                    .map(|i| {
                        let d = wf.get(j, i) - x * wb.get(j, i);
                        d * d
                    })
                    .sum()
            };
            // Cauchy-Schwarz bound on the minimizer: |r*| <= ‖wf_j‖/‖wb_j‖.
            let num: f64 = (0..cols).map(|i| wf.get(j, i).powi(2)).sum::<f64>().sqrt();
            let den: f64 = (0..cols).map(|i| wb.get(j, i).powi(2)).sum::<f64>().sqrt();
            if den < 1e-12 {
                continue; // fallback case, covered by unit tests
            }
            let bound = num / den + 1.0;
            let oracle = golden_min(objective, -bound, bound);
            let err = (rj - oracle).abs();
            max_error = max_error.max(err);
            if err > 1e-6 {
                fail(
                    format!("trial {trial}: r[{j}]={rj} vs oracle {oracle}"),
                    &mut detail,
                    &mut failures,
                );
            }
        }
        for (i, &si) in s.iter().enumerate() {
            let objective = |x: f64| -> f64 {
                (0..rows)
                    .map(|j| {
                        let d = wf.get(j, i) - r[j] * wb.get(j, i) * x;
                        d * d
                    })
                    .sum()
            };
            let num: f64 = (0..rows).map(|j| wf.get(j, i).powi(2)).sum::<f64>().sqrt();
            let den: f64 = (0..rows)
                .map(|j| (r[j] * wb.get(j, i)).powi(2))
                .sum::<f64>()
                .sqrt();
            if den < 1e-12 {
                continue;
            }
            let bound = num / den + 1.0;
            let oracle = golden_min(objective, -bound, bound);
            let err = (si - oracle).abs();
            max_error = max_error.max(err);
            if err > 1e-6 {
                fail(
                    format!("trial {trial}: s[{i}]={si} vs oracle {oracle}"),
                    &mut detail,
                    &mut failures,
                );
            }
        }

        // Exact reconstruction: diag(r)·Wb·diag(s) + B == Wf to 1e-12.
        let b = perturb::residual_b(&wf, &wb, &r, &s);
        for j in 0..rows {
            for i in 0..cols {
                let rec = r[j] * wb.get(j, i) * s[i] + b.get(j, i);
                let err = (rec - wf.get(j, i)).abs();
                max_error = max_error.max(err);
                if err > 1e-12 {
                    fail(
                        format!("trial {trial}: residual identity off by {err}"),
                        &mut detail,
                        &mut failures,
                    );
                }
            }
        }
    }

    // Conv variant: per-output-channel scalar solution over all spatial taps.
    for trial in 0..10 {
        let wb = Tensor4::from_fn(3, 3, 4, 2, |_, _, _, _| rng.uniform(-1.0, 1.0));
        let wf = Tensor4::from_fn(3, 3, 4, 2, |_, _, _, _| rng.uniform(-1.0, 1.0));
        let (r, _, _) = match perturb::decompose_conv(&wf, &wb) {
            Ok(v) => v,
            Err(e) => {
                fail(
                    format!("conv trial {trial}: {e}"),
                    &mut detail,
                    &mut failures,
                );
                continue;
            }
        };
        for (j, &rj) in r.iter().enumerate() {
            let objective = |x: f64| -> f64 {
                let mut acc = 0.0;
                for h in 0..3 {
                    for w in 0..3 {
                        for i in 0..2 {
                            let d = wf.get(h, w, j, i) - x * wb.get(h, w, j, i);
                            acc += d * d;
                        }
                    }
                }
                acc
            };
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for h in 0..3 {
                for w in 0..3 {
                    for i in 0..2 {
                        num += wf.get(h, w, j, i).powi(2);
                        den += wb.get(h, w, j, i).powi(2);
                    }
                }
            }
            if den.sqrt() < 1e-12 {
                continue;
            }
            let bound = num.sqrt() / den.sqrt() + 1.0;
            let oracle = golden_min(objective, -bound, bound);
            let err = (rj - oracle).abs();
            max_error = max_error.max(err);
            if err > 1e-6 {
                fail(
                    format!("conv trial {trial}: r[{j}]={rj} vs {oracle}"),
                    &mut detail,
                    &mut failures,
                );
            }
        }
    }

    SuiteReport {
        name: "lse-closed-form",
        trials,
        max_error,
        failures,
        detail,
    }
}

/// W_free = c·W_base must absorb entirely into r: r = c·1, s = 1, B = 0.
pub fn scaling_invariance_suite(seed: u64, trials: usize) -> SuiteReport {
    let mut rng = Rng::derive(seed, 0x5ca1e);
    let mut max_error = 0.0f64;
    let mut failures = 0usize;
    let mut detail = String::new();
    for trial in 0..trials {
        // c uniform over [-3, 3] excluding zero.
        let c = loop {
            let v = rng.uniform(-3.0, 3.0);
            if v != 0.0 {
                break v;
            }
        };
        let wb = Matrix::random(6, 5, -1.0, 1.0, &mut rng);
        let wf = wb.scaled(c);
        let (r, s, f) = match perturb::decompose_fc(&wf, &wb) {
            Ok(v) => v,
            Err(e) => {
                failures += 1;
                detail = format!("trial {trial}: {e}");
                continue;
            }
        };
        let mut err = 0.0f64;
        for &rj in &r {
            err = err.max((rj - c).abs());
        }
        for &si in &s {
            err = err.max((si - 1.0).abs());
        }
        let b_norm = linalg::truncation_error(&f, 0).unwrap();
        err = err.max(b_norm);
        max_error = max_error.max(err);
        if err > 1e-10 {
            failures += 1;
            if detail.is_empty() {
                detail = format!("trial {trial}: c={c}, max deviation {err}");
            }
        }
    }
    SuiteReport {
        name: "scaling-invariance",
        trials,
        max_error,
        failures,
        detail,
    }
}

// ---------------------------------------------------------------------------
// Greedy rank budget vs exhaustive enumeration
// ---------------------------------------------------------------------------

/// Exhaustive reference solver over all per-layer prefix assignments.
/// Feasible assignments must cover `threshold`; among them the fewest total
/// ranks wins, ties resolved by the same (score desc, layer asc, rank asc)
/// item order the greedy uses. Scores are integers and alpha is dyadic, so
/// every comparison is exact in f64.
type RankedChoice = (usize, Vec<(u64, usize, usize)>, Vec<usize>);

fn brute_force_ranks(spectra_scores: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let layers = spectra_scores.len();
    let mut best: Option<RankedChoice> = None;
    let mut current = vec![0usize; layers];
    loop {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut chosen: Vec<(u64, usize, usize)> = Vec::new();
        for (l, &k) in current.iter().enumerate() {
            for idx in 0..k {
                sum += spectra_scores[l][idx];
                count += 1;
                // Sort key: score descending via bit-inverted integer.
                chosen.push((u64::MAX - spectra_scores[l][idx] as u64, l, idx));
            }
        }
        if sum >= threshold {
            chosen.sort();
            let better = match &best {
                None => true,
                Some((bc, bkey, _)) => count < *bc || (count == *bc && chosen < *bkey),
            };
            if better {
                best = Some((count, chosen, current.clone()));
            }
        }
        // Advance the mixed-radix counter.
        let mut pos = 0;
        loop {
            if pos == layers {
                return best.expect("full assignment is always feasible").2;
            }
            current[pos] += 1;
            if current[pos] <= spectra_scores[pos].len() {
                break;
            }
            current[pos] = 0;
            pos += 1;
        }
    }
}

/// Greedy selection vs brute force on instances of at most 12 items, plus
/// coverage, prefix structure, and alpha-monotonicity checks.
pub fn rank_greedy_suite(seed: u64, trials: usize) -> SuiteReport {
    let mut rng = Rng::derive(seed, 0x9cee);
    let mut failures = 0usize;
    let mut detail = String::new();
    let fail = |msg: String, detail: &mut String, failures: &mut usize| {
        *failures += 1;
        if detail.is_empty() {
            *detail = msg;
        }
    };
    for trial in 0..trials {
        let layers = 1 + rng.below(4);
        let mut remaining = 12usize;
        let mut scores: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let cap = remaining.min(1 + rng.below(6));
            let take = if l + 1 == layers {
                cap
            } else {
                1 + rng.below(cap)
            };
            remaining -= take;
            // Integer scores, sorted descending within the layer.
            let mut vals: Vec<f64> = (0..take).map(|_| rng.below(100) as f64).collect();
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            scores.push(vals);
        }
        let ranks: Vec<usize> = scores.iter().map(|s| s.len()).collect();
        let items: Vec<ImportanceItem> = scores
            .iter()
            .enumerate()
            .flat_map(|(l, sv)| {
                sv.iter()
                    .enumerate()
                    .map(move |(i, &score)| ImportanceItem {
                        layer_index: l,
                        rank_index: i + 1,
                        score,
                    })
            })
            .collect();
        let total: f64 = items.iter().map(|it| it.score).sum();

        // Dyadic alpha keeps alpha*total exact.
        let alpha = rng.below(65) as f64 / 64.0;
        let budget = match select_ranks(&items, alpha, &ranks) {
            Ok(b) => b,
            Err(e) => {
                fail(format!("trial {trial}: {e}"), &mut detail, &mut failures);
                continue;
            }
        };
        // Coverage.
        if total > 0.0 && budget.selected_score < alpha * total {
            fail(
                format!("trial {trial}: coverage violated"),
                &mut detail,
                &mut failures,
            );
        }
        // Prefix structure is implied by construction; check bounds.
        for (l, &k) in budget.k_per_layer.iter().enumerate() {
            if k > ranks[l] {
                fail(
                    format!("trial {trial}: layer {l} selected {k} > {}", ranks[l]),
                    &mut detail,
                    &mut failures,
                );
            }
        }
        // Exhaustive reference.
        let reference = brute_force_ranks(&scores, alpha * total);
        if reference != budget.k_per_layer {
            fail(
                format!(
                    "trial {trial}: greedy {:?} != brute force {reference:?} (alpha={alpha})",
                    budget.k_per_layer
                ),
                &mut detail,
                &mut failures,
            );
        }
        // Alpha monotonicity on this instance.
        let mut prev = vec![0usize; layers];
        for a in [0.0, 0.25, 0.5, 0.75, 0.9, 1.0] {
            let b = select_ranks(&items, a, &ranks).unwrap();
            if b.k_per_layer.iter().zip(&prev).any(|(hi, lo)| hi < lo) {
                fail(
                    format!("trial {trial}: alpha monotonicity broken at {a}"),
                    &mut detail,
                    &mut failures,
                );
            }
            prev = b.k_per_layer;
        }
    }
    SuiteReport {
        name: "rank-greedy",
        trials,
        max_error: 0.0,
        failures,
        detail,
    }
}

// ---------------------------------------------------------------------------
// Quadratic perturbation bound and Fisher identity
// ---------------------------------------------------------------------------

pub fn quadratic_bound_suite(seed: u64, trials: usize) -> SuiteReport {
    let mut rng = Rng::derive(seed, 0x7e01);
    let mut failures = 0usize;
    let mut max_error = 0.0f64;
    let mut detail = String::new();
    for trial in 0..trials {
        let n = 2 + rng.below(7);
        let a = Matrix::random(n, n, -1.0, 1.0, &mut rng);
        let h = a.transpose().matmul(&a);
        let w: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect();
        match rank_select::verify_quadratic_bound(&h, &w, &d) {
            Ok((actual, bound)) => {
                // Violation magnitude: positive only when the bound fails.
                max_error = max_error.max(actual - bound);
                if actual > bound {
                    failures += 1;
                    if detail.is_empty() {
                        detail = format!("trial {trial}: {actual} > {bound}");
                    }
                }
            }
            Err(e) => {
                failures += 1;
                if detail.is_empty() {
                    detail = format!("trial {trial}: {e}");
                }
            }
        }
    }
    // Fisher identity: ‖g‖₂² equals the Frobenius norm of g·gᵀ.
    for trial in 0..trials {
        let len = 1 + rng.below(64);
        let g: Vec<f64> = (0..len).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut outer_sq = 0.0f64;
        for &x in &g {
            for &y in &g {
                outer_sq += (x * y) * (x * y);
            }
        }
        let err = (fisher_norm(&g) - outer_sq.sqrt()).abs();
        max_error = max_error.max(err);
        if err > 1e-10 {
            failures += 1;
            if detail.is_empty() {
                detail = format!("fisher trial {trial}: deviation {err}");
            }
        }
    }
    SuiteReport {
        name: "quadratic-bound",
        trials: trials * 2,
        max_error,
        failures,
        detail,
    }
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

fn central_diff_case(
    net: &Network,
    task: usize,
    batch: &Batch,
    reg: Option<RegCoefficients>,
) -> Result<(f64, usize), String> {
    let (_, mut grads) = net.backward(task, batch).map_err(|e| e.to_string())?;
    if let Some(c) = &reg {
        nn::apply_reg_subgradients(net, &mut grads, c);
    }
    let mut work = net.clone();
    let mut view = ParamView::new(&mut work, task).map_err(|e| e.to_string())?;
    let analytic = view.flatten_grads(&grads);
    let n_params = view.len();
    let eps = 1e-4;
    let mut max_rel = 0.0f64;
    for idx in 0..n_params {
        let orig = view.get(idx);
        view.set(idx, orig + eps);
        let plus = objective(view.net(), task, batch, &reg)?;
        view.set(idx, orig - eps);
        let minus = objective(view.net(), task, batch, &reg)?;
        view.set(idx, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[idx].abs().max(numeric.abs()).max(1e-3);
        max_rel = max_rel.max((analytic[idx] - numeric).abs() / denom);
    }
    Ok((max_rel, n_params))
}

fn objective(
    net: &Network,
    task: usize,
    batch: &Batch,
    reg: &Option<RegCoefficients>,
) -> Result<f64, String> {
    let logits = net
        .forward(task, &batch.inputs)
        .map_err(|e| e.to_string())?;
    let mut total = nn::loss(&logits, &batch.labels);
    if let Some(c) = reg {
        for lw in net.layer_weights().iter().flatten() {
            if let LayerWeights::DenseLowRank { params, .. }
            | LayerWeights::ConvLowRank { params, .. } = lw
            {
                total += reg_loss_layer(params, c);
            }
        }
    }
    Ok(total)
}

/// Finite-difference validation of every layer kind, the full low-rank
/// reparameterization, and the regularizer subgradients away from the L1
/// kink.
pub fn gradient_check_suite(seed: u64) -> SuiteReport {
    let mut rng = Rng::derive(seed, 0x9cad);
    let mut max_error = 0.0f64;
    let mut failures = 0usize;
    let mut trials = 0usize;
    let mut detail = String::new();
    let run_case = |name: &str,
                    net: &Network,
                    task: usize,
                    batch: &Batch,
                    reg: Option<RegCoefficients>,
                    max_error: &mut f64,
                    failures: &mut usize,
                    trials: &mut usize,
                    detail: &mut String| {
        match central_diff_case(net, task, batch, reg) {
            Ok((rel, n)) => {
                *trials += n;
                *max_error = (*max_error).max(rel);
                if rel >= 1e-4 {
                    *failures += 1;
                    if detail.is_empty() {
                        *detail = format!("{name}: max relative error {rel}");
                    }
                }
            }
            Err(msg) => {
                *failures += 1;
                if detail.is_empty() {
                    *detail = format!("{name}: {msg}");
                }
            }
        }
    };

    // Dense + relu stack.
    {
        let mut net = Network::new(
            vec![
                LayerSpec::Dense {
                    in_dim: 5,
                    out_dim: 6,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_dim: 6,
                    out_dim: 4,
                },
            ],
            Shape::Flat(5),
            seed ^ 0xa,
        )
        .unwrap();
        net.add_head(0, 3, seed ^ 0xb);
        let batch = Batch::new(
            Matrix::random(6, 5, 0.0, 1.0, &mut rng),
            vec![0, 1, 2, 0, 1, 2],
        );
        run_case(
            "dense-relu",
            &net,
            0,
            &batch,
            None,
            &mut max_error,
            &mut failures,
            &mut trials,
            &mut detail,
        );
    }

    // Conv + relu + maxpool + flatten.
    {
        let mut net = Network::new(
            vec![
                LayerSpec::Conv2d {
                    kernel: 3,
                    in_channels: 2,
                    out_channels: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
            ],
            Shape::Image {
                channels: 2,
                height: 4,
                width: 4,
            },
            seed ^ 0xc,
        )
        .unwrap();
        net.add_head(0, 2, seed ^ 0xd);
        let batch = Batch::new(Matrix::random(3, 32, 0.0, 1.0, &mut rng), vec![0, 1, 0]);
        run_case(
            "conv-pool-flatten",
            &net,
            0,
            &batch,
            None,
            &mut max_error,
            &mut failures,
            &mut trials,
            &mut detail,
        );
    }

    // Low-rank dense with the regularizer, entries held off the L1 kink.
    {
        let base = Matrix::random(6, 5, -0.8, 0.8, &mut rng);
        let free = Matrix::random(6, 5, -0.8, 0.8, &mut rng);
        let (r, s, f) = perturb::decompose_fc(&free, &base).unwrap();
        let k = 3;
        let mut low = linalg::truncate(&f, k).unwrap();
        nudge_off_kink(&mut low.u_k, 0.05);
        nudge_off_kink(&mut low.v_k, 0.05);
        let params = TaskLayerParams {
            layer_index: 0,
            r,
            s,
            low_rank: low,
            k,
        };
        let mut net = Network::new(
            vec![LayerSpec::Dense {
                in_dim: 5,
                out_dim: 6,
            }],
            Shape::Flat(5),
            seed ^ 0xe,
        )
        .unwrap();
        net.layer_weights_mut()[0] = Some(LayerWeights::DenseLowRank {
            base,
            params,
            b: vec![0.05; 6],
        });
        net.add_head(1, 3, seed ^ 0xf);
        let batch = Batch::new(
            Matrix::random(5, 5, 0.0, 1.0, &mut rng),
            vec![0, 1, 2, 1, 0],
        );
        run_case(
            "lowrank-dense-reg",
            &net,
            1,
            &batch,
            Some(RegCoefficients::new(1e-2, 1e-2)),
            &mut max_error,
            &mut failures,
            &mut trials,
            &mut detail,
        );
    }

    // Low-rank conv with the regularizer.
    {
        let base = Tensor4::from_fn(3, 3, 3, 2, |_, _, _, _| rng.uniform(-0.5, 0.5));
        let free = Tensor4::from_fn(3, 3, 3, 2, |_, _, _, _| rng.uniform(-0.5, 0.5));
        let (r, s, f) = perturb::decompose_conv(&free, &base).unwrap();
        let k = 2;
        let mut low = linalg::truncate(&f, k).unwrap();
        nudge_off_kink(&mut low.u_k, 0.05);
        nudge_off_kink(&mut low.v_k, 0.05);
        let params = TaskLayerParams {
            layer_index: 0,
            r,
            s,
            low_rank: low,
            k,
        };
        let mut net = Network::new(
            vec![
                LayerSpec::Conv2d {
                    kernel: 3,
                    in_channels: 2,
                    out_channels: 3,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            Shape::Image {
                channels: 2,
                height: 5,
                width: 5,
            },
            seed ^ 0x10,
        )
        .unwrap();
        net.layer_weights_mut()[0] = Some(LayerWeights::ConvLowRank {
            base,
            params,
            b: vec![0.02; 3],
        });
        net.add_head(2, 2, seed ^ 0x11);
        let batch = Batch::new(Matrix::random(3, 50, 0.0, 1.0, &mut rng), vec![0, 1, 1]);
        run_case(
            "lowrank-conv-reg",
            &net,
            2,
            &batch,
            Some(RegCoefficients::new(1e-2, 1e-2)),
            &mut max_error,
            &mut failures,
            &mut trials,
            &mut detail,
        );
    }

    SuiteReport {
        name: "gradient-check",
        trials,
        max_error,
        failures,
        detail,
    }
}

/// Push tiny entries away from zero so the finite-difference step never
/// crosses the L1 kink.
fn nudge_off_kink(m: &mut Matrix, floor: f64) {
    for v in m.data_mut() {
        if v.abs() < floor {
            *v = if *v < 0.0 { -floor } else { floor };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for report in run_all(0) {
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn injected_sigma_ordering_bug_is_caught() {
        let mut rng = Rng::new(3);
        let m = Matrix::random(6, 5, -1.0, 1.0, &mut rng);
        let mut f = linalg::svd(&m).unwrap();
        // Corrupt the factors: swap the two leading singular values without
        // swapping their vectors.
        f.sigma.swap(0, 1);
        assert!(eckart_young_case(&m, &f).is_err());
    }

    #[test]
    fn brute_force_matches_worked_example() {
        // Layer scores {36, 4} and {16, 4}, alpha 0.9 of 60 requires 54:
        // the reference picks (2, 1) like the greedy.
        let scores = vec![vec![36.0, 4.0], vec![16.0, 4.0]];
        assert_eq!(brute_force_ranks(&scores, 54.0), vec![2, 1]);
    }

    #[test]
    fn suite_report_formatting() {
        let r = SuiteReport {
            name: "demo",
            trials: 10,
            max_error: 1e-9,
            failures: 0,
            detail: String::new(),
        };
        let line = r.to_string();
        assert!(line.contains("demo"));
        assert!(line.contains("pass"));
    }
}
