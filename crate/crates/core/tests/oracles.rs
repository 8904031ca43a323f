//! Independent recomputations of derived values.

use std::f64::consts::PI;

use csample::experiments::config::Histogram;
use csample::experiments::posterior_bin_masses;
use csample::forward::ForwardOperator;
use csample::gmm::GaussianMixture;
use csample::linalg::SpdMatrix;
use csample::posterior::{PosteriorModel, Potential};
use csample::rng::RngStream;
use csample::samplers::metropolis_accept;
use csample::scheduler::allocate_budgets;

/// Seven-component fit of the 1D benchmark prior, `(weight, mean, variance)`.
const FIT: [(f64, f64, f64); 7] = [
    (0.111, -5.78, 0.123),
    (0.177, -2.49, 0.223),
    (0.045, -1.49, 0.001),
    (0.065, 0.12, 0.061),
    (0.146, 2.05, 0.032),
    (0.225, 2.78, 0.148),
    (0.231, 6.12, 0.164),
];
const Y: f64 = -1.0;
const R: f64 = 2.2;

fn model() -> PosteriorModel {
    PosteriorModel::new(
        GaussianMixture::univariate(&FIT).unwrap(),
        ForwardOperator::identity(1),
        vec![Y],
        SpdMatrix::spherical(1, R).unwrap(),
    )
    .unwrap()
}

/// `J(x)` by direct summation, no log-space tricks. Weights are renormalised
/// the same way the mixture constructor does.
fn naive_potential(x: f64) -> f64 {
    let total: f64 = FIT.iter().map(|t| t.0).sum();
    let prior: f64 = FIT
        .iter()
        .map(|&(w, m, v)| (w / total) / v.sqrt() * (-0.5 * (x - m) * (x - m) / v).exp())
        .sum();
    0.5 * (x - Y) * (x - Y) / R - prior.ln()
}

#[test]
fn potential_matches_direct_summation() {
    let m = model();
    for x in [0.0, -3.0, 2.5, 6.0] {
        let a = m.neg_log_posterior(&[x]).unwrap();
        assert!((a - naive_potential(x)).abs() < 1e-10, "x={x}");
    }
}

fn quotas(n_ens: usize) -> Vec<f64> {
    let total: f64 = FIT.iter().map(|t| t.0).sum();
    let raw: Vec<f64> = FIT
        .iter()
        .map(|&(w, m, _)| w / total * (-(Y - m) * (Y - m) / (2.0 * R)).exp() / (2.0 * PI * R).sqrt())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|r| r / z * n_ens as f64).collect()
}

#[test]
fn budgets_match_spreadsheet_recomputation() {
    // large enough that no component rounds to zero
    let n_ens = 1_000_000;
    let q = quotas(n_ens);
    let mut counts: Vec<usize> = q.iter().map(|v| v.floor() as usize).collect();
    assert!(counts.iter().all(|&c| c >= 1));
    let mut order: Vec<usize> = (0..FIT.len()).collect();
    order.sort_by(|&a, &b| (q[b] - q[b].floor()).total_cmp(&(q[a] - q[a].floor())));
    let short = n_ens - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    let b = allocate_budgets(&model(), n_ens).unwrap();
    assert_eq!(b.counts, counts);
}

#[test]
fn small_budgets_repair_zeros_and_stay_near_quota() {
    let n_ens = 1000;
    let q = quotas(n_ens);
    let b = allocate_budgets(&model(), n_ens).unwrap();
    assert_eq!(b.counts.iter().sum::<usize>(), n_ens);
    assert!(b.counts.iter().all(|&c| c >= 1));
    let forced = q.iter().filter(|v| **v < 0.5).count();
    for (c, v) in b.counts.iter().zip(&q) {
        // forced samples are taken from the others, so at most `forced` plus rounding
        assert!((*c as f64 - v).abs() <= forced as f64 + 1.0, "{c} vs {v}");
    }
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn evidence_is_finite_and_positive() {
    let z = simpson(|x| (-naive_potential(x)).exp(), -15.0, 15.0, 60_000);
    assert!(z.is_finite() && z > 0.0);
}

#[test]
fn reference_bins_match_simpson() {
    let hist = Histogram::default();
    let masses = posterior_bin_masses(&model(), &hist).unwrap();
    let f = |x: f64| (-naive_potential(x)).exp();
    let z = simpson(f, hist.lo, hist.hi, 200_000);
    let width = (hist.hi - hist.lo) / hist.bins as f64;
    for (b, m) in masses.iter().enumerate() {
        let lo = hist.lo + b as f64 * width;
        let want = simpson(f, lo, lo + width, 4000) / z;
        assert!((m - want).abs() < 1e-6, "bin {b}: {m} vs {want}");
    }
}

/// Three-state chain with a symmetric proposal and the library's accept
/// rule: empirical flows `π_i P_ij` and `π_j P_ji` agree.
#[test]
fn metropolis_rule_satisfies_detailed_balance() {
    let pi = [0.2, 0.5, 0.3];
    let u: Vec<f64> = pi.iter().map(|p: &f64| -p.ln()).collect();
    let mut rng = RngStream::new(77, 0);
    let steps = 400_000;
    let mut flow = [[0u64; 3]; 3];
    let mut s = 0usize;
    for _ in 0..steps {
        let t = (s + 1 + rng.index(2)) % 3;
        if metropolis_accept(u[s] - u[t], &mut rng) {
            flow[s][t] += 1;
            s = t;
        }
    }
    for i in 0..3 {
        for j in 0..i {
            let (a, b) = (flow[i][j] as f64, flow[j][i] as f64);
            // counts differ by at most one per crossing; allow 4σ of Poisson noise
            assert!((a - b).abs() <= 4.0 * (a + b).sqrt() + 1.0, "{i}->{j}: {a} vs {b}");
            let expected = steps as f64 * pi[i] * 0.5 * (pi[j] / pi[i]).min(1.0);
            assert!((a - expected).abs() <= 6.0 * expected.sqrt(), "{i}->{j}: {a} vs {expected}");
        }
    }
}

#[test]
fn potential_of_the_trait_agrees_with_model_method() {
    let m = model();
    for x in [-1.0, 3.0] {
        assert_eq!(Potential::potential(&m, &[x]).unwrap(), m.neg_log_posterior(&[x]).unwrap());
    }
}
