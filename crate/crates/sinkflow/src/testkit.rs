//! Shared fixtures and independent oracles for unit tests.
//!
//! Oracle routines here deliberately avoid the log-domain code paths they are
//! used to check: everything is plain probability-domain arithmetic.

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::measures::{build_reference, CostMatrix, DiscreteMeasure, ReferenceCoupling};

pub(crate) fn asymmetric_instance() -> (DiscreteMeasure, DiscreteMeasure, CostMatrix) {
    (
        DiscreteMeasure::new(array![0.3, 0.7]).unwrap(),
        DiscreteMeasure::new(array![0.6, 0.4]).unwrap(),
        CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap(),
    )
}

/// mu = nu = (1/2, 1/2), swap cost, eps = 1.
pub(crate) fn symmetric_reference() -> ReferenceCoupling {
    let mu = DiscreteMeasure::new(array![0.5, 0.5]).unwrap();
    let cost = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
    build_reference(&mu, &mu, &cost, 1.0).unwrap()
}

/// mu = (0.3, 0.7), nu = (0.6, 0.4), swap cost, eps = 0.5.
pub(crate) fn asymmetric_reference() -> ReferenceCoupling {
    let (mu, nu, cost) = asymmetric_instance();
    build_reference(&mu, &nu, &cost, 0.5).unwrap()
}

/// Y-marginal of the X-balanced coupling induced by `g`, computed with plain
/// probability-domain matrix scaling (independent of the dual code path).
fn naive_y_marginal(r: &ReferenceCoupling, g: &Array1<f64>) -> Array1<f64> {
    let n = r.n();
    let m = r.m();
    let mu: Array1<f64> = r.log_mu().mapv(f64::exp);
    let mut scaled = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            scaled[(i, j)] = r.log_density()[(i, j)].exp() * g[j].exp();
        }
    }
    for i in 0..n {
        let row: f64 = (0..m).map(|j| scaled[(i, j)]).sum();
        for j in 0..m {
            scaled[(i, j)] *= mu[i] / row;
        }
    }
    Array1::from_shape_fn(m, |j| (0..n).map(|i| scaled[(i, j)]).sum())
}

/// Fixed-point oracle for 2x2 instances: solve the balance equation by
/// bisection over the single gauge-free degree of freedom `g = (0, d)`.
pub(crate) fn bisect_optimal_g(r: &ReferenceCoupling) -> Array1<f64> {
    assert_eq!(r.m(), 2, "bisection oracle is for 2x2 instances");
    let nu0 = r.log_nu()[0].exp();
    let balance = |d: f64| naive_y_marginal(r, &array![0.0, d])[0] - nu0;
    let (mut lo, mut hi) = (-60.0, 60.0);
    assert!(balance(lo) > 0.0 && balance(hi) < 0.0, "bracket failure");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if balance(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    array![0.0, 0.5 * (lo + hi)]
}

/// Seeded random problem: weights bounded away from zero, costs in [0, 2].
pub(crate) fn random_instance(
    n: usize,
    m: usize,
    epsilon: f64,
    seed: u64,
) -> (ReferenceCoupling, (DiscreteMeasure, DiscreteMeasure)) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut draw_measure = |k: usize| {
        let mut w: Array1<f64> = Array1::from_shape_fn(k, |_| rng.gen_range(0.2..1.0));
        w /= w.sum();
        DiscreteMeasure::new(w).unwrap()
    };
    let mu = draw_measure(n);
    let nu = draw_measure(m);
    let cost =
        CostMatrix::new(Array2::from_shape_fn((n, m), |_| rng.gen_range(0.0..2.0))).unwrap();
    let r = build_reference(&mu, &nu, &cost, epsilon).unwrap();
    (r, (mu, nu))
}
