//! Discrete probability measures, cost kernels, and the normalized reference
//! coupling, together with the log-domain primitives shared by every solver.
//!
//! All couplings live in log-domain; probability-domain values are
//! materialized only for diagnostics. This keeps small regularization
//! parameters (down to 1e-2 with order-one costs) far away from underflow.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Named tolerances used in validation.
pub mod tol {
    /// Probability vectors must sum to 1 within this bound.
    pub const SIMPLEX_SUM: f64 = 1e-12;
    /// Couplings and reference couplings must have total mass 1 within this bound.
    pub const COUPLING_MASS: f64 = 1e-10;
}

/// Numerically stable `log Σ exp(v_i)` with max-subtraction.
///
/// Stays finite for entries up to ±1e3 and propagates `-inf` correctly
/// (an all `-inf` input yields `-inf`).
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::DimensionMismatch(
            "log_sum_exp of an empty vector".into(),
        ));
    }
    Ok(lse(values.iter().copied()))
}

/// Infallible log-sum-exp over a non-empty iterator; hot-path helper.
pub(crate) fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// A probability measure on a finite support.
///
/// Weights are nonnegative and sum to 1 within [`tol::SIMPLEX_SUM`]. The
/// optional `support` holds strictly increasing grid coordinates, used by the
/// 1D bridge sandbox.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    weights: Array1<f64>,
    support: Option<Array1<f64>>,
}

impl DiscreteMeasure {
    /// Build a measure from weights alone.
    pub fn new(weights: Array1<f64>) -> Result<Self> {
        Self::validated(weights, None, tol::SIMPLEX_SUM)
    }

    /// Build a measure on an explicit 1D grid.
    pub fn with_support(weights: Array1<f64>, support: Array1<f64>) -> Result<Self> {
        Self::validated(weights, Some(support), tol::SIMPLEX_SUM)
    }

    /// Uniform measure on `n` atoms.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("empty measure".into()));
        }
        Self::new(Array1::from_elem(n, 1.0 / n as f64))
    }

    /// Gaussian histogram on a grid: node weights proportional to the normal
    /// density, renormalized to a probability vector.
    pub fn gaussian_histogram(grid: &Array1<f64>, mean: f64, variance: f64) -> Result<Self> {
        if variance <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "gaussian variance must be positive, got {variance}"
            )));
        }
        let mut w: Array1<f64> = grid.mapv(|z| (-(z - mean).powi(2) / (2.0 * variance)).exp());
        let sum = w.sum();
        if sum <= 0.0 {
            return Err(Error::Degenerate(
                "gaussian histogram underflowed to zero on this grid".into(),
            ));
        }
        w /= sum;
        Self::validated(w, Some(grid.clone()), tol::SIMPLEX_SUM)
    }

    /// Constructor with a caller-chosen mass tolerance; used for marginals of
    /// couplings, which are only guaranteed to [`tol::COUPLING_MASS`].
    pub(crate) fn with_mass_tolerance(weights: Array1<f64>, mass_tol: f64) -> Result<Self> {
        Self::validated(weights, None, mass_tol)
    }

    fn validated(
        weights: Array1<f64>,
        support: Option<Array1<f64>>,
        mass_tol: f64,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("empty measure".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(
                "measure weights must be finite and nonnegative".into(),
            ));
        }
        let sum = weights.sum();
        if (sum - 1.0).abs() > mass_tol {
            return Err(Error::InvalidParameter(format!(
                "measure weights sum to {sum}, expected 1 within {mass_tol:e}"
            )));
        }
        if let Some(s) = &support {
            if s.len() != weights.len() {
                return Err(Error::DimensionMismatch(format!(
                    "support has {} points but there are {} weights",
                    s.len(),
                    weights.len()
                )));
            }
            if s.iter().any(|z| !z.is_finite()) {
                return Err(Error::InvalidParameter("support must be finite".into()));
            }
            if s.windows(2).into_iter().any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidParameter(
                    "support must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { weights, support })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn support(&self) -> Option<&Array1<f64>> {
        self.support.as_ref()
    }

    /// Elementwise log-weights; zero atoms map to `-inf`.
    pub fn log_weights(&self) -> Array1<f64> {
        self.weights.mapv(f64::ln)
    }

    /// Weighted mean and standard deviation over the support, when present.
    pub fn mean_and_std(&self) -> Option<(f64, f64)> {
        let support = self.support.as_ref()?;
        let mean: f64 = support
            .iter()
            .zip(self.weights.iter())
            .map(|(z, w)| z * w)
            .sum();
        let var: f64 = support
            .iter()
            .zip(self.weights.iter())
            .map(|(z, w)| w * (z - mean).powi(2))
            .sum();
        Some((mean, var.max(0.0).sqrt()))
    }
}

/// Uniformly spaced grid of `n >= 2` points spanning `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Result<Array1<f64>> {
    if n < 2 {
        return Err(Error::InvalidParameter("grid needs at least 2 points".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidParameter(format!(
            "invalid grid range [{lo}, {hi}]"
        )));
    }
    let step = (hi - lo) / (n - 1) as f64;
    Ok(Array1::from_iter((0..n).map(|i| lo + step * i as f64)))
}

/// Dense cost matrix; entry `(i, j)` is the cost of moving from atom `i` of
/// the first measure to atom `j` of the second.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidParameter("empty cost matrix".into()));
        }
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(
                "cost matrix entries must be finite".into(),
            ));
        }
        Ok(Self { entries })
    }

    /// Tabulate `cost(x_i, y_j)` over two coordinate vectors.
    pub fn from_fn(
        xs: &Array1<f64>,
        ys: &Array1<f64>,
        cost: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let entries = Array2::from_shape_fn((xs.len(), ys.len()), |(i, j)| cost(xs[i], ys[j]));
        Self::new(entries)
    }

    /// The quadratic cost `c(x, y) = |x - y|^2 / 2` used by the bridge sandbox.
    pub fn half_squared_distance(xs: &Array1<f64>, ys: &Array1<f64>) -> Result<Self> {
        Self::from_fn(xs, ys, |x, y| 0.5 * (x - y).powi(2))
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }
}

/// The normalized Gibbs reference coupling.
///
/// Stores `log_density(i, j) = log mu_i + log nu_j - c~(i, j) / epsilon`,
/// where `c~` is the cost shifted by `normalizer = epsilon * log Z` so that
/// the density is a probability matrix. The shift is recorded so the original
/// cost is recoverable.
#[derive(Debug, Clone)]
pub struct ReferenceCoupling {
    log_density: Array2<f64>,
    epsilon: f64,
    log_mu: Array1<f64>,
    log_nu: Array1<f64>,
    normalizer: f64,
}

/// Build the reference coupling for `(mu, nu, cost, epsilon)`.
///
/// Zero atoms are rejected: the potentials and log-densities are undefined
/// there, so callers must prune empty support points first.
pub fn build_reference(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    epsilon: f64,
) -> Result<ReferenceCoupling> {
    if cost.nrows() != mu.len() || cost.ncols() != nu.len() {
        return Err(Error::DimensionMismatch(format!(
            "cost is {}x{} but measures have {} and {} atoms",
            cost.nrows(),
            cost.ncols(),
            mu.len(),
            nu.len()
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if mu.weights().iter().any(|w| *w == 0.0) || nu.weights().iter().any(|w| *w == 0.0) {
        return Err(Error::InvalidParameter(
            "zero atoms are not supported; prune them before building the reference".into(),
        ));
    }
    let log_mu = mu.log_weights();
    let log_nu = nu.log_weights();
    let mut log_density = Array2::from_shape_fn((mu.len(), nu.len()), |(i, j)| {
        log_mu[i] + log_nu[j] - cost.entries()[(i, j)] / epsilon
    });
    let log_z = lse(log_density.iter().copied());
    log_density.mapv_inplace(|v| v - log_z);
    Ok(ReferenceCoupling {
        log_density,
        epsilon,
        log_mu,
        log_nu,
        normalizer: epsilon * log_z,
    })
}

impl ReferenceCoupling {
    pub fn n(&self) -> usize {
        self.log_density.nrows()
    }

    pub fn m(&self) -> usize {
        self.log_density.ncols()
    }

    pub fn log_density(&self) -> &Array2<f64> {
        &self.log_density
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// The recorded cost shift `epsilon * log Z`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn log_mu(&self) -> &Array1<f64> {
        &self.log_mu
    }

    pub fn log_nu(&self) -> &Array1<f64> {
        &self.log_nu
    }

    /// The reference as a plain coupling.
    pub fn to_coupling(&self) -> Coupling {
        Coupling {
            log_density: self.log_density.clone(),
        }
    }
}

/// A joint probability mass matrix stored as log-densities.
#[derive(Debug, Clone)]
pub struct Coupling {
    log_density: Array2<f64>,
}

impl Coupling {
    /// Wrap a log-density matrix, checking total mass 1 within
    /// [`tol::COUPLING_MASS`].
    pub fn from_log_density(log_density: Array2<f64>) -> Result<Self> {
        if log_density.is_empty() {
            return Err(Error::InvalidParameter("empty coupling".into()));
        }
        if log_density.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Degenerate(
                "coupling log-density contains NaN or +inf".into(),
            ));
        }
        let mass: f64 = log_density.iter().map(|v| v.exp()).sum();
        if (mass - 1.0).abs() > tol::COUPLING_MASS {
            return Err(Error::InvalidParameter(format!(
                "coupling mass is {mass}, expected 1 within {:e}",
                tol::COUPLING_MASS
            )));
        }
        Ok(Self { log_density })
    }

    pub fn log_density(&self) -> &Array2<f64> {
        &self.log_density
    }

    pub fn nrows(&self) -> usize {
        self.log_density.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.log_density.ncols()
    }

    /// Probability-domain density matrix (diagnostics only).
    pub fn density(&self) -> Array2<f64> {
        self.log_density.mapv(f64::exp)
    }

    /// Row-sum and column-sum marginals as measures.
    pub fn marginals(&self) -> (DiscreteMeasure, DiscreteMeasure) {
        let density = self.density();
        let x = density.sum_axis(ndarray::Axis(1));
        let y = density.sum_axis(ndarray::Axis(0));
        // Mass was checked at construction, so these cannot fail.
        (
            DiscreteMeasure::with_mass_tolerance(x, tol::COUPLING_MASS).expect("valid X-marginal"),
            DiscreteMeasure::with_mass_tolerance(y, tol::COUPLING_MASS).expect("valid Y-marginal"),
        )
    }
}

/// Relative entropy `Σ p_i log(p_i / q_i)` with the convention `0 log 0 = 0`.
///
/// Returns `+inf` when `p` puts mass where `q` has none; this sentinel is part
/// of the contract, not an error.
pub fn kl_divergence(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "kl_divergence on vectors of lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q.iter()).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidParameter(
            "kl_divergence inputs must be finite and nonnegative".into(),
        ));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi.ln() - qi.ln());
    }
    Ok(total)
}

/// Relative entropy between two couplings, evaluated in log-domain.
pub fn kl_couplings(p: &Coupling, q: &Coupling) -> Result<f64> {
    if p.nrows() != q.nrows() || p.ncols() != q.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "kl_couplings on {}x{} and {}x{}",
            p.nrows(),
            p.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let mut total = 0.0;
    for (&lp, &lq) in p.log_density().iter().zip(q.log_density().iter()) {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        total += lp.exp() * (lp - lq);
    }
    Ok(total)
}

/// Total-variation distance `Σ |a_i - b_i| / 2` between probability vectors.
pub fn total_variation(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "total_variation on mismatched lengths");
    0.5 * a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// The asymmetric 2x2 test instance used across the crate.
    pub(crate) fn asymmetric_instance() -> (DiscreteMeasure, DiscreteMeasure, CostMatrix) {
        (
            DiscreteMeasure::new(array![0.3, 0.7]).unwrap(),
            DiscreteMeasure::new(array![0.6, 0.4]).unwrap(),
            CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap(),
        )
    }

    #[test]
    fn log_sum_exp_basics() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        // stability case: no overflow for large entries
        let v = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!(v.is_finite());
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(log_sum_exp(&[]).is_err());
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn log_sum_exp_matches_naive_at_small_magnitudes() {
        // fixed 10-vector; naive summation oracle
        let v: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn measure_validation() {
        assert!(DiscreteMeasure::new(array![0.5, 0.5]).is_ok());
        assert!(DiscreteMeasure::new(array![0.5, 0.4]).is_err());
        assert!(DiscreteMeasure::new(array![-0.1, 1.1]).is_err());
        // support must be strictly increasing
        assert!(DiscreteMeasure::with_support(array![0.5, 0.5], array![1.0, 1.0]).is_err());
        assert!(DiscreteMeasure::with_support(array![0.5, 0.5], array![0.0, 1.0]).is_ok());
    }

    #[test]
    fn reference_symmetric_instance_has_uniform_marginals() {
        let mu = DiscreteMeasure::new(array![0.5, 0.5]).unwrap();
        let cost = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let r = build_reference(&mu, &mu, &cost, 1.0).unwrap();
        let pi = r.to_coupling();
        // symmetry forces uniform marginals
        let (mx, my) = pi.marginals();
        for w in mx.weights().iter().chain(my.weights().iter()) {
            assert!((w - 0.5).abs() < 1e-12);
        }
        assert!(
            (pi.log_density()[(0, 0)] - pi.log_density()[(1, 1)]).abs() < 1e-15,
            "log-density must be symmetric"
        );
    }

    #[test]
    fn reference_asymmetric_instance_normalizer() {
        let (mu, nu, cost) = asymmetric_instance();
        let r = build_reference(&mu, &nu, &cost, 0.5).unwrap();
        let mass: f64 = r.log_density().iter().map(|v| v.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-10);
        // direct summation oracle: eps * log Σ mu_i nu_j exp(-c_ij / eps)
        assert!((r.normalizer() - (-0.3145408985286321)).abs() < 1e-14);
    }

    #[test]
    fn reference_zero_cost_is_product_coupling() {
        let (mu, nu, _) = asymmetric_instance();
        let cost = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        let r = build_reference(&mu, &nu, &cost, 2.0).unwrap();
        assert!(r.normalizer().abs() < 1e-14);
        for i in 0..2 {
            for j in 0..2 {
                let expect = mu.weights()[i].ln() + nu.weights()[j].ln();
                assert!((r.log_density()[(i, j)] - expect).abs() < 1e-14);
            }
        }
        // product coupling marginals reproduce (mu, nu)
        let (mx, my) = r.to_coupling().marginals();
        for i in 0..2 {
            assert!((mx.weights()[i] - mu.weights()[i]).abs() < 1e-12);
            assert!((my.weights()[i] - nu.weights()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_rejects_bad_inputs() {
        let (mu, nu, cost) = asymmetric_instance();
        assert!(matches!(
            build_reference(&mu, &nu, &cost, 0.0),
            Err(Error::InvalidParameter(_))
        ));
        let c3 = CostMatrix::new(Array2::zeros((3, 2))).unwrap();
        assert!(matches!(
            build_reference(&mu, &nu, &c3, 1.0),
            Err(Error::DimensionMismatch(_))
        ));
        let with_zero = DiscreteMeasure::new(array![1.0, 0.0]).unwrap();
        assert!(matches!(
            build_reference(&with_zero, &nu, &cost, 1.0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn marginals_of_reference_match_summation_oracle() {
        let (mu, nu, cost) = asymmetric_instance();
        let r = build_reference(&mu, &nu, &cost, 0.5).unwrap();
        let density = r.to_coupling().density();
        let (mx, my) = r.to_coupling().marginals();
        for i in 0..2 {
            let row: f64 = (0..2).map(|j| density[(i, j)]).sum();
            let col: f64 = (0..2).map(|j| density[(j, i)]).sum();
            assert!((mx.weights()[i] - row).abs() < 1e-15);
            assert!((my.weights()[i] - col).abs() < 1e-15);
        }
        // frozen oracle values for this instance
        assert!((mx.weights()[0] - 0.3681245711196199).abs() < 1e-14);
        assert!((my.weights()[0] - 0.44428669458372605).abs() < 1e-14);
    }

    #[test]
    fn diagonal_coupling_marginals() {
        let log_half = 0.5f64.ln();
        let pi = Coupling::from_log_density(array![
            [log_half, f64::NEG_INFINITY],
            [f64::NEG_INFINITY, log_half]
        ])
        .unwrap();
        let (mx, my) = pi.marginals();
        for w in mx.weights().iter().chain(my.weights().iter()) {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_divergence_examples() {
        let p = array![0.5, 0.5];
        assert_eq!(kl_divergence(p.view(), p.view()).unwrap(), 0.0);
        // closed form: KL((1,0) || (1/2,1/2)) = log 2
        let v = kl_divergence(array![1.0, 0.0].view(), array![0.5, 0.5].view()).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        // hand evaluation oracle: 0.6 log 1.2 + 0.4 log 0.8
        let v = kl_divergence(array![0.6, 0.4].view(), array![0.5, 0.5].view()).unwrap();
        assert!((v - 0.020135513550688863).abs() < 1e-16);
        // +inf sentinel when p charges a q-null atom
        let v = kl_divergence(array![0.5, 0.5].view(), array![1.0, 0.0].view()).unwrap();
        assert!(v.is_infinite());
    }

    #[test]
    fn gaussian_histogram_moments() {
        let grid = uniform_grid(-4.0, 4.0, 201).unwrap();
        let m = DiscreteMeasure::gaussian_histogram(&grid, -1.0, 0.25).unwrap();
        let (mean, std) = m.mean_and_std().unwrap();
        assert!((mean + 1.0).abs() < 1e-6);
        assert!((std - 0.5).abs() < 1e-4);
    }

    proptest::proptest! {
        /// Gibbs inequality: KL >= 0, and KL = 0 iff the inputs agree.
        #[test]
        fn kl_nonnegative(choices in proptest::collection::vec(0.05f64..1.0, 4)) {
            let p0 = choices[0] / (choices[0] + choices[1]);
            let q0 = choices[2] / (choices[2] + choices[3]);
            let p = array![p0, 1.0 - p0];
            let q = array![q0, 1.0 - q0];
            let v = kl_divergence(p.view(), q.view()).unwrap();
            proptest::prop_assert!(v >= 0.0);
            if (p0 - q0).abs() > 1e-12 {
                proptest::prop_assert!(v > 0.0);
            }
        }

        /// log_sum_exp agrees with the naive formula when the latter cannot overflow.
        #[test]
        fn lse_matches_naive(v in proptest::collection::vec(-20.0f64..20.0, 1..12)) {
            let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
            let stable = log_sum_exp(&v).unwrap();
            proptest::prop_assert!((stable - naive).abs() < 1e-12);
        }
    }
}
