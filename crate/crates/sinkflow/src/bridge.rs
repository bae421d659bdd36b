//! 1D diffusion-bridge sandbox with unit diffusion on the unit horizon.
//!
//! The endpoint problem is solved as entropy-regularized transport with
//! quadratic cost `|x - y|^2 / 2` and `epsilon = sigma^2`. Solved potentials
//! lift to time-dependent drift fields through Gaussian heat-kernel
//! quadrature; path marginals of endpoint-pinned measures are Brownian-bridge
//! mixtures, evaluated exactly instead of through a PDE solve. On top of
//! these sit Euler–Maruyama particle transport, the time-reversal drift
//! formula, Monte-Carlo value functions (plain and killed), and the
//! adjustable-step drift recursion.
//!
//! v1 pins the diffusion coefficient and the horizon to 1 at the SDE layer;
//! the types carry both fields for later generalization.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::{build_reference, lse, Coupling, CostMatrix, DiscreteMeasure, ReferenceCoupling};
use crate::sinkhorn::{solve_with_reference, Potentials, SolveFlag, SolverConfig};

/// Particles are simulated in fixed-size chunks, one generator stream per
/// chunk, so results do not depend on the thread count.
const CHUNK: usize = 8192;

/// Smallest admissible heat-kernel variance, as a multiple of the grid
/// spacing squared. Below this the lattice quadrature of the Gaussian kernel
/// degrades; at `(0.7 dz)^2` the wrap-around error is already below 2e-4.
fn min_heat_variance(dz: f64) -> f64 {
    (0.7 * dz).powi(2)
}

/// Endpoint measures on a shared uniform 1D grid.
#[derive(Debug, Clone)]
pub struct BridgeProblem {
    mu0: DiscreteMeasure,
    mu_t: DiscreteMeasure,
    sigma_diff: f64,
    horizon: f64,
}

impl BridgeProblem {
    /// v1 constructor: diffusion coefficient and horizon fixed to 1.
    pub fn new(mu0: DiscreteMeasure, mu_t: DiscreteMeasure) -> Result<Self> {
        Self::with_sigma(mu0, mu_t, 1.0)
    }

    /// Static-solve variant with a general diffusion coefficient. The SDE
    /// layer (lifting, simulation) still requires `sigma = 1` in v1.
    pub fn with_sigma(mu0: DiscreteMeasure, mu_t: DiscreteMeasure, sigma_diff: f64) -> Result<Self> {
        if !(sigma_diff > 0.0 && sigma_diff.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "diffusion coefficient must be positive, got {sigma_diff}"
            )));
        }
        let grid = mu0
            .support()
            .ok_or_else(|| Error::InvalidParameter("mu0 needs grid support".into()))?;
        let grid_t = mu_t
            .support()
            .ok_or_else(|| Error::InvalidParameter("muT needs grid support".into()))?;
        if grid.len() != grid_t.len()
            || grid
                .iter()
                .zip(grid_t.iter())
                .any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(Error::DimensionMismatch(
                "endpoint measures must share one grid".into(),
            ));
        }
        if grid.len() < 3 {
            return Err(Error::InvalidParameter("grid needs at least 3 points".into()));
        }
        let dz = grid[1] - grid[0];
        if grid
            .windows(2)
            .into_iter()
            .any(|w| ((w[1] - w[0]) - dz).abs() > 1e-9 * dz.abs())
        {
            return Err(Error::InvalidParameter("grid must be uniform".into()));
        }
        // grid must cover +/- 5 standard deviations of both marginals
        let (lo, hi) = (grid[0], grid[grid.len() - 1]);
        for (name, m) in [("mu0", &mu0), ("muT", &mu_t)] {
            let (mean, std) = m.mean_and_std().expect("support checked above");
            if mean - 5.0 * std < lo || mean + 5.0 * std > hi {
                return Err(Error::InvalidParameter(format!(
                    "grid [{lo}, {hi}] does not cover {name} mean {mean} +/- 5 std {std}"
                )));
            }
        }
        Ok(Self {
            mu0,
            mu_t,
            sigma_diff,
            horizon: 1.0,
        })
    }

    pub fn mu0(&self) -> &DiscreteMeasure {
        &self.mu0
    }

    pub fn mu_t(&self) -> &DiscreteMeasure {
        &self.mu_t
    }

    pub fn sigma_diff(&self) -> f64 {
        self.sigma_diff
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn grid(&self) -> &Array1<f64> {
        self.mu0.support().expect("validated at construction")
    }

    pub fn spacing(&self) -> f64 {
        let grid = self.grid();
        grid[1] - grid[0]
    }

    /// The entropic-transport reference for this problem: quadratic cost with
    /// `epsilon = sigma^2`.
    pub fn reference(&self) -> Result<ReferenceCoupling> {
        let cost = CostMatrix::half_squared_distance(self.grid(), self.grid())?;
        build_reference(&self.mu0, &self.mu_t, &cost, self.sigma_diff * self.sigma_diff)
    }
}

/// Solve the endpoint problem to potentials with objective below 1e-10.
pub fn static_bridge(problem: &BridgeProblem) -> Result<Potentials> {
    let reference = Arc::new(problem.reference()?);
    let config = SolverConfig {
        tol: 1e-15,
        max_iter: 200_000,
        record_every: usize::MAX,
        ..SolverConfig::default()
    };
    let result = solve_with_reference(reference, &config)?;
    match result.flag {
        SolveFlag::Converged => Ok(result.potentials),
        SolveFlag::MaxIterReached => {
            // accept anything comfortably inside the contract
            let last = result.trace.last().map(|r| r.objective).unwrap_or(f64::NAN);
            if last < 1e-12 {
                Ok(result.potentials)
            } else {
                Err(Error::Degenerate(format!(
                    "endpoint solve stalled at objective {last:e}"
                )))
            }
        }
        SolveFlag::Degenerate => Err(Error::Degenerate("endpoint solve degenerated".into())),
    }
}

/// Convert a grid potential relative to the weighted reference into the
/// grid-density form expected by the heat-kernel lift: `g + log(w / dz)`.
pub fn lebesgue_potential(g: ArrayView1<f64>, terminal: &DiscreteMeasure) -> Result<Array1<f64>> {
    let support = terminal
        .support()
        .ok_or_else(|| Error::InvalidParameter("terminal measure needs grid support".into()))?;
    if g.len() != terminal.len() {
        return Err(Error::DimensionMismatch(format!(
            "potential has {} entries, measure has {}",
            g.len(),
            terminal.len()
        )));
    }
    let dz = support[1] - support[0];
    Ok(Array1::from_shape_fn(g.len(), |j| {
        g[j] + terminal.weights()[j].ln() - dz.ln()
    }))
}

/// A scalar field sampled on a time-space grid, interpolated bilinearly and
/// clamped outside its domain. Used for drifts, score ratios, and value
/// gradients alike.
#[derive(Debug, Clone)]
pub struct DriftField {
    t_grid: Vec<f64>,
    z_grid: Array1<f64>,
    values: Array2<f64>,
}

impl DriftField {
    pub fn new(t_grid: Vec<f64>, z_grid: Array1<f64>, values: Array2<f64>) -> Result<Self> {
        if t_grid.is_empty() || z_grid.len() < 2 {
            return Err(Error::InvalidParameter(
                "field needs at least one time row and two space columns".into(),
            ));
        }
        if t_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "field times must be strictly increasing".into(),
            ));
        }
        if t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidParameter(
                "field times must lie in [0, 1]".into(),
            ));
        }
        let dz = z_grid[1] - z_grid[0];
        if z_grid
            .windows(2)
            .into_iter()
            .any(|w| ((w[1] - w[0]) - dz).abs() > 1e-9 * dz.abs())
        {
            return Err(Error::InvalidParameter("field grid must be uniform".into()));
        }
        if values.nrows() != t_grid.len() || values.ncols() != z_grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "field values are {}x{}, expected {}x{}",
                values.nrows(),
                values.ncols(),
                t_grid.len(),
                z_grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("field values must be finite".into()));
        }
        Ok(Self {
            t_grid,
            z_grid,
            values,
        })
    }

    /// Uniformly zero field on the given grids.
    pub fn zeros(t_grid: Vec<f64>, z_grid: Array1<f64>) -> Result<Self> {
        let values = Array2::zeros((t_grid.len(), z_grid.len()));
        Self::new(t_grid, z_grid, values)
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn z_grid(&self) -> &Array1<f64> {
        &self.z_grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    fn row_interp(&self, row: usize, z: f64) -> f64 {
        let nz = self.z_grid.len();
        let dz = self.z_grid[1] - self.z_grid[0];
        let u = (z - self.z_grid[0]) / dz;
        if u <= 0.0 {
            return self.values[(row, 0)];
        }
        if u >= (nz - 1) as f64 {
            return self.values[(row, nz - 1)];
        }
        let k = u.floor() as usize;
        let frac = u - k as f64;
        self.values[(row, k)] * (1.0 - frac) + self.values[(row, k + 1)] * frac
    }

    /// Bilinear interpolation, clamped to the nearest row/column outside the
    /// covered window. Particles beyond the grid therefore see the edge value.
    pub fn eval(&self, t: f64, z: f64) -> f64 {
        let nt = self.t_grid.len();
        if t <= self.t_grid[0] || nt == 1 {
            return self.row_interp(0, z);
        }
        if t >= self.t_grid[nt - 1] {
            return self.row_interp(nt - 1, z);
        }
        let hi = self.t_grid.partition_point(|&v| v < t).min(nt - 1);
        let lo = hi - 1;
        let w = (t - self.t_grid[lo]) / (self.t_grid[hi] - self.t_grid[lo]);
        self.row_interp(lo, z) * (1.0 - w) + self.row_interp(hi, z) * w
    }

    /// The field seen by the reverse-time process: `t -> 1 - t`.
    pub fn time_flip(&self) -> Self {
        let nt = self.t_grid.len();
        let t_grid: Vec<f64> = self.t_grid.iter().rev().map(|t| 1.0 - t).collect();
        let values = Array2::from_shape_fn(self.values.raw_dim(), |(i, j)| {
            self.values[(nt - 1 - i, j)]
        });
        Self {
            t_grid,
            z_grid: self.z_grid.clone(),
            values,
        }
    }

    fn same_grids(&self, other: &Self) -> bool {
        self.t_grid.len() == other.t_grid.len()
            && self.z_grid.len() == other.z_grid.len()
            && self
                .t_grid
                .iter()
                .zip(other.t_grid.iter())
                .all(|(a, b)| a == b)
            && self
                .z_grid
                .iter()
                .zip(other.z_grid.iter())
                .all(|(a, b)| a == b)
    }
}

/// Gradient along the space axis: central differences inside, one-sided at
/// the two edges.
fn space_gradient(values: ArrayView1<f64>, dz: f64) -> Array1<f64> {
    let n = values.len();
    Array1::from_shape_fn(n, |k| {
        if k == 0 {
            (values[1] - values[0]) / dz
        } else if k == n - 1 {
            (values[n - 1] - values[n - 2]) / dz
        } else {
            (values[k + 1] - values[k - 1]) / (2.0 * dz)
        }
    })
}

/// One time slice of the heat-kernel lift: `log Σ_j exp(g_j) N(z_j; z, 1-t) dz`,
/// evaluated on the grid itself.
///
/// Values are accurate wherever the tilted kernel keeps its mass inside the
/// grid; potentials that decay like the terminal measure (the intended use)
/// satisfy this everywhere.
pub fn lift_log_h(g_fn: ArrayView1<f64>, z_grid: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
    if g_fn.len() != z_grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "potential has {} entries, grid has {}",
            g_fn.len(),
            z_grid.len()
        )));
    }
    if g_fn.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("potential must be finite".into()));
    }
    let dz = z_grid[1] - z_grid[0];
    let variance = 1.0 - t;
    if !(0.0..=1.0).contains(&t) || variance < min_heat_variance(dz) {
        return Err(Error::InvalidParameter(format!(
            "time {t} too close to the terminal time for spacing {dz} (variance floor {:e})",
            min_heat_variance(dz)
        )));
    }
    let log_norm = dz.ln() - 0.5 * (2.0 * std::f64::consts::PI * variance).ln();
    let m = z_grid.len();
    let mut out = Array1::zeros(m);
    let slices: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|k| {
            let zk = z_grid[k];
            let terms: Vec<f64> = (0..m)
                .map(|j| g_fn[j] - (z_grid[j] - zk).powi(2) / (2.0 * variance))
                .collect();
            lse(terms.iter().copied()) + log_norm
        })
        .collect();
    for (k, v) in slices.into_iter().enumerate() {
        out[k] = v;
    }
    Ok(out)
}

/// Lift a terminal potential (grid-density form) to the drift field
/// `b(t, z) = d/dz log E[exp(g(W_1)) | W_t = z]` over the given times.
///
/// Times must stay below the terminal time by the grid-resolution floor;
/// drifts near `t = 1` are handled by clamping during simulation.
pub fn lift_drift(
    g_fn: ArrayView1<f64>,
    t_grid: &[f64],
    z_grid: &Array1<f64>,
) -> Result<DriftField> {
    if t_grid.is_empty() {
        return Err(Error::InvalidParameter("empty time grid".into()));
    }
    let dz = z_grid[1] - z_grid[0];
    let rows: Result<Vec<Array1<f64>>> = t_grid
        .iter()
        .map(|&t| Ok(space_gradient(lift_log_h(g_fn, z_grid, t)?.view(), dz)))
        .collect();
    let rows = rows?;
    let mut values = Array2::zeros((t_grid.len(), z_grid.len()));
    for (i, row) in rows.into_iter().enumerate() {
        values.row_mut(i).assign(&row);
    }
    DriftField::new(t_grid.to_vec(), z_grid.clone(), values)
}

/// Log-density of the Brownian-bridge mixture pinned by `pi`, on the grid.
pub fn log_path_marginal(pi: &Coupling, z_grid: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
    let m = z_grid.len();
    if pi.nrows() != m || pi.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "coupling is {}x{}, grid has {m} points",
            pi.nrows(),
            pi.ncols()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!(
            "time {t} outside [0, 1]"
        )));
    }
    let dz = z_grid[1] - z_grid[0];
    let lp = pi.log_density();
    if t == 0.0 || t == 1.0 {
        // the mixture collapses onto the endpoint marginal
        let axis = if t == 0.0 { 1 } else { 0 };
        let logm = Array1::from_shape_fn(m, |k| {
            let it = (0..m).map(|o| {
                if axis == 1 {
                    lp[(k, o)]
                } else {
                    lp[(o, k)]
                }
            });
            lse(it) - dz.ln()
        });
        return Ok(logm);
    }
    let variance = t * (1.0 - t);
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * variance).ln();
    let vals: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|k| {
            let zk = z_grid[k];
            let mut terms = Vec::with_capacity(m * m);
            for i in 0..m {
                let xi = (1.0 - t) * z_grid[i];
                for j in 0..m {
                    let mean = xi + t * z_grid[j];
                    terms.push(lp[(i, j)] - (zk - mean).powi(2) / (2.0 * variance));
                }
            }
            lse(terms.iter().copied()) + log_norm
        })
        .collect();
    Ok(Array1::from_vec(vals))
}

/// Density of the pinned path measure at time `t`, evaluated on the grid.
///
/// Nonnegative by construction and integrates to 1 within quadrature error
/// whenever the grid covers the mixture's mass; `t = 0` and `t = 1` reproduce
/// the endpoint densities exactly.
pub fn path_marginal(pi: &Coupling, z_grid: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
    Ok(log_path_marginal(pi, z_grid, t)?.mapv(f64::exp))
}

/// Positions of a particle population at a fixed time.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub positions: Vec<f64>,
    pub time: f64,
    pub seed: u64,
}

impl ParticleEnsemble {
    /// Histogram density over node-centered bins of the grid; out-of-range
    /// particles accumulate in the edge bins.
    pub fn histogram_density(&self, z_grid: &Array1<f64>) -> Array1<f64> {
        let m = z_grid.len();
        let dz = z_grid[1] - z_grid[0];
        let mut counts = vec![0usize; m];
        for &x in &self.positions {
            let idx = ((x - z_grid[0]) / dz).round();
            let idx = idx.clamp(0.0, (m - 1) as f64) as usize;
            counts[idx] += 1;
        }
        let norm = self.positions.len() as f64 * dz;
        Array1::from_iter(counts.into_iter().map(|c| c as f64 / norm))
    }

    pub fn mean(&self) -> f64 {
        self.positions.iter().sum::<f64>() / self.positions.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.positions
            .iter()
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / self.positions.len() as f64
    }
}

/// Euler–Maruyama transport of `n_particles` drawn from `init` under the
/// drift field, from time 0 to 1 with unit diffusion.
///
/// Deterministic for a fixed seed: particles run in fixed-size chunks with
/// one counter-based generator stream per chunk. Time steps are right-open
/// (the drift is never evaluated at `t = 1`); the field's clamped evaluation
/// covers excursions beyond its grids.
pub fn simulate_em(
    drift: &DriftField,
    init: &DiscreteMeasure,
    n_particles: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    if n_particles == 0 || n_steps == 0 {
        return Err(Error::InvalidParameter(
            "need at least one particle and one step".into(),
        ));
    }
    let support = init
        .support()
        .ok_or_else(|| Error::InvalidParameter("initial measure needs support".into()))?;
    let mut cdf = Vec::with_capacity(init.len());
    let mut acc = 0.0;
    for w in init.weights().iter() {
        acc += w;
        cdf.push(acc);
    }
    let dt = 1.0 / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let n_chunks = n_particles.div_ceil(CHUNK);

    let chunks: Vec<Result<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(n_particles - c * CHUNK);
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let u: f64 = rng.gen();
                let idx = cdf.partition_point(|&v| v < u).min(support.len() - 1);
                let mut x = support[idx];
                for k in 0..n_steps {
                    let t = k as f64 * dt;
                    let b = drift.eval(t, x);
                    if !b.is_finite() {
                        return Err(Error::Degenerate(format!(
                            "non-finite drift at t={t}, z={x}"
                        )));
                    }
                    let noise: f64 = rng.sample(rand_distr::StandardNormal);
                    x += b * dt + sqrt_dt * noise;
                }
                out.push(x);
            }
            Ok(out)
        })
        .collect();

    let mut positions = Vec::with_capacity(n_particles);
    for chunk in chunks {
        positions.extend(chunk?);
    }
    Ok(ParticleEnsemble {
        positions,
        time: 1.0,
        seed,
    })
}

/// Drift of the time-reversed process, indexed by forward time:
/// `w(t, z) = -v(t, z) + d/dz log p_t(z)` with `p_t` the pinned path
/// marginal of `pi`.
///
/// Applying the formula twice returns the forward drift (the score term
/// cancels exactly). To simulate the reverse bridge, feed `w.time_flip()`
/// to the particle transport started from the terminal measure.
pub fn reversal_drift(v: &DriftField, pi: &Coupling) -> Result<DriftField> {
    let dz = v.z_grid[1] - v.z_grid[0];
    let rows: Result<Vec<Array1<f64>>> = v
        .t_grid
        .iter()
        .map(|&t| {
            let logp = log_path_marginal(pi, &v.z_grid, t)?;
            if logp.iter().any(|lp| !lp.is_finite()) {
                return Err(Error::Degenerate(format!(
                    "path marginal vanished on the grid interior at t={t}"
                )));
            }
            Ok(space_gradient(logp.view(), dz))
        })
        .collect();
    let rows = rows?;
    let mut values = Array2::zeros(v.values.raw_dim());
    for (i, score) in rows.into_iter().enumerate() {
        for k in 0..v.z_grid.len() {
            values[(i, k)] = -v.values[(i, k)] + score[k];
        }
    }
    DriftField::new(v.t_grid.clone(), v.z_grid.clone(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueEstimator {
    FeynmanKac,
    Killed,
}

/// Monte-Carlo estimate of a value function, with its standard error.
#[derive(Debug, Clone)]
pub struct ValueEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_samples: usize,
    pub estimator: ValueEstimator,
}

struct CostIntegral<'a> {
    base_drift: &'a DriftField,
    score_ratio: &'a DriftField,
    gamma: f64,
    sigma: f64,
}

impl CostIntegral<'_> {
    fn cost_coeff(&self) -> f64 {
        0.5 * self.sigma * self.sigma * self.gamma * (1.0 - self.gamma)
    }

    fn drift(&self, t: f64, z: f64) -> f64 {
        self.base_drift.eval(t, z) + self.gamma * self.sigma * self.sigma * self.score_ratio.eval(t, z)
    }
}

/// Value of the exponential path functional
/// `V_t(x) = -log E exp(-(sigma^2 gamma (1-gamma) / 2) ∫_t^1 s(u, Y_u)^2 du)`
/// along the uncontrolled dynamics `dY = (v + gamma sigma^2 s) du + sigma dW`
/// started at `Y_t = x`, with `s` the score-ratio field.
///
/// `FeynmanKac` averages the exponential weight along simulated paths;
/// `Killed` eliminates particles at the rate given by the integrand and
/// returns minus the log survival fraction (flagged infinite when nothing
/// survives). Both are exactly zero when `gamma` is 0 or 1, since the cost
/// coefficient vanishes.
#[allow(clippy::too_many_arguments)]
pub fn value_function_mc(
    x: f64,
    t: f64,
    base_drift: &DriftField,
    score_ratio: &DriftField,
    gamma: f64,
    sigma_diff: f64,
    n_samples: usize,
    n_steps: usize,
    seed: u64,
    estimator: ValueEstimator,
) -> Result<ValueEstimate> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    if !(0.0..=1.0).contains(&t) || !x.is_finite() {
        return Err(Error::InvalidParameter("invalid start point".into()));
    }
    if sigma_diff <= 0.0 || n_samples == 0 || n_steps == 0 {
        return Err(Error::InvalidParameter(
            "need positive diffusion, samples and steps".into(),
        ));
    }
    let remaining = 1.0 - t;
    if remaining == 0.0 {
        return Ok(ValueEstimate {
            mean: 0.0,
            std_err: 0.0,
            n_samples,
            estimator,
        });
    }
    let dt = remaining / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let problem = CostIntegral {
        base_drift,
        score_ratio,
        gamma,
        sigma: sigma_diff,
    };
    let coeff = problem.cost_coeff();

    let n_chunks = n_samples.div_ceil(CHUNK);
    match estimator {
        ValueEstimator::FeynmanKac => {
            let partials: Vec<(f64, f64)> = (0..n_chunks)
                .into_par_iter()
                .map(|c| {
                    let mut rng = ChaCha12Rng::seed_from_u64(seed);
                    rng.set_stream(c as u64);
                    let count = CHUNK.min(n_samples - c * CHUNK);
                    let mut sum = 0.0;
                    let mut sum_sq = 0.0;
                    for _ in 0..count {
                        let mut y = x;
                        let mut integral = 0.0;
                        for k in 0..n_steps {
                            let s = t + k as f64 * dt;
                            let sc = problem.score_ratio.eval(s, y);
                            integral += coeff * sc * sc * dt;
                            let noise: f64 = rng.sample(rand_distr::StandardNormal);
                            y += problem.drift(s, y) * dt + sigma_diff * sqrt_dt * noise;
                        }
                        let w = (-integral).exp();
                        sum += w;
                        sum_sq += w * w;
                    }
                    (sum, sum_sq)
                })
                .collect();
            let (sum, sum_sq) = partials
                .into_iter()
                .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
            let n = n_samples as f64;
            let mean_w = sum / n;
            let var_w = if n_samples > 1 {
                ((sum_sq - n * mean_w * mean_w) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            Ok(ValueEstimate {
                mean: -mean_w.ln(),
                std_err: var_w.sqrt() / (mean_w * n.sqrt()),
                n_samples,
                estimator,
            })
        }
        ValueEstimator::Killed => {
            let survivors: usize = (0..n_chunks)
                .into_par_iter()
                .map(|c| {
                    let mut rng = ChaCha12Rng::seed_from_u64(seed);
                    rng.set_stream(c as u64);
                    let count = CHUNK.min(n_samples - c * CHUNK);
                    let mut alive_count = 0usize;
                    for _ in 0..count {
                        let mut y = x;
                        let mut alive = true;
                        for k in 0..n_steps {
                            let s = t + k as f64 * dt;
                            let sc = problem.score_ratio.eval(s, y);
                            let survive_p = (-coeff * sc * sc * dt).exp();
                            let u: f64 = rng.gen();
                            let noise: f64 = rng.sample(rand_distr::StandardNormal);
                            if u >= survive_p {
                                alive = false;
                                break;
                            }
                            y += problem.drift(s, y) * dt + sigma_diff * sqrt_dt * noise;
                        }
                        if alive {
                            alive_count += 1;
                        }
                    }
                    alive_count
                })
                .sum();
            if survivors == 0 {
                return Ok(ValueEstimate {
                    mean: f64::INFINITY,
                    std_err: f64::INFINITY,
                    n_samples,
                    estimator,
                });
            }
            let p = survivors as f64 / n_samples as f64;
            Ok(ValueEstimate {
                mean: -p.ln(),
                std_err: ((1.0 - p) / (n_samples as f64 * p)).sqrt(),
                n_samples,
                estimator,
            })
        }
    }
}

/// The value function and its space gradient over a whole field grid.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub value: DriftField,
    pub gradient: DriftField,
}

/// Tabulate the value function on `t_grid x z_grid` by plain-path Monte
/// Carlo with common random numbers: all nodes of one time slice share the
/// same Gaussian increments, so central differences of neighboring nodes see
/// correlated noise and the gradient stays usable at moderate sample counts.
#[allow(clippy::too_many_arguments)]
pub fn value_gradient_field(
    base_drift: &DriftField,
    score_ratio: &DriftField,
    gamma: f64,
    sigma_diff: f64,
    t_grid: &[f64],
    z_grid: &Array1<f64>,
    n_samples: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ValueField> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    if t_grid.is_empty() || t_grid.iter().any(|t| !(0.0..1.0).contains(t)) {
        return Err(Error::InvalidParameter(
            "value-field times must lie in [0, 1)".into(),
        ));
    }
    let problem = CostIntegral {
        base_drift,
        score_ratio,
        gamma,
        sigma: sigma_diff,
    };
    let coeff = problem.cost_coeff();
    let dz = z_grid[1] - z_grid[0];

    let mut values = Array2::zeros((t_grid.len(), z_grid.len()));
    let mut grads = Array2::zeros((t_grid.len(), z_grid.len()));
    for (ti, &t) in t_grid.iter().enumerate() {
        let remaining = 1.0 - t;
        let steps = ((n_steps as f64 * remaining).round() as usize).max(1);
        let dt = remaining / steps as f64;
        let sqrt_dt = dt.sqrt();
        // common random numbers across the whole slice
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(ti as u64);
        let mut increments = vec![0.0f64; n_samples * steps];
        for v in increments.iter_mut() {
            *v = rng.sample(rand_distr::StandardNormal);
        }
        let slice: Vec<f64> = (0..z_grid.len())
            .into_par_iter()
            .map(|k| {
                let x = z_grid[k];
                let mut sum = 0.0;
                for s_idx in 0..n_samples {
                    let mut y = x;
                    let mut integral = 0.0;
                    for step in 0..steps {
                        let s = t + step as f64 * dt;
                        let sc = problem.score_ratio.eval(s, y);
                        integral += coeff * sc * sc * dt;
                        y += problem.drift(s, y) * dt
                            + sigma_diff * sqrt_dt * increments[s_idx * steps + step];
                    }
                    sum += (-integral).exp();
                }
                -(sum / n_samples as f64).ln()
            })
            .collect();
        let row = Array1::from_vec(slice);
        grads.row_mut(ti).assign(&space_gradient(row.view(), dz));
        values.row_mut(ti).assign(&row);
    }
    Ok(ValueField {
        value: DriftField::new(t_grid.to_vec(), z_grid.clone(), values)?,
        gradient: DriftField::new(t_grid.to_vec(), z_grid.clone(), grads)?,
    })
}

/// One adjustable-step drift update:
/// `v' = v + gamma sigma^2 * score_ratio - sigma^2 * grad_value`,
/// with unit diffusion in v1.
///
/// At `gamma = 1` the value term vanishes by construction (its cost
/// coefficient is zero), leaving the plain reversal-composition update.
pub fn gamma_ipf_drift(
    v_n: &DriftField,
    score_ratio: &DriftField,
    gamma: f64,
    grad_value: &DriftField,
) -> Result<DriftField> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    if !v_n.same_grids(score_ratio) || !v_n.same_grids(grad_value) {
        return Err(Error::DimensionMismatch(
            "drift, score and value fields must share grids".into(),
        ));
    }
    let sigma_sq = 1.0;
    let values = Array2::from_shape_fn(v_n.values.raw_dim(), |idx| {
        v_n.values[idx] + gamma * sigma_sq * score_ratio.values[idx]
            - sigma_sq * grad_value.values[idx]
    });
    DriftField::new(v_n.t_grid.clone(), v_n.z_grid.clone(), values)
}
