//! Balancing iterations in dual form: the classical matrix-scaling step, its
//! adjustable-step generalization, the driver loop, and dual-space Bregman
//! diagnostics.
//!
//! States are parameterized by the second potential `g`; the first potential
//! is always recovered through [`f_from_g`], so every coupling visited by the
//! solvers has X-marginal `mu` by construction.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::measures::{build_reference, lse, Coupling, CostMatrix, DiscreteMeasure, ReferenceCoupling};

/// Step-size schedules for the dual iteration. All values must lie in (0, 1].
#[derive(Debug, Clone)]
pub enum GammaSchedule {
    /// Fixed step `gamma`.
    Constant(f64),
    /// `gamma_n = a / (n + 1)`.
    Harmonic(f64),
    /// `gamma_n = a / sqrt(n + 1)`.
    InverseSqrt(f64),
    /// Explicit per-iteration list.
    Custom(Vec<f64>),
}

impl GammaSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v <= 1.0 && v.is_finite();
        let valid = match self {
            GammaSchedule::Constant(g) => ok(*g),
            GammaSchedule::Harmonic(a) => ok(*a),
            GammaSchedule::InverseSqrt(a) => ok(*a),
            GammaSchedule::Custom(list) => !list.is_empty() && list.iter().all(|g| ok(*g)),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "step-size schedule values must lie in (0, 1]".into(),
            ))
        }
    }

    /// Step size at iteration `n` (0-based). A custom list repeats its last
    /// entry once exhausted.
    pub fn gamma(&self, n: usize) -> f64 {
        match self {
            GammaSchedule::Constant(g) => *g,
            GammaSchedule::Harmonic(a) => a / (n as f64 + 1.0),
            GammaSchedule::InverseSqrt(a) => a / (n as f64 + 1.0).sqrt(),
            GammaSchedule::Custom(list) => list[n.min(list.len() - 1)],
        }
    }

    /// Whether `Σ gamma_n = inf` and `Σ gamma_n^2 < inf` hold, checked
    /// symbolically for the built-in families.
    pub fn is_square_summable_divergent(&self) -> bool {
        matches!(self, GammaSchedule::Harmonic(_))
    }
}

/// Configuration of the iterative solver.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub schedule: GammaSchedule,
    pub max_iter: usize,
    /// Stop once the objective drops below this threshold.
    pub tol: f64,
    /// Record a trace entry every this many iterations.
    pub record_every: usize,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be positive".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidParameter("tol must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter(
                "record_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            schedule: GammaSchedule::Constant(1.0),
            max_iter: 10_000,
            tol: 1e-12,
            record_every: 1,
        }
    }
}

/// One diagnostics row of the solver trace.
#[derive(Debug, Clone)]
pub struct IterateRecord {
    pub iter: usize,
    /// Relative entropy of the current Y-marginal from `nu`.
    pub objective: f64,
    /// Total-variation gap of the X-marginal from `mu` (zero by construction,
    /// up to round-off).
    pub marginal_err_x: f64,
    pub marginal_err_y: f64,
    /// Dual Bregman divergence to the converged potential, filled in after a
    /// successful solve.
    pub breg_to_opt: Option<f64>,
}

/// A potential pair together with the reference coupling it is relative to.
#[derive(Debug, Clone)]
pub struct Potentials {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    reference: Arc<ReferenceCoupling>,
}

impl Potentials {
    pub fn new(f: Array1<f64>, g: Array1<f64>, reference: Arc<ReferenceCoupling>) -> Self {
        Self { f, g, reference }
    }

    pub fn reference(&self) -> &Arc<ReferenceCoupling> {
        &self.reference
    }

    /// The coupling `exp(f + g) * ref` these potentials parameterize.
    pub fn coupling(&self) -> Result<Coupling> {
        let r = &self.reference;
        let log_density = Array2::from_shape_fn((r.n(), r.m()), |(i, j)| {
            self.f[i] + self.g[j] + r.log_density()[(i, j)]
        });
        Coupling::from_log_density(log_density)
    }
}

/// Per-state quantities every dual operation needs.
pub(crate) struct DualState {
    pub f: Array1<f64>,
    /// `log` of the Y-marginal of the coupling induced by `g`.
    pub log_marginal_y: Array1<f64>,
}

pub(crate) fn dual_state(g: ArrayView1<f64>, r: &ReferenceCoupling) -> Result<DualState> {
    if g.len() != r.m() {
        return Err(Error::DimensionMismatch(format!(
            "potential has {} entries, reference expects {}",
            g.len(),
            r.m()
        )));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "potential entries must be finite".into(),
        ));
    }
    let lr = r.log_density();
    let f = Array1::from_shape_fn(r.n(), |i| {
        r.log_mu()[i] - lse((0..r.m()).map(|j| g[j] + lr[(i, j)]))
    });
    let log_marginal_y = Array1::from_shape_fn(r.m(), |j| {
        g[j] + lse((0..r.n()).map(|i| f[i] + lr[(i, j)]))
    });
    Ok(DualState { f, log_marginal_y })
}

/// Recover the first potential from the second so that the induced coupling
/// has X-marginal exactly `mu`.
pub fn f_from_g(g: ArrayView1<f64>, r: &ReferenceCoupling) -> Result<Array1<f64>> {
    Ok(dual_state(g, r)?.f)
}

/// The coupling induced by `g`: `log pi = (f_from_g(g) + g) + log ref`.
pub fn coupling_from_g(g: ArrayView1<f64>, r: &ReferenceCoupling) -> Result<Coupling> {
    let state = dual_state(g, r)?;
    let lr = r.log_density();
    let log_density =
        Array2::from_shape_fn((r.n(), r.m()), |(i, j)| state.f[i] + g[j] + lr[(i, j)]);
    Coupling::from_log_density(log_density)
}

pub(crate) fn objective_from_state(state: &DualState, r: &ReferenceCoupling) -> f64 {
    let mut total = 0.0;
    for j in 0..r.m() {
        let lm = state.log_marginal_y[j];
        total += lm.exp() * (lm - r.log_nu()[j]);
    }
    total.max(0.0)
}

/// Relative entropy of the Y-marginal of the coupling induced by `g` from `nu`.
pub fn objective(g: ArrayView1<f64>, r: &ReferenceCoupling) -> Result<f64> {
    let state = dual_state(g, r)?;
    Ok(objective_from_state(&state, r))
}

/// `log nu - log marginal_y`: the direction the dual iteration moves along.
pub(crate) fn descent_direction(state: &DualState, r: &ReferenceCoupling) -> Array1<f64> {
    Array1::from_shape_fn(r.m(), |j| r.log_nu()[j] - state.log_marginal_y[j])
}

fn step_from_state(
    g: ArrayView1<f64>,
    state: &DualState,
    gamma: f64,
    r: &ReferenceCoupling,
) -> Array1<f64> {
    let dir = descent_direction(state, r);
    Array1::from_shape_fn(g.len(), |j| g[j] + gamma * dir[j])
}

/// One full classical balancing iteration in dual form; identical code path
/// to [`gamma_step_dual`] with step 1.
pub fn classical_step(g: ArrayView1<f64>, r: &ReferenceCoupling) -> Result<Array1<f64>> {
    gamma_step_dual(g, 1.0, r)
}

/// Dual recursion `g' = g - gamma * log(marginal_y / nu)` for `gamma` in (0, 1].
///
/// Steps above 1 are rejected: the primal mixture interpretation needs
/// `1 - gamma >= 0`, and larger values are untested extrapolation.
pub fn gamma_step_dual(
    g: ArrayView1<f64>,
    gamma: f64,
    r: &ReferenceCoupling,
) -> Result<Array1<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "step size must lie in (0, 1], got {gamma}"
        )));
    }
    let state = dual_state(g, r)?;
    Ok(step_from_state(g, &state, gamma, r))
}

/// Primal form of the adjustable step: re-weight each conditional row as a
/// geometric mixture of the Y-balanced half-step and the current coupling,
/// then restore the X-marginal.
///
/// Accepts `gamma` in [0, 1]; `gamma = 0` returns the input unchanged up to
/// re-normalization. The input must already satisfy the X-marginal constraint
/// to within 1e-8 total variation.
pub fn gamma_step_primal(pi: &Coupling, gamma: f64, r: &ReferenceCoupling) -> Result<Coupling> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!(
            "step size must lie in [0, 1], got {gamma}"
        )));
    }
    if pi.nrows() != r.n() || pi.ncols() != r.m() {
        return Err(Error::DimensionMismatch(format!(
            "coupling is {}x{} but reference is {}x{}",
            pi.nrows(),
            pi.ncols(),
            r.n(),
            r.m()
        )));
    }
    let lp = pi.log_density();
    let mu: Array1<f64> = r.log_mu().mapv(f64::exp);
    let row_mass = pi.density().sum_axis(ndarray::Axis(1));
    let tv = crate::measures::total_variation(row_mass.view(), mu.view());
    if tv > 1e-8 {
        return Err(Error::Precondition(format!(
            "input coupling violates the X-marginal constraint (TV = {tv:e})"
        )));
    }

    // Column tilt that balances the Y-marginal: the half-step.
    let log_marginal_y = Array1::from_shape_fn(r.m(), |j| lse((0..r.n()).map(|i| lp[(i, j)])));
    let tilt = Array1::from_shape_fn(r.m(), |j| r.log_nu()[j] - log_marginal_y[j]);

    let mut out = Array2::zeros((r.n(), r.m()));
    let mut mixed = vec![0.0; r.m()];
    for i in 0..r.n() {
        let row_lse = lse((0..r.m()).map(|j| lp[(i, j)]));
        let half_lse = lse((0..r.m()).map(|j| lp[(i, j)] + tilt[j]));
        for j in 0..r.m() {
            let cond = lp[(i, j)] - row_lse;
            let cond_half = lp[(i, j)] + tilt[j] - half_lse;
            mixed[j] = gamma * cond_half + (1.0 - gamma) * cond;
        }
        let norm = lse(mixed.iter().copied());
        for j in 0..r.m() {
            out[(i, j)] = r.log_mu()[i] + mixed[j] - norm;
        }
    }
    Coupling::from_log_density(out)
}

/// Dual-space Bregman divergence between two potentials.
///
/// Computed through the inner-product form `<pi_b, h_b - h_a>` with
/// `h = f + g`; equals the relative entropy of the coupling induced by `g_b`
/// from the one induced by `g_a` (note the argument swap).
pub fn bregman_dual(
    g_a: ArrayView1<f64>,
    g_b: ArrayView1<f64>,
    r: &ReferenceCoupling,
) -> Result<f64> {
    let sa = dual_state(g_a, r)?;
    let sb = dual_state(g_b, r)?;
    let lr = r.log_density();
    let mut total = 0.0;
    for i in 0..r.n() {
        for j in 0..r.m() {
            let hb = sb.f[i] + g_b[j];
            let ha = sa.f[i] + g_a[j];
            total += (hb + lr[(i, j)]).exp() * (hb - ha);
        }
    }
    Ok(total)
}

/// Shift `g` to the gauge `Σ g_j nu_j = 0`.
pub fn gauge_fixed(g: ArrayView1<f64>, r: &ReferenceCoupling) -> Array1<f64> {
    let mean: f64 = g
        .iter()
        .zip(r.log_nu().iter())
        .map(|(gj, ln)| gj * ln.exp())
        .sum();
    g.mapv(|v| v - mean)
}

/// Why a solve stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveFlag {
    Converged,
    MaxIterReached,
    /// The objective became non-finite (only possible with degenerate input).
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub potentials: Potentials,
    pub trace: Vec<IterateRecord>,
    pub flag: SolveFlag,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.flag == SolveFlag::Converged
    }
}

/// Run the dual iteration from `g = 0` until the objective drops below
/// `config.tol` or `config.max_iter` is reached.
///
/// Non-convergence is reported through [`SolveResult::flag`], never as an
/// error. Final potentials are gauge-fixed to `Σ g_j nu_j = 0`.
pub fn solve(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    epsilon: f64,
    config: &SolverConfig,
) -> Result<SolveResult> {
    let reference = Arc::new(build_reference(mu, nu, cost, epsilon)?);
    solve_with_reference(reference, config)
}

/// [`solve`] against a pre-built reference coupling.
pub fn solve_with_reference(
    reference: Arc<ReferenceCoupling>,
    config: &SolverConfig,
) -> Result<SolveResult> {
    config.validate()?;
    let r = reference.as_ref();
    let mu: Array1<f64> = r.log_mu().mapv(f64::exp);
    let nu: Array1<f64> = r.log_nu().mapv(f64::exp);

    let mut g = Array1::zeros(r.m());
    let mut trace: Vec<IterateRecord> = Vec::new();
    let mut recorded_gs: Vec<(usize, Array1<f64>)> = Vec::new();
    let flag;

    let mut n = 0usize;
    loop {
        let state = dual_state(g.view(), r)?;
        let objective = objective_from_state(&state, r);

        let record_now = n % config.record_every == 0
            || objective < config.tol
            || !objective.is_finite()
            || n == config.max_iter;
        if record_now {
            let marginal_y = state.log_marginal_y.mapv(f64::exp);
            let row_mass = coupling_row_mass(&state, &g, r);
            trace.push(IterateRecord {
                iter: n,
                objective,
                marginal_err_x: crate::measures::total_variation(row_mass.view(), mu.view()),
                marginal_err_y: crate::measures::total_variation(marginal_y.view(), nu.view()),
                breg_to_opt: None,
            });
            recorded_gs.push((trace.len() - 1, g.clone()));
        }

        if !objective.is_finite() {
            flag = SolveFlag::Degenerate;
            break;
        }
        if objective < config.tol {
            flag = SolveFlag::Converged;
            break;
        }
        if n == config.max_iter {
            flag = SolveFlag::MaxIterReached;
            break;
        }
        g = step_from_state(g.view(), &state, config.schedule.gamma(n), r);
        n += 1;
    }

    if flag == SolveFlag::Converged {
        for (idx, g_rec) in &recorded_gs {
            trace[*idx].breg_to_opt = Some(bregman_dual(g_rec.view(), g.view(), r)?);
        }
    }

    let g_fixed = gauge_fixed(g.view(), r);
    let f_fixed = f_from_g(g_fixed.view(), r)?;
    Ok(SolveResult {
        potentials: Potentials::new(f_fixed, g_fixed, reference.clone()),
        trace,
        flag,
    })
}

fn coupling_row_mass(state: &DualState, g: &Array1<f64>, r: &ReferenceCoupling) -> Array1<f64> {
    let lr = r.log_density();
    Array1::from_shape_fn(r.n(), |i| {
        (0..r.m())
            .map(|j| (state.f[i] + g[j] + lr[(i, j)]).exp())
            .sum()
    })
}
