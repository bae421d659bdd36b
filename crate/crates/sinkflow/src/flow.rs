//! Continuous-time limit of the dual iteration: potential-flow integration,
//! the `1/t` rate certificate, and the unconstrained relative-entropy descent.
//!
//! The explicit Euler step with step size `dt` is *the same arithmetic* as the
//! dual iteration with step `dt`, so trajectories integrated with Euler agree
//! bitwise with the discrete scheme. RK4 is provided for accuracy studies.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::measures::{lse, ReferenceCoupling};
use crate::sinkhorn::{bregman_dual, descent_direction, dual_state, objective, objective_from_state};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegratorMethod {
    Euler,
    Rk4,
}

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    pub method: IntegratorMethod,
    pub dt: f64,
    pub t_end: f64,
    /// Spacing between recorded trajectory points; snapped to a whole number
    /// of steps.
    pub record_dt: f64,
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "dt must lie in (0, 1], got {}",
                self.dt
            )));
        }
        if !(self.dt <= self.record_dt && self.record_dt <= self.t_end) {
            return Err(Error::InvalidParameter(
                "need dt <= record_dt <= t_end".into(),
            ));
        }
        if !(self.t_end.is_finite() && self.record_dt.is_finite()) {
            return Err(Error::InvalidParameter("non-finite time bounds".into()));
        }
        Ok(())
    }
}

/// Diagnostics attached to each recorded trajectory point.
#[derive(Debug, Clone)]
pub struct FlowDiagnostics {
    pub objective: f64,
    /// `t * objective`, the quantity the rate certificate bounds.
    pub rate_product: f64,
    pub marginal_err_y: f64,
}

/// A time-stamped sequence of dual potentials with diagnostics.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub potentials: Vec<Array1<f64>>,
    pub diagnostics: Vec<FlowDiagnostics>,
    /// False when integration aborted on a non-finite state; the trajectory
    /// then holds the prefix computed so far.
    pub completed: bool,
}

impl FlowTrajectory {
    pub fn initial_potential(&self) -> Option<&Array1<f64>> {
        self.potentials.first()
    }

    pub fn final_potential(&self) -> Option<&Array1<f64>> {
        self.potentials.last()
    }
}

/// Time derivative of the dual potential: `-log(marginal_y / nu)`.
///
/// Vanishes exactly at the balanced potential.
pub fn velocity(g: ArrayView1<f64>, r: &ReferenceCoupling) -> Result<Array1<f64>> {
    let state = dual_state(g, r)?;
    Ok(descent_direction(&state, r))
}

/// Time derivative of the log-density of the induced coupling:
/// `-log(marginal_y / nu)(y) + E_{pi(.|x)}[log(marginal_y / nu)]`.
///
/// Each row integrates to zero against the conditional `pi(.|x)`, so mass is
/// preserved within every conditional slice.
pub fn primal_velocity(g: ArrayView1<f64>, r: &ReferenceCoupling) -> Result<Array2<f64>> {
    let state = dual_state(g, r)?;
    let lr = r.log_density();
    let ratio = Array1::from_shape_fn(r.m(), |j| state.log_marginal_y[j] - r.log_nu()[j]);
    // conditional expectation of the marginal log-ratio, row by row
    let row_expectation = Array1::from_shape_fn(r.n(), |i| {
        (0..r.m())
            .map(|j| (state.f[i] + g[j] + lr[(i, j)] - r.log_mu()[i]).exp() * ratio[j])
            .sum::<f64>()
    });
    Ok(Array2::from_shape_fn((r.n(), r.m()), |(i, j)| {
        -ratio[j] + row_expectation[i]
    }))
}

/// Integrate the potential flow from `g0`.
///
/// With `method = Euler` the trajectory at step `n` equals the `n`-fold dual
/// iteration with step `dt`, bitwise. A NaN appearing mid-integration aborts
/// with a flagged partial trajectory rather than an error.
pub fn integrate(
    g0: ArrayView1<f64>,
    r: &ReferenceCoupling,
    config: &IntegratorConfig,
) -> Result<FlowTrajectory> {
    config.validate()?;
    let n_steps = (config.t_end / config.dt).round().max(1.0) as usize;
    let stride = (config.record_dt / config.dt).round().max(1.0) as usize;

    let mut traj = FlowTrajectory {
        times: Vec::new(),
        potentials: Vec::new(),
        diagnostics: Vec::new(),
        completed: true,
    };

    let mut g = g0.to_owned();
    for step in 0..=n_steps {
        let state = match dual_state(g.view(), r) {
            Ok(s) => s,
            Err(_) => {
                traj.completed = false;
                return Ok(traj);
            }
        };
        if step % stride == 0 || step == n_steps {
            let t = step as f64 * config.dt;
            let objective = objective_from_state(&state, r);
            let marginal_y = state.log_marginal_y.mapv(f64::exp);
            let nu = r.log_nu().mapv(f64::exp);
            traj.times.push(t);
            traj.potentials.push(g.clone());
            traj.diagnostics.push(FlowDiagnostics {
                objective,
                rate_product: t * objective,
                marginal_err_y: crate::measures::total_variation(marginal_y.view(), nu.view()),
            });
        }
        if step == n_steps {
            break;
        }
        let next = match config.method {
            IntegratorMethod::Euler => {
                let dir = descent_direction(&state, r);
                &g + &(dir * config.dt)
            }
            IntegratorMethod::Rk4 => {
                let k1 = descent_direction(&state, r);
                let k2 = velocity((&g + &(&k1 * (config.dt / 2.0))).view(), r);
                let k3 = k2.and_then(|k2v| {
                    velocity((&g + &(&k2v * (config.dt / 2.0))).view(), r).map(|k3v| (k2v, k3v))
                });
                match k3.and_then(|(k2v, k3v)| {
                    velocity((&g + &(&k3v * config.dt)).view(), r).map(|k4v| (k2v, k3v, k4v))
                }) {
                    Ok((k2v, k3v, k4v)) => {
                        &g + &((k1 + &k2v * 2.0 + &k3v * 2.0 + k4v) * (config.dt / 6.0))
                    }
                    Err(_) => {
                        traj.completed = false;
                        return Ok(traj);
                    }
                }
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            traj.completed = false;
            return Ok(traj);
        }
        g = next;
    }
    Ok(traj)
}

/// One row of the rate certificate.
#[derive(Debug, Clone)]
pub struct RateRow {
    pub t: f64,
    pub objective: f64,
    /// `t * objective`.
    pub product: f64,
    /// Verdict against the primary constant.
    pub ok: bool,
}

/// Certificate that `t * F` stays below the dual Bregman gap between the
/// start and the balanced potential, at every recorded time.
///
/// The Bregman gap is evaluated in both argument orders; the primary constant
/// is the relative entropy of the optimal coupling from the initial one, and
/// verdicts are issued against it. `pass_relaxed` certifies against the
/// larger of the two orderings.
#[derive(Debug, Clone)]
pub struct RateReport {
    /// Relative entropy of the optimal coupling from the initial coupling.
    pub constant: f64,
    /// The swapped ordering, recorded for reference.
    pub constant_swapped: f64,
    pub rows: Vec<RateRow>,
    pub pass: bool,
    pub pass_relaxed: bool,
}

const RATE_SLACK: f64 = 1e-6;

pub fn rate_certificate(
    traj: &FlowTrajectory,
    g_opt: ArrayView1<f64>,
    r: &ReferenceCoupling,
) -> Result<RateReport> {
    let opt_objective = objective(g_opt, r)?;
    if opt_objective >= 1e-10 {
        return Err(Error::Precondition(format!(
            "rate certificate needs a converged potential; objective is {opt_objective:e}"
        )));
    }
    let g0 = traj
        .initial_potential()
        .ok_or_else(|| Error::Precondition("empty trajectory".into()))?;

    let constant = bregman_dual(g0.view(), g_opt, r)?;
    let constant_swapped = bregman_dual(g_opt, g0.view(), r)?;
    let relaxed = constant.max(constant_swapped);

    let mut rows = Vec::new();
    let mut pass = true;
    let mut pass_relaxed = true;
    for (t, diag) in traj.times.iter().zip(traj.diagnostics.iter()) {
        if *t <= 0.0 {
            continue;
        }
        let product = diag.rate_product;
        let ok = product <= constant * (1.0 + RATE_SLACK);
        pass &= ok;
        pass_relaxed &= product <= relaxed * (1.0 + RATE_SLACK);
        rows.push(RateRow {
            t: *t,
            objective: diag.objective,
            product,
            ok,
        });
    }
    Ok(RateReport {
        constant,
        constant_swapped,
        rows,
        pass,
        pass_relaxed,
    })
}

/// Trajectory of the unconstrained relative-entropy descent.
#[derive(Debug, Clone)]
pub struct JkoTrajectory {
    pub times: Vec<f64>,
    pub log_densities: Vec<Array1<f64>>,
    pub completed: bool,
}

/// Unconstrained descent `d/dt log p = -grad(p)` on the simplex.
///
/// `grad` receives the current probability vector and returns a first
/// variation defined up to an additive constant. Each Euler step is followed
/// by renormalization, the only constraint retained; constant gradients
/// therefore leave the state unchanged.
pub fn entropy_jko_flow(
    log_p0: ArrayView1<f64>,
    grad: impl Fn(&Array1<f64>) -> Array1<f64>,
    config: &IntegratorConfig,
) -> Result<JkoTrajectory> {
    config.validate()?;
    if log_p0.is_empty() {
        return Err(Error::InvalidParameter("empty density".into()));
    }
    let mass: f64 = log_p0.iter().map(|v| v.exp()).sum();
    if (mass - 1.0).abs() > crate::measures::tol::COUPLING_MASS {
        return Err(Error::InvalidParameter(format!(
            "initial density has mass {mass}"
        )));
    }

    let n_steps = (config.t_end / config.dt).round().max(1.0) as usize;
    let stride = (config.record_dt / config.dt).round().max(1.0) as usize;

    let mut traj = JkoTrajectory {
        times: Vec::new(),
        log_densities: Vec::new(),
        completed: true,
    };
    let mut log_p = log_p0.to_owned();
    for step in 0..=n_steps {
        if step % stride == 0 || step == n_steps {
            traj.times.push(step as f64 * config.dt);
            traj.log_densities.push(log_p.clone());
        }
        if step == n_steps {
            break;
        }
        let p = log_p.mapv(f64::exp);
        let v = grad(&p);
        if v.len() != log_p.len() || v.iter().any(|x| !x.is_finite()) {
            traj.completed = false;
            return Ok(traj);
        }
        log_p = &log_p - &(v * config.dt);
        let norm = lse(log_p.iter().copied());
        log_p.mapv_inplace(|x| x - norm);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sinkhorn::{classical_step, coupling_from_g, gamma_step_dual};
    use crate::testkit::{asymmetric_reference, bisect_optimal_g, random_instance, symmetric_reference};
    use ndarray::array;

    fn sup_gap(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn velocity_vanishes_at_balance() {
        let rs = symmetric_reference();
        let v = velocity(Array1::zeros(2).view(), &rs).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-14));

        let ra = asymmetric_reference();
        let g_star = bisect_optimal_g(&ra);
        let v = velocity(g_star.view(), &ra).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn velocity_matches_summation_oracle_at_zero() {
        let ra = asymmetric_reference();
        let v = velocity(Array1::zeros(2).view(), &ra).unwrap();
        // same frozen direction as the full classical step from zero
        assert!((v[0] - 0.42236789089410853).abs() < 1e-14);
        assert!((v[1] - (-0.4165769636213787)).abs() < 1e-14);
    }

    #[test]
    fn primal_velocity_zero_at_optimum() {
        let ra = asymmetric_reference();
        let g_star = bisect_optimal_g(&ra);
        let v = primal_velocity(g_star.view(), &ra).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn primal_velocity_matches_forward_difference() {
        for seed in 0..5u64 {
            let (r, _) = random_instance(5, 6, 0.4, 300 + seed);
            let g = Array1::from_shape_fn(6, |j| 0.3 * ((j as f64) * 1.1 + seed as f64).sin());
            let analytic = primal_velocity(g.view(), &r).unwrap();
            let gamma = 1e-4;
            let base = coupling_from_g(g.view(), &r).unwrap();
            let stepped =
                coupling_from_g(gamma_step_dual(g.view(), gamma, &r).unwrap().view(), &r).unwrap();
            let mut max_err = 0.0f64;
            for (idx, a) in analytic.indexed_iter() {
                let fd =
                    (stepped.log_density()[idx] - base.log_density()[idx]) / gamma;
                max_err = max_err.max((fd - a).abs());
            }
            assert!(max_err < 5e-4, "finite-difference gap {max_err}");
        }
    }

    #[test]
    fn primal_velocity_row_expectation_term() {
        // the x-dependent part equals the conditional expectation of the
        // marginal log-ratio, computed here with a plain probability-domain loop
        let (r, _) = random_instance(4, 5, 0.7, 42);
        let g = Array1::from_shape_fn(5, |j| 0.2 * (j as f64));
        let v = primal_velocity(g.view(), &r).unwrap();
        let pi = coupling_from_g(g.view(), &r).unwrap();
        let density = pi.density();
        let (_, my) = pi.marginals();
        let nu = r.log_nu().mapv(f64::exp);
        for i in 0..4 {
            let row_sum: f64 = (0..5).map(|j| density[(i, j)]).sum();
            let expect: f64 = (0..5)
                .map(|j| density[(i, j)] / row_sum * (my.weights()[j] / nu[j]).ln())
                .sum();
            for j in 0..5 {
                let ratio = (my.weights()[j] / nu[j]).ln();
                assert!((v[(i, j)] - (-ratio + expect)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn primal_velocity_conserves_conditional_mass() {
        let (r, _) = random_instance(6, 6, 0.3, 77);
        let g = Array1::from_shape_fn(6, |j| ((j * 2) as f64).cos());
        let v = primal_velocity(g.view(), &r).unwrap();
        let pi = coupling_from_g(g.view(), &r).unwrap();
        let density = pi.density();
        for i in 0..6 {
            let row_sum: f64 = (0..6).map(|j| density[(i, j)]).sum();
            let integral: f64 = (0..6)
                .map(|j| density[(i, j)] / row_sum * v[(i, j)])
                .sum();
            assert!(integral.abs() < 1e-10);
        }
    }

    #[test]
    fn integrate_constant_at_optimum() {
        let ra = asymmetric_reference();
        let g_star = bisect_optimal_g(&ra);
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 0.5,
            t_end: 5.0,
            record_dt: 0.5,
        };
        let traj = integrate(g_star.view(), &ra, &cfg).unwrap();
        assert!(traj.completed);
        for g in &traj.potentials {
            assert!(sup_gap(g, &g_star) < 1e-9);
        }
    }

    #[test]
    fn euler_unit_step_is_classical_trace() {
        let ra = asymmetric_reference();
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 1.0,
            t_end: 5.0,
            record_dt: 1.0,
        };
        let traj = integrate(Array1::zeros(2).view(), &ra, &cfg).unwrap();
        let mut g = Array1::zeros(2);
        for (step, recorded) in traj.potentials.iter().enumerate() {
            assert_eq!(recorded, &g, "step {step} must match bitwise");
            g = classical_step(g.view(), &ra).unwrap();
        }
    }

    #[test]
    fn euler_step_equals_dual_recursion_bitwise() {
        let (r, _) = random_instance(6, 4, 0.6, 9);
        let dt = 0.3;
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt,
            t_end: 3.0,
            record_dt: dt,
        };
        let traj = integrate(Array1::zeros(4).view(), &r, &cfg).unwrap();
        let mut g = Array1::zeros(4);
        for recorded in traj.potentials.iter() {
            assert_eq!(recorded, &g);
            g = gamma_step_dual(g.view(), dt, &r).unwrap();
        }
    }

    #[test]
    fn rk4_agrees_with_fine_euler() {
        let ra = asymmetric_reference();
        let rk = IntegratorConfig {
            method: IntegratorMethod::Rk4,
            dt: 0.1,
            t_end: 5.0,
            record_dt: 5.0,
        };
        let fine = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 0.001,
            t_end: 5.0,
            record_dt: 5.0,
        };
        let a = integrate(Array1::zeros(2).view(), &ra, &rk).unwrap();
        let b = integrate(Array1::zeros(2).view(), &ra, &fine).unwrap();
        let gap = sup_gap(a.final_potential().unwrap(), b.final_potential().unwrap());
        assert!(gap < 1e-4, "rk4 vs fine-euler gap {gap}");
    }

    #[test]
    fn euler_consistency_is_first_order() {
        // sup-norm error at fixed t against a fine-Euler reference scales as
        // O(dt): slope 1 +/- 0.2 on a log-log fit
        let (r, _) = random_instance(8, 8, 0.5, 55);
        let t_end = 2.0;
        let reference = integrate(
            Array1::zeros(8).view(),
            &r,
            &IntegratorConfig {
                method: IntegratorMethod::Euler,
                dt: 1e-4,
                t_end,
                record_dt: t_end,
            },
        )
        .unwrap();
        let g_ref = reference.final_potential().unwrap();
        let dts = [0.2, 0.1, 0.05, 0.025];
        let errs: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                let traj = integrate(
                    Array1::zeros(8).view(),
                    &r,
                    &IntegratorConfig {
                        method: IntegratorMethod::Euler,
                        dt,
                        t_end,
                        record_dt: t_end,
                    },
                )
                .unwrap();
                sup_gap(traj.final_potential().unwrap(), g_ref)
            })
            .collect();
        let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope: f64 = xs
            .iter()
            .zip(ys.iter())
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope - 1.0).abs() < 0.2, "order slope {slope}");
    }

    #[test]
    fn objective_monotone_along_trajectory() {
        let (r, _) = random_instance(10, 10, 0.3, 91);
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 0.5,
            t_end: 20.0,
            record_dt: 0.5,
        };
        let traj = integrate(Array1::zeros(10).view(), &r, &cfg).unwrap();
        for w in traj.diagnostics.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-10);
        }
    }

    #[test]
    fn rate_certificate_passes_on_asymmetric_instance() {
        let ra = asymmetric_reference();
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 0.1,
            t_end: 50.0,
            record_dt: 0.1,
        };
        let traj = integrate(Array1::zeros(2).view(), &ra, &cfg).unwrap();
        let g_star = bisect_optimal_g(&ra);
        let report = rate_certificate(&traj, g_star.view(), &ra).unwrap();
        assert!(report.pass);
        assert!(report.pass_relaxed);
        // frozen constant: relative entropy of the optimum from the start
        assert!((report.constant - 0.14851914962828294).abs() < 1e-8);
    }

    #[test]
    fn rate_certificate_trivial_from_optimum() {
        let ra = asymmetric_reference();
        let g_star = bisect_optimal_g(&ra);
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 0.5,
            t_end: 10.0,
            record_dt: 1.0,
        };
        let traj = integrate(g_star.view(), &ra, &cfg).unwrap();
        let report = rate_certificate(&traj, g_star.view(), &ra).unwrap();
        assert!(report.pass);
        for row in &report.rows {
            assert!(row.product <= report.constant + 1e-12);
        }
    }

    #[test]
    fn rate_certificate_rejects_unconverged_reference() {
        let ra = asymmetric_reference();
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 1.0,
            t_end: 2.0,
            record_dt: 1.0,
        };
        let traj = integrate(Array1::zeros(2).view(), &ra, &cfg).unwrap();
        assert!(matches!(
            rate_certificate(&traj, Array1::zeros(2).view(), &ra),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn jko_fixed_point_and_convergence() {
        let q = array![0.6, 0.4];
        let log_q = q.mapv(f64::ln);
        let grad = |p: &Array1<f64>| {
            Array1::from_shape_fn(p.len(), |i| (p[i] / q[i]).ln())
        };
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 0.1,
            t_end: 20.0,
            record_dt: 1.0,
        };
        // started at the target: constant trajectory
        let traj = entropy_jko_flow(log_q.view(), grad, &cfg).unwrap();
        for lp in &traj.log_densities {
            for (a, b) in lp.iter().zip(log_q.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // started at uniform: converges to the target
        let p0 = array![0.5, 0.5].mapv(f64::ln);
        let traj = entropy_jko_flow(p0.view(), grad, &cfg).unwrap();
        assert!(traj.completed);
        let last = traj.log_densities.last().unwrap().mapv(f64::exp);
        let tv = crate::measures::total_variation(last.view(), q.view());
        assert!(tv < 1e-6, "TV to target {tv}");
        // objective decreasing along the way
        let kls: Vec<f64> = traj
            .log_densities
            .iter()
            .map(|lp| {
                crate::measures::kl_divergence(lp.mapv(f64::exp).view(), q.view()).unwrap()
            })
            .collect();
        for w in kls.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn jko_constant_gradient_is_gauge() {
        let p0 = array![0.3, 0.2, 0.5].mapv(f64::ln);
        let grad = |p: &Array1<f64>| Array1::from_elem(p.len(), 4.2);
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 0.5,
            t_end: 5.0,
            record_dt: 0.5,
        };
        let traj = entropy_jko_flow(p0.view(), grad, &cfg).unwrap();
        for lp in &traj.log_densities {
            let p = lp.mapv(f64::exp);
            for (a, b) in p.iter().zip([0.3, 0.2, 0.5].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jko_aborts_on_nan_gradient() {
        let p0 = array![0.5, 0.5].mapv(f64::ln);
        let grad = |_: &Array1<f64>| array![f64::NAN, 0.0];
        let cfg = IntegratorConfig {
            method: IntegratorMethod::Euler,
            dt: 0.5,
            t_end: 5.0,
            record_dt: 0.5,
        };
        let traj = entropy_jko_flow(p0.view(), grad, &cfg).unwrap();
        assert!(!traj.completed);
        assert_eq!(traj.log_densities.len(), 1);
    }
}
