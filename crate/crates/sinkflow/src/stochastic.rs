//! Noisy and biased gradient oracles for the dual iteration, with the two
//! desk-scale convergence experiments: a constant-step ergodic-average bound
//! check and a diminishing-step last-iterate run.
//!
//! The injected noise is i.i.d. per-coordinate Gaussian; the bias is a fixed
//! unit-sup-norm pattern scaled by a power decay `(n + 1)^{-bias_decay}`.
//! Everything is driven by a counter-based generator with one stream per
//! seed, so runs are reproducible bit-for-bit on one platform and seed sweeps
//! parallelize without shared state.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::{kl_couplings, kl_divergence, ReferenceCoupling};
use crate::sinkhorn::{
    descent_direction, dual_state, objective_from_state, solve_with_reference, GammaSchedule,
    SolverConfig,
};

/// Name of the random generator, recorded in output metadata.
pub const GENERATOR: &str = "chacha12";

/// Additive perturbation model for the gradient oracle.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    /// Per-coordinate standard deviation of the zero-mean Gaussian term.
    pub sigma_noise: f64,
    /// Magnitude of the deterministic bias term at iteration 0.
    pub bias_scale: f64,
    /// The bias decays like `(n + 1)^{-bias_decay}`.
    pub bias_decay: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_noise < 0.0 || self.bias_scale < 0.0 || self.bias_decay < 0.0 {
            return Err(Error::InvalidParameter(
                "noise model parameters must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// The deterministic bias vector at iteration `n`: a fixed alternating
    /// unit-sup-norm pattern times `bias_scale * (n + 1)^{-bias_decay}`.
    pub fn bias_at(&self, n: usize, m: usize) -> Array1<f64> {
        let scale = self.bias_scale * (n as f64 + 1.0).powf(-self.bias_decay);
        Array1::from_shape_fn(m, |j| if j % 2 == 0 { scale } else { -scale })
    }

    fn noise(&self, m: usize, rng: &mut ChaCha12Rng) -> Array1<f64> {
        Array1::from_shape_fn(m, |_| {
            self.sigma_noise * rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    }
}

/// A perturbed gradient draw: the true first variation plus bias plus noise.
///
/// With a zero model this returns the exact gradient (the negated flow
/// velocity).
pub fn noisy_gradient(
    g: ArrayView1<f64>,
    r: &ReferenceCoupling,
    model: &NoiseModel,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Array1<f64>> {
    model.validate()?;
    let state = dual_state(g, r)?;
    let exact = descent_direction(&state, r).mapv(|v| -v);
    let bias = model.bias_at(n, r.m());
    let noise = model.noise(r.m(), rng);
    Ok(exact + bias + noise)
}

/// Which iterate the experiment evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    Ergodic,
    LastIterate,
}

#[derive(Debug, Clone)]
pub struct StochasticRunConfig {
    pub schedule: GammaSchedule,
    pub n_iters: usize,
    pub n_seeds: usize,
    /// Thin per-seed traces to every this many iterations.
    pub record_every: usize,
    /// Convergence threshold for the last-iterate experiment.
    pub tol: f64,
}

impl StochasticRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.n_iters == 0 || self.n_seeds == 0 || self.record_every == 0 {
            return Err(Error::InvalidParameter(
                "n_iters, n_seeds and record_every must be positive".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Thinned objective trace of one seed.
#[derive(Debug, Clone)]
pub struct SeedTrace {
    pub seed_index: u64,
    /// `(iter, objective)` pairs.
    pub records: Vec<(usize, f64)>,
    pub final_objective: f64,
}

/// Output of the constant-step ergodic experiment.
#[derive(Debug, Clone)]
pub struct ErgodicReport {
    /// Relative entropy of the ergodic-average Y-marginal from `nu`, per seed.
    pub per_seed_kl: Vec<f64>,
    pub seed_mean_kl: f64,
    /// Relative entropy of the optimal coupling from the reference.
    pub kl_opt_ref: f64,
    /// Empirical sup-norm second moment of the injected noise.
    pub sigma_hat_sq: f64,
    /// `kl_opt_ref / (gamma n) + gamma * sigma_hat_sq`.
    pub bound: f64,
    /// `seed_mean_kl / bound`; at most 1 when the bound holds.
    pub ratio: f64,
    pub traces: Vec<SeedTrace>,
    pub gamma: f64,
    pub generator: &'static str,
}

/// Constant-step run with unbiased noise; reports the ergodic-average
/// marginal error of every seed against the analytic bound.
///
/// The bound constant is taken from a noiseless solve; the noise second
/// moment is estimated empirically from the sup-norm of the injected draws.
pub fn run_constant_step(
    reference: Arc<ReferenceCoupling>,
    config: &StochasticRunConfig,
    model: &NoiseModel,
) -> Result<ErgodicReport> {
    config.validate()?;
    model.validate()?;
    if model.bias_scale != 0.0 {
        return Err(Error::Precondition(
            "the ergodic bound experiment requires an unbiased model".into(),
        ));
    }
    let gamma = match config.schedule {
        GammaSchedule::Constant(g) => g,
        _ => {
            return Err(Error::InvalidParameter(
                "the ergodic experiment uses a constant step".into(),
            ))
        }
    };
    let r = reference.as_ref();

    let opt = solve_with_reference(
        reference.clone(),
        &SolverConfig {
            tol: 1e-13,
            max_iter: 100_000,
            record_every: usize::MAX,
            ..SolverConfig::default()
        },
    )?;
    if !opt.converged() {
        return Err(Error::Degenerate(
            "noiseless solve for the bound constant did not converge".into(),
        ));
    }
    let kl_opt_ref = kl_couplings(&opt.potentials.coupling()?, &r.to_coupling())?;

    let nu = r.log_nu().mapv(f64::exp);
    let per_seed: Vec<(f64, f64, SeedTrace)> = (0..config.n_seeds as u64)
        .into_par_iter()
        .map(|seed_index| {
            let mut rng = ChaCha12Rng::seed_from_u64(model.seed);
            rng.set_stream(seed_index);
            let mut g: Array1<f64> = Array1::zeros(r.m());
            let mut average = Array2::<f64>::zeros((r.n(), r.m()));
            let mut sup_sq_sum = 0.0;
            let mut records = Vec::new();
            let mut final_objective = f64::NAN;
            for k in 0..config.n_iters {
                let state = dual_state(g.view(), r).expect("finite iterate");
                let lr = r.log_density();
                for i in 0..r.n() {
                    for j in 0..r.m() {
                        average[(i, j)] += (state.f[i] + g[j] + lr[(i, j)]).exp();
                    }
                }
                let objective = objective_from_state(&state, r);
                if k % config.record_every == 0 || k + 1 == config.n_iters {
                    records.push((k, objective));
                }
                final_objective = objective;
                let noise = model.noise(r.m(), &mut rng);
                let sup = noise.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                sup_sq_sum += sup * sup;
                let exact = descent_direction(&state, r).mapv(|v| -v);
                g = &g - &((exact + noise) * gamma);
            }
            average /= config.n_iters as f64;
            let marginal_y = average.sum_axis(ndarray::Axis(0));
            let kl = kl_divergence(marginal_y.view(), nu.view()).expect("valid marginal");
            (
                kl,
                sup_sq_sum,
                SeedTrace {
                    seed_index,
                    records,
                    final_objective,
                },
            )
        })
        .collect();

    let per_seed_kl: Vec<f64> = per_seed.iter().map(|(kl, _, _)| *kl).collect();
    let seed_mean_kl = per_seed_kl.iter().sum::<f64>() / per_seed_kl.len() as f64;
    let sigma_hat_sq = per_seed.iter().map(|(_, s, _)| s).sum::<f64>()
        / (config.n_seeds * config.n_iters) as f64;
    let bound = kl_opt_ref / (gamma * config.n_iters as f64) + gamma * sigma_hat_sq;
    Ok(ErgodicReport {
        ratio: seed_mean_kl / bound,
        per_seed_kl,
        seed_mean_kl,
        kl_opt_ref,
        sigma_hat_sq,
        bound,
        traces: per_seed.into_iter().map(|(_, _, t)| t).collect(),
        gamma,
        generator: GENERATOR,
    })
}

/// Output of the diminishing-step last-iterate experiment.
#[derive(Debug, Clone)]
pub struct LastIterateReport {
    pub per_seed_final: Vec<f64>,
    /// Fraction of seeds whose final objective fell below `tol`.
    pub converged_fraction: f64,
    pub tol: f64,
    pub traces: Vec<SeedTrace>,
    pub generator: &'static str,
}

/// Diminishing-step run with noisy and possibly biased gradients; reports the
/// final objective of every seed.
///
/// The schedule must satisfy `Σ gamma_n = inf` and `Σ gamma_n^2 < inf`,
/// checked symbolically for the built-in families.
pub fn run_robbins_monro(
    reference: Arc<ReferenceCoupling>,
    config: &StochasticRunConfig,
    model: &NoiseModel,
) -> Result<LastIterateReport> {
    config.validate()?;
    model.validate()?;
    if !config.schedule.is_square_summable_divergent() {
        return Err(Error::InvalidParameter(
            "last-iterate runs need a square-summable divergent schedule (harmonic family)"
                .into(),
        ));
    }
    let r = reference.as_ref();
    let traces: Vec<SeedTrace> = (0..config.n_seeds as u64)
        .into_par_iter()
        .map(|seed_index| {
            let mut rng = ChaCha12Rng::seed_from_u64(model.seed);
            rng.set_stream(seed_index);
            let mut g: Array1<f64> = Array1::zeros(r.m());
            let mut records = Vec::new();
            let mut final_objective = f64::NAN;
            for k in 0..=config.n_iters {
                let state = dual_state(g.view(), r).expect("finite iterate");
                let objective = objective_from_state(&state, r);
                if k % config.record_every == 0 || k == config.n_iters {
                    records.push((k, objective));
                }
                final_objective = objective;
                if k == config.n_iters {
                    break;
                }
                let exact = descent_direction(&state, r).mapv(|v| -v);
                let draw = exact + model.bias_at(k, r.m()) + model.noise(r.m(), &mut rng);
                g = &g - &(draw * config.schedule.gamma(k));
            }
            SeedTrace {
                seed_index,
                records,
                final_objective,
            }
        })
        .collect();

    let per_seed_final: Vec<f64> = traces.iter().map(|t| t.final_objective).collect();
    let converged = per_seed_final.iter().filter(|f| **f < config.tol).count();
    Ok(LastIterateReport {
        converged_fraction: converged as f64 / config.n_seeds as f64,
        per_seed_final,
        tol: config.tol,
        traces,
        generator: GENERATOR,
    })
}
