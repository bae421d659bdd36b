//! Experiment commands behind the CLI binary.
//!
//! Each command loads what it needs from the experiment config, runs the
//! experiment, and writes deterministic CSV (and optional SVG) outputs.
//! Exit-code contract: 0 success, 1 usage/config error (surfaced as `Err`
//! and mapped by the binary), 2 non-convergence or missed-threshold flag,
//! 3 numerical degeneracy.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::bridge::{
    lebesgue_potential, lift_drift, reversal_drift, simulate_em, static_bridge, value_function_mc,
    BridgeProblem, ValueEstimator,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::flow::{integrate, rate_certificate};
use crate::measures::{
    build_reference, total_variation, uniform_grid, CostMatrix, DiscreteMeasure,
};
use crate::plot::{line_chart_svg, Series};
use crate::sinkhorn::{bregman_dual, coupling_from_g, solve_with_reference, GammaSchedule, SolveFlag, SolverConfig};
use crate::stochastic::{run_constant_step, run_robbins_monro, Averaging, GENERATOR};
use crate::tabular::{self, fmt_float};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FLAG: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;

const SOLVE_HEADER: [&str; 7] = [
    "iter",
    "t",
    "gamma",
    "objective",
    "marginal_err_x",
    "marginal_err_y",
    "breg_to_opt",
];

fn resolve(out_dir: Option<&Path>, path: &Path) -> PathBuf {
    match out_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::InvalidParameter(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, out)
        .map_err(|e| Error::InvalidParameter(format!("cannot write {}: {e}", path.display())))
}

fn write_svg(path: &Path, series: &[Series], x_label: &str, y_label: &str) -> Result<()> {
    std::fs::write(path, line_chart_svg(series, x_label, y_label))
        .map_err(|e| Error::InvalidParameter(format!("cannot write {}: {e}", path.display())))
}

fn require<'a, T>(field: &'a Option<T>, what: &str) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("config section '{what}' is required")))
}

fn require_seed(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.output.seed.ok_or_else(|| {
        Error::InvalidParameter("a seed is required for stochastic experiments".into())
    })
}

/// Cumulative step-size sums: `t_n = Σ_{k<n} gamma_k`.
fn effective_times(schedule: &GammaSchedule, upto: usize) -> Vec<f64> {
    let mut times = Vec::with_capacity(upto + 1);
    let mut t = 0.0;
    times.push(0.0);
    for n in 0..upto {
        t += schedule.gamma(n);
        times.push(t);
    }
    times
}

fn build_static_problem(
    cfg: &ExperimentConfig,
) -> Result<(DiscreteMeasure, DiscreteMeasure, CostMatrix, f64)> {
    let problem = require(&cfg.problem, "problem")?;
    problem.validate()?;
    let epsilon = cfg.epsilon.unwrap_or(1.0);
    if let Some(inline) = &problem.inline {
        let mu = DiscreteMeasure::new(Array1::from_vec(inline.mu.clone()))?;
        let nu = DiscreteMeasure::new(Array1::from_vec(inline.nu.clone()))?;
        let n = inline.cost.len();
        let m = inline.cost.first().map(|r| r.len()).unwrap_or(0);
        let flat: Vec<f64> = inline.cost.iter().flatten().copied().collect();
        if flat.len() != n * m {
            return Err(Error::InvalidParameter("ragged cost matrix".into()));
        }
        let cost = CostMatrix::new(
            Array2::from_shape_vec((n, m), flat)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?,
        )?;
        return Ok((mu, nu, cost, epsilon));
    }
    if let Some(files) = &problem.files {
        for path in [&files.mu, &files.nu, &files.cost] {
            if !path.exists() {
                return Err(Error::InvalidParameter(format!(
                    "referenced file {} does not exist",
                    path.display()
                )));
            }
        }
        let mu = tabular::load_measure(&files.mu)?;
        let nu = tabular::load_measure(&files.nu)?;
        let cost = tabular::load_cost(&files.cost)?;
        return Ok((mu, nu, cost, epsilon));
    }
    let g = problem.gaussian_1d.as_ref().expect("validated above");
    let grid = uniform_grid(-g.extent, g.extent, g.m)?;
    let mu = DiscreteMeasure::gaussian_histogram(&grid, g.mean0, g.var0)?;
    let nu = DiscreteMeasure::gaussian_histogram(&grid, g.mean_t, g.var_t)?;
    let cost = CostMatrix::half_squared_distance(&grid, &grid)?;
    Ok((mu, nu, cost, epsilon))
}

fn build_bridge_problem(cfg: &ExperimentConfig) -> Result<BridgeProblem> {
    let problem = require(&cfg.problem, "problem")?;
    problem.validate()?;
    if let Some(g) = &problem.gaussian_1d {
        let grid = uniform_grid(-g.extent, g.extent, g.m)?;
        let mu0 = DiscreteMeasure::gaussian_histogram(&grid, g.mean0, g.var0)?;
        let mu_t = DiscreteMeasure::gaussian_histogram(&grid, g.mean_t, g.var_t)?;
        return BridgeProblem::new(mu0, mu_t);
    }
    if let Some(files) = &problem.files {
        let mu0 = tabular::load_measure(&files.mu)?;
        let mu_t = tabular::load_measure(&files.nu)?;
        return BridgeProblem::new(mu0, mu_t);
    }
    Err(Error::InvalidParameter(
        "the bridge experiment needs a gridded problem (gaussian_1d or measure files with support)"
            .into(),
    ))
}

/// Run the static solver and write its trace.
pub fn cmd_solve(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<i32> {
    let (mu, nu, cost, epsilon) = build_static_problem(cfg)?;
    let solver = match &cfg.solver {
        Some(s) => s.solver_config()?,
        None => SolverConfig::default(),
    };
    let reference = Arc::new(build_reference(&mu, &nu, &cost, epsilon)?);
    let result = solve_with_reference(reference, &solver)?;

    let last_iter = result.trace.last().map(|r| r.iter).unwrap_or(0);
    let times = effective_times(&solver.schedule, last_iter);
    let rows: Vec<Vec<String>> = result
        .trace
        .iter()
        .map(|rec| {
            vec![
                rec.iter.to_string(),
                fmt_float(times[rec.iter]),
                fmt_float(solver.schedule.gamma(rec.iter)),
                fmt_float(rec.objective),
                fmt_float(rec.marginal_err_x),
                fmt_float(rec.marginal_err_y),
                rec.breg_to_opt.map(fmt_float).unwrap_or_default(),
            ]
        })
        .collect();
    let csv_path = resolve(out_dir, &cfg.output.csv_path);
    write_csv(&csv_path, &SOLVE_HEADER, &rows)?;

    if let Some(svg) = &cfg.output.svg_path {
        let series = vec![Series {
            name: "objective".into(),
            points: result
                .trace
                .iter()
                .map(|r| (times[r.iter], r.objective))
                .collect(),
        }];
        write_svg(&resolve(out_dir, svg), &series, "t", "objective")?;
    }

    Ok(match result.flag {
        SolveFlag::Converged => EXIT_OK,
        SolveFlag::MaxIterReached => EXIT_FLAG,
        SolveFlag::Degenerate => EXIT_DEGENERATE,
    })
}

/// Integrate the potential flow, certify the rate bound, and write the
/// trajectory with a `rate_ok` verdict per row.
pub fn cmd_flow(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<i32> {
    let (mu, nu, cost, epsilon) = build_static_problem(cfg)?;
    let flow_cfg = require(&cfg.flow, "flow")?.integrator_config()?;
    let reference = Arc::new(build_reference(&mu, &nu, &cost, epsilon)?);

    let opt = solve_with_reference(
        reference.clone(),
        &SolverConfig {
            tol: 1e-13,
            max_iter: 200_000,
            record_every: usize::MAX,
            ..SolverConfig::default()
        },
    )?;
    if !opt.converged() {
        return Err(Error::Degenerate(
            "reference solve for the rate certificate did not converge".into(),
        ));
    }
    let g_opt = &opt.potentials.g;

    let traj = integrate(Array1::zeros(reference.m()).view(), &reference, &flow_cfg)?;
    if !traj.completed {
        return Ok(EXIT_DEGENERATE);
    }
    let report = rate_certificate(&traj, g_opt.view(), &reference)?;

    let mu_w = reference.log_mu().mapv(f64::exp);
    let header: Vec<&str> = SOLVE_HEADER.iter().copied().chain(["rate_ok"]).collect();
    let mut rows = Vec::with_capacity(traj.times.len());
    let mut cert_rows = report.rows.iter();
    for ((t, g), diag) in traj
        .times
        .iter()
        .zip(traj.potentials.iter())
        .zip(traj.diagnostics.iter())
    {
        let step = (t / flow_cfg.dt).round() as usize;
        let pi = coupling_from_g(g.view(), &reference)?;
        let (mx, _) = pi.marginals();
        let breg = bregman_dual(g.view(), g_opt.view(), &reference)?;
        let ok = if *t > 0.0 {
            cert_rows.next().map(|row| row.ok).unwrap_or(false)
        } else {
            true
        };
        rows.push(vec![
            step.to_string(),
            fmt_float(*t),
            fmt_float(flow_cfg.dt),
            fmt_float(diag.objective),
            fmt_float(total_variation(mx.weights().view(), mu_w.view())),
            fmt_float(diag.marginal_err_y),
            fmt_float(breg),
            if ok { "1".into() } else { "0".into() },
        ]);
    }
    let csv_path = resolve(out_dir, &cfg.output.csv_path);
    write_csv(&csv_path, &header, &rows)?;

    if let Some(svg) = &cfg.output.svg_path {
        let series = vec![Series {
            name: "objective".into(),
            points: traj
                .times
                .iter()
                .zip(traj.diagnostics.iter())
                .map(|(t, d)| (*t, d.objective))
                .collect(),
        }];
        write_svg(&resolve(out_dir, svg), &series, "t", "objective")?;
    }

    Ok(if report.pass { EXIT_OK } else { EXIT_FLAG })
}

fn summary_path(csv: &Path) -> PathBuf {
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let ext = csv
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    csv.with_file_name(format!("{stem}_summary.{ext}"))
}

const STOCHASTIC_SUMMARY_HEADER: [&str; 11] = [
    "kind",
    "bound",
    "empirical",
    "ratio",
    "sigma_hat_sq",
    "kl_opt_ref",
    "converged_fraction",
    "tol",
    "n_seeds",
    "n_iters",
    "generator",
];

/// Run a stochastic experiment: ergodic bound check or last-iterate run.
///
/// Writes per-seed traces (schema plus a `seed` column) and a sibling
/// `*_summary.csv` with the experiment verdict.
pub fn cmd_stochastic(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<i32> {
    let (mu, nu, cost, epsilon) = build_static_problem(cfg)?;
    let seed = require_seed(cfg)?;
    let solver = require(&cfg.solver, "solver")?;
    let stochastic = require(&cfg.stochastic, "stochastic")?;
    let noise = cfg.noise.clone().unwrap_or_default();
    let model = noise.noise_model(seed)?;
    let run_cfg = stochastic.run_config(solver.schedule()?)?;
    let reference = Arc::new(build_reference(&mu, &nu, &cost, epsilon)?);

    let header: Vec<&str> = ["seed"].iter().copied().chain(SOLVE_HEADER).collect();
    let times = effective_times(&run_cfg.schedule, run_cfg.n_iters);
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut summary = Vec::new();
    let exit;
    match stochastic.averaging()? {
        Averaging::Ergodic => {
            let report = run_constant_step(reference, &run_cfg, &model)?;
            for trace in &report.traces {
                for (iter, objective) in &trace.records {
                    rows.push(vec![
                        trace.seed_index.to_string(),
                        iter.to_string(),
                        fmt_float(times[*iter]),
                        fmt_float(run_cfg.schedule.gamma(*iter)),
                        fmt_float(*objective),
                        String::new(),
                        String::new(),
                        String::new(),
                    ]);
                }
            }
            summary.push(vec![
                "ergodic".to_string(),
                fmt_float(report.bound),
                fmt_float(report.seed_mean_kl),
                fmt_float(report.ratio),
                fmt_float(report.sigma_hat_sq),
                fmt_float(report.kl_opt_ref),
                String::new(),
                String::new(),
                run_cfg.n_seeds.to_string(),
                run_cfg.n_iters.to_string(),
                GENERATOR.to_string(),
            ]);
            exit = if report.ratio <= 1.0 { EXIT_OK } else { EXIT_FLAG };
        }
        Averaging::LastIterate => {
            let report = run_robbins_monro(reference, &run_cfg, &model)?;
            for trace in &report.traces {
                for (iter, objective) in &trace.records {
                    rows.push(vec![
                        trace.seed_index.to_string(),
                        iter.to_string(),
                        fmt_float(times[*iter]),
                        fmt_float(run_cfg.schedule.gamma(*iter)),
                        fmt_float(*objective),
                        String::new(),
                        String::new(),
                        String::new(),
                    ]);
                }
            }
            summary.push(vec![
                "last_iterate".to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                fmt_float(report.converged_fraction),
                fmt_float(report.tol),
                run_cfg.n_seeds.to_string(),
                run_cfg.n_iters.to_string(),
                GENERATOR.to_string(),
            ]);
            exit = if report.converged_fraction == 1.0 {
                EXIT_OK
            } else {
                EXIT_FLAG
            };
        }
    }

    let csv_path = resolve(out_dir, &cfg.output.csv_path);
    write_csv(&csv_path, &header, &rows)?;
    write_csv(
        &summary_path(&csv_path),
        &STOCHASTIC_SUMMARY_HEADER,
        &summary,
    )?;

    if let Some(svg) = &cfg.output.svg_path {
        // one polyline per seed would be unreadable; plot the first seed
        let series = vec![Series {
            name: "objective_seed0".into(),
            points: rows
                .iter()
                .filter(|r| r[0] == "0")
                .map(|r| {
                    (
                        r[2].parse::<f64>().unwrap_or(f64::NAN),
                        r[4].parse::<f64>().unwrap_or(f64::NAN),
                    )
                })
                .collect(),
        }];
        write_svg(&resolve(out_dir, svg), &series, "t", "objective")?;
    }
    Ok(exit)
}

const BRIDGE_SUMMARY_HEADER: [&str; 2] = ["metric", "value"];

/// Bridge demo: static solve, drift lift, forward and reverse particle
/// transport, reversal involution check, and a value-function sanity block.
pub fn cmd_bridge(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<i32> {
    let problem = build_bridge_problem(cfg)?;
    let seed = require_seed(cfg)?;
    let section = require(&cfg.bridge, "bridge")?;
    if !(section.t_max > 0.0 && section.t_max < 1.0) {
        return Err(Error::InvalidParameter("t_max must lie in (0, 1)".into()));
    }
    if section.n_t < 2 {
        return Err(Error::InvalidParameter("n_t must be at least 2".into()));
    }

    let potentials = static_bridge(&problem)?;
    let psi = lebesgue_potential(potentials.g.view(), problem.mu_t())?;
    let t_grid: Vec<f64> = (0..section.n_t)
        .map(|i| section.t_max * i as f64 / (section.n_t - 1) as f64)
        .collect();
    let grid = problem.grid();
    let dz = problem.spacing();
    let forward = lift_drift(psi.view(), &t_grid, grid)?;

    let ens = simulate_em(&forward, problem.mu0(), section.n_particles, section.n_steps, seed)?;
    let hist = ens.histogram_density(grid);
    let target = problem.mu_t().weights().mapv(|w| w / dz);
    let tv_forward = 0.5
        * dz
        * hist
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();

    let pi = potentials.coupling()?;
    let reverse = reversal_drift(&forward, &pi)?;
    let back = reversal_drift(&reverse, &pi)?;
    let involution_gap = forward
        .values()
        .iter()
        .zip(back.values().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let rev_ens = simulate_em(
        &reverse.time_flip(),
        problem.mu_t(),
        section.n_particles,
        section.n_steps,
        seed.wrapping_add(1),
    )?;
    let rev_hist = rev_ens.histogram_density(grid);
    let source = problem.mu0().weights().mapv(|w| w / dz);
    let tv_reverse = 0.5
        * dz
        * rev_hist
            .iter()
            .zip(source.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();

    // value-function block: the score field is recoverable as v + w
    let score = crate::bridge::DriftField::new(
        forward.t_grid().to_vec(),
        grid.clone(),
        forward.values() + reverse.values(),
    )?;
    let x0 = grid[grid.len() / 2];
    let value_at = |gamma: f64, estimator: ValueEstimator| {
        value_function_mc(
            x0,
            0.0,
            &forward,
            &score,
            gamma,
            1.0,
            section.value_samples,
            section.value_steps,
            seed.wrapping_add(2),
            estimator,
        )
    };
    let v0 = value_at(0.0, ValueEstimator::FeynmanKac)?;
    let v1 = value_at(1.0, ValueEstimator::FeynmanKac)?;
    let v_fk = value_at(section.value_gamma, ValueEstimator::FeynmanKac)?;
    let v_killed = value_at(section.value_gamma, ValueEstimator::Killed)?;
    let combined_se = (v_fk.std_err.powi(2) + v_killed.std_err.powi(2)).sqrt();
    let estimator_gap_sigmas = if combined_se > 0.0 {
        (v_fk.mean - v_killed.mean).abs() / combined_se
    } else {
        0.0
    };

    // drift snapshots: one row per (t, z) node
    let mut rows = Vec::with_capacity(t_grid.len() * grid.len());
    for (i, t) in forward.t_grid().iter().enumerate() {
        for (k, z) in grid.iter().enumerate() {
            rows.push(vec![
                fmt_float(*t),
                fmt_float(*z),
                fmt_float(forward.values()[(i, k)]),
                fmt_float(reverse.values()[(i, k)]),
            ]);
        }
    }
    let csv_path = resolve(out_dir, &cfg.output.csv_path);
    write_csv(&csv_path, &["t", "z", "v", "w"], &rows)?;

    let summary = vec![
        vec!["terminal_tv_forward".into(), fmt_float(tv_forward)],
        vec!["terminal_tv_reverse".into(), fmt_float(tv_reverse)],
        vec!["involution_gap".into(), fmt_float(involution_gap)],
        vec!["value_gamma0".into(), fmt_float(v0.mean)],
        vec!["value_gamma1".into(), fmt_float(v1.mean)],
        vec!["value_mid_fk".into(), fmt_float(v_fk.mean)],
        vec!["value_mid_fk_se".into(), fmt_float(v_fk.std_err)],
        vec!["value_mid_killed".into(), fmt_float(v_killed.mean)],
        vec!["value_mid_killed_se".into(), fmt_float(v_killed.std_err)],
        vec!["estimator_gap_sigmas".into(), fmt_float(estimator_gap_sigmas)],
        vec!["seed".into(), seed.to_string()],
        vec!["generator".into(), GENERATOR.into()],
    ];
    write_csv(&summary_path(&csv_path), &BRIDGE_SUMMARY_HEADER, &summary)?;

    if let Some(svg) = &cfg.output.svg_path {
        let series = vec![
            Series {
                name: "target".into(),
                points: grid.iter().zip(target.iter()).map(|(z, d)| (*z, *d)).collect(),
            },
            Series {
                name: "terminal_histogram".into(),
                points: grid.iter().zip(hist.iter()).map(|(z, d)| (*z, *d)).collect(),
            },
        ];
        write_svg(&resolve(out_dir, svg), &series, "z", "density")?;
    }

    Ok(if tv_forward < 0.05 && tv_reverse < 0.05 {
        EXIT_OK
    } else {
        EXIT_FLAG
    })
}

/// Render chosen CSV columns as a deterministic SVG line chart.
pub fn cmd_plot(
    csv_path: &Path,
    x_column: Option<&str>,
    columns: &[String],
    svg_path: &Path,
) -> Result<i32> {
    if columns.is_empty() {
        return Err(Error::InvalidParameter("no columns requested".into()));
    }
    let content = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", csv_path.display())))?;
    let mut lines = content.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::InvalidParameter("empty CSV".into()))?
        .split(',')
        .collect();
    let col_index = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::InvalidParameter(format!("column '{name}' not found")))
    };
    let x_idx = match x_column {
        Some(name) => col_index(name)?,
        None => 0,
    };
    let y_idx: Vec<usize> = columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let mut series: Vec<Series> = columns
        .iter()
        .map(|c| Series {
            name: c.clone(),
            points: Vec::new(),
        })
        .collect();
    let mut n_rows = 0usize;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let x: f64 = fields
            .get(x_idx)
            .and_then(|f| f.parse().ok())
            .unwrap_or(f64::NAN);
        for (s, idx) in series.iter_mut().zip(y_idx.iter()) {
            let y: f64 = fields
                .get(*idx)
                .and_then(|f| f.parse().ok())
                .unwrap_or(f64::NAN);
            s.points.push((x, y));
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::InvalidParameter("CSV has no data rows".into()));
    }
    let x_label = header.get(x_idx).copied().unwrap_or("x");
    write_svg(svg_path, &series, x_label, &columns.join(", "))?;
    Ok(EXIT_OK)
}

/// Map an error to the exit-code contract.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Degenerate(_) => EXIT_DEGENERATE,
        _ => EXIT_USAGE,
    }
}
