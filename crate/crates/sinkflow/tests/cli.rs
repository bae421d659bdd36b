//! Behavioral tests for the `sinkflow` binary: exit-code contract, CSV
//! schemas, and the plot command's error paths.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sinkflow")
}

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let content = std::fs::read_to_string(path).unwrap();
    content
        .lines()
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect()
}

const ASYMMETRIC: &str = r#"
epsilon = 0.5
[problem.inline]
mu = [0.3, 0.7]
nu = [0.6, 0.4]
cost = [[0.0, 1.0], [1.0, 0.0]]
"#;

#[test]
fn solve_symmetric_writes_single_row_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        r#"
epsilon = 1.0
[problem.inline]
mu = [0.5, 0.5]
nu = [0.5, 0.5]
cost = [[0.0, 1.0], [1.0, 0.0]]
[output]
csv_path = "out.csv"
"#,
    );
    let out = run(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("out.csv"));
    assert_eq!(rows.len(), 2, "header plus exactly one row");
    assert_eq!(
        rows[0],
        vec!["iter", "t", "gamma", "objective", "marginal_err_x", "marginal_err_y", "breg_to_opt"]
    );
    let objective: f64 = rows[1][3].parse().unwrap();
    assert_eq!(objective, 0.0);
}

#[test]
fn solve_asymmetric_converges_to_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "{ASYMMETRIC}
[solver]
gamma = 1.0
tol = 1e-12
[output]
csv_path = \"out.csv\"
svg_path = \"out.svg\"
"
        ),
    );
    let out = run(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("out.csv"));
    let last = rows.last().unwrap();
    let objective: f64 = last[3].parse().unwrap();
    assert!(objective < 1e-12);
    // converged solves back-fill the dual Bregman distance to the optimum
    let breg: f64 = rows[1][6].parse().unwrap();
    assert!(breg > 0.0);
    assert!(dir.path().join("out.svg").exists());
}

#[test]
fn solve_max_iter_flag_still_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "{ASYMMETRIC}
[solver]
max_iter = 1
tol = 1e-15
[output]
csv_path = \"out.csv\"
"
        ),
    );
    let out = run(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(dir.path().join("out.csv").exists());
}

#[test]
fn malformed_config_reports_line_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        r#"
[output]
csv_path = "out.csv"
not_a_key = true
"#,
    );
    let out = run(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line"), "stderr: {stderr}");
    assert!(stderr.contains("not_a_key"), "stderr: {stderr}");
}

#[test]
fn missing_config_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["solve"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_problem_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        r#"
[problem.files]
mu = "nope_mu.txt"
nu = "nope_nu.txt"
cost = "nope_cost.txt"
[output]
csv_path = "out.csv"
"#,
    );
    let out = run(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn file_based_problem_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("mu.txt"), "# 2 1\n0.3\n0.7\n").unwrap();
    std::fs::write(dir.path().join("nu.txt"), "# 2 1\n0.6\n0.4\n").unwrap();
    std::fs::write(dir.path().join("cost.txt"), "# 2 2\n0 1\n1 0\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            r#"
epsilon = 0.5
[problem.files]
mu = "{0}/mu.txt"
nu = "{0}/nu.txt"
cost = "{0}/cost.txt"
[output]
csv_path = "out.csv"
"#,
            dir.path().display()
        ),
    );
    let out = run(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("out.csv"));
    let objective: f64 = rows.last().unwrap()[3].parse().unwrap();
    assert!(objective < 1e-12);
}

#[test]
fn flow_reports_rate_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "{ASYMMETRIC}
[flow]
method = \"euler\"
dt = 0.1
t_end = 50.0
record_dt = 0.5
[output]
csv_path = \"flow.csv\"
"
        ),
    );
    let out = run(&["flow", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("flow.csv"));
    assert_eq!(*rows[0].last().unwrap(), "rate_ok");
    for row in &rows[1..] {
        assert_eq!(*row.last().unwrap(), "1", "rate verdict failed in {row:?}");
    }
    // objective column is non-increasing
    let objectives: Vec<f64> = rows[1..].iter().map(|r| r[3].parse().unwrap()).collect();
    for w in objectives.windows(2) {
        assert!(w[1] <= w[0] + 1e-10);
    }
}

#[test]
fn flow_integrators_agree_at_the_end() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |name: &str, method: &str, dt: f64| {
        write_config(
            dir.path(),
            name,
            &format!(
                "{ASYMMETRIC}
[flow]
method = \"{method}\"
dt = {dt}
t_end = 5.0
record_dt = 5.0
[output]
csv_path = \"{method}_{dt}.csv\"
"
            ),
        )
    };
    let rk = mk("rk.toml", "rk4", 0.1);
    let eu = mk("eu.toml", "euler", 0.001);
    assert_eq!(run(&["flow", "--config", rk.to_str().unwrap()], dir.path()).status.code(), Some(0));
    assert_eq!(run(&["flow", "--config", eu.to_str().unwrap()], dir.path()).status.code(), Some(0));
    let last = |p: &str| -> Vec<f64> {
        csv_rows(&dir.path().join(p))
            .last()
            .unwrap()
            .iter()
            .skip(3)
            .take(4)
            .map(|s| s.parse().unwrap())
            .collect()
    };
    let a = last("rk4_0.1.csv");
    let b = last("euler_0.001.csv");
    // same final objective and Bregman distance to optimum within 1e-6
    assert!((a[0] - b[0]).abs() < 1e-6);
    assert!((a[3] - b[3]).abs() < 1e-6);
}

#[test]
fn stochastic_ergodic_summary_and_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "{ASYMMETRIC}
[solver]
schedule = \"constant\"
gamma = 0.05
[noise]
sigma_noise = 0.2
[stochastic]
averaging = \"ergodic\"
n_iters = 400
n_seeds = 20
record_every = 100
[output]
csv_path = \"stoch.csv\"
seed = 4242
"
        ),
    );
    let out = run(&["stochastic", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("stoch.csv"));
    assert_eq!(rows[0][0], "seed");
    let summary = csv_rows(&dir.path().join("stoch_summary.csv"));
    assert_eq!(summary[0][0], "kind");
    assert_eq!(summary[1][0], "ergodic");
    let bound: f64 = summary[1][1].parse().unwrap();
    let empirical: f64 = summary[1][2].parse().unwrap();
    let ratio: f64 = summary[1][3].parse().unwrap();
    assert!(ratio <= 1.0 && empirical <= bound);
    assert_eq!(summary[1][10], "chacha12");
}

#[test]
fn stochastic_last_iterate_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "{ASYMMETRIC}
[solver]
schedule = \"harmonic\"
gamma = 1.0
[noise]
sigma_noise = 0.3
bias_scale = 0.5
bias_decay = 1.0
[stochastic]
averaging = \"last_iterate\"
n_iters = 4000
n_seeds = 10
record_every = 1000
[output]
csv_path = \"rm.csv\"
seed = 777
"
        ),
    );
    let out = run(&["stochastic", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = csv_rows(&dir.path().join("rm_summary.csv"));
    assert_eq!(summary[1][0], "last_iterate");
    let fraction: f64 = summary[1][6].parse().unwrap();
    assert_eq!(fraction, 1.0);
}

#[test]
fn stochastic_without_seed_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "{ASYMMETRIC}
[solver]
gamma = 0.1
[stochastic]
averaging = \"ergodic\"
n_iters = 10
n_seeds = 2
[output]
csv_path = \"s.csv\"
"
        ),
    );
    let out = run(&["stochastic", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn seed_override_changes_stochastic_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!(
            "{ASYMMETRIC}
[solver]
gamma = 0.1
[noise]
sigma_noise = 0.2
[stochastic]
averaging = \"ergodic\"
n_iters = 50
n_seeds = 2
record_every = 10
[output]
csv_path = \"s.csv\"
seed = 1
"
        ),
    );
    let args = ["stochastic", "--config", cfg.to_str().unwrap()];
    assert_eq!(run(&args, dir.path()).status.code(), Some(0));
    let first = std::fs::read(dir.path().join("s.csv")).unwrap();
    let out = Command::new(bin())
        .args(args)
        .args(["--seed", "2"])
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let second = std::fs::read(dir.path().join("s.csv")).unwrap();
    assert_ne!(first, second, "different seeds must change the trace");
}

#[test]
fn bridge_summary_has_zero_values_at_step_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        r#"
[problem.gaussian_1d]
m = 81
mean0 = 0.0
var0 = 0.4
mean_t = 0.0
var_t = 0.4
extent = 4.0
[bridge]
n_t = 16
n_particles = 20000
n_steps = 100
value_samples = 2000
value_steps = 50
[output]
csv_path = "bridge.csv"
seed = 5
"#,
    );
    let out = run(&["bridge", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = csv_rows(&dir.path().join("bridge_summary.csv"));
    let lookup = |name: &str| -> f64 {
        summary
            .iter()
            .find(|r| r[0] == name)
            .unwrap_or_else(|| panic!("missing {name}"))[1]
            .parse()
            .unwrap()
    };
    assert_eq!(lookup("value_gamma0"), 0.0);
    assert_eq!(lookup("value_gamma1"), 0.0);
    assert!(lookup("terminal_tv_forward") < 0.05);
    assert!(lookup("terminal_tv_reverse") < 0.05);
    assert!(lookup("involution_gap") < 1e-8);
    // drift snapshots: t,z,v,w rows
    let rows = csv_rows(&dir.path().join("bridge.csv"));
    assert_eq!(rows[0], vec!["t", "z", "v", "w"]);
    assert_eq!(rows.len(), 1 + 16 * 81);
}

#[test]
fn plot_single_and_multi_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    std::fs::write(
        &csv,
        "iter,t,objective,extra\n0,0.0,1.0,2.0\n1,0.5,0.5,1.0\n2,1.0,0.25,0.5\n",
    )
    .unwrap();
    let svg = dir.path().join("one.svg");
    let out = run(
        &[
            "plot",
            "--csv",
            csv.to_str().unwrap(),
            "--x",
            "t",
            "--columns",
            "objective",
            "--svg",
            svg.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let content = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(content.matches("<polyline").count(), 1);

    let svg2 = dir.path().join("two.svg");
    let out = run(
        &[
            "plot",
            "--csv",
            csv.to_str().unwrap(),
            "--x",
            "t",
            "--columns",
            "objective,extra",
            "--svg",
            svg2.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let content = std::fs::read_to_string(&svg2).unwrap();
    assert_eq!(content.matches("<polyline").count(), 2);
    assert!(content.contains(">objective</text>"), "legend expected");
}

#[test]
fn plot_error_paths_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    std::fs::write(&csv, "iter,t,objective\n0,0.0,1.0\n").unwrap();
    let svg = dir.path().join("out.svg");
    // missing column
    let out = run(
        &[
            "plot",
            "--csv",
            csv.to_str().unwrap(),
            "--columns",
            "no_such_column",
            "--svg",
            svg.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_column"));
    // empty body
    std::fs::write(&csv, "iter,t,objective\n").unwrap();
    let out = run(
        &[
            "plot",
            "--csv",
            csv.to_str().unwrap(),
            "--columns",
            "objective",
            "--svg",
            svg.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}
