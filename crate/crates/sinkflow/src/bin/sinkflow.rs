//! Config-driven experiment runner.
//!
//! Subcommands: `solve`, `flow`, `stochastic`, `bridge`, `plot`. The first
//! four read a TOML experiment config (`--config`); `plot` renders columns of
//! an existing CSV. Outputs are deterministic for a fixed config and seed.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 non-convergence flag,
//! 3 numerical degeneracy. Thread count comes from `SINKFLOW_THREADS`
//! (default: available parallelism).

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use sinkflow::config::load_config;
use sinkflow::runner;

#[derive(Parser)]
#[command(name = "sinkflow", version, about = "entropic transport flows and bridge experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory prepended to relative output paths.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the static solver and write its trace.
    Solve,
    /// Integrate the potential flow and certify the rate bound.
    Flow,
    /// Run a stochastic-gradient experiment (ergodic or last-iterate).
    Stochastic,
    /// Bridge demo: lift, simulate, reverse, value-function block.
    Bridge,
    /// Render CSV columns as an SVG line chart.
    Plot {
        /// Input CSV path.
        #[arg(long)]
        csv: PathBuf,
        /// Comma-separated y columns.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        /// x column (default: first column of the CSV).
        #[arg(long)]
        x: Option<String>,
        /// Output SVG path.
        #[arg(long)]
        svg: PathBuf,
    },
}

fn init_threads() {
    let threads = std::env::var("SINKFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    // Ignore failure: the global pool may already exist in tests.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

fn run(cli: Cli) -> sinkflow::Result<i32> {
    match &cli.command {
        Command::Plot {
            csv,
            columns,
            x,
            svg,
        } => runner::cmd_plot(csv, x.as_deref(), columns, svg),
        other => {
            let config_path = cli.config.as_ref().ok_or_else(|| {
                sinkflow::Error::InvalidParameter("--config is required".into())
            })?;
            let mut cfg = load_config(config_path)?;
            if cli.seed.is_some() {
                cfg.output.seed = cli.seed;
            }
            let out_dir = cli.out_dir.as_deref();
            match other {
                Command::Solve => runner::cmd_solve(&cfg, out_dir),
                Command::Flow => runner::cmd_flow(&cfg, out_dir),
                Command::Stochastic => runner::cmd_stochastic(&cfg, out_dir),
                Command::Bridge => runner::cmd_bridge(&cfg, out_dir),
                Command::Plot { .. } => unreachable!(),
            }
        }
    }
}

fn main() {
    init_threads();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            runner::exit_code_for(&err)
        }
    };
    std::process::exit(code);
}
