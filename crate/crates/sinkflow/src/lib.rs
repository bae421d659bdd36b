//! Entropic optimal transport on discrete measures with adjustable-step
//! balancing iterations, their continuous-time potential flows, stochastic
//! (noisy/biased gradient) variants, and a 1D diffusion-bridge sandbox.
//!
//! The crate is organized around a small set of log-domain primitives:
//!
//! - [`measures`] — discrete measures, cost kernels, the normalized reference
//!   coupling, and stable log-sum-exp arithmetic;
//! - [`sinkhorn`] — the dual/primal balancing steps, the driver loop, and
//!   dual-space Bregman diagnostics;
//! - [`flow`] — continuous-time integration of the potential dynamics with a
//!   built-in `1/t` rate certificate, plus an unconstrained relative-entropy
//!   descent;
//! - [`stochastic`] — noisy and biased gradient oracles with two desk-scale
//!   convergence experiments;
//! - [`bridge`] — a 1D bridge sandbox: static solve with quadratic cost,
//!   drift-field lifting, particle transport, time reversal, and the
//!   adjustable-step drift recursion with Monte-Carlo value corrections.
//!
//! The `sinkflow` binary drives config-file experiments and writes
//! deterministic CSV and SVG outputs; see the crate README.

pub mod bridge;
pub mod config;
pub mod error;
pub mod flow;
pub mod measures;
pub mod plot;
pub mod runner;
pub mod sinkhorn;
pub mod stochastic;
pub mod tabular;

#[cfg(test)]
pub(crate) mod testkit;

pub use error::{Error, Result};
