//! Continuous simultaneous policy-value iteration for entropy-regularized
//! stochastic control in one state and one control dimension.
//!
//! The solver evolves, along an artificial iteration clock `tau`, a particle
//! approximation of a relaxed (distribution-valued) control together with a
//! value-function approximation, coupled through the Hamiltonian
//! `H(x,u,p,S) = f(x,u) + b(x,u) p + sigma(x,u)^2 S / 2`:
//!
//! * particles follow the Langevin dynamics `du = grad_u H dtau + sqrt(2 lambda) dB`,
//! * the value follows `dv = (E_pi[H] + lambda * entropy(pi) - beta v) dtau`
//!   (relaxed) or `dv = (H - beta v) dtau` (classical, `lambda = 0`).
//!
//! Two value backends are provided: a quadratic-coefficient backend exact for
//! linear-quadratic problems and a finite-difference grid backend for general
//! one-dimensional problems. [`lq_oracle`] carries the closed-form
//! linear-quadratic analytics used as ground truth, [`diagnostics`] measures
//! contraction/monotonicity/Gibbs-convergence properties of recorded runs, and
//! [`runner`] orchestrates configuration-driven experiments behind the CLI.

pub mod config;
pub mod diagnostics;
pub mod lq_oracle;
pub mod model;
pub mod policy;
pub mod report;
pub mod runner;
pub mod seed;
pub mod value;

/// Crate-wide error aggregating the per-module error types.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Lq(#[from] lq_oracle::LqError),
    #[error(transparent)]
    Policy(#[from] policy::PolicyError),
    #[error(transparent)]
    Value(#[from] value::ValueError),
    #[error(transparent)]
    Diagnostics(#[from] diagnostics::DiagnosticsError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Run(String),
}

pub type Result<T> = std::result::Result<T, Error>;
