//! Schrödinger bridges with multivariate Ornstein-Uhlenbeck reference processes.
//!
//! The crate is layered bottom-up: matrix functions and cached kernel
//! integrals ([`kernel`]), exact bridge statistics ([`bridge`]), the closed-form
//! Gaussian bridge ([`gsb`]), discrete entropic transport ([`eot`]), neural
//! flow/score matching ([`fm`]), simulation ([`sim`]), reference refitting
//! ([`refit`]) and evaluation metrics ([`metrics`]).

pub mod bridge;
pub mod eot;
pub mod fm;
pub mod error;
pub mod gsb;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod process;
pub mod refit;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use kernel::KernelCache;
pub use process::{Gaussian, OUProcess};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
