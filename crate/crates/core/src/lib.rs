//! Dual-blind deconvolution for a dynamic ISAC receiver.
//!
//! A single receiver observes, pulse by pulse, the scalar superposition of
//! two linear state-space subsystems (radar and communications), each
//! driven by an unknown per-pulse transmit vector times a sparse channel
//! sample. Neither the transmit signals, nor the channels, nor the
//! companion-form state matrices are known.
//!
//! The crate provides:
//!
//! - [`model`]: model types, synthetic scene generation, forward
//!   simulation, marginal log-likelihood;
//! - [`smoother`]: exact posterior moments over an input-augmented state
//!   (forward Kalman pass, backward adjoint pass, scalar innovation
//!   divisions only) plus a dense joint-Gaussian oracle;
//! - [`em`]: the sparsity-promoting expectation-maximization loop with
//!   closed-form updates for prior variances, transmit vectors and
//!   companion rows;
//! - [`eval`]: ambiguity-aware recovery metrics and the scripted
//!   recovery/sweep experiments.

pub mod em;
pub mod error;
pub mod eval;
pub mod init;
pub mod model;
pub mod smoother;

pub use em::{em_fit, EmConfig, EmReport, PriorVariances};
pub use error::{Error, Result};
pub use model::{generate_scene, simulate, ChannelPair, ModelParams, Trajectory};
pub use smoother::{dense_oracle, smooth, PosteriorMoments};
