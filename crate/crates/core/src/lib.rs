//! Particle filters with learned transition and proposal mixtures.
//!
//! The transition kernel `f(x_t | x_{t-1})` and the proposal
//! `pi(x_t | x_{t-1}, y_t)` of a state-space model are both represented as
//! equally weighted diagonal Gaussian mixtures whose parameters are emitted by
//! dense networks. The networks are trained by maximising the particle-filter
//! log-likelihood estimate, differentiated through a stop-gradient
//! resampling filter.
//!
//! Module map:
//!
//! - [`autodiff`]: reverse-mode tape with stop-gradient.
//! - [`distributions`]: diagonal Gaussians, equal-weight mixtures, samplers.
//! - [`neuralnet`]: dense networks, ADAM, checkpoints.
//! - [`ssm`]: model abstraction, Lorenz 96, Kuramoto, linear-Gaussian.
//! - [`filter`]: SIR / stop-gradient particle filter.
//! - [`training`]: alternating conditional updates over telescoping batches.
//! - [`bench`]: metrics, sweeps and the CLI driver.

pub mod autodiff;
pub mod bench;
pub mod distributions;
pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod neuralnet;
pub mod rng;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
