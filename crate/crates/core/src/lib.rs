//! Training-data-free dynamic image reconstruction.
//!
//! An image time series is modelled as `x_i = G(z_i)`: a small convolutional
//! generator `G` maps a low-dimensional latent vector per frame to a complex
//! image. The generator weights and all latents are fitted jointly to
//! undersampled Fourier measurements, with a penalty on the latent-to-image
//! Jacobian (manifold smoothness) and on temporal differences of the latents.
//! Optimization can proceed progressively in time, starting from a single
//! average frame and growing the number of frames stage by stage.
//!
//! Module map:
//! - [`forward_model`]: sampling patterns, the multi-coil Fourier operator and its adjoint.
//! - [`generator`]: the convolutional generator, its Jacobian penalty and exact gradients.
//! - [`objective`]: data fidelity, temporal penalty and the assembled cost.
//! - [`trainer`]: ADAM, minibatching, the progressive schedule and checkpoints.
//! - [`phantom`]: a synthetic two-motion dynamic phantom and acquisition simulation.
//! - [`evaluation`]: SER, latent/motion correlation and timing comparisons.
//! - [`archive`]: the shared binary container used by every on-disk artifact.

pub mod archive;
pub mod error;
pub mod evaluation;
pub mod forward_model;
pub mod generator;
pub mod objective;
pub mod optim;
pub mod phantom;
pub mod trainer;

pub use error::{ReconError, Result};
