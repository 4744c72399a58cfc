//! Probabilistic flight-position forecasting with a 3-D Gaussian mixture head.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: a small dense tensor type and a define-by-run
//!   reverse-mode differentiation graph.
//! * [`mixture`]: the trivariate mixture head (assembly, density, loss, mode).
//! * [`preprocess`]: Yeo-Johnson power transforms and 2-D Haar compression.
//! * [`network`]: the two-branch weather/traffic model and checkpoints.
//! * [`scenario`]: synthetic airspace generation, instance building, dataset IO.
//! * [`training`]: optimiser loop, k-fold CV, grid search and metrics.
//! * [`explain`]: vanilla-gradient saliency over the nine input features.

pub mod autodiff;
pub mod error;
pub mod explain;
pub mod mixture;
pub mod network;
pub mod preprocess;
pub mod rng;
pub mod scenario;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
