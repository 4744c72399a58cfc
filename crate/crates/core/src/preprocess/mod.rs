//! Feature preprocessing: Yeo-Johnson power transforms for scalar features
//! and 2-D Haar energy-threshold compression for weather grids.

mod pipeline;
mod power;
mod wavelet;

pub use pipeline::{Prepared, Preprocessor, ENERGY_THRESHOLD};

pub use power::{
    consistency_factor, fit_yeo_johnson, yeo_johnson_forward, yeo_johnson_inverse,
    yeo_johnson_log_likelihood, PowerTransform, LAMBDA_BOUNDS, LAMBDA_TOLERANCE, MIN_FIT_SAMPLES,
};
pub use wavelet::{
    haar_decompose, haar_reconstruct, max_levels, mean_retained_fraction, select_drop_levels,
    select_drop_levels_mean, DetailLevel, Grid, WaveletCompressor, WaveletPyramid,
};
