//! Yeo-Johnson power transform with maximum-likelihood λ.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LAMBDA_BOUNDS: (f64, f64) = (-5.0, 5.0);
pub const LAMBDA_TOLERANCE: f64 = 1e-6;
pub const MIN_FIT_SAMPLES: usize = 10;

/// `T(x | λ)`, evaluated with `ln_1p`/`exp_m1` so small arguments stay exact.
pub fn yeo_johnson_forward(x: f64, lambda: f64) -> f64 {
    if lambda == 1.0 {
        return x;
    }
    if x >= 0.0 {
        if lambda == 0.0 {
            x.ln_1p()
        } else {
            (lambda * x.ln_1p()).exp_m1() / lambda
        }
    } else {
        let mu = 2.0 - lambda;
        if lambda == 2.0 {
            -(-x).ln_1p()
        } else {
            -(mu * (-x).ln_1p()).exp_m1() / mu
        }
    }
}

/// Algebraic inverse of [`yeo_johnson_forward`] on the branch selected by
/// the sign of `y` (the transform maps signs to themselves).
pub fn yeo_johnson_inverse(y: f64, lambda: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Domain(format!("non-finite transformed value {y}")));
    }
    if lambda == 1.0 {
        return Ok(y);
    }
    if y >= 0.0 {
        if lambda == 0.0 {
            return Ok(y.exp_m1());
        }
        let base = lambda * y;
        if base <= -1.0 {
            return Err(Error::Domain(format!("y = {y} >= -1/λ for λ = {lambda}")));
        }
        Ok((base.ln_1p() / lambda).exp_m1())
    } else {
        let mu = 2.0 - lambda;
        if lambda == 2.0 {
            return Ok(-(-y).exp_m1());
        }
        let base = -mu * y;
        if base <= -1.0 {
            return Err(Error::Domain(format!("y = {y} <= 1/(2-λ) for λ = {lambda}")));
        }
        Ok(-(base.ln_1p() / mu).exp_m1())
    }
}

/// Profile Gaussian log-likelihood of the transformed sample:
/// `−(n/2)·ln σ̂²(λ) + (λ−1)·Σ sign(x)·ln(|x|+1)`.
///
/// Returns `-∞` when the transformed spread has collapsed below the floating
/// point resolution of the transformed values, where `σ̂²` is meaningless.
pub fn yeo_johnson_log_likelihood(samples: &[f64], lambda: f64) -> f64 {
    let n = samples.len() as f64;
    let t: Vec<f64> = samples.iter().map(|&x| yeo_johnson_forward(x, lambda)).collect();
    if t.iter().any(|v| !v.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = t.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(var > 0.0) || var.sqrt() < 1e-10 * scale {
        return f64::NEG_INFINITY;
    }
    let jac: f64 = samples.iter().map(|&x| x.signum() * x.abs().ln_1p()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * jac
}

/// A fitted per-feature transform: Yeo-Johnson followed by standardisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerTransform {
    pub lambda: f64,
    pub fitted_on: usize,
    pub mean: f64,
    pub std: f64,
}

impl PowerTransform {
    /// A transform with fixed λ whose standardisation is fitted on `samples`.
    pub fn with_lambda(samples: &[f64], lambda: f64) -> Result<Self> {
        let t: Vec<f64> = samples.iter().map(|&x| yeo_johnson_forward(x, lambda)).collect();
        let n = t.len() as f64;
        let mean = t.iter().sum::<f64>() / n;
        let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateVariance(format!(
                "transformed variance vanished at λ = {lambda}"
            )));
        }
        Ok(Self {
            lambda,
            fitted_on: samples.len(),
            mean,
            std,
        })
    }

    pub fn identity() -> Self {
        Self {
            lambda: 1.0,
            fitted_on: 0,
            mean: 0.0,
            std: 1.0,
        }
    }

    /// Raw value to standardised model space.
    pub fn transform(&self, x: f64) -> f64 {
        (yeo_johnson_forward(x, self.lambda) - self.mean) / self.std
    }

    /// Standardised model space back to raw units.
    pub fn inverse(&self, z: f64) -> Result<f64> {
        yeo_johnson_inverse(self.destandardize(z), self.lambda)
    }

    /// Standardised value to the power-transformed scale `T(x | λ)`.
    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Power-transformed scale `T(x | λ)` of a raw value.
    pub fn power(&self, x: f64) -> f64 {
        yeo_johnson_forward(x, self.lambda)
    }
}

/// Maximum-likelihood Yeo-Johnson fit by golden-section search over λ.
pub fn fit_yeo_johnson(samples: &[f64]) -> Result<PowerTransform> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::Usage(format!(
            "power transform fit needs at least {MIN_FIT_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("power transform fit on non-finite samples".into()));
    }
    let first = samples[0];
    if samples.iter().all(|&v| v == first) {
        return Err(Error::DegenerateVariance("constant sample".into()));
    }

    let ll = |l: f64| yeo_johnson_log_likelihood(samples, l);
    let lambda = golden_section_max(ll, LAMBDA_BOUNDS.0, LAMBDA_BOUNDS.1, LAMBDA_TOLERANCE);
    PowerTransform::with_lambda(samples, lambda)
}

fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Modulation factor `|x · d/dx ln T(x | λ)|` linking relative errors in the
/// transformed and original spaces, for `x ≥ 0`. At `x = 0` the limit (1) is
/// returned.
pub fn consistency_factor(x: f64, lambda: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("consistency factor needs x >= 0, got {x}")));
    }
    if x == 0.0 || lambda == 1.0 {
        return Ok(1.0);
    }
    let v = if lambda == 0.0 {
        x / ((x + 1.0) * x.ln_1p())
    } else {
        let num = lambda * x * (x + 1.0).powf(lambda - 1.0);
        num / (lambda * x.ln_1p()).exp_m1()
    };
    Ok(v.abs())
}
