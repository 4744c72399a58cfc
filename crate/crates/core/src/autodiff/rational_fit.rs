//! Initial coefficients for the rational activation: a least-squares fit of
//! `P(x) / (1 + |q₁x + q₂x²|)` to leaky ReLU on a uniform grid.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use super::kernels::{rational, rational_partials};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const FIT_POINTS: usize = 1001;
pub const FIT_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RationalFit {
    pub p: [f64; 4],
    pub q: [f64; 2],
    pub max_abs_error: f64,
    pub sum_sq_error: f64,
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn grid() -> Vec<f64> {
    let (lo, hi) = FIT_RANGE;
    let step = (hi - lo) / (FIT_POINTS - 1) as f64;
    (0..FIT_POINTS).map(|i| lo + step * i as f64).collect()
}

fn residuals(xs: &[f64], c: &[f64; 6]) -> Vec<f64> {
    xs.iter().map(|&x| rational(x, &c[..4], &c[4..]) - leaky_relu(x)).collect()
}

/// Fits the coefficients; the result is cached after the first call.
///
/// The worst pointwise error over the fitting grid is required to stay below
/// 0.1:
///
/// ```
/// let fit = trajgmm::autodiff::rational_fit::leaky_relu_fit();
/// assert!(fit.max_abs_error < 0.1, "max |error| {}", fit.max_abs_error);
/// ```
pub fn leaky_relu_fit() -> RationalFit {
    static FIT: OnceLock<RationalFit> = OnceLock::new();
    *FIT.get_or_init(fit)
}

fn fit() -> RationalFit {
    let xs = grid();
    let ys: Vec<f64> = xs.iter().map(|&x| leaky_relu(x)).collect();

    // Linearised start: P(x) - y·(q₁x + q₂x²) ≈ y, ignoring the absolute value.
    let a = DMatrix::from_fn(xs.len(), 6, |i, j| {
        let x = xs[i];
        match j {
            0..=3 => x.powi(j as i32),
            4 => -ys[i] * x,
            _ => -ys[i] * x * x,
        }
    });
    let b = DVector::from_column_slice(&ys);
    let lin = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .expect("SVD least squares on a full-rank design");
    let mut c = [lin[0], lin[1], lin[2], lin[3], lin[4], lin[5]];

    // Levenberg-Marquardt on the exact objective.
    let mut r = residuals(&xs, &c);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut damping = 1e-3;
    for _ in 0..500 {
        let mut jtj = DMatrix::<f64>::zeros(6, 6);
        let mut jtr = DVector::<f64>::zeros(6);
        for (&x, &ri) in xs.iter().zip(&r) {
            let (_, dp, dq) = rational_partials(x, &c[..4], &c[4..]);
            let row = [dp[0], dp[1], dp[2], dp[3], dq[0], dq[1]];
            for i in 0..6 {
                jtr[i] += row[i] * ri;
                for j in 0..6 {
                    jtj[(i, j)] += row[i] * row[j];
                }
            }
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut m = jtj.clone();
            for i in 0..6 {
                m[(i, i)] += damping * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = m.cholesky().map(|ch| ch.solve(&jtr)) else {
                damping *= 10.0;
                continue;
            };
            let mut trial = c;
            for i in 0..6 {
                trial[i] -= step[i];
            }
            let rt = residuals(&xs, &trial);
            let ct: f64 = rt.iter().map(|v| v * v).sum();
            if ct < cost {
                let rel = (cost - ct) / cost;
                c = trial;
                r = rt;
                cost = ct;
                damping = (damping * 0.3).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }

    let max_abs_error = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    RationalFit {
        p: [c[0], c[1], c[2], c[3]],
        q: [c[4], c[5]],
        max_abs_error,
        sum_sq_error: cost,
    }
}
