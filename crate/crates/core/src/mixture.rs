//! Trivariate Gaussian mixture head.
//!
//! The network emits a raw head of `10·N` values laid out as three blocks,
//! one per dense sub-branch:
//!
//! ```text
//! [ logits (N) | means (3N) | cholesky raws (6N) ]
//! ```
//!
//! Component `k` owns `means[3k..3k+3]` and `chol[6k..6k+6]`; the six
//! Cholesky raws are `[d0, d1, d2, l10, l20, l21]`. Diagonal entries pass
//! through `exp(clamp(d, -10, 10))`, sub-diagonal entries are used as-is, and
//! the covariance is `L·Lᵀ + jitter·I`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Raw head values per mixture component.
pub const HEAD_PER_COMPONENT: usize = 10;
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Bound applied to raw log-diagonal entries before exponentiation.
pub const LOG_DIAG_CLAMP: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Position as (longitude, latitude, altitude), normally in transformed units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position3D(pub [f64; 3]);

impl Position3D {
    pub fn new(lon: f64, lat: f64, alt: f64) -> Self {
        Self([lon, lat, alt])
    }
    pub fn lon(&self) -> f64 {
        self.0[0]
    }
    pub fn lat(&self) -> f64 {
        self.0[1]
    }
    pub fn alt(&self) -> f64 {
        self.0[2]
    }
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams3D {
    pub alphas: Vec<f64>,
    pub means: Vec<[f64; 3]>,
    /// Lower-triangular factors with positive diagonal.
    pub chol: Vec<Mat3>,
    pub jitter: f64,
}

/// Per-component quantities shared by density, gradient and sampling code.
struct Component {
    log_alpha: f64,
    mean: [f64; 3],
    /// Cholesky factor of the full (jittered) covariance.
    cov_chol: Mat3,
    log_norm: f64,
}

impl Component {
    fn log_density(&self, x: &[f64; 3]) -> f64 {
        let z = solve_lower(&self.cov_chol, &sub(x, &self.mean));
        self.log_norm - 0.5 * dot(&z, &z)
    }

    /// Returns `Σ⁻¹(x − μ)` alongside the log-density.
    fn log_density_and_precision_residual(&self, x: &[f64; 3]) -> (f64, [f64; 3]) {
        let z = solve_lower(&self.cov_chol, &sub(x, &self.mean));
        let s = solve_upper_transposed(&self.cov_chol, &z);
        (self.log_norm - 0.5 * dot(&z, &z), s)
    }
}

impl MixtureParams3D {
    pub fn new(alphas: Vec<f64>, means: Vec<[f64; 3]>, chol: Vec<Mat3>, jitter: f64) -> Result<Self> {
        let n = alphas.len();
        if n == 0 || means.len() != n || chol.len() != n {
            return Err(Error::Config(format!(
                "mixture needs N >= 1 matching weights/means/factors, got {}/{}/{}",
                n,
                means.len(),
                chol.len()
            )));
        }
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be finite and >= 0, got {jitter}")));
        }
        let total: f64 = alphas.iter().sum();
        if alphas.iter().any(|&a| !(a > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights must be a simplex, sum {total}")));
        }
        for l in &chol {
            for i in 0..3 {
                if !(l[i][i] > 0.0) {
                    return Err(Error::Config("Cholesky factor needs a positive diagonal".into()));
                }
                for j in (i + 1)..3 {
                    if l[i][j] != 0.0 {
                        return Err(Error::Config("Cholesky factor must be lower-triangular".into()));
                    }
                }
            }
        }
        Ok(Self {
            alphas,
            means,
            chol,
            jitter,
        })
    }

    pub fn components(&self) -> usize {
        self.alphas.len()
    }

    /// `Σ_k = L_k·L_kᵀ + jitter·I`.
    pub fn covariance(&self, k: usize) -> Mat3 {
        let mut s = mul_transpose(&self.chol[k]);
        for (i, row) in s.iter_mut().enumerate() {
            row[i] += self.jitter;
        }
        s
    }

    fn prepared(&self) -> Result<Vec<Component>> {
        (0..self.components())
            .map(|k| {
                let cov_chol = cholesky3(&self.covariance(k)).ok_or_else(|| {
                    Error::Internal(format!("covariance of component {k} is not positive-definite"))
                })?;
                let log_det_half: f64 = (0..3).map(|i| cov_chol[i][i].ln()).sum();
                Ok(Component {
                    log_alpha: self.alphas[k].ln(),
                    mean: self.means[k],
                    cov_chol,
                    log_norm: -1.5 * LN_2PI - log_det_half,
                })
            })
            .collect()
    }

    /// `log p(x)` evaluated by log-sum-exp over components.
    pub fn log_density(&self, x: &Position3D) -> Result<f64> {
        let comps = self.prepared()?;
        let terms: Vec<f64> = comps
            .iter()
            .map(|c| c.log_alpha + c.log_density(&x.0))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// `log p(x)` and its gradient with respect to `x`.
    fn log_density_and_gradient(comps: &[Component], x: &[f64; 3]) -> (f64, [f64; 3]) {
        let mut terms = Vec::with_capacity(comps.len());
        let mut residuals = Vec::with_capacity(comps.len());
        for c in comps {
            let (ld, s) = c.log_density_and_precision_residual(x);
            terms.push(c.log_alpha + ld);
            residuals.push(s);
        }
        let lp = log_sum_exp(&terms);
        let mut grad = [0.0; 3];
        for (t, s) in terms.iter().zip(&residuals) {
            let r = (t - lp).exp();
            for i in 0..3 {
                grad[i] -= r * s[i];
            }
        }
        (lp, grad)
    }

    /// Smallest diagonal standard deviation over all components.
    fn min_scale(&self) -> f64 {
        (0..self.components())
            .flat_map(|k| {
                let s = self.covariance(k);
                (0..3).map(move |i| s[i][i].sqrt())
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn assemble_component_factor(raw: &[f64]) -> Mat3 {
    let d = |r: f64| r.clamp(-LOG_DIAG_CLAMP, LOG_DIAG_CLAMP).exp();
    [
        [d(raw[0]), 0.0, 0.0],
        [raw[3], d(raw[1]), 0.0],
        [raw[4], raw[5], d(raw[2])],
    ]
}

fn check_head(raw: &[f64], components: usize) -> Result<()> {
    if components == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    if raw.len() != components * HEAD_PER_COMPONENT {
        return Err(Error::Config(format!(
            "raw head for {components} components must hold {} values, got {}",
            components * HEAD_PER_COMPONENT,
            raw.len()
        )));
    }
    Ok(())
}

/// Builds mixture parameters from a raw head (layout in the module docs).
pub fn assemble_mixture(raw: &[f64], components: usize, jitter: f64) -> Result<MixtureParams3D> {
    check_head(raw, components)?;
    let n = components;
    let alphas = softmax(&raw[..n]);
    let means = (0..n)
        .map(|k| [raw[n + 3 * k], raw[n + 3 * k + 1], raw[n + 3 * k + 2]])
        .collect();
    let chol = (0..n)
        .map(|k| assemble_component_factor(&raw[4 * n + 6 * k..4 * n + 6 * k + 6]))
        .collect();
    MixtureParams3D::new(alphas, means, chol, jitter)
}

/// Mean negative log-likelihood over a batch.
pub fn nll_loss(batch: &[MixtureParams3D], targets: &[Position3D]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("nll_loss on an empty batch".into()));
    }
    if batch.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} mixtures vs {} targets",
            batch.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in batch.iter().zip(targets) {
        total -= p.log_density(t)?;
    }
    Ok(total / batch.len() as f64)
}

/// Negative log-likelihood of one target under a raw head, with the gradient
/// of that value with respect to every raw head entry.
pub fn head_nll(raw: &[f64], target: &Position3D, components: usize, jitter: f64) -> Result<(f64, Vec<f64>)> {
    let params = assemble_mixture(raw, components, jitter)?;
    let n = components;
    let comps = params.prepared()?;
    let x = target.0;

    let mut terms = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    for c in &comps {
        let (ld, s) = c.log_density_and_precision_residual(&x);
        terms.push(c.log_alpha + ld);
        residuals.push(s);
    }
    let lp = log_sum_exp(&terms);
    let mut grad = vec![0.0; raw.len()];

    for k in 0..n {
        let resp = (terms[k] - lp).exp();
        // d(-log p)/d logit_k = alpha_k - responsibility_k
        grad[k] = params.alphas[k] - resp;

        let s = residuals[k];
        for i in 0..3 {
            grad[n + 3 * k + i] = -resp * s[i];
        }

        // d log N / dΣ = ½(s·sᵀ − Σ⁻¹); d/dL = 2·G·L for symmetric G.
        let inv = spd_inverse(&comps[k].cov_chol);
        let mut g = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = 0.5 * (s[i] * s[j] - inv[i][j]);
            }
        }
        let l = &params.chol[k];
        let mut dl = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..=i {
                dl[i][j] = 2.0 * (0..3).map(|m| g[i][m] * l[m][j]).sum::<f64>();
            }
        }
        let base = 4 * n + 6 * k;
        let craw = &raw[base..base + 6];
        for d in 0..3 {
            let active = (-LOG_DIAG_CLAMP..=LOG_DIAG_CLAMP).contains(&craw[d]);
            grad[base + d] = if active { -resp * dl[d][d] * l[d][d] } else { 0.0 };
        }
        grad[base + 3] = -resp * dl[1][0];
        grad[base + 4] = -resp * dl[2][0];
        grad[base + 5] = -resp * dl[2][1];
    }
    Ok((-lp, grad))
}

/// Point forecast: the location of maximal mixture density.
///
/// A single component returns its mean. Otherwise gradient ascent on
/// `log p` is started from every component mean with step length
/// `0.1 · min σ`, halving the step whenever it fails to improve, until the
/// step drops below `1e-8` or 500 iterations elapse.
pub fn predict_mode(params: &MixtureParams3D) -> Result<Position3D> {
    if params.components() == 1 {
        return Ok(Position3D(params.means[0]));
    }
    let comps = params.prepared()?;
    let initial_step = 0.1 * params.min_scale();

    let mut best: Option<([f64; 3], f64)> = None;
    for start in &params.means {
        let (x, f) = ascend(&comps, *start, initial_step);
        if best.is_none_or(|(_, bf)| f > bf) {
            best = Some((x, f));
        }
    }
    Ok(Position3D(best.expect("at least one component").0))
}

fn ascend(comps: &[Component], start: [f64; 3], initial_step: f64) -> ([f64; 3], f64) {
    const MIN_STEP: f64 = 1e-8;
    const MAX_ITER: usize = 500;

    let mut x = start;
    let (mut f, mut g) = MixtureParams3D::log_density_and_gradient(comps, &x);
    let mut step = initial_step;
    for _ in 0..MAX_ITER {
        let gn = dot(&g, &g).sqrt();
        if gn == 0.0 || step < MIN_STEP {
            break;
        }
        let cand = [
            x[0] + step * g[0] / gn,
            x[1] + step * g[1] / gn,
            x[2] + step * g[2] / gn,
        ];
        let (fc, gc) = MixtureParams3D::log_density_and_gradient(comps, &cand);
        if fc > f {
            x = cand;
            f = fc;
            g = gc;
        } else {
            step *= 0.5;
        }
    }
    (x, f)
}

/// Draws one position: a component by weight, then `μ_k + C_k·z` where
/// `C_k` factors the full jittered covariance.
pub fn sample<R: Rng + ?Sized>(params: &MixtureParams3D, rng: &mut R) -> Result<Position3D> {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut k = params.components() - 1;
    for (i, a) in params.alphas.iter().enumerate() {
        acc += a;
        if u < acc {
            k = i;
            break;
        }
    }
    let c = cholesky3(&params.covariance(k))
        .ok_or_else(|| Error::Internal(format!("covariance of component {k} is not positive-definite")))?;
    let z: [f64; 3] = [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ];
    let mut x = params.means[k];
    for i in 0..3 {
        for j in 0..=i {
            x[i] += c[i][j] * z[j];
        }
    }
    Ok(Position3D(x))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

// 3x3 helpers

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `L·Lᵀ`.
pub fn mul_transpose(l: &Mat3) -> Mat3 {
    let mut s = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = (0..3).map(|m| l[i][m] * l[j][m]).sum();
        }
    }
    s
}

/// Cholesky factor of a symmetric positive-definite 3x3 matrix.
pub fn cholesky3(a: &Mat3) -> Option<Mat3> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[i][m] * l[j][m]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn solve_lower(l: &Mat3, b: &[f64; 3]) -> [f64; 3] {
    let z0 = b[0] / l[0][0];
    let z1 = (b[1] - l[1][0] * z0) / l[1][1];
    let z2 = (b[2] - l[2][0] * z0 - l[2][1] * z1) / l[2][2];
    [z0, z1, z2]
}

/// Solves `Lᵀ·x = z`.
fn solve_upper_transposed(l: &Mat3, z: &[f64; 3]) -> [f64; 3] {
    let x2 = z[2] / l[2][2];
    let x1 = (z[1] - l[2][1] * x2) / l[1][1];
    let x0 = (z[0] - l[1][0] * x1 - l[2][0] * x2) / l[0][0];
    [x0, x1, x2]
}

/// `(C·Cᵀ)⁻¹` from its Cholesky factor.
fn spd_inverse(c: &Mat3) -> Mat3 {
    let mut inv = [[0.0; 3]; 3];
    for col in 0..3 {
        let mut e = [0.0; 3];
        e[col] = 1.0;
        let x = solve_upper_transposed(c, &solve_lower(c, &e));
        for row in 0..3 {
            inv[row][col] = x[row];
        }
    }
    inv
}
