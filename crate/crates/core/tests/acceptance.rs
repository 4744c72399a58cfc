//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any failed.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use trajgmm::autodiff::{Graph, Var};
use trajgmm::explain::{aggregate_saliency, instance_saliency, OutputAttribute};
use trajgmm::mixture::{assemble_mixture, cholesky3, head_nll, predict_mode, MixtureParams3D, Position3D};
use trajgmm::network::{Model, ModelConfig};
use trajgmm::preprocess::{
    haar_decompose, haar_reconstruct, max_levels, select_drop_levels, yeo_johnson_forward, yeo_johnson_inverse,
    Grid, PowerTransform, Prepared, Preprocessor, ENERGY_THRESHOLD,
};
use trajgmm::scenario::{build_instances, generate_scenario, Instance, ScenarioConfig};
use trajgmm::training::{
    batch_loss_and_grad, enumerate_space, evaluate_prepared, grid_search, kfold_split, mean_predictor, prepare_fold,
    run_fold, score_points, train, write_grid_csv, SearchSpace, TrainConfig,
};
use trajgmm::{rng, Result, Tensor};

const OP_TOL: f64 = 1e-6;
const E2E_TOL: f64 = 1e-4;
const GRAD_SUITE_LIMIT_S: f64 = 60.0;
const DENSITY_TOL: f64 = 1e-10;
const QUADRATURE_TOL: f64 = 1e-3;
const MODE_TOL: f64 = 1e-6;
const RECON_TOL: f64 = 1e-10;
const PARSEVAL_TOL: f64 = 1e-9;
const MIN_DROP: usize = 2;
const ROUND_TRIP_TOL: f64 = 1e-10;
const BASELINE_REDUCTION: f64 = 0.5;
const NORMALISATION_TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 8] = [
        ("gradient correctness", gradient_correctness),
        ("mixture math", mixture_math),
        ("mode prediction", mode_prediction),
        ("wavelet identities", wavelet_identities),
        ("power-transform contracts", power_transform_contracts),
        ("end-to-end learnability", end_to_end_learnability),
        ("weather sensitivity", weather_sensitivity),
        ("model-selection harness", model_selection_harness),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {} [{verdict}] {name}: {} ({:.1} s)",
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// finite differences

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random_tensor(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

type Scalar = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Worst relative error between reverse-mode and central-difference partials
/// of a scalar function over every input element.
fn fd_check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    const H: f64 = 1e-5;
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ts.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0_f64;
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let mut up = inputs.to_vec();
            up[ti].data_mut()[i] += H;
            let mut dn = inputs.to_vec();
            dn[ti].data_mut()[i] -= H;
            let fd = (eval(&up)? - eval(&dn)?) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
    }
    Ok(worst)
}

/// Fixed random weighting that reduces any tensor output to a scalar.
fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    let w = random_tensor(g.value(y).shape(), &mut rng::seeded(99));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Scalar)> {
    vec![
        ("matmul", vec![vec![4, 5], vec![5, 3]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y)
        }),
        ("linear", vec![vec![4, 6], vec![6], vec![4]], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            probe(g, y)
        }),
        ("add", vec![vec![7], vec![7]], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y)
        }),
        ("mul", vec![vec![7], vec![7]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y)
        }),
        ("scale", vec![vec![5]], |g, v| {
            let y = g.scale(v[0], -2.5)?;
            probe(g, y)
        }),
        ("sum", vec![vec![3, 4]], |g, v| {
            let y = g.sum(v[0])?;
            g.mul(y, y)
        }),
        ("conv2d_same", vec![vec![2, 5, 6], vec![3, 2, 3, 3], vec![3]], |g, v| {
            let y = g.conv2d_same(v[0], v[1], v[2])?;
            probe(g, y)
        }),
        ("conv2d_same k5", vec![vec![1, 7, 5], vec![2, 1, 5, 5], vec![2]], |g, v| {
            let y = g.conv2d_same(v[0], v[1], v[2])?;
            probe(g, y)
        }),
        ("maxpool2d", vec![vec![2, 5, 6]], |g, v| {
            let y = g.maxpool2d(v[0])?;
            probe(g, y)
        }),
        ("softmax", vec![vec![5]], |g, v| {
            let y = g.softmax(v[0])?;
            probe(g, y)
        }),
        ("rational", vec![vec![9], vec![4], vec![2]], |g, v| {
            let y = g.rational(v[0], v[1], v[2])?;
            probe(g, y)
        }),
        ("tanh", vec![vec![6]], |g, v| {
            let y = g.tanh(v[0])?;
            probe(g, y)
        }),
        ("sigmoid", vec![vec![6]], |g, v| {
            let y = g.sigmoid(v[0])?;
            probe(g, y)
        }),
        ("dropout", vec![vec![12]], |g, v| {
            let y = g.dropout(v[0], 0.4, true, &mut rng::seeded(5))?;
            probe(g, y)
        }),
        ("concat", vec![vec![3], vec![4]], |g, v| {
            let y = g.concat(v[0], v[1])?;
            probe(g, y)
        }),
        ("reshape+flatten", vec![vec![2, 6]], |g, v| {
            let y = g.reshape(v[0], vec![3, 4])?;
            let y = g.flatten(y)?;
            probe(g, y)
        }),
        ("slice", vec![vec![8]], |g, v| {
            let y = g.slice(v[0], 2, 4)?;
            probe(g, y)
        }),
        ("index", vec![vec![5]], |g, v| {
            let y = g.index(v[0], 3)?;
            g.mul(y, y)
        }),
        ("mixture_nll N=1", vec![vec![10]], |g, v| {
            g.mixture_nll(v[0], &Position3D::new(0.3, -0.2, 0.5), 1, 1e-6)
        }),
        ("mixture_nll N=3", vec![vec![30]], |g, v| {
            g.mixture_nll(v[0], &Position3D::new(-0.4, 0.1, 0.2), 3, 1e-6)
        }),
    ]
}

/// Worst relative error over a set of parameter coordinates of the mean NLL
/// of a batch, with the model in inference mode, and the number of
/// coordinates whose coarser difference straddled a kink (max-pool switch or
/// the rational activation's absolute value). Each coordinate is scored at
/// the step size that agrees best.
fn model_fd(model: &Model, batch: &[Prepared], coords: &[(usize, usize)]) -> Result<(f64, usize)> {
    const STEPS: [f64; 2] = [1e-5, 1e-6];
    let refs: Vec<&Prepared> = batch.iter().collect();
    let (_, grads) = batch_loss_and_grad(model, &refs, false, &mut rng::seeded(0))?;
    let n = model.config().mixture_components;
    let loss = |m: &Model| -> Result<f64> {
        let mut s = 0.0;
        for p in batch {
            let raw = m.head(&p.weather, &p.traffic, false, &mut rng::seeded(0))?;
            s += head_nll(&raw, &p.target, n, m.config().jitter)?.0;
        }
        Ok(s / batch.len() as f64)
    };
    let mut worst = 0.0_f64;
    let mut kinks = 0;
    for &(t, i) in coords {
        let mut errs = [0.0; 2];
        for (e, h) in errs.iter_mut().zip(STEPS) {
            let mut up = model.clone();
            up.parameters_mut()[t].data_mut()[i] += h;
            let mut dn = model.clone();
            dn.parameters_mut()[t].data_mut()[i] -= h;
            let fd = (loss(&up)? - loss(&dn)?) / (2.0 * h);
            *e = rel_err(grads[t].data()[i], fd);
        }
        kinks += usize::from(errs[0] > E2E_TOL && errs[1] <= E2E_TOL);
        worst = worst.max(errs[0].min(errs[1]));
    }
    Ok((worst, kinks))
}

fn synthetic_prepared(cfg: &ModelConfig, count: usize, r: &mut rng::Rng) -> Vec<Prepared> {
    let [c, h, w] = cfg.weather_shape;
    (0..count)
        .map(|_| Prepared {
            weather: std::sync::Arc::new(random_tensor(&[c, h, w], r)),
            traffic: random_tensor(&[cfg.traffic_dim], r),
            target: Position3D::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)),
        })
        .collect()
}

fn gradient_correctness() -> Result<Outcome> {
    let start = Instant::now();
    let mut r = rng::seeded(2024);
    let mut worst_op = (0.0_f64, "");
    for (name, shapes, f) in op_cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
        let e = fd_check(&inputs, &f)?;
        if e > worst_op.0 {
            worst_op = (e, name);
        }
    }

    // Every parameter of a small two-component network.
    let small = ModelConfig {
        filters: 3,
        dense_width: 6,
        mixture_components: 2,
        weather_shape: [3, 8, 8],
        ..ModelConfig::table2_30min()
    };
    let model = Model::build(small.clone(), &mut rng::seeded(11))?;
    let batch = synthetic_prepared(&small, 3, &mut r);
    let all: Vec<(usize, usize)> = model
        .parameters()
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    let (e_small, k_small) = model_fd(&model, &batch, &all)?;

    // A random slice of the full-size 30-minute configuration.
    let big_cfg = ModelConfig::table2_30min();
    let big = Model::build(big_cfg.clone(), &mut rng::seeded(12))?;
    let batch = synthetic_prepared(&big_cfg, 2, &mut r);
    let coords: Vec<(usize, usize)> = (0..big.parameters().len())
        .flat_map(|t| {
            let len = big.parameters()[t].len();
            let mut pr = rng::derived(13, &[t as u64]);
            (0..len.min(40)).map(move |_| (t, pr.gen_range(0..len))).collect::<Vec<_>>()
        })
        .collect();
    let (e_big, k_big) = model_fd(&big, &batch, &coords)?;

    let elapsed = start.elapsed().as_secs_f64();
    let e2e = e_small.max(e_big);
    Ok(outcome(
        worst_op.0 <= OP_TOL && e2e <= E2E_TOL && elapsed < GRAD_SUITE_LIMIT_S,
        format!(
            "worst per-op rel err {:.2e} ({}) tol {OP_TOL:.0e}; end-to-end {:.2e} over {} + {} params tol {E2E_TOL:.0e} \
             ({} kink crossings at the coarse step); {elapsed:.1} s limit {GRAD_SUITE_LIMIT_S} s",
            worst_op.0,
            worst_op.1,
            e2e,
            all.len(),
            coords.len(),
            k_small + k_big
        ),
    ))
}

// ---------------------------------------------------------------------------
// mixture

fn random_head(n: usize, scale: f64, r: &mut rng::Rng) -> Vec<f64> {
    (0..10 * n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

fn det3(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Adjugate-over-determinant inverse.
fn inv3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let d = det3(a);
    let c = |i: usize, j: usize| {
        let r: Vec<usize> = (0..3).filter(|&k| k != i).collect();
        let s: Vec<usize> = (0..3).filter(|&k| k != j).collect();
        let m = a[r[0]][s[0]] * a[r[1]][s[1]] - a[r[0]][s[1]] * a[r[1]][s[0]];
        if (i + j) % 2 == 0 {
            m
        } else {
            -m
        }
    };
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = c(j, i) / d;
        }
    }
    out
}

/// Density by direct summation of the Gaussian formula.
fn direct_density(m: &MixtureParams3D, x: &[f64; 3]) -> f64 {
    (0..m.components())
        .map(|k| {
            let s = m.covariance(k);
            let si = inv3(&s);
            let d: Vec<f64> = (0..3).map(|i| x[i] - m.means[k][i]).collect();
            let q: f64 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| d[i] * si[i][j] * d[j]).sum();
            m.alphas[k] * (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(1.5) * det3(&s).sqrt())
        })
        .sum()
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

fn mixture_math() -> Result<Outcome> {
    let mut r = rng::seeded(7);

    let mut worst_log = 0.0_f64;
    for n in 1..=4 {
        for _ in 0..50 {
            let m = assemble_mixture(&random_head(n, 1.0, &mut r), n, 1e-6)?;
            let k = r.gen_range(0..n);
            // A draw from component k keeps the linear-domain sum representable.
            let c = cholesky3(&m.covariance(k)).expect("positive-definite");
            let z: [f64; 3] = std::array::from_fn(|_| r.sample::<f64, _>(StandardNormal));
            let x: [f64; 3] = std::array::from_fn(|i| m.means[k][i] + (0..=i).map(|j| c[i][j] * z[j]).sum::<f64>());
            let ours = m.log_density(&Position3D(x))?;
            let oracle = direct_density(&m, &x).ln();
            worst_log = worst_log.max((ours - oracle).abs());
        }
    }

    let m = assemble_mixture(&[0.0, 0.4, -0.3, 0.8, -0.3, 0.2, 0.5, 0.4, -0.6, 0.3], 1, 1e-6)?;
    let s = m.covariance(0);
    let sd: [f64; 3] = std::array::from_fn(|i| s[i][i].sqrt());
    let nodes = gauss_legendre(64);
    let mut mass = 0.0;
    for &(a, wa) in &nodes {
        for &(b, wb) in &nodes {
            for &(c, wc) in &nodes {
                let u = [a, b, c];
                let x: [f64; 3] = std::array::from_fn(|i| m.means[0][i] + 6.0 * sd[i] * u[i]);
                mass += wa * wb * wc * m.log_density(&Position3D(x))?.exp();
            }
        }
    }
    mass *= 6.0f64.powi(3) * sd.iter().product::<f64>();

    let mut invariant_failures = 0;
    for i in 0..1000 {
        let n = 1 + i % 5;
        let m = assemble_mixture(&random_head(n, 1.5, &mut r), n, 1e-6)?;
        let sum: f64 = m.alphas.iter().sum();
        let simplex = (sum - 1.0).abs() < 1e-12 && m.alphas.iter().all(|&a| a > 0.0);
        let pd = (0..n).all(|k| {
            let s = m.covariance(k);
            let sym = (0..3).all(|i| (0..3).all(|j| s[i][j] == s[j][i]));
            sym && cholesky3(&s).is_some() && det3(&s) > 0.0
        });
        invariant_failures += usize::from(!(simplex && pd));
    }

    Ok(outcome(
        worst_log <= DENSITY_TOL && (mass - 1.0).abs() <= QUADRATURE_TOL && invariant_failures == 0,
        format!(
            "log-density vs direct summation {worst_log:.2e} tol {DENSITY_TOL:.0e}; ±6σ quadrature mass {mass:.6} \
             tol {QUADRATURE_TOL:.0e}; invariant violations {invariant_failures}/1000"
        ),
    ))
}

fn mode_prediction() -> Result<Outcome> {
    let mut r = rng::seeded(8);
    let mut n1_exact = true;
    for _ in 0..100 {
        let m = assemble_mixture(&random_head(1, 1.5, &mut r), 1, 1e-6)?;
        n1_exact &= predict_mode(&m)?.0 == m.means[0];
    }

    let chol = [[1.0, 0.0, 0.0], [0.2, 1.0, 0.0], [-0.1, 0.3, 1.0]];
    let mu1 = [0.5, -1.0, 2.0];
    let m = MixtureParams3D::new(vec![0.9, 0.1], vec![mu1, [30.0, 25.0, -20.0]], vec![chol; 2], 1e-6)?;
    let mode = predict_mode(&m)?;
    let s = m.covariance(0);
    let sd: [f64; 3] = std::array::from_fn(|i| s[i][i].sqrt());
    let mut best = (f64::NEG_INFINITY, [0.0; 3]);
    for i in 0..61 {
        for j in 0..61 {
            for k in 0..61 {
                let step = |n: usize, c: usize| mu1[c] + sd[c] * (-4.0 + 8.0 * n as f64 / 60.0);
                let x = [step(i, 0), step(j, 1), step(k, 2)];
                let ld = m.log_density(&Position3D(x))?;
                if ld > best.0 {
                    best = (ld, x);
                }
            }
        }
    }
    let to_grid = (0..3).map(|c| (mode.0[c] - best.1[c]).abs()).fold(0.0, f64::max);
    let to_mu1 = (0..3).map(|c| (mode.0[c] - mu1[c]).abs()).fold(0.0, f64::max);
    let dominates = m.log_density(&mode)? >= best.0;
    Ok(outcome(
        n1_exact && to_grid <= MODE_TOL && to_mu1 <= MODE_TOL && dominates,
        format!(
            "N=1 mode == mean on 100 heads: {n1_exact}; N=2 mode vs 61³ grid argmax {to_grid:.2e}, vs μ₁ {to_mu1:.2e} \
             tol {MODE_TOL:.0e}; mode density ≥ grid max: {dominates}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// preprocessing

fn wavelet_identities() -> Result<Outcome> {
    let mut r = rng::seeded(9);
    let (mut worst_recon, mut worst_parseval) = (0.0_f64, 0.0_f64);
    for i in 0..100 {
        let (h, w) = [(32, 32), (16, 48), (64, 8), (24, 40)][i % 4];
        let grid = Grid::new(h, w, (0..h * w).map(|_| r.gen_range(-5.0..5.0)).collect())?;
        let q = r.gen_range(1..=max_levels(h, w).min(3));
        let pyr = haar_decompose(&grid, q)?;
        let back = haar_reconstruct(&pyr, 0)?;
        let err = grid.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_recon = worst_recon.max(err);
        worst_parseval = worst_parseval.max((pyr.energy() - grid.energy()).abs() / grid.energy());
    }

    let scenario = generate_scenario(1, &ScenarioConfig::default())?;
    let wx = &scenario.weather;
    let mut min_drop = usize::MAX;
    let mut fields = 0;
    for series in [&wx.convective, &wx.u_wind, &wx.v_wind] {
        for frame in series {
            let grid = Grid::new(wx.height, wx.width, frame.data.iter().map(|&v| v as f64).collect())?;
            if grid.energy() == 0.0 {
                continue;
            }
            let pyr = haar_decompose(&grid, max_levels(wx.height, wx.width))?;
            min_drop = min_drop.min(select_drop_levels(&pyr, ENERGY_THRESHOLD));
            fields += 1;
        }
    }
    Ok(outcome(
        worst_recon <= RECON_TOL && worst_parseval <= PARSEVAL_TOL && fields > 0 && min_drop >= MIN_DROP,
        format!(
            "reconstruction {worst_recon:.2e} tol {RECON_TOL:.0e}; Parseval rel err {worst_parseval:.2e} tol \
             {PARSEVAL_TOL:.0e}; min levels dropped at {ENERGY_THRESHOLD} over {fields} generator fields = {min_drop} \
             (need ≥ {MIN_DROP})"
        ),
    ))
}

fn power_transform_contracts() -> Result<Outcome> {
    let mut r = rng::seeded(10);
    let mut worst_rt = 0.0_f64;
    for _ in 0..1000 {
        let x: f64 = r.gen_range(-50.0..50.0);
        let l: f64 = r.gen_range(-3.0..3.0);
        let back = yeo_johnson_inverse(yeo_johnson_forward(x, l), l)?;
        worst_rt = worst_rt.max((back - x).abs() / x.abs().max(1.0));
    }
    let xs: Vec<f64> = (0..200).map(|_| r.gen_range(-100.0..100.0)).collect();
    let identity = xs.iter().all(|&x| yeo_johnson_forward(x, 1.0) == x);
    let log_case = xs
        .iter()
        .filter(|&&x| x >= 0.0)
        .map(|&x| (yeo_johnson_forward(x, 0.0) - (x + 1.0).ln()).abs())
        .fold(0.0, f64::max);

    // Evaluation report with every target coordinate on a λ=1 transform.
    let cfg = ScenarioConfig {
        n_flights: 30,
        ..ScenarioConfig::default()
    };
    let scenario = generate_scenario(3, &cfg)?;
    let instances: Vec<Instance> =
        build_instances(&scenario.tracks, &scenario.weather, 10)?.into_iter().filter(|i| i.t % 3 == 0).collect();
    let mut pre = Preprocessor::fit(&instances, ENERGY_THRESHOLD)?;
    for c in 0..3 {
        let col: Vec<f64> = instances.iter().map(|i| i.target.0[c]).collect();
        pre.target[c] = PowerTransform::with_lambda(&col, 1.0)?;
    }
    let data = pre.prepare_all(&instances)?;
    let model = Model::build(ModelConfig::table2_30min(), &mut rng::seeded(4))?;
    let mut trained = model.clone();
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for (i, p) in data.into_iter().enumerate() {
        if i % 5 == 0 {
            val.push(p);
        } else {
            fit.push(p);
        }
    }
    train(
        &mut trained,
        &fit,
        &val,
        &TrainConfig {
            epochs: 3,
            seed: 4,
            ..TrainConfig::default()
        },
    )?;
    let mut consistent = true;
    let mut shown = Vec::new();
    for m in [&model, &trained] {
        let report = evaluate_prepared(m, &pre, &val)?.metrics;
        let t = report.mape_transformed_by_coordinate.as_array();
        let o = report.mape_original.as_array();
        for c in 0..3 {
            consistent &= o[c] <= t[c] * (1.0 + 1e-12);
        }
        shown.push(format!("orig {:.4?} vs transformed {:.4?}", o, t));
    }
    let min_value = instances.iter().flat_map(|i| i.target.0).fold(f64::INFINITY, f64::min);

    Ok(outcome(
        worst_rt <= ROUND_TRIP_TOL && identity && log_case <= 1e-15 && consistent,
        format!(
            "round trip {worst_rt:.2e} tol {ROUND_TRIP_TOL:.0e}; λ=1 identity: {identity}; λ=0 vs ln(x+1) \
             {log_case:.1e}; λ=1 coordinates (min value {min_value:.1}) untrained {}, trained {}",
            shown[0], shown[1]
        ),
    ))
}

// ---------------------------------------------------------------------------
// end to end

/// Holds out every fifth flight; keeps every `stride`-th observation time.
fn flight_split(instances: &[Instance], stride: u32) -> (Vec<usize>, Vec<usize>) {
    let mut tr = Vec::new();
    let mut te = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        if inst.t % stride != 0 {
            continue;
        }
        if inst.flight_id % 5 == 4 {
            te.push(i);
        } else {
            tr.push(i);
        }
    }
    (tr, te)
}

fn end_to_end_learnability() -> Result<Outcome> {
    let cfg = ScenarioConfig::default();
    assert_eq!((cfg.n_flights, cfg.grid), (200, [32, 32]));
    let start = Instant::now();
    let scenario = generate_scenario(2025, &cfg)?;
    let instances = build_instances(&scenario.tracks, &scenario.weather, 30)?;
    let (tr, te) = flight_split(&instances, 5);
    let fold = prepare_fold(&instances, &tr, &te, 1)?;

    let model_cfg = ModelConfig::table2_30min();
    let untrained = Model::build(model_cfg, &mut rng::seeded(21))?;
    let before = evaluate_prepared(&untrained, &fold.preprocessor, &fold.val)?;
    let baseline_pred = vec![mean_predictor(&fold.train); fold.val.len()];
    let truths: Vec<Position3D> = fold.val.iter().map(|p| p.target).collect();
    let baseline = score_points(&baseline_pred, &truths, &fold.preprocessor)?;

    let mut model = untrained.clone();
    let history = train(
        &mut model,
        &fold.train,
        &fold.holdout,
        &TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
            patience: 10,
            seed: 22,
        },
    )?;
    let after = evaluate_prepared(&model, &fold.preprocessor, &fold.val)?;
    let elapsed = start.elapsed().as_secs_f64();

    let target = baseline.mape_transformed * (1.0 - BASELINE_REDUCTION);
    Ok(outcome(
        after.metrics.mape_transformed <= target && after.nll < before.nll && elapsed <= 1800.0,
        format!(
            "{} train / {} test instances; MAPE {:.4} vs mean-predictor {:.4} (need ≤ {target:.4}); NLL {:.4} vs \
             untrained {:.4}; R² {:.4}; best epoch {} of {}; {elapsed:.1} s (limit 1800 s)",
            fold.train.len() + fold.holdout.len(),
            fold.val.len(),
            after.metrics.mape_transformed,
            baseline.mape_transformed,
            after.nll,
            before.nll,
            after.metrics.r2_transformed,
            history.best_epoch,
            history.records.len()
        ),
    ))
}

fn convective_saliency(n_storm_cells: usize) -> Result<([f64; 3], usize, bool)> {
    let cfg = ScenarioConfig {
        n_flights: 60,
        n_storm_cells,
        ..ScenarioConfig::default()
    };
    let scenario = generate_scenario(31, &cfg)?;
    let instances = build_instances(&scenario.tracks, &scenario.weather, 10)?;
    let (tr, te) = flight_split(&instances, 4);
    let fold = prepare_fold(&instances, &tr, &te, 2)?;
    let mut model = Model::build(ModelConfig::table2_30min(), &mut rng::seeded(32))?;
    train(
        &mut model,
        &fold.train,
        &fold.holdout,
        &TrainConfig {
            epochs: 8,
            seed: 33,
            ..TrainConfig::default()
        },
    )?;
    let mut normalised = true;
    for p in &fold.val {
        for a in OutputAttribute::ALL {
            let s: f64 = instance_saliency(&model, p, a)?.weights.iter().sum();
            normalised &= (s - 1.0).abs() <= NORMALISATION_TOL;
        }
    }
    let mut conv = [0.0; 3];
    for (slot, a) in conv.iter_mut().zip(OutputAttribute::ALL) {
        *slot = aggregate_saliency(&model, &fold.val, a)?.mean[0];
    }
    Ok((conv, fold.val.len(), normalised))
}

fn weather_sensitivity() -> Result<Outcome> {
    let (storm, n_storm, norm_storm) = convective_saliency(16)?;
    let (calm, n_calm, norm_calm) = convective_saliency(0)?;
    let mean = |v: &[f64; 3]| v.iter().sum::<f64>() / 3.0;
    let higher = mean(&storm) > mean(&calm);
    Ok(outcome(
        higher && norm_storm && norm_calm,
        format!(
            "convective saliency (lat, lon, alt) storm-heavy {storm:.4?} over {n_storm} vs zero-storm {calm:.4?} over \
             {n_calm}; mean {:.4} vs {:.4}; per-instance sums within {NORMALISATION_TOL:.0e} of 1: {}",
            mean(&storm),
            mean(&calm),
            norm_storm && norm_calm
        ),
    ))
}

// ---------------------------------------------------------------------------
// model selection

fn model_selection_harness() -> Result<Outcome> {
    let mut partitions = true;
    for (n, k, seed) in [(10, 5, 0), (11, 5, 1), (97, 5, 2), (1000, 5, 3), (7, 7, 4)] {
        let folds = kfold_split(n, k, seed)?;
        let mut seen = vec![0usize; n];
        for (f, (train_idx, val_idx)) in folds.iter().enumerate() {
            for &i in val_idx {
                seen[i] += 1;
            }
            let mut union: Vec<usize> = train_idx.iter().chain(val_idx).copied().collect();
            union.sort_unstable();
            partitions &= union == (0..n).collect::<Vec<_>>();
            partitions &= val_idx.len() == n / k + usize::from(f < n % k);
        }
        partitions &= seen.iter().all(|&c| c == 1);
    }

    let cfg = ScenarioConfig {
        n_flights: 40,
        grid: [16, 16],
        n_storm_cells: 0,
        ..ScenarioConfig::default()
    };
    let scenario = generate_scenario(41, &cfg)?;
    let instances: Vec<Instance> =
        build_instances(&scenario.tracks, &scenario.weather, 5)?.into_iter().filter(|i| i.t % 6 == 0).collect();
    let base_model = ModelConfig {
        weather_shape: [3, 16, 16],
        ..ModelConfig::table2_30min()
    };
    let base_train = TrainConfig {
        batch_size: 32,
        epochs: 6,
        patience: 6,
        seed: 42,
        ..TrainConfig::default()
    };
    // A near-zero learning rate cannot move the network and a one-unit merge
    // layer cannot carry three coordinates, so (3e-3, 16) is the planted best.
    let space: SearchSpace = serde_json::from_str(r#"{"learning_rate": [1e-7, 3e-3], "dense_width": [1, 16]}"#)?;
    let result = grid_search(&space, &base_model, &base_train, &instances, 5, 43, 1)?;
    let again = grid_search(&space, &base_model, &base_train, &instances, 5, 43, 2)?;

    let dir = tempfile::tempdir().map_err(|e| trajgmm::Error::io("tempdir", e))?;
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_grid_csv(&result, &a)?;
    write_grid_csv(&again, &b)?;
    let bytes_equal = std::fs::read(&a).map_err(|e| trajgmm::Error::io(&a, e))?
        == std::fs::read(&b).map_err(|e| trajgmm::Error::io(&b, e))?;

    let label = |i: usize| {
        let p = &result.rows[i].point;
        (p.train.learning_rate, p.model.dense_width)
    };
    let order: Vec<(f64, usize)> = result.ranking.iter().map(|&i| label(i)).collect();
    let planted = order[0] == (3e-3, 16) && order[1] == (3e-3, 1) && order[2..].iter().all(|o| o.0 == 1e-7);

    // Independent retraining of the best row's first fold.
    let points = enumerate_space(&space, &base_model, &base_train)?;
    let splits = kfold_split(instances.len(), 5, 43)?;
    let fold0 = prepare_fold(&instances, &splits[0].0, &splits[0].1, rng::derive_seed(43, &[0]))?;
    let best = result.best();
    let redo = run_fold(&points[best.point.index], &fold0, 0)?;
    let cross_checked = redo.mape == best.folds[0].mape && redo.nll == best.folds[0].nll;

    let means: Vec<String> = result.ranking.iter().map(|&i| format!("{:?}={:.4}", label(i), result.rows[i].mean_mape)).collect();
    Ok(outcome(
        partitions && planted && bytes_equal && cross_checked,
        format!(
            "5-fold partitions exact: {partitions}; ranking by mean MAPE [{}] matches planted order: {planted}; \
             table bytes equal across 1 and 2 jobs: {bytes_equal}; best row fold 0 reproduced by retraining: \
             {cross_checked}",
            means.join(", ")
        ),
    ))
}
