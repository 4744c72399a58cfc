use std::sync::Arc;

use rand::Rng;
use trajgmm::autodiff::{Graph, Var};
use trajgmm::explain::{aggregate_saliency, instance_saliency, raw_saliency, MeanOutput, OutputAttribute};
use trajgmm::mixture::Position3D;
use trajgmm::network::{Model, ModelConfig};
use trajgmm::preprocess::Prepared;
use trajgmm::{rng, Result, Tensor};

const H: usize = 6;
const W: usize = 5;
const NW: usize = 3 * H * W;

/// `μ = A·[flatten(weather); traffic] + b`, so every input gradient is a
/// column of `A`.
struct Linear {
    a: Tensor,
    b: Tensor,
}

impl Linear {
    fn random(seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        Self {
            a: Tensor::new(vec![3, NW + 6], (0..3 * (NW + 6)).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap(),
            b: Tensor::vector(vec![0.1, -0.2, 0.3]),
        }
    }

    fn coef(&self, row: usize, col: usize) -> f64 {
        self.a.data()[row * (NW + 6) + col]
    }
}

impl MeanOutput for Linear {
    fn mean_graph(&self, g: &mut Graph, weather: Var, traffic: Var) -> Result<Var> {
        let a = g.constant(self.a.clone())?;
        let b = g.constant(self.b.clone())?;
        let w = g.flatten(weather)?;
        let x = g.concat(w, traffic)?;
        g.linear(a, x, b)
    }
}

fn item(seed: u64) -> Prepared {
    let mut r = rng::seeded(seed);
    Prepared {
        weather: Arc::new(Tensor::new(vec![3, H, W], (0..NW).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()),
        traffic: Tensor::vector((0..6).map(|_| r.gen_range(-1.0..1.0)).collect()),
        target: Position3D::new(0.0, 0.0, 0.0),
    }
}

fn analytic(m: &Linear, attr: OutputAttribute) -> [f64; 9] {
    let row = attr.mean_index();
    let mut raw = [0.0; 9];
    for c in 0..3 {
        raw[c] = (0..H * W).map(|p| m.coef(row, c * H * W + p).abs()).sum();
    }
    for j in 0..6 {
        raw[3 + j] = m.coef(row, NW + j).abs();
    }
    raw
}

#[test]
fn linear_surrogate_matches_closed_form() {
    let m = Linear::random(1);
    for attr in OutputAttribute::ALL {
        for s in 0..5 {
            let want = analytic(&m, attr);
            let got = raw_saliency(&m, &item(s), attr).unwrap();
            for j in 0..9 {
                assert!((got[j] - want[j]).abs() < 1e-12 * want[j].max(1.0), "{attr:?} feature {j}");
            }
            let total: f64 = want.iter().sum();
            let map = instance_saliency(&m, &item(s), attr).unwrap();
            for j in 0..9 {
                assert!((map.weights[j] - want[j] / total).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn scaling_a_traffic_column_scales_its_raw_saliency() {
    let m = Linear::random(2);
    let base = raw_saliency(&m, &item(0), OutputAttribute::Altitude).unwrap();
    let mut scaled = Linear { a: m.a.clone(), b: m.b.clone() };
    for row in 0..3 {
        scaled.a.data_mut()[row * (NW + 6) + NW + 4] *= 2.5;
    }
    let s = raw_saliency(&scaled, &item(0), OutputAttribute::Altitude).unwrap();
    assert!((s[7] - 2.5 * base[7]).abs() < 1e-12);
    for j in (0..9).filter(|&j| j != 7) {
        assert_eq!(s[j], base[j]);
    }
}

#[test]
fn equal_gradients_give_the_one_ninth_benchmark() {
    let mut a = vec![0.0; 3 * (NW + 6)];
    for row in 0..3 {
        for p in 0..NW {
            a[row * (NW + 6) + p] = if p % 2 == 0 { 1.0 } else { -1.0 } / (H * W) as f64;
        }
        for j in 0..6 {
            a[row * (NW + 6) + NW + j] = if j % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    let m = Linear {
        a: Tensor::new(vec![3, NW + 6], a).unwrap(),
        b: Tensor::vector(vec![0.0; 3]),
    };
    let data: Vec<Prepared> = (0..4).map(item).collect();
    for attr in OutputAttribute::ALL {
        let agg = aggregate_saliency(&m, &data, attr).unwrap();
        for j in 0..9 {
            assert!((agg.mean[j] - 1.0 / 9.0).abs() < 1e-12);
            assert!(agg.sem[j] < 1e-12);
        }
    }
}

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        filters: 3,
        dense_width: 8,
        weather_shape: [3, H, W],
        ..ModelConfig::table2_30min()
    };
    Model::build(cfg, &mut rng::seeded(seed)).unwrap()
}

#[test]
fn zeroed_traffic_weights_silence_traffic_features() {
    let mut model = small_model(3);
    let i = model.parameter_index("traffic0.weight").unwrap();
    model.parameters_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
    for attr in OutputAttribute::ALL {
        let map = instance_saliency(&model, &item(4), attr).unwrap();
        assert!(map.weights[3..].iter().all(|&v| v == 0.0), "{:?}", map.weights);
        assert!((map.weights[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn every_map_is_a_distribution_and_aggregates_stay_in_the_hull() {
    let model = small_model(5);
    let data: Vec<Prepared> = (10..30).map(item).collect();
    for attr in OutputAttribute::ALL {
        let maps: Vec<[f64; 9]> = data.iter().map(|p| instance_saliency(&model, p, attr).unwrap().weights).collect();
        for w in &maps {
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let agg = aggregate_saliency(&model, &data, attr).unwrap();
        assert_eq!(agg.n_instances, data.len());
        assert!((agg.mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for j in 0..9 {
            let lo = maps.iter().map(|w| w[j]).fold(f64::INFINITY, f64::min);
            let hi = maps.iter().map(|w| w[j]).fold(f64::NEG_INFINITY, f64::max);
            assert!(agg.mean[j] >= lo - 1e-15 && agg.mean[j] <= hi + 1e-15);
        }
    }
}

#[test]
fn aggregation_edge_cases() {
    let model = small_model(6);
    let one = vec![item(7)];
    let map = instance_saliency(&model, &one[0], OutputAttribute::Latitude).unwrap();
    let agg = aggregate_saliency(&model, &one, OutputAttribute::Latitude).unwrap();
    assert_eq!(agg.mean, map.weights);
    assert_eq!(agg.sem, [0.0; 9]);

    let twins = vec![item(8), item(8)];
    let agg = aggregate_saliency(&model, &twins, OutputAttribute::Longitude).unwrap();
    assert_eq!(agg.sem, [0.0; 9]);

    assert_eq!(aggregate_saliency(&model, &[], OutputAttribute::Altitude).unwrap_err().category(), "usage");

    let cfg = ModelConfig { mixture_components: 2, ..model.config().clone() };
    let two = Model::build(cfg, &mut rng::seeded(9)).unwrap();
    assert_eq!(instance_saliency(&two, &one[0], OutputAttribute::Altitude).unwrap_err().category(), "unsupported");
}
