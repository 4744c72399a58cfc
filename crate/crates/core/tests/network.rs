use std::fs;

use trajgmm::network::{load_checkpoint, save_checkpoint, Activation, Checkpoint, Model, ModelConfig};
use trajgmm::preprocess::{Preprocessor, ENERGY_THRESHOLD};
use trajgmm::scenario::{build_instances, generate_scenario, ScenarioConfig};
use trajgmm::{rng, Tensor};

/// Independent count: conv kernels and biases, traffic and merge dense
/// layers, the three head blocks, plus 6 rational coefficients per activated
/// layer.
fn counted(c: &ModelConfig) -> usize {
    let rational = if c.activation == Activation::Rational { 6 } else { 0 };
    let mut n = 0;
    let mut ch = c.weather_shape[0];
    let (mut h, mut w) = (c.weather_shape[1], c.weather_shape[2]);
    for _ in 0..c.conv_layers {
        n += c.filters * ch * c.kernel * c.kernel + c.filters + rational;
        ch = c.filters;
        h = (h + 1) / 2;
        w = (w + 1) / 2;
    }
    let mut t = c.traffic_dim;
    for _ in 0..c.traffic_layers {
        n += c.dense_width * t + c.dense_width + rational;
        t = c.dense_width;
    }
    n += c.dense_width * (ch * h * w + t) + c.dense_width + rational;
    n + (1 + 3 + 6) * c.mixture_components * (c.dense_width + 1)
}

#[test]
fn parameter_count_of_the_thirty_minute_config() {
    let cfg = ModelConfig::table2_30min();
    assert_eq!(cfg.dense_width, 64);
    assert_eq!(cfg.weather_shape, [3, 32, 32]);
    let m = Model::build(cfg.clone(), &mut rng::seeded(0)).unwrap();
    assert_eq!(m.parameter_count(), counted(&cfg));
    assert_eq!(m.parameter_count(), 38_858);

    for cfg in [
        ModelConfig { mixture_components: 3, kernel: 5, conv_layers: 3, ..ModelConfig::table2_45min() },
        ModelConfig { activation: Activation::Tanh, traffic_layers: 2, weather_shape: [3, 15, 9], ..ModelConfig::table2_60min() },
    ] {
        let m = Model::build(cfg.clone(), &mut rng::seeded(1)).unwrap();
        assert_eq!(m.parameter_count(), counted(&cfg));
    }
}

#[test]
fn fresh_model_is_finite_and_deterministic() {
    let m = Model::build(ModelConfig { mixture_components: 3, ..ModelConfig::table2_30min() }, &mut rng::seeded(2)).unwrap();
    let (w, t) = (Tensor::zeros(&[3, 32, 32]), Tensor::zeros(&[6]));
    let mix = m.predict(&w, &t).unwrap();
    assert_eq!(mix.components(), 3);
    for k in 0..3 {
        assert!(mix.means[k].iter().all(|v| v.is_finite()));
        assert!(trajgmm::mixture::cholesky3(&mix.covariance(k)).is_some());
    }
    let a = m.head(&w, &t, false, &mut rng::seeded(3)).unwrap();
    let b = m.head(&w, &t, false, &mut rng::seeded(4)).unwrap();
    assert_eq!(a, b);
}

fn small_preprocessor() -> Preprocessor {
    let cfg = ScenarioConfig {
        n_flights: 3,
        grid: [32, 32],
        n_storm_cells: 2,
        ..ScenarioConfig::default()
    };
    let s = generate_scenario(6, &cfg).unwrap();
    let inst = build_instances(&s.tracks, &s.weather, 30).unwrap();
    Preprocessor::fit(&inst, ENERGY_THRESHOLD).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let pre = small_preprocessor();
    let mut r = rng::seeded(7);
    let w = Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect()).unwrap();
    let t = Tensor::vector(vec![0.3, -1.2, 0.5, 2.0, -0.1, 0.7]);
    for cfg in [ModelConfig::table2_30min(), ModelConfig::table2_60min()] {
        let ckpt = Checkpoint {
            model: Model::build(cfg.clone(), &mut r).unwrap(),
            preprocessor: pre.clone(),
            seed: 99,
        };
        let path = tmp.path().join(format!("m{}.ckpt", cfg.lead_time_minutes));
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.model.config().dropout, cfg.dropout);
        let a = ckpt.model.head(&w, &t, false, &mut rng::seeded(0)).unwrap();
        let b = back.model.head(&w, &t, false, &mut rng::seeded(0)).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    let back = load_checkpoint(&tmp.path().join("m60.ckpt")).unwrap();
    assert_eq!(back.model.config().dropout, 0.5);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint {
        model: Model::build(ModelConfig::table2_30min(), &mut rng::seeded(8)).unwrap(),
        preprocessor: small_preprocessor(),
        seed: 1,
    };
    let path = tmp.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let bytes = fs::read(&path).unwrap();

    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap_err().category(), "corrupt", "cut at {cut}");
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    fs::write(&path, &bad_magic).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().category(), "corrupt");

    let mut bad_version = bytes.clone();
    bad_version[8..12].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&path, &bad_version).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().category(), "version");

    let mut trailing = bytes.clone();
    trailing.push(0);
    fs::write(&path, &trailing).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().category(), "corrupt");

    assert_eq!(load_checkpoint(&tmp.path().join("missing.ckpt")).unwrap_err().category(), "io");
}
