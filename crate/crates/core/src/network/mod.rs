//! The two-branch weather/traffic model.
//!
//! Weather branch: `conv_layers × [conv(same) → activation → maxpool 2×2]`
//! then flatten. Traffic branch: `traffic_layers × [dense → activation]`.
//! The two are concatenated, passed through one dense layer with activation
//! and dropout, and fed to three independent dense heads producing mixture
//! logits, means and Cholesky raws.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::rational_fit::leaky_relu_fit;
use crate::autodiff::{Graph, Var};
use crate::mixture::{assemble_mixture, MixtureParams3D, DEFAULT_JITTER, HEAD_PER_COMPONENT};
use crate::{Error, Result, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const WEATHER_CHANNELS: usize = 3;
pub const TRAFFIC_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Rational,
    Tanh,
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rational" => Ok(Self::Rational),
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rational => "rational",
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub traffic_layers: usize,
    pub dense_width: usize,
    pub dropout: f64,
    pub mixture_components: usize,
    pub activation: Activation,
    /// (channels, height, width)
    pub weather_shape: [usize; 3],
    pub traffic_dim: usize,
    pub lead_time_minutes: u32,
    pub jitter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::table2_30min()
    }
}

impl ModelConfig {
    fn table2(lead: u32, dropout: f64, filters: usize) -> Self {
        Self {
            conv_layers: 2,
            filters,
            kernel: 3,
            traffic_layers: 1,
            dense_width: 64,
            dropout,
            mixture_components: 1,
            activation: Activation::Rational,
            weather_shape: [WEATHER_CHANNELS, 32, 32],
            traffic_dim: TRAFFIC_DIM,
            lead_time_minutes: lead,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn table2_30min() -> Self {
        Self::table2(30, 0.25, 8)
    }

    pub fn table2_45min() -> Self {
        Self::table2(45, 0.25, 16)
    }

    pub fn table2_60min() -> Self {
        Self::table2(60, 0.5, 8)
    }

    pub fn head_width(&self) -> usize {
        self.mixture_components * HEAD_PER_COMPONENT
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_layers == 0 {
            return bad("conv_layers must be at least 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.filters == 0 || self.dense_width == 0 {
            return bad("filters and dense_width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.mixture_components == 0 {
            return bad("mixture_components must be at least 1".into());
        }
        let [c, h, w] = self.weather_shape;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("weather_shape {:?} has an empty axis", self.weather_shape));
        }
        if self.traffic_dim == 0 {
            return bad("traffic_dim must be positive".into());
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter must be positive, got {}", self.jitter));
        }
        Ok(())
    }

    /// Flattened length of the weather branch output.
    pub fn flat_len(&self) -> usize {
        let (mut h, mut w) = (self.weather_shape[1], self.weather_shape[2]);
        for _ in 0..self.conv_layers {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        self.filters * h * w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zero,
    RationalP,
    RationalQ,
}

/// Shapes and initialisers of every parameter, in declaration order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let act = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
        if cfg.activation == Activation::Rational {
            out.push((format!("{name}.p"), vec![4], Init::RationalP));
            out.push((format!("{name}.q"), vec![2], Init::RationalQ));
        }
    };
    let dense = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, m: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![m, k], Init::Glorot { fan_in: k, fan_out: m }));
        out.push((format!("{name}.bias"), vec![m], Init::Zero));
    };
    let k = cfg.kernel;
    let mut c_in = cfg.weather_shape[0];
    for l in 0..cfg.conv_layers {
        let name = format!("conv{l}");
        out.push((
            format!("{name}.kernel"),
            vec![cfg.filters, c_in, k, k],
            Init::Glorot {
                fan_in: c_in * k * k,
                fan_out: cfg.filters * k * k,
            },
        ));
        out.push((format!("{name}.bias"), vec![cfg.filters], Init::Zero));
        act(&mut out, &name);
        c_in = cfg.filters;
    }
    let mut t_in = cfg.traffic_dim;
    for l in 0..cfg.traffic_layers {
        let name = format!("traffic{l}");
        dense(&mut out, &name, cfg.dense_width, t_in);
        act(&mut out, &name);
        t_in = cfg.dense_width;
    }
    dense(&mut out, "merge", cfg.dense_width, cfg.flat_len() + t_in);
    act(&mut out, "merge");
    let n = cfg.mixture_components;
    dense(&mut out, "head.logits", n, cfg.dense_width);
    dense(&mut out, "head.means", 3 * n, cfg.dense_width);
    dense(&mut out, "head.chol", 6 * n, cfg.dense_width);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Fresh model: Glorot-uniform weights, zero biases, rational activations
    /// initialised at the leaky-ReLU fit.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let fit = leaky_relu_fit();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Glorot { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..=a)).collect()
                }
                Init::Zero => vec![0.0; n],
                Init::RationalP => fit.p.to_vec(),
                Init::RationalQ => fit.q.to_vec(),
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Self { config, names, params })
    }

    /// Rebuilds a model from stored parameters, checking them against the
    /// layout implied by `config`.
    pub fn from_parameters(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let lay = layout(&config);
        if lay.len() != params.len() {
            return Err(Error::Config(format!(
                "config implies {} parameter tensors, got {}",
                lay.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in lay.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names: lay.into_iter().map(|(n, _, _)| n).collect(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn parameter_shapes(&self) -> Vec<&[usize]> {
        self.params.iter().map(Tensor::shape).collect()
    }

    pub fn parameter_norm(&self) -> f64 {
        self.params.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    /// Adds every parameter to `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| if trainable { g.param(i, p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    fn check_inputs(&self, weather: &[usize], traffic: &[usize]) -> Result<()> {
        if weather != self.config.weather_shape {
            return Err(Error::Dimension(format!(
                "weather input {weather:?}, model expects {:?}",
                self.config.weather_shape
            )));
        }
        if traffic != [self.config.traffic_dim] {
            return Err(Error::Dimension(format!(
                "traffic input {traffic:?}, model expects [{}]",
                self.config.traffic_dim
            )));
        }
        Ok(())
    }

    /// Records the forward pass in `g` and returns the raw head node.
    pub fn head_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[Var],
        weather: Var,
        traffic: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_inputs(g.value(weather).shape(), g.value(traffic).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::Usage("parameter binding does not match the model".into()));
        }
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("layout and binding agree");
        let act = self.config.activation;
        let activate = |g: &mut Graph, x: Var, take: &mut dyn FnMut() -> Var| -> Result<Var> {
            match act {
                Activation::Rational => {
                    let p = take();
                    let q = take();
                    g.rational(x, p, q)
                }
                Activation::Tanh => g.tanh(x),
                Activation::Sigmoid => g.sigmoid(x),
            }
        };

        let mut w = weather;
        for _ in 0..self.config.conv_layers {
            let k = take();
            let b = take();
            w = g.conv2d_same(w, k, b)?;
            w = activate(g, w, &mut take)?;
            w = g.maxpool2d(w)?;
        }
        let w = g.flatten(w)?;

        let mut t = traffic;
        for _ in 0..self.config.traffic_layers {
            let wt = take();
            let b = take();
            t = g.linear(wt, t, b)?;
            t = activate(g, t, &mut take)?;
        }

        let merged = g.concat(w, t)?;
        let wm = take();
        let bm = take();
        let mut h = g.linear(wm, merged, bm)?;
        h = activate(g, h, &mut take)?;
        h = g.dropout(h, self.config.dropout, training, rng)?;

        let mut heads = Vec::with_capacity(3);
        for _ in 0..3 {
            let wh = take();
            let bh = take();
            heads.push(g.linear(wh, h, bh)?);
        }
        let lm = g.concat(heads[0], heads[1])?;
        g.concat(lm, heads[2])
    }

    /// Raw head for one input pair, evaluated without gradient tracking.
    pub fn head<R: Rng + ?Sized>(&self, weather: &Tensor, traffic: &Tensor, training: bool, rng: &mut R) -> Result<Vec<f64>> {
        self.check_inputs(weather.shape(), traffic.shape())?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false)?;
        let w = g.constant(weather.clone())?;
        let t = g.constant(traffic.clone())?;
        let h = self.head_graph(&mut g, &params, w, t, training, rng)?;
        Ok(g.value(h).data().to_vec())
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        weather: &Tensor,
        traffic: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<MixtureParams3D> {
        let raw = self.head(weather, traffic, training, rng)?;
        assemble_mixture(&raw, self.config.mixture_components, self.config.jitter)
    }

    /// Inference-mode mixture; dropout is inactive so no RNG is consumed.
    pub fn predict(&self, weather: &Tensor, traffic: &Tensor) -> Result<MixtureParams3D> {
        self.forward(weather, traffic, false, &mut crate::rng::seeded(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small() -> ModelConfig {
        ModelConfig {
            weather_shape: [3, 8, 8],
            dense_width: 6,
            filters: 2,
            ..ModelConfig::table2_30min()
        }
    }

    #[test]
    fn table_two_columns() {
        let c = ModelConfig::table2_30min();
        assert_eq!((c.conv_layers, c.traffic_layers, c.filters, c.kernel), (2, 1, 8, 3));
        assert_eq!(c.dropout, 0.25);
        assert_eq!(c.activation, Activation::Rational);
        let c = ModelConfig::table2_45min();
        assert_eq!((c.filters, c.dropout), (16, 0.25));
        let c = ModelConfig::table2_60min();
        assert_eq!((c.filters, c.dropout), (8, 0.5));
    }

    #[test]
    fn invalid_configs() {
        for c in [
            ModelConfig { kernel: 4, ..small() },
            ModelConfig { conv_layers: 0, ..small() },
            ModelConfig { dropout: 1.0, ..small() },
            ModelConfig { mixture_components: 0, ..small() },
        ] {
            assert!(matches!(Model::build(c, &mut rng::seeded(0)), Err(Error::Config(_))));
        }
    }

    #[test]
    fn head_length_and_finiteness() {
        let m = Model::build(ModelConfig::table2_30min(), &mut rng::seeded(1)).unwrap();
        let w = Tensor::zeros(&[3, 32, 32]);
        let t = Tensor::zeros(&[6]);
        let raw = m.head(&w, &t, false, &mut rng::seeded(2)).unwrap();
        assert_eq!(raw.len(), 10);
        let mix = m.predict(&w, &t).unwrap();
        assert!(mix.means[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let m = Model::build(small(), &mut rng::seeded(3)).unwrap();
        let r = m.predict(&Tensor::zeros(&[3, 8, 9]), &Tensor::zeros(&[6]));
        assert!(matches!(r, Err(Error::Dimension(_))));
        let r = m.predict(&Tensor::zeros(&[3, 8, 8]), &Tensor::zeros(&[5]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn from_parameters_checks_layout() {
        let m = Model::build(small(), &mut rng::seeded(4)).unwrap();
        let mut p = m.parameters().to_vec();
        assert!(Model::from_parameters(small(), p.clone()).is_ok());
        p.pop();
        assert!(Model::from_parameters(small(), p).is_err());
    }
}
