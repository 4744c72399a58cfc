use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::power::{fit_yeo_johnson, PowerTransform};
use super::wavelet::{haar_decompose, max_levels, select_drop_levels_mean, Grid, WaveletCompressor, WaveletPyramid};
use crate::mixture::Position3D;
use crate::scenario::{Instance, WeatherStack};
use crate::{Error, Result, Tensor};

/// Default fraction of wavelet energy that must survive level dropping.
pub const ENERGY_THRESHOLD: f64 = 0.90;

/// Fitted preprocessing state: power transforms for the six traffic features
/// and three target coordinates, per-channel wavelet compression and
/// per-channel RMS scaling of the compressed grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub traffic: [PowerTransform; 6],
    /// longitude, latitude, altitude
    pub target: [PowerTransform; 3],
    pub wavelet: [WaveletCompressor; 3],
    pub channel_scale: [f64; 3],
    pub grid_shape: [usize; 2],
}

/// Model-ready tensors for one instance.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub weather: Arc<Tensor>,
    pub traffic: Tensor,
    /// Standardised target.
    pub target: Position3D,
}

fn fit_feature(values: &[f64]) -> Result<PowerTransform> {
    match fit_yeo_johnson(values) {
        Err(Error::DegenerateVariance(_)) => {
            // Constant feature: centre it and leave the scale alone.
            Ok(PowerTransform {
                lambda: 1.0,
                fitted_on: values.len(),
                mean: values[0],
                std: 1.0,
            })
        }
        other => other,
    }
}

fn distinct_stacks(instances: &[Instance]) -> Vec<&Arc<WeatherStack>> {
    let mut seen = HashSet::new();
    instances
        .iter()
        .map(|i| &i.weather)
        .filter(|s| seen.insert(Arc::as_ptr(s) as usize))
        .collect()
}

fn channel_grid(stack: &WeatherStack, c: usize) -> Grid {
    Grid {
        height: stack.height,
        width: stack.width,
        data: stack.channel(c).iter().map(|&v| v as f64).collect(),
    }
}

impl Preprocessor {
    /// Fits every transform on `instances` (the training split).
    pub fn fit(instances: &[Instance], energy_threshold: f64) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| Error::Usage("cannot fit preprocessing on an empty set".into()))?;
        let (h, w) = (first.weather.height, first.weather.width);
        if instances.iter().any(|i| (i.weather.height, i.weather.width) != (h, w)) {
            return Err(Error::Dimension("instances carry grids of different shapes".into()));
        }

        let mut traffic = [PowerTransform::identity(); 6];
        for (j, slot) in traffic.iter_mut().enumerate() {
            let col: Vec<f64> = instances.iter().map(|i| i.traffic[j]).collect();
            *slot = fit_feature(&col)?;
        }
        let mut target = [PowerTransform::identity(); 3];
        for (j, slot) in target.iter_mut().enumerate() {
            let col: Vec<f64> = instances.iter().map(|i| i.target.0[j]).collect();
            *slot = fit_feature(&col)?;
        }

        let stacks = distinct_stacks(instances);
        let levels = max_levels(h, w);
        let mut wavelet = [WaveletCompressor { levels, drop: 0 }; 3];
        let mut channel_scale = [1.0; 3];
        for c in 0..3 {
            let grids: Vec<Grid> = stacks.iter().map(|s| channel_grid(s, c)).collect();
            if levels >= 1 {
                let pyramids: Vec<WaveletPyramid> =
                    grids.iter().map(|g| haar_decompose(g, levels)).collect::<Result<_>>()?;
                wavelet[c].drop = select_drop_levels_mean(&pyramids, energy_threshold);
            }
            let mut sum_sq = 0.0;
            let mut n = 0usize;
            for g in &grids {
                let cg = wavelet[c].apply(g)?;
                sum_sq += cg.energy();
                n += cg.data.len();
            }
            let rms = (sum_sq / n as f64).sqrt();
            if rms > 0.0 && rms.is_finite() {
                channel_scale[c] = rms;
            }
        }
        Ok(Self {
            traffic,
            target,
            wavelet,
            channel_scale,
            grid_shape: [h, w],
        })
    }

    pub fn weather_tensor(&self, stack: &WeatherStack) -> Result<Tensor> {
        let [h, w] = self.grid_shape;
        if (stack.height, stack.width) != (h, w) || stack.data.len() != 3 * h * w {
            return Err(Error::Dimension(format!(
                "weather grid {}x{}, preprocessing fitted on {h}x{w}",
                stack.height, stack.width
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let g = self.wavelet[c].apply(&channel_grid(stack, c))?;
            let s = self.channel_scale[c];
            data.extend(g.data.iter().map(|v| v / s));
        }
        Tensor::new(vec![3, h, w], data)
    }

    pub fn traffic_tensor(&self, traffic: &[f64; 6]) -> Tensor {
        Tensor::vector(traffic.iter().zip(&self.traffic).map(|(&x, t)| t.transform(x)).collect())
    }

    pub fn standardize_target(&self, p: &Position3D) -> Position3D {
        Position3D([
            self.target[0].transform(p.0[0]),
            self.target[1].transform(p.0[1]),
            self.target[2].transform(p.0[2]),
        ])
    }

    /// Standardised position to the power-transformed scale.
    pub fn target_power_space(&self, z: &Position3D) -> Position3D {
        Position3D([
            self.target[0].destandardize(z.0[0]),
            self.target[1].destandardize(z.0[1]),
            self.target[2].destandardize(z.0[2]),
        ])
    }

    /// Standardised position back to raw units.
    pub fn target_original(&self, z: &Position3D) -> Result<Position3D> {
        Ok(Position3D([
            self.target[0].inverse(z.0[0])?,
            self.target[1].inverse(z.0[1])?,
            self.target[2].inverse(z.0[2])?,
        ]))
    }

    pub fn prepare(&self, inst: &Instance) -> Result<Prepared> {
        Ok(Prepared {
            weather: Arc::new(self.weather_tensor(&inst.weather)?),
            traffic: self.traffic_tensor(&inst.traffic),
            target: self.standardize_target(&inst.target),
        })
    }

    /// Prepares many instances, compressing each shared weather stack once.
    pub fn prepare_all(&self, instances: &[Instance]) -> Result<Vec<Prepared>> {
        let mut cache: HashMap<usize, Arc<Tensor>> = HashMap::new();
        instances
            .iter()
            .map(|inst| {
                let key = Arc::as_ptr(&inst.weather) as usize;
                let weather = match cache.get(&key) {
                    Some(t) => t.clone(),
                    None => {
                        let t = Arc::new(self.weather_tensor(&inst.weather)?);
                        cache.insert(key, t.clone());
                        t
                    }
                };
                Ok(Prepared {
                    weather,
                    traffic: self.traffic_tensor(&inst.traffic),
                    target: self.standardize_target(&inst.target),
                })
            })
            .collect()
    }
}
