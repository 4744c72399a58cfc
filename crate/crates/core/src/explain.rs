//! Vanilla-gradient saliency of the predicted mean with respect to the nine
//! model inputs.
//!
//! For one instance and one output coordinate, the raw importance of a
//! traffic feature is `|∂μ/∂x|`; a weather channel's is the sum of
//! `|∂μ/∂pixel|` over its pixels. The nine values are normalised to sum to
//! one. Gradients are taken with respect to the preprocessed inputs the
//! network actually sees.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::network::Model;
use crate::preprocess::Prepared;
use crate::{rng, Error, Result};

/// Feature order for every saliency report.
pub const FEATURE_NAMES: [&str; 9] = [
    "convective",
    "u_wind",
    "v_wind",
    "latitude",
    "longitude",
    "altitude",
    "ground_speed",
    "heading",
    "vertical_rate",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputAttribute {
    Latitude,
    Longitude,
    Altitude,
}

impl OutputAttribute {
    pub const ALL: [OutputAttribute; 3] = [Self::Latitude, Self::Longitude, Self::Altitude];

    /// Position of this coordinate in a (longitude, latitude, altitude) mean.
    pub fn mean_index(self) -> usize {
        match self {
            Self::Longitude => 0,
            Self::Latitude => 1,
            Self::Altitude => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Latitude => "latitude",
            Self::Longitude => "longitude",
            Self::Altitude => "altitude",
        }
    }
}

/// Anything that can record the predicted mean (longitude, latitude,
/// altitude) as a differentiable function of the two inputs.
pub trait MeanOutput: Sync {
    fn mean_graph(&self, g: &mut Graph, weather: Var, traffic: Var) -> Result<Var>;
}

impl MeanOutput for Model {
    fn mean_graph(&self, g: &mut Graph, weather: Var, traffic: Var) -> Result<Var> {
        let n = self.config().mixture_components;
        if n != 1 {
            return Err(Error::Unsupported(format!(
                "saliency is defined for single-component mixtures, model has {n}"
            )));
        }
        let params = self.bind(g, false)?;
        let head = self.head_graph(g, &params, weather, traffic, false, &mut rng::seeded(0))?;
        g.slice(head, n, 3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub attribute: OutputAttribute,
    /// Normalised importance in [`FEATURE_NAMES`] order.
    pub weights: [f64; 9],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateSaliency {
    pub attribute: OutputAttribute,
    pub mean: [f64; 9],
    pub sem: [f64; 9],
    pub n_instances: usize,
}

/// Unnormalised importances in [`FEATURE_NAMES`] order.
pub fn raw_saliency<M: MeanOutput + ?Sized>(model: &M, item: &Prepared, attribute: OutputAttribute) -> Result<[f64; 9]> {
    let mut g = Graph::new();
    let w = g.input((*item.weather).clone())?;
    let t = g.input(item.traffic.clone())?;
    let mean = model.mean_graph(&mut g, w, t)?;
    let out = g.index(mean, attribute.mean_index())?;
    let grads = g.backward(out)?;

    let mut raw = [0.0; 9];
    if let Some(gw) = grads.get(w) {
        let shape = gw.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Dimension(format!("weather gradient shape {shape:?}")));
        }
        let per = shape[1] * shape[2];
        for (c, slot) in raw.iter_mut().take(3).enumerate() {
            *slot = gw.data()[c * per..(c + 1) * per].iter().map(|v| v.abs()).sum();
        }
    }
    if let Some(gt) = grads.get(t) {
        if gt.len() != 6 {
            return Err(Error::Dimension(format!("traffic gradient length {}", gt.len())));
        }
        for (slot, v) in raw[3..].iter_mut().zip(gt.data()) {
            *slot = v.abs();
        }
    }
    Ok(raw)
}

pub fn instance_saliency<M: MeanOutput + ?Sized>(model: &M, item: &Prepared, attribute: OutputAttribute) -> Result<SaliencyMap> {
    let raw = raw_saliency(model, item, attribute)?;
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("output does not depend on any input".into()));
    }
    Ok(SaliencyMap {
        attribute,
        weights: raw.map(|v| v / total),
    })
}

pub fn aggregate_saliency<M: MeanOutput + ?Sized>(
    model: &M,
    data: &[Prepared],
    attribute: OutputAttribute,
) -> Result<AggregateSaliency> {
    if data.is_empty() {
        return Err(Error::Usage("saliency over an empty dataset".into()));
    }
    let maps: Vec<SaliencyMap> = data
        .par_iter()
        .map(|p| instance_saliency(model, p, attribute))
        .collect::<Result<_>>()?;
    let n = maps.len() as f64;
    let mut mean = [0.0; 9];
    for m in &maps {
        for (a, w) in mean.iter_mut().zip(&m.weights) {
            *a += w;
        }
    }
    mean = mean.map(|v| v / n);
    let mut sem = [0.0; 9];
    if maps.len() > 1 {
        for (j, s) in sem.iter_mut().enumerate() {
            let var = maps.iter().map(|m| (m.weights[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
            *s = (var / n).sqrt();
        }
    }
    Ok(AggregateSaliency {
        attribute,
        mean,
        sem,
        n_instances: maps.len(),
    })
}

/// One row per (output attribute, feature): `output_attribute, feature,
/// mean, sem`.
pub fn write_saliency_csv(reports: &[AggregateSaliency], path: &Path) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(["output_attribute", "feature", "mean", "sem"])?;
    for r in reports {
        for (j, name) in FEATURE_NAMES.iter().enumerate() {
            wr.write_record([r.attribute.name(), name, &r.mean[j].to_string(), &r.sem[j].to_string()])?;
        }
    }
    wr.flush().map_err(|e| Error::io(path, e))
}
