use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mixture::{predict_mode, Position3D};
use crate::network::Model;
use crate::preprocess::{Prepared, Preprocessor};
use crate::scenario::Instance;
use crate::{Error, Result};

/// Mean absolute percentage error over paired values. Terms with a zero
/// truth are skipped; the second value is how many were skipped.
pub fn mape(preds: &[f64], truths: &[f64]) -> Result<(f64, usize)> {
    if preds.len() != truths.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} truths", preds.len(), truths.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&p, &t) in preds.iter().zip(truths) {
        if t != 0.0 {
            sum += ((p - t) / t).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Usage("MAPE needs at least one non-zero truth".into()));
    }
    Ok((sum / n as f64, truths.len() - n))
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.len() != truths.len() || truths.is_empty() {
        return Err(Error::Usage("R² needs equally long non-empty inputs".into()));
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Standard error of the mean: sample standard deviation over `√n`.
/// Zero for fewer than two samples.
pub fn sem(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Per-coordinate errors. An undefined entry is NaN and is written as null.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordinateErrors {
    #[serde(with = "nan_as_null")]
    pub longitude: f64,
    #[serde(with = "nan_as_null")]
    pub latitude: f64,
    #[serde(with = "nan_as_null")]
    pub altitude: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl CoordinateErrors {
    fn from_array(a: [f64; 3]) -> Self {
        Self {
            longitude: a[0],
            latitude: a[1],
            altitude: a[2],
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.longitude, self.latitude, self.altitude]
    }
}

/// Point-forecast metrics for a set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub n_instances: usize,
    /// Instances left out of the original-space errors because a prediction
    /// fell outside the inverse-transform domain.
    pub excluded: usize,
    /// MAPE on the power-transformed scale, pooled over coordinates.
    pub mape_transformed: f64,
    pub mape_transformed_sem: f64,
    pub mape_transformed_by_coordinate: CoordinateErrors,
    /// R² in standardised model space, pooled over coordinates.
    pub r2_transformed: f64,
    pub r2_transformed_sem: f64,
    pub mape_original: CoordinateErrors,
    pub mape_original_sem: CoordinateErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: PointMetrics,
    pub nll: f64,
    pub nll_sem: f64,
}

/// Pooled R² with per-coordinate means, plus its jackknife standard error.
fn pooled_r2(preds: &[[f64; 3]], truths: &[[f64; 3]]) -> (f64, f64) {
    let n = truths.len();
    let mut s1 = [0.0; 3];
    let mut s2 = [0.0; 3];
    let mut res = 0.0;
    let res_i: Vec<f64> = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum())
        .collect();
    for (t, r) in truths.iter().zip(&res_i) {
        for c in 0..3 {
            s1[c] += t[c];
            s2[c] += t[c] * t[c];
        }
        res += r;
    }
    let tot = |s1: &[f64; 3], s2: &[f64; 3], m: f64| (0..3).map(|c| s2[c] - s1[c] * s1[c] / m).sum::<f64>();
    let full = 1.0 - res / tot(&s1, &s2, n as f64);
    if n < 3 {
        return (full, 0.0);
    }
    let loo: Vec<f64> = truths
        .iter()
        .zip(&res_i)
        .map(|(t, r)| {
            let a: [f64; 3] = std::array::from_fn(|c| s1[c] - t[c]);
            let b: [f64; 3] = std::array::from_fn(|c| s2[c] - t[c] * t[c]);
            1.0 - (res - r) / tot(&a, &b, (n - 1) as f64)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (n - 1) as f64 / n as f64;
    (full, var.sqrt())
}

/// Scores standardised point predictions against standardised truths.
pub fn score_points(preds_z: &[Position3D], truths_z: &[Position3D], pre: &Preprocessor) -> Result<PointMetrics> {
    if preds_z.is_empty() {
        return Err(Error::Usage("cannot score an empty set".into()));
    }
    if preds_z.len() != truths_z.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} truths", preds_z.len(), truths_z.len())));
    }
    let mut orig = Vec::new();
    let mut excluded = 0;
    for (p, t) in preds_z.iter().zip(truths_z) {
        match (pre.target_original(p), pre.target_original(t)) {
            (Ok(po), Ok(to)) => orig.push((po, to)),
            _ => excluded += 1,
        }
    }

    let ape = |p: f64, t: f64| if t == 0.0 { None } else { Some(((p - t) / t).abs()) };
    let mut per_instance = Vec::with_capacity(preds_z.len());
    let mut by_coord: [Vec<f64>; 3] = Default::default();
    for (p, t) in preds_z.iter().zip(truths_z) {
        let (pp, tp) = (pre.target_power_space(p), pre.target_power_space(t));
        let terms: Vec<f64> = (0..3)
            .filter_map(|c| {
                let e = ape(pp.0[c], tp.0[c]);
                if let Some(v) = e {
                    by_coord[c].push(v);
                }
                e
            })
            .collect();
        if !terms.is_empty() {
            per_instance.push(terms.iter().sum::<f64>() / terms.len() as f64);
        }
    }
    let pooled: Vec<f64> = by_coord.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(Error::Usage("MAPE needs at least one non-zero truth".into()));
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };

    let mut orig_terms: [Vec<f64>; 3] = Default::default();
    for (po, to) in &orig {
        for c in 0..3 {
            if let Some(v) = ape(po.0[c], to.0[c]) {
                orig_terms[c].push(v);
            }
        }
    }
    let (r2v, r2_sem) = pooled_r2(
        &preds_z.iter().map(|p| p.0).collect::<Vec<_>>(),
        &truths_z.iter().map(|p| p.0).collect::<Vec<_>>(),
    );
    Ok(PointMetrics {
        n_instances: preds_z.len(),
        excluded,
        mape_transformed: mean(&pooled),
        mape_transformed_sem: sem(&per_instance),
        mape_transformed_by_coordinate: CoordinateErrors::from_array(std::array::from_fn(|c| mean(&by_coord[c]))),
        r2_transformed: r2v,
        r2_transformed_sem: r2_sem,
        mape_original: CoordinateErrors::from_array(std::array::from_fn(|c| mean(&orig_terms[c]))),
        mape_original_sem: CoordinateErrors::from_array(std::array::from_fn(|c| sem(&orig_terms[c]))),
    })
}

/// Mode predictions and per-instance NLL for prepared data.
pub fn predict_all(model: &Model, data: &[Prepared]) -> Result<Vec<(Position3D, f64)>> {
    data.par_iter()
        .map(|p| {
            let mix = model.predict(&p.weather, &p.traffic)?;
            let mode = predict_mode(&mix)?;
            Ok((mode, -mix.log_density(&p.target)?))
        })
        .collect()
}

/// Evaluates `model` on raw instances using the preprocessing it was trained
/// with.
pub fn evaluate(model: &Model, pre: &Preprocessor, instances: &[Instance]) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Usage("evaluation on an empty set".into()));
    }
    let data = pre.prepare_all(instances)?;
    evaluate_prepared(model, pre, &data)
}

pub fn evaluate_prepared(model: &Model, pre: &Preprocessor, data: &[Prepared]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation on an empty set".into()));
    }
    let out = predict_all(model, data)?;
    let preds: Vec<Position3D> = out.iter().map(|o| o.0).collect();
    let nlls: Vec<f64> = out.iter().map(|o| o.1).collect();
    let truths: Vec<Position3D> = data.iter().map(|p| p.target).collect();
    Ok(EvalReport {
        metrics: score_points(&preds, &truths, pre)?,
        nll: nlls.iter().sum::<f64>() / nlls.len() as f64,
        nll_sem: sem(&nlls),
    })
}

/// Constant prediction at the mean standardised target of `train`.
pub fn mean_predictor(train: &[Prepared]) -> Position3D {
    let n = train.len().max(1) as f64;
    let mut m = [0.0; 3];
    for p in train {
        for c in 0..3 {
            m[c] += p.target.0[c];
        }
    }
    Position3D(m.map(|v| v / n))
}
