//! Optimisation of the mixture negative log-likelihood, cross-validation,
//! grid search and evaluation metrics.

mod cv;
mod metrics;

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::mixture::head_nll;
use crate::network::Model;
use crate::preprocess::Prepared;
use crate::{rng, Error, Result, Tensor};

pub use cv::{
    enumerate_space, grid_search, kfold_split, prepare_fold, run_fold, write_grid_csv, FoldData, FoldResult,
    GridRow, GridSearchResult, SearchPoint, SearchSpace,
};
pub use metrics::{
    evaluate, evaluate_prepared, mape, mean_predictor, predict_all, r2, score_points, sem, CoordinateErrors,
    EvalReport, PointMetrics,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch, dropout active.
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn best_val_nll(&self) -> f64 {
        self.records[self.best_epoch - 1].val_nll
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(path)?;
        for r in &self.records {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    }
}

/// First and second moment estimates per parameter.
pub struct Adam {
    lr: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Mean NLL of a minibatch and its parameter gradients.
pub fn batch_loss_and_grad(
    model: &Model,
    batch: &[&Prepared],
    training: bool,
    rng: &mut rng::Rng,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty minibatch".into()));
    }
    let cfg = model.config();
    let mut g = Graph::new();
    let params = model.bind(&mut g, true)?;
    let mut total = None;
    for item in batch {
        let w = g.constant((*item.weather).clone())?;
        let t = g.constant(item.traffic.clone())?;
        let head = model.head_graph(&mut g, &params, w, t, training, rng)?;
        let nll = g.mixture_nll(head, &item.target, cfg.mixture_components, cfg.jitter)?;
        total = Some(match total {
            None => nll,
            Some(acc) => g.add(acc, nll)?,
        });
    }
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?.parameters(&g, &model.parameter_shapes());
    Ok((value, grads))
}

/// Inference-mode NLL of every item, in order.
pub fn nll_per_instance(model: &Model, data: &[Prepared]) -> Result<Vec<f64>> {
    let cfg = model.config();
    data.par_iter()
        .map(|p| {
            let raw = model.head(&p.weather, &p.traffic, false, &mut rng::seeded(0))?;
            Ok(head_nll(&raw, &p.target, cfg.mixture_components, cfg.jitter)?.0)
        })
        .collect()
}

pub fn mean_nll(model: &Model, data: &[Prepared]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("NLL of an empty set".into()));
    }
    let v = nll_per_instance(model, data)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Minibatch Adam on the mean NLL with seeded shuffling, early stopping on
/// validation NLL and restoration of the best parameters.
pub fn train(model: &mut Model, train_set: &[Prepared], val_set: &[Prepared], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage("training needs non-empty training and validation sets".into()));
    }
    let mut adam = Adam::new(cfg.learning_rate, model.parameters());
    let mut best = (f64::INFINITY, model.parameters().to_vec(), 0usize);
    let mut records = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::derived(cfg.seed, &[epoch as u64, 0]));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut drop_rng = rng::derived(cfg.seed, &[epoch as u64, 1, b as u64]);
            let diverged = |m: &Model| Error::Diverged {
                epoch,
                batch: b,
                param_norm: m.parameter_norm(),
            };
            let (loss, grads) = match batch_loss_and_grad(model, &batch, true, &mut drop_rng) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(model)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(model));
            }
            adam.update(model.parameters_mut(), &grads);
            if model.parameters().iter().any(|p| !p.is_finite()) {
                return Err(diverged(model));
            }
            loss_sum += loss * batch.len() as f64;
        }
        let val_nll = match mean_nll(model, val_set) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    epoch,
                    batch: order.len().div_ceil(cfg.batch_size),
                    param_norm: model.parameter_norm(),
                })
            }
            Err(e) => return Err(e),
        };
        records.push(EpochRecord {
            epoch,
            train_nll: loss_sum / train_set.len() as f64,
            val_nll,
        });
        log::debug!("epoch {epoch}: train {:.6} val {val_nll:.6}", loss_sum / train_set.len() as f64);
        if val_nll < best.0 {
            best = (val_nll, model.parameters().to_vec(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    model.parameters_mut().clone_from_slice(&best.1);
    Ok(History {
        records,
        best_epoch: best.2,
        stopped_early,
    })
}
