use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::metrics::evaluate_prepared;
use super::{train, TrainConfig};
use crate::network::{Model, ModelConfig};
use crate::preprocess::{Prepared, Preprocessor, ENERGY_THRESHOLD};
use crate::scenario::Instance;
use crate::{rng, Error, Result};

/// `k` (train, validation) index pairs whose validation parts partition
/// `0..n`. The first `n mod k` folds hold one extra index.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || n < k {
        return Err(Error::Usage(format!("k-fold split needs 2 <= k <= n, got n = {n}, k = {k}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut val = perm[start..start + len].to_vec();
        let mut tr: Vec<usize> = perm[..start].iter().chain(&perm[start + len..]).copied().collect();
        val.sort_unstable();
        tr.sort_unstable();
        folds.push((tr, val));
        start += len;
    }
    Ok(folds)
}

/// Hyperparameter name → candidate values. Names are fields of
/// [`ModelConfig`] or [`TrainConfig`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace(pub BTreeMap<String, Vec<Value>>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub index: usize,
    /// Values in key order.
    pub assignment: Vec<(String, Value)>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn set_field<T: Serialize + for<'de> Deserialize<'de>>(base: &T, key: &str, value: &Value) -> Result<Option<T>> {
    let mut obj = serde_json::to_value(base)?;
    let map = obj.as_object_mut().expect("configs serialize as objects");
    if !map.contains_key(key) {
        return Ok(None);
    }
    map.insert(key.to_string(), value.clone());
    serde_json::from_value(obj)
        .map(Some)
        .map_err(|e| Error::Config(format!("search value {value} for `{key}`: {e}")))
}

/// Cartesian product in key order, the last key varying fastest.
pub fn enumerate_space(space: &SearchSpace, model: &ModelConfig, train: &TrainConfig) -> Result<Vec<SearchPoint>> {
    if space.0.values().any(Vec::is_empty) {
        return Err(Error::Config("every search dimension needs at least one value".into()));
    }
    let keys: Vec<&String> = space.0.keys().collect();
    let total: usize = space.0.values().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut picks = vec![0; keys.len()];
        for (i, k) in keys.iter().enumerate().rev() {
            let len = space.0[*k].len();
            picks[i] = rem % len;
            rem /= len;
        }
        let mut m = model.clone();
        let mut t = train.clone();
        let mut assignment = Vec::with_capacity(keys.len());
        for (k, &p) in keys.iter().zip(&picks) {
            let v = &space.0[*k][p];
            if let Some(nm) = set_field(&m, k, v)? {
                m = nm;
            } else if let Some(nt) = set_field(&t, k, v)? {
                t = nt;
            } else {
                return Err(Error::Config(format!("unknown hyperparameter `{k}`")));
            }
            assignment.push(((*k).clone(), v.clone()));
        }
        m.validate()?;
        t.validate()?;
        out.push(SearchPoint {
            index,
            assignment,
            model: m,
            train: t,
        });
    }
    Ok(out)
}

/// Preprocessing fitted on one fold's training part, with prepared data.
/// Every tenth training item (in shuffled order) is held out for early
/// stopping.
pub struct FoldData {
    pub preprocessor: Preprocessor,
    pub train: Vec<Prepared>,
    pub holdout: Vec<Prepared>,
    pub val: Vec<Prepared>,
}

pub fn prepare_fold(instances: &[Instance], train_idx: &[usize], val_idx: &[usize], seed: u64) -> Result<FoldData> {
    let tr: Vec<Instance> = train_idx.iter().map(|&i| instances[i].clone()).collect();
    let va: Vec<Instance> = val_idx.iter().map(|&i| instances[i].clone()).collect();
    let pre = Preprocessor::fit(&tr, ENERGY_THRESHOLD)?;
    let mut all = pre.prepare_all(&tr)?;
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut is_holdout = vec![false; all.len()];
    for (j, &i) in order.iter().enumerate() {
        is_holdout[i] = j % 10 == 9;
    }
    let mut train_part = Vec::new();
    let mut holdout = Vec::new();
    for (i, p) in all.drain(..).enumerate() {
        if is_holdout[i] {
            holdout.push(p);
        } else {
            train_part.push(p);
        }
    }
    if holdout.is_empty() {
        holdout.push(train_part[0].clone());
    }
    Ok(FoldData {
        val: pre.prepare_all(&va)?,
        preprocessor: pre,
        train: train_part,
        holdout,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub mape: f64,
    pub nll: f64,
}

/// Trains `point` on one fold and scores it on the validation part.
pub fn run_fold(point: &SearchPoint, fold: &FoldData, fold_index: usize) -> Result<FoldResult> {
    let seed = point.train.seed;
    let mut model = Model::build(point.model.clone(), &mut rng::derived(seed, &[fold_index as u64, 0]))?;
    let cfg = TrainConfig {
        seed: rng::derive_seed(seed, &[fold_index as u64, 1]),
        ..point.train.clone()
    };
    train(&mut model, &fold.train, &fold.holdout, &cfg)?;
    let report = evaluate_prepared(&model, &fold.preprocessor, &fold.val)?;
    Ok(FoldResult {
        mape: report.metrics.mape_transformed,
        nll: report.nll,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: SearchPoint,
    pub folds: Vec<FoldResult>,
    pub mean_mape: f64,
    pub mean_nll: f64,
    /// 1-based position in the ranking.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    /// Rows in enumeration order.
    pub rows: Vec<GridRow>,
    /// Row indices, best first.
    pub ranking: Vec<usize>,
}

impl GridSearchResult {
    pub fn best(&self) -> &GridRow {
        &self.rows[self.ranking[0]]
    }
}

/// Exhaustive k-fold search ranked by mean validation MAPE (power-transformed
/// scale), ties broken by mean NLL and then enumeration order. Jobs run on a
/// pool of `jobs` threads; results do not depend on `jobs`.
pub fn grid_search(
    space: &SearchSpace,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    instances: &[Instance],
    k: usize,
    seed: u64,
    jobs: usize,
) -> Result<GridSearchResult> {
    let points = enumerate_space(space, base_model, base_train)?;
    let splits = kfold_split(instances.len(), k, seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    pool.install(|| {
        let folds: Vec<FoldData> = splits
            .par_iter()
            .enumerate()
            .map(|(f, (tr, va))| prepare_fold(instances, tr, va, rng::derive_seed(seed, &[f as u64])))
            .collect::<Result<_>>()?;
        let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..k).map(move |f| (p, f))).collect();
        let results: Vec<FoldResult> = jobs
            .par_iter()
            .map(|&(p, f)| run_fold(&points[p], &folds[f], f))
            .collect::<Result<_>>()?;

        let mut rows: Vec<GridRow> = points
            .into_iter()
            .enumerate()
            .map(|(p, point)| {
                let folds = results[p * k..(p + 1) * k].to_vec();
                let mean_mape = folds.iter().map(|r| r.mape).sum::<f64>() / k as f64;
                let mean_nll = folds.iter().map(|r| r.nll).sum::<f64>() / k as f64;
                GridRow {
                    point,
                    folds,
                    mean_mape,
                    mean_nll,
                    rank: 0,
                }
            })
            .collect();
        let mut ranking: Vec<usize> = (0..rows.len()).collect();
        ranking.sort_by(|&a, &b| {
            rows[a]
                .mean_mape
                .total_cmp(&rows[b].mean_mape)
                .then(rows[a].mean_nll.total_cmp(&rows[b].mean_nll))
                .then(a.cmp(&b))
        });
        for (r, &i) in ranking.iter().enumerate() {
            rows[i].rank = r + 1;
        }
        Ok(GridSearchResult { rows, ranking })
    })
}

fn value_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Results table: one row per configuration in enumeration order.
pub fn write_grid_csv(result: &GridSearchResult, path: &Path) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    let Some(first) = result.rows.first() else {
        return Err(Error::Usage("empty grid-search result".into()));
    };
    let k = first.folds.len();
    let mut header = vec!["index".to_string()];
    header.extend(first.point.assignment.iter().map(|(name, _)| name.clone()));
    header.extend((0..k).map(|f| format!("fold{f}_mape")));
    header.extend((0..k).map(|f| format!("fold{f}_nll")));
    header.extend(["mean_mape", "mean_nll", "rank"].map(String::from));
    wr.write_record(&header)?;
    for row in &result.rows {
        let mut rec = vec![row.point.index.to_string()];
        rec.extend(row.point.assignment.iter().map(|(_, v)| value_cell(v)));
        rec.extend(row.folds.iter().map(|r| r.mape.to_string()));
        rec.extend(row.folds.iter().map(|r| r.nll.to_string()));
        rec.push(row.mean_mape.to_string());
        rec.push(row.mean_nll.to_string());
        rec.push(row.rank.to_string());
        wr.write_record(&rec)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}
