use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trajgmm::explain::{aggregate_saliency, write_saliency_csv, AggregateSaliency, OutputAttribute};
use trajgmm::mixture::{predict_mode, Position3D};
use trajgmm::network::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use trajgmm::preprocess::{
    haar_decompose, max_levels, select_drop_levels, Grid, PowerTransform, Preprocessor, WaveletCompressor,
};
use trajgmm::scenario::{
    build_instances, generate_scenario, read_dataset, read_manifest, write_dataset, DatasetManifest, Instance,
};
use trajgmm::training::{self, evaluate_prepared, predict_all, write_grid_csv, EvalReport, SearchSpace};
use trajgmm::{rng, Error, Result};

use crate::config::{output_dir, RunConfig};
use crate::{ConfigArgs, ModelArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const SUMMARY: &str = "summary.json";
/// Writes one line to stdout; a closed pipe ends output quietly.
fn emit(line: std::fmt::Arguments) -> Result<()> {
    match writeln!(io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

pub const PLOT_COLUMNS: [&str; 5] = ["lead_time", "mape", "mape_sem", "r2", "r2_sem"];

/// Evaluation report tagged with its lead time.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub lead_time: u32,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub lead_time: u32,
    pub n_train: usize,
    pub n_validation: usize,
    pub parameter_count: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_val_nll: f64,
    pub train_mape: f64,
    pub validation_mape: f64,
    pub validation_r2: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))
}

fn lead_dir(lead_time: u32) -> String {
    format!("lead_{lead_time}")
}

fn push<T: ToString>(flags: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        flags.push((key.to_string(), v.to_string()));
    }
}

fn config_flags(c: &ConfigArgs) -> Vec<(String, String)> {
    let mut f = Vec::new();
    push(&mut f, "seed", c.seed);
    push(&mut f, "jobs", c.jobs);
    f
}

fn model_flags(f: &mut Vec<(String, String)>, m: &ModelArgs) {
    push(f, "train.epochs", m.epochs);
    push(f, "train.learning_rate", m.learning_rate.map(toml_float));
    push(f, "train.batch_size", m.batch_size);
    push(f, "train.patience", m.patience);
    push(f, "model.dropout", m.dropout.map(toml_float));
    push(f, "model.filters", m.filters);
    push(f, "model.kernel", m.kernel);
    push(f, "model.conv_layers", m.conv_layers);
    push(f, "model.traffic_layers", m.traffic_layers);
    push(f, "model.dense_width", m.dense_width);
    push(f, "model.mixture_components", m.components);
    push(f, "model.activation", m.activation.as_ref().map(|a| format!("\"{a}\"")));
}

/// Float literal that TOML reads back as a float, never an integer.
fn toml_float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || !v.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

/// A single dataset directory, or every dataset one level below a root,
/// ordered by lead time.
fn discover_datasets(data: &Path) -> Result<Vec<(DatasetManifest, PathBuf)>> {
    if data.join("manifest.json").is_file() {
        return Ok(vec![(read_manifest(data)?, data.to_path_buf())]);
    }
    let entries = fs::read_dir(data).map_err(|e| Error::io(data, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(data, e))?.path();
        if path.join("manifest.json").is_file() {
            found.push((read_manifest(&path)?, path));
        }
    }
    if found.is_empty() {
        return Err(Error::Usage(format!("no dataset found in {}", data.display())));
    }
    found.sort_by(|a, b| a.0.lead_time.cmp(&b.0.lead_time).then(a.1.cmp(&b.1)));
    Ok(found)
}

fn single_dataset(data: &Path) -> Result<(DatasetManifest, Vec<Instance>)> {
    let sets = discover_datasets(data)?;
    if sets.len() != 1 {
        return Err(Error::Usage(format!(
            "{} holds {} datasets; pass one lead-time directory",
            data.display(),
            sets.len()
        )));
    }
    read_dataset(&sets[0].1)
}

// ---------------------------------------------------------------------------
// gen-data

pub struct GenDataArgs {
    pub cfg: ConfigArgs,
    pub out: Option<PathBuf>,
    pub flights: Option<usize>,
    pub duration: Option<u32>,
    pub storms: Option<usize>,
    pub grid: Option<String>,
    pub wind: Option<f64>,
    pub lead_times: Option<Vec<u32>>,
    pub force: bool,
}

fn parse_grid(text: &str) -> Result<[usize; 2]> {
    let bad = || Error::Usage(format!("grid must look like 32x32, got `{text}`"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok([h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?])
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut flags = config_flags(&a.cfg);
    push(&mut flags, "generator.n_flights", a.flights);
    push(&mut flags, "generator.duration_min", a.duration);
    push(&mut flags, "generator.n_storm_cells", a.storms);
    push(&mut flags, "generator.wind_strength", a.wind.map(toml_float));
    if let Some(g) = &a.grid {
        let [h, w] = parse_grid(g)?;
        flags.push(("generator.grid".into(), format!("[{h}, {w}]")));
    }
    if let Some(l) = &a.lead_times {
        flags.push(("lead_times".into(), format!("{l:?}")));
    }
    let cfg = RunConfig::load(a.cfg.config.as_deref(), &a.cfg.sets, &flags)?;
    let out = output_dir(a.out, "gen-data");
    if out.exists() {
        let non_empty = fs::read_dir(&out).map_err(|e| Error::io(&out, e))?.next().is_some();
        if non_empty && !a.force {
            return Err(Error::Usage(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
    }
    create_dir(&out)?;

    let scenario = generate_scenario(cfg.seed, &cfg.generator)?;
    let leads: BTreeSet<u32> = cfg.lead_times.iter().copied().collect();
    let leads: Vec<u32> = leads.into_iter().collect();
    let counts: Vec<usize> = pool(cfg.jobs)?.install(|| {
        leads
            .par_iter()
            .map(|&tau| {
                let instances = build_instances(&scenario.tracks, &scenario.weather, tau)?;
                let manifest = DatasetManifest::for_scenario(&scenario, instances.len(), tau)?;
                let dir = out.join(lead_dir(tau));
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                write_dataset(&instances, &manifest, &dir)?;
                log::info!("lead time {tau}: {} instances", instances.len());
                Ok(instances.len())
            })
            .collect::<Result<_>>()
    })?;
    cfg.write_effective(&out)?;
    for (tau, n) in leads.iter().zip(&counts) {
        emit(format_args!("{}\t{n}", out.join(lead_dir(*tau)).display()))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// Holds out a seeded share of flights (at least one, never all).
fn split_by_flight(instances: Vec<Instance>, fraction: f64, seed: u64) -> Result<(Vec<Instance>, Vec<Instance>)> {
    let flights: BTreeSet<u32> = instances.iter().map(|i| i.flight_id).collect();
    if flights.len() < 2 {
        return Err(Error::Usage(
            "a flight-level validation split needs at least two flights; pass --validation".into(),
        ));
    }
    let mut ids: Vec<u32> = flights.into_iter().collect();
    ids.shuffle(&mut rng::derived(seed, &[2]));
    let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let held: BTreeSet<u32> = ids[..n_val].iter().copied().collect();
    Ok(instances.into_iter().partition(|i| !held.contains(&i.flight_id)))
}

fn train_one(cfg: &RunConfig, data: &Path, validation: Option<&Path>, out: &Path) -> Result<TrainSummary> {
    let (manifest, instances) = read_dataset(data)?;
    let (train_set, val_set) = match validation {
        Some(v) => {
            let (vm, vi) = read_dataset(v)?;
            if (vm.lead_time, vm.grid_shape) != (manifest.lead_time, manifest.grid_shape) {
                return Err(Error::Usage(format!(
                    "validation set (lead {}, grid {:?}) does not match training set (lead {}, grid {:?})",
                    vm.lead_time, vm.grid_shape, manifest.lead_time, manifest.grid_shape
                )));
            }
            (instances, vi)
        }
        None => split_by_flight(instances, cfg.validation_fraction, cfg.seed)?,
    };
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage(format!("{}: empty training or validation set", data.display())));
    }
    let pre = Preprocessor::fit(&train_set, cfg.energy_threshold)?;
    let tr = pre.prepare_all(&train_set)?;
    let va = pre.prepare_all(&val_set)?;

    let mut model_cfg = cfg.model.clone();
    let [h, w] = manifest.grid_shape;
    model_cfg.weather_shape = [3, h, w];
    model_cfg.lead_time_minutes = manifest.lead_time;
    model_cfg.validate()?;
    let mut model = Model::build(model_cfg, &mut rng::derived(cfg.seed, &[u64::from(manifest.lead_time)]))?;
    let history = training::train(&mut model, &tr, &va, &cfg.train)?;

    create_dir(out)?;
    let train_report = evaluate_prepared(&model, &pre, &tr)?;
    let val_report = evaluate_prepared(&model, &pre, &va)?;
    let summary = TrainSummary {
        lead_time: manifest.lead_time,
        n_train: tr.len(),
        n_validation: va.len(),
        parameter_count: model.parameter_count(),
        best_epoch: history.best_epoch,
        epochs_run: history.records.len(),
        stopped_early: history.stopped_early,
        best_val_nll: history.best_val_nll(),
        train_mape: train_report.metrics.mape_transformed,
        validation_mape: val_report.metrics.mape_transformed,
        validation_r2: val_report.metrics.r2_transformed,
    };
    save_checkpoint(
        &Checkpoint {
            model,
            preprocessor: pre,
            seed: cfg.seed,
        },
        &out.join(CHECKPOINT_FILE),
    )?;
    history.write_csv(&out.join("history.csv"))?;
    let lead_time = manifest.lead_time;
    write_json(
        &out.join(TRAIN_REPORT),
        &RunReport {
            lead_time,
            report: train_report,
        },
    )?;
    write_json(
        &out.join(EVAL_REPORT),
        &RunReport {
            lead_time,
            report: val_report,
        },
    )?;
    write_json(&out.join(SUMMARY), &summary)?;
    log::info!(
        "lead time {lead_time}: validation MAPE {:.5}, best epoch {}",
        summary.validation_mape,
        summary.best_epoch
    );
    Ok(summary)
}

pub fn train(c: &ConfigArgs, m: &ModelArgs, data: &Path, validation: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let mut flags = config_flags(c);
    model_flags(&mut flags, m);
    let cfg = RunConfig::load(c.config.as_deref(), &c.sets, &flags)?;
    let out = output_dir(out, "train");
    let sets = discover_datasets(data)?;
    create_dir(&out)?;
    if sets.len() == 1 && sets[0].1 == data {
        let s = train_one(&cfg, data, validation, &out)?;
        cfg.write_effective(&out)?;
        emit(format_args!("{}", serde_json::to_string(&s)?))?;
        return Ok(());
    }
    if validation.is_some() {
        return Err(Error::Usage("--validation applies to a single dataset, not a lead-time sweep".into()));
    }
    let summaries: Vec<TrainSummary> = pool(cfg.jobs)?.install(|| {
        sets.par_iter()
            .map(|(manifest, dir)| train_one(&cfg, dir, None, &out.join(lead_dir(manifest.lead_time))))
            .collect::<Result<_>>()
    })?;
    cfg.write_effective(&out)?;
    write_json(&out.join(SUMMARY), &summaries)?;
    for s in &summaries {
        emit(format_args!("{}", serde_json::to_string(s)?))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// grid search

fn read_space(path: &Path) -> Result<SearchSpace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        serde_json::from_value(serde_json::to_value(table)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Serialize)]
struct SearchSummary {
    lead_time: u32,
    folds: usize,
    best_index: usize,
    best_assignment: serde_json::Map<String, serde_json::Value>,
    best_mean_mape: f64,
    best_mean_nll: f64,
    ranking: Vec<usize>,
}

pub fn grid_search(
    c: &ConfigArgs,
    m: &ModelArgs,
    data: &Path,
    space_path: &Path,
    folds: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut flags = config_flags(c);
    model_flags(&mut flags, m);
    push(&mut flags, "folds", folds);
    let cfg = RunConfig::load(c.config.as_deref(), &c.sets, &flags)?;
    let space = read_space(space_path)?;
    let (manifest, instances) = single_dataset(data)?;
    let mut base = cfg.model.clone();
    let [h, w] = manifest.grid_shape;
    base.weather_shape = [3, h, w];
    base.lead_time_minutes = manifest.lead_time;

    let result = training::grid_search(&space, &base, &cfg.train, &instances, cfg.folds, cfg.seed, cfg.jobs)?;
    let out = output_dir(out, "grid-search");
    create_dir(&out)?;
    write_grid_csv(&result, &out.join("grid_search.csv"))?;
    write_json(&out.join("space.json"), &space)?;
    let best = result.best();
    let summary = SearchSummary {
        lead_time: manifest.lead_time,
        folds: cfg.folds,
        best_index: best.point.index,
        best_assignment: best.point.assignment.iter().cloned().collect(),
        best_mean_mape: best.mean_mape,
        best_mean_nll: best.mean_nll,
        ranking: result.ranking.clone(),
    };
    write_json(&out.join(SUMMARY), &summary)?;
    cfg.write_effective(&out)?;
    emit(format_args!("{}", serde_json::to_string(&summary)?))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate, predict, explain

fn load_for(ckpt: &Path, manifest: &DatasetManifest) -> Result<Checkpoint> {
    let c = load_checkpoint(ckpt)?;
    let trained_for = c.model.config().lead_time_minutes;
    if trained_for != manifest.lead_time {
        log::warn!(
            "checkpoint was trained for a {trained_for}-minute lead time, dataset has {} minutes",
            manifest.lead_time
        );
    }
    Ok(c)
}

pub fn evaluate(ckpt: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let (manifest, instances) = single_dataset(data)?;
    let c = load_for(ckpt, &manifest)?;
    let prepared = c.preprocessor.prepare_all(&instances)?;
    let report = evaluate_prepared(&c.model, &c.preprocessor, &prepared)?;
    let preds = predict_all(&c.model, &prepared)?;

    let out = output_dir(out, "evaluate");
    create_dir(&out)?;
    let path = out.join("predictions.csv");
    let mut wr = csv::Writer::from_path(&path).map_err(Error::from)?;
    wr.write_record([
        "flight_id",
        "t",
        "pred_longitude",
        "pred_latitude",
        "pred_altitude",
        "true_longitude",
        "true_latitude",
        "true_altitude",
        "nll",
    ])
    .map_err(Error::from)?;
    for (inst, (mode, nll)) in instances.iter().zip(&preds) {
        let pred = c.preprocessor.target_original(mode).map(|p| p.0.map(|v| v.to_string()));
        let pred = pred.unwrap_or_else(|_| [String::new(), String::new(), String::new()]);
        let mut rec = vec![inst.flight_id.to_string(), inst.t.to_string()];
        rec.extend(pred);
        rec.extend(inst.target.0.map(|v| v.to_string()));
        rec.push(nll.to_string());
        wr.write_record(&rec).map_err(Error::from)?;
    }
    wr.flush().map_err(|e| Error::io(&path, e))?;

    let run = RunReport {
        lead_time: manifest.lead_time,
        report,
    };
    write_json(&out.join(EVAL_REPORT), &run)?;
    emit(format_args!("{}", serde_json::to_string(&run)?))?;
    Ok(())
}

/// `dx/dz` of the raw coordinate with respect to the standardised one.
fn inverse_slope(t: &PowerTransform, x: f64) -> f64 {
    let l = t.lambda;
    let dt_dx = if x >= 0.0 { (x + 1.0).powf(l - 1.0) } else { (1.0 - x).powf(1.0 - l) };
    t.std / dt_dx
}

#[derive(Serialize)]
struct Coordinates {
    longitude: f64,
    latitude: f64,
    altitude: f64,
}

impl From<Position3D> for Coordinates {
    fn from(p: Position3D) -> Self {
        Self {
            longitude: p.0[0],
            latitude: p.0[1],
            altitude: p.0[2],
        }
    }
}

#[derive(Serialize)]
struct ComponentReport {
    weight: f64,
    mean: Coordinates,
    /// Covariance mapped to raw units through the local slope of the inverse
    /// transform at the component mean.
    covariance: [[f64; 3]; 3],
    covariance_standardized: [[f64; 3]; 3],
}

#[derive(Serialize)]
struct PredictionReport {
    flight_id: u32,
    t: u32,
    lead_time: u32,
    mode: Coordinates,
    target: Coordinates,
    components: Vec<ComponentReport>,
}

pub fn predict(ckpt: &Path, data: &Path, index: usize) -> Result<()> {
    let (manifest, instances) = single_dataset(data)?;
    let inst = instances.get(index).ok_or_else(|| {
        Error::Usage(format!("instance {index} out of range: dataset holds {}", instances.len()))
    })?;
    let c = load_for(ckpt, &manifest)?;
    let pre = &c.preprocessor;
    let p = pre.prepare(inst)?;
    let mix = c.model.predict(&p.weather, &p.traffic)?;
    let mode = pre.target_original(&predict_mode(&mix)?)?;
    let mut components = Vec::with_capacity(mix.components());
    for k in 0..mix.components() {
        let mean = pre.target_original(&Position3D(mix.means[k]))?;
        let slope: [f64; 3] = std::array::from_fn(|i| inverse_slope(&pre.target[i], mean.0[i]));
        let s = mix.covariance(k);
        components.push(ComponentReport {
            weight: mix.alphas[k],
            mean: mean.into(),
            covariance: std::array::from_fn(|i| std::array::from_fn(|j| slope[i] * s[i][j] * slope[j])),
            covariance_standardized: s,
        });
    }
    let report = PredictionReport {
        flight_id: inst.flight_id,
        t: inst.t,
        lead_time: manifest.lead_time,
        mode: mode.into(),
        target: inst.target.into(),
        components,
    };
    emit(format_args!("{}", serde_json::to_string_pretty(&report)?))?;
    Ok(())
}

pub fn explain(ckpt: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let (manifest, instances) = single_dataset(data)?;
    let c = load_for(ckpt, &manifest)?;
    let prepared = c.preprocessor.prepare_all(&instances)?;
    let reports: Vec<AggregateSaliency> = OutputAttribute::ALL
        .iter()
        .map(|&a| aggregate_saliency(&c.model, &prepared, a))
        .collect::<Result<_>>()?;
    let out = output_dir(out, "explain");
    create_dir(&out)?;
    let path = out.join("saliency.csv");
    write_saliency_csv(&reports, &path)?;
    write_json(&out.join(SUMMARY), &reports)?;
    emit(format_args!("{}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess

fn read_grid_csv(path: &Path) -> Result<Grid> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(Error::from)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::ShapeMismatch {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 {
        return Err(Error::Usage(format!("{} holds no grid values", path.display())));
    }
    let height = rows.len();
    Grid::new(height, width, rows.into_iter().flatten().collect())
}

#[derive(Serialize)]
struct PreprocessReport {
    height: usize,
    width: usize,
    levels: usize,
    threshold: f64,
    drop_levels: usize,
    retained_fraction: f64,
}

pub fn preprocess(grid_path: &Path, threshold: f64, levels: Option<usize>, out: Option<&Path>) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Usage(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let grid = read_grid_csv(grid_path)?;
    let deepest = max_levels(grid.height, grid.width);
    let q = levels.unwrap_or(deepest);
    if deepest == 0 {
        return Err(Error::Usage(format!("a {}x{} grid cannot be decomposed", grid.height, grid.width)));
    }
    let pyramid = haar_decompose(&grid, q)?;
    let drop = select_drop_levels(&pyramid, threshold);
    let report = PreprocessReport {
        height: grid.height,
        width: grid.width,
        levels: q,
        threshold,
        drop_levels: drop,
        retained_fraction: pyramid.retained_fraction(drop),
    };
    if let Some(path) = out {
        let compressed = WaveletCompressor { levels: q, drop }.apply(&grid)?;
        let mut wr = csv::Writer::from_path(path).map_err(Error::from)?;
        for row in compressed.data.chunks(compressed.width) {
            wr.write_record(row.iter().map(|v| v.to_string())).map_err(Error::from)?;
        }
        wr.flush().map_err(|e| Error::io(path, e))?;
    }
    emit(format_args!("{}", serde_json::to_string(&report)?))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// export-plots

/// Run directories under `runs`: `runs` itself if it holds a report,
/// otherwise its subdirectories in name order.
fn run_dirs(runs: &Path) -> Result<Vec<PathBuf>> {
    if runs.join(EVAL_REPORT).is_file() {
        return Ok(vec![runs.to_path_buf()]);
    }
    let entries = fs::read_dir(runs).map_err(|e| Error::io(runs, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(runs, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn export_plots(runs: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut rows: Vec<RunReport> = Vec::new();
    let mut skipped = Vec::new();
    for dir in run_dirs(runs)? {
        let path = dir.join(EVAL_REPORT);
        if path.is_file() {
            rows.push(read_json(&path)?);
        } else {
            skipped.push(dir);
        }
    }
    for dir in &skipped {
        log::warn!("skipping {}: no {EVAL_REPORT}", dir.display());
    }
    if rows.is_empty() {
        return Err(Error::Usage(format!("no evaluation reports under {}", runs.display())));
    }
    rows.sort_by_key(|r| r.lead_time);

    let path = out.unwrap_or_else(|| output_dir(None, "export-plots").join("metrics_by_lead_time.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut wr = csv::Writer::from_path(&path).map_err(Error::from)?;
    wr.write_record(PLOT_COLUMNS).map_err(Error::from)?;
    for r in &rows {
        let m = &r.report.metrics;
        wr.write_record([
            r.lead_time.to_string(),
            m.mape_transformed.to_string(),
            m.mape_transformed_sem.to_string(),
            m.r2_transformed.to_string(),
            m.r2_transformed_sem.to_string(),
        ])
        .map_err(Error::from)?;
    }
    wr.flush().map_err(|e| Error::io(&path, e))?;
    emit(format_args!("{}", path.display()))?;
    Ok(())
}
