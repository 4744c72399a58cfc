//! Dataset directory layout:
//!
//! ```text
//! manifest.json        format version, grid shape, channel order, counts
//! traffic.csv          one row per instance
//! grids/<index>.bin    3·H·W little-endian f32, channel-major
//! ```
//!
//! `traffic.csv` columns: `flight_id, t, latitude, longitude, altitude,
//! ground_speed, heading, vertical_rate, target_longitude, target_latitude,
//! target_altitude, lead_time`. Any directory in this layout can be read,
//! whether produced by the generator or imported from elsewhere.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Instance, Scenario, ScenarioConfig, WeatherStack};
use crate::mixture::Position3D;
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const CHANNEL_ORDER: [&str; 3] = ["convective", "u_wind", "v_wind"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub seed: u64,
    /// SHA-256 of the JSON-encoded generator config.
    pub config_hash: String,
    /// True when the scenario has no storm cells.
    pub zero_weather: bool,
    pub config: ScenarioConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// (height, width)
    pub grid_shape: [usize; 2],
    pub channel_order: Vec<String>,
    pub instance_count: usize,
    pub lead_time: u32,
    #[serde(default)]
    pub generator: Option<GeneratorInfo>,
}

impl DatasetManifest {
    pub fn new(grid_shape: [usize; 2], instance_count: usize, lead_time: u32) -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            grid_shape,
            channel_order: CHANNEL_ORDER.iter().map(|s| s.to_string()).collect(),
            instance_count,
            lead_time,
            generator: None,
        }
    }

    pub fn for_scenario(scenario: &Scenario, instance_count: usize, lead_time: u32) -> Result<Self> {
        let json = serde_json::to_vec(&scenario.config)?;
        let mut m = Self::new(scenario.config.grid, instance_count, lead_time);
        m.generator = Some(GeneratorInfo {
            seed: scenario.seed,
            config_hash: hex::encode(Sha256::digest(&json)),
            zero_weather: scenario.config.n_storm_cells == 0,
            config: scenario.config.clone(),
        });
        Ok(m)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    flight_id: u32,
    t: u32,
    latitude: f64,
    longitude: f64,
    altitude: f64,
    ground_speed: f64,
    heading: f64,
    vertical_rate: f64,
    target_longitude: f64,
    target_latitude: f64,
    target_altitude: f64,
    lead_time: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn write_dataset(instances: &[Instance], manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    if manifest.instance_count != instances.len() {
        return Err(Error::Integrity(format!(
            "manifest declares {} instances, writing {}",
            manifest.instance_count,
            instances.len()
        )));
    }
    let [h, w] = manifest.grid_shape;
    let grids = dir.join("grids");
    fs::create_dir_all(&grids).map_err(io_err(&grids))?;

    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;

    let csv_path = dir.join("traffic.csv");
    let mut wr = csv::Writer::from_path(&csv_path)?;
    for (i, inst) in instances.iter().enumerate() {
        if inst.lead_time != manifest.lead_time {
            return Err(Error::Integrity(format!(
                "instance {i} has lead time {}, manifest says {}",
                inst.lead_time, manifest.lead_time
            )));
        }
        if (inst.weather.height, inst.weather.width) != (h, w) || inst.weather.data.len() != 3 * h * w {
            return Err(Error::ShapeMismatch {
                path: grids.join(format!("{i}.bin")),
                reason: format!("instance grid is {}x{}, manifest says {h}x{w}", inst.weather.height, inst.weather.width),
            });
        }
        let f = &inst.traffic;
        wr.serialize(Row {
            flight_id: inst.flight_id,
            t: inst.t,
            latitude: f[0],
            longitude: f[1],
            altitude: f[2],
            ground_speed: f[3],
            heading: f[4],
            vertical_rate: f[5],
            target_longitude: inst.target.0[0],
            target_latitude: inst.target.0[1],
            target_altitude: inst.target.0[2],
            lead_time: inst.lead_time,
        })?;
        let bytes: Vec<u8> = inst.weather.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = grids.join(format!("{i}.bin"));
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    wr.flush().map_err(io_err(&csv_path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    if manifest.channel_order != CHANNEL_ORDER {
        return Err(Error::ShapeMismatch {
            path,
            reason: format!("channel order {:?}, expected {CHANNEL_ORDER:?}", manifest.channel_order),
        });
    }
    Ok(manifest)
}

/// Reads and validates a dataset directory. Identical weather stacks are
/// shared between instances.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Instance>)> {
    let manifest = read_manifest(dir)?;
    let [h, w] = manifest.grid_shape;
    let expected_bytes = 3 * h * w * 4;

    let csv_path = dir.join("traffic.csv");
    let mut rd = csv::Reader::from_path(&csv_path)?;
    let rows: Vec<Row> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
    if rows.len() != manifest.instance_count {
        return Err(Error::Integrity(format!(
            "manifest declares {} instances, traffic.csv holds {}",
            manifest.instance_count,
            rows.len()
        )));
    }

    let mut shared: HashMap<[u8; 32], Arc<WeatherStack>> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        if row.lead_time != manifest.lead_time {
            return Err(Error::Integrity(format!(
                "row {i} has lead time {}, manifest says {}",
                row.lead_time, manifest.lead_time
            )));
        }
        let p = dir.join("grids").join(format!("{i}.bin"));
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        if bytes.len() != expected_bytes {
            return Err(Error::ShapeMismatch {
                path: p,
                reason: format!("{} bytes, expected {expected_bytes} for 3x{h}x{w} f32", bytes.len()),
            });
        }
        let key: [u8; 32] = Sha256::digest(&bytes).into();
        let weather = shared
            .entry(key)
            .or_insert_with(|| {
                Arc::new(WeatherStack {
                    height: h,
                    width: w,
                    data: bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                })
            })
            .clone();
        out.push(Instance {
            flight_id: row.flight_id,
            t: row.t,
            lead_time: row.lead_time,
            traffic: [
                row.latitude,
                row.longitude,
                row.altitude,
                row.ground_speed,
                row.heading,
                row.vertical_rate,
            ],
            target: Position3D::new(row.target_longitude, row.target_latitude, row.target_altitude),
            weather,
        });
    }
    Ok((manifest, out))
}
