//! Synthetic airspace scenarios, lead-time instances and the on-disk dataset
//! format.
//!
//! Dynamics use a flat-earth local frame over a fixed region box: `x` is
//! kilometres east of the western edge, `y` kilometres north of the southern
//! edge. Grid row 0 is the southern edge and column 0 the western edge.

mod dataset;
mod instances;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

pub use dataset::{read_dataset, read_manifest, write_dataset, DatasetManifest, GeneratorInfo, CHANNEL_ORDER, DATASET_FORMAT_VERSION};
pub use instances::{build_instances, frame_times, Instance, WeatherStack, SUPPORTED_LEAD_TIMES};

pub const LON_RANGE: (f64, f64) = (20.0, 36.0);
pub const LAT_RANGE: (f64, f64) = (46.0, 56.0);
pub const KM_PER_DEG_LAT: f64 = 111.32;
pub const CONVECTIVE_CADENCE: u32 = 15;
pub const WIND_CADENCE: u32 = 60;
/// Cells whose peak intensity exceeds this are avoided.
pub const AVOID_THRESHOLD: f64 = 0.5;
/// Avoidance radius in units of the cell's σ.
pub const AVOID_RADIUS_SIGMAS: f64 = 1.5;
pub const CELL_SIGMA_PX: (f64, f64) = (4.0, 6.0);
pub const KT_TO_KM_PER_MIN: f64 = 1.852 / 60.0;

const ALT_LIMITS_FT: (f64, f64) = (10_000.0, 41_000.0);
const LOOKAHEAD_MIN: usize = 6;
const HEADING_STEP_DEG: f64 = 5.0;
const MAX_DEFLECTION_DEG: f64 = 120.0;
const REJOIN_GAIN_DEG_PER_KM: f64 = 1.0;
const REJOIN_MAX_DEG: f64 = 30.0;
const REJOIN_TOLERANCE_KM: f64 = 0.5;

fn km_per_deg_lon() -> f64 {
    KM_PER_DEG_LAT * (0.5 * (LAT_RANGE.0 + LAT_RANGE.1)).to_radians().cos()
}

/// Extent of the region box in kilometres (east, north).
pub fn region_km() -> (f64, f64) {
    (
        (LON_RANGE.1 - LON_RANGE.0) * km_per_deg_lon(),
        (LAT_RANGE.1 - LAT_RANGE.0) * KM_PER_DEG_LAT,
    )
}

pub fn to_lon_lat(x: f64, y: f64) -> (f64, f64) {
    (LON_RANGE.0 + x / km_per_deg_lon(), LAT_RANGE.0 + y / KM_PER_DEG_LAT)
}

pub fn to_km(lon: f64, lat: f64) -> (f64, f64) {
    ((lon - LON_RANGE.0) * km_per_deg_lon(), (lat - LAT_RANGE.0) * KM_PER_DEG_LAT)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_flights: usize,
    pub duration_min: u32,
    /// (height, width)
    pub grid: [usize; 2],
    pub n_storm_cells: usize,
    /// Typical wind speed in knots; 0 disables wind.
    pub wind_strength: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_flights: 200,
            duration_min: 120,
            grid: [32, 32],
            n_storm_cells: 6,
            wind_strength: 40.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let max_lead = *SUPPORTED_LEAD_TIMES.last().expect("non-empty");
        if self.duration_min < 2 * max_lead {
            return Err(Error::Config(format!(
                "duration must be at least {} minutes, got {}",
                2 * max_lead,
                self.duration_min
            )));
        }
        if self.n_flights == 0 {
            return Err(Error::Config("n_flights must be positive".into()));
        }
        let [h, w] = self.grid;
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("grid {h}x{w} is too small")));
        }
        let need = (2.0 * AVOID_RADIUS_SIGMAS * CELL_SIGMA_PX.1).ceil() as usize;
        if self.n_storm_cells > 0 && h.min(w) < need {
            return Err(Error::Config(format!(
                "grid {h}x{w} cannot host storm cells: avoidance radius needs at least {need} pixels per side"
            )));
        }
        if !(self.wind_strength >= 0.0 && self.wind_strength.is_finite()) {
            return Err(Error::Config(format!("wind_strength must be non-negative, got {}", self.wind_strength)));
        }
        Ok(())
    }

    pub fn pixel_km(&self) -> (f64, f64) {
        let (wx, wy) = region_km();
        (wx / self.grid[1] as f64, wy / self.grid[0] as f64)
    }
}

/// One sinusoidal wind mode: `amp · sin(k·p + ω t + φ)` per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindMode {
    /// rad/km
    pub k: [f64; 2],
    /// rad/min
    pub omega: f64,
    pub phase: f64,
    /// km/min
    pub amp: [f64; 2],
}

/// Smooth low-order harmonic wind field, single level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindField {
    /// km/min
    pub mean: [f64; 2],
    pub modes: Vec<WindMode>,
}

impl WindField {
    pub fn calm() -> Self {
        Self {
            mean: [0.0, 0.0],
            modes: Vec::new(),
        }
    }

    fn random<R: Rng>(strength_kt: f64, r: &mut R) -> Self {
        if strength_kt == 0.0 {
            return Self::calm();
        }
        let s = strength_kt * KT_TO_KM_PER_MIN;
        let dir: f64 = r.gen_range(0.0..std::f64::consts::TAU);
        let (wx, wy) = region_km();
        let modes = (0..3)
            .map(|_| {
                let m = r.gen_range(1..=2) as f64;
                let n = r.gen_range(-2..=2) as f64;
                WindMode {
                    k: [std::f64::consts::TAU * m / wx, std::f64::consts::TAU * n / wy],
                    omega: std::f64::consts::TAU / r.gen_range(240.0..480.0),
                    phase: r.gen_range(0.0..std::f64::consts::TAU),
                    amp: [s * r.gen_range(-0.3..0.3), s * r.gen_range(-0.3..0.3)],
                }
            })
            .collect();
        Self {
            mean: [0.6 * s * dir.sin(), 0.6 * s * dir.cos()],
            modes,
        }
    }

    /// Wind velocity (km/min, east and north) at `(x, y)` km and time `t` min.
    pub fn velocity(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let mut v = self.mean;
        for m in &self.modes {
            let s = (m.k[0] * x + m.k[1] * y + m.omega * t + m.phase).sin();
            v[0] += m.amp[0] * s;
            v[1] += m.amp[1] * s;
        }
        v
    }

    /// Exact displacement `∫₀^Δ w(p₀ + v s, t₀ + s) ds` along a straight path.
    pub fn drift(&self, p0: [f64; 2], v: [f64; 2], t0: f64, dt: f64) -> [f64; 2] {
        let mut d = [self.mean[0] * dt, self.mean[1] * dt];
        for m in &self.modes {
            let a = m.k[0] * p0[0] + m.k[1] * p0[1] + m.omega * t0 + m.phase;
            let b = m.k[0] * v[0] + m.k[1] * v[1] + m.omega;
            let integral = if b.abs() < 1e-12 {
                a.sin() * dt
            } else {
                (a.cos() - (a + b * dt).cos()) / b
            };
            d[0] += m.amp[0] * integral;
            d[1] += m.amp[1] * integral;
        }
        d
    }
}

/// Drifting Gaussian convective cell in pixel coordinates (column, row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StormCell {
    pub centre: [f64; 2],
    /// pixels/min
    pub velocity: [f64; 2],
    pub sigma: f64,
    pub peak: f64,
}

impl StormCell {
    pub fn centre_at(&self, t: f64) -> [f64; 2] {
        [self.centre[0] + self.velocity[0] * t, self.centre[1] + self.velocity[1] * t]
    }

    pub fn avoided(&self) -> bool {
        self.peak > AVOID_THRESHOLD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub t: u32,
    pub lon: f64,
    pub lat: f64,
    /// ft
    pub alt: f64,
    /// kt
    pub ground_speed: f64,
    /// degrees in [0, 360)
    pub heading: f64,
    /// ft/min
    pub vertical_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlightTrack {
    pub flight_id: u32,
    pub samples: Vec<TrackSample>,
}

/// A time-stamped grid, row-major `[H×W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub time: u32,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherFrameSeries {
    pub height: usize,
    pub width: usize,
    pub convective: Vec<Frame>,
    pub u_wind: Vec<Frame>,
    pub v_wind: Vec<Frame>,
}

/// Everything a generator run produces; the ground truth fields (`wind`,
/// `cells`) are kept for tests and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub tracks: Vec<FlightTrack>,
    pub weather: WeatherFrameSeries,
    pub wind: WindField,
    pub cells: Vec<StormCell>,
    pub plans: Vec<FlightPlan>,
}

/// Initial state of one flight in the local frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlightPlan {
    pub start: [f64; 2],
    /// degrees clockwise from north
    pub heading: f64,
    /// kt
    pub airspeed: f64,
    /// ft
    pub altitude: f64,
    /// ft/min
    pub vertical_rate: f64,
}

impl FlightPlan {
    fn air_velocity(&self, heading: f64) -> [f64; 2] {
        let s = self.airspeed * KT_TO_KM_PER_MIN;
        let h = heading.to_radians();
        [s * h.sin(), s * h.cos()]
    }
}

struct Obstacle {
    cell: StormCell,
    radius_km: f64,
}

fn cell_km(cell: &StormCell, t: f64, px: (f64, f64)) -> [f64; 2] {
    let c = cell.centre_at(t);
    [c[0] * px.0, c[1] * px.1]
}

fn segment_distance(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ac = [c[0] - a[0], c[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if len2 == 0.0 {
        0.0
    } else {
        ((ac[0] * ab[0] + ac[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let d = [a[0] + s * ab[0] - c[0], a[1] + s * ab[1] - c[1]];
    d[0].hypot(d[1])
}

fn wrap_degrees(h: f64) -> f64 {
    let w = h.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Integrates one flight at one-minute steps.
///
/// The aircraft flies its planned air heading; ground position is the air
/// path plus the wind drift integrated along each one-minute air segment.
/// Before each step the heading closest to the desired one (on a 5° lattice,
/// alternating sides) whose projected path keeps the avoidance radius from
/// every avoided cell is chosen. After a deviation the desired heading steers
/// back onto the planned air line.
pub fn fly(
    flight_id: u32,
    plan: &FlightPlan,
    duration: u32,
    wind: &WindField,
    cells: &[StormCell],
    pixel_km: (f64, f64),
) -> FlightTrack {
    let obstacles: Vec<Obstacle> = cells
        .iter()
        .filter(|c| c.avoided())
        .map(|c| Obstacle {
            cell: c.clone(),
            radius_km: AVOID_RADIUS_SIGMAS * c.sigma * 0.5 * (pixel_km.0 + pixel_km.1),
        })
        .collect();
    let clear = |p: [f64; 2], heading: f64, t0: f64, air: [f64; 2], steps: usize| -> bool {
        let v = plan.air_velocity(heading);
        let (mut a, mut g) = (air, p);
        for s in 0..steps {
            let t = t0 + s as f64;
            let d = wind.drift(a, v, t, 1.0);
            let a1 = [a[0] + v[0], a[1] + v[1]];
            let g1 = [g[0] + v[0] + d[0], g[1] + v[1] + d[1]];
            for o in &obstacles {
                if segment_distance(g, g1, cell_km(&o.cell, t + 1.0, pixel_km)) < o.radius_km {
                    return false;
                }
            }
            a = a1;
            g = g1;
        }
        true
    };

    let planned = plan.heading;
    let dir = plan.air_velocity(planned);
    let dir_norm = dir[0].hypot(dir[1]);
    let mut deviated = false;
    let mut air = plan.start;
    let mut ground = plan.start;
    let mut samples = Vec::with_capacity(duration as usize);
    for i in 0..duration {
        let t = i as f64;
        let desired = if deviated {
            let off = [air[0] - plan.start[0], air[1] - plan.start[1]];
            let cross = (off[0] * dir[1] - off[1] * dir[0]) / dir_norm;
            if cross.abs() < REJOIN_TOLERANCE_KM {
                deviated = false;
                planned
            } else {
                planned + (cross * REJOIN_GAIN_DEG_PER_KM).clamp(-REJOIN_MAX_DEG, REJOIN_MAX_DEG)
            }
        } else {
            planned
        };
        let mut heading = desired;
        if !obstacles.is_empty() && !clear(ground, desired, t, air, LOOKAHEAD_MIN) {
            let steps = (MAX_DEFLECTION_DEG / HEADING_STEP_DEG) as usize;
            let candidates = (1..=steps).flat_map(|k| {
                let d = k as f64 * HEADING_STEP_DEG;
                [desired + d, desired - d]
            });
            let chosen = candidates
                .clone()
                .find(|&h| clear(ground, h, t, air, LOOKAHEAD_MIN))
                .or_else(|| candidates.clone().find(|&h| clear(ground, h, t, air, 1)));
            if let Some(h) = chosen {
                heading = h;
                deviated = true;
            }
        }

        let (lon, lat) = to_lon_lat(ground[0], ground[1]);
        let v = plan.air_velocity(heading);
        let w = wind.velocity(air[0], air[1], t);
        samples.push(TrackSample {
            t: i,
            lon,
            lat,
            alt: plan.altitude + plan.vertical_rate * t,
            ground_speed: (v[0] + w[0]).hypot(v[1] + w[1]) / KT_TO_KM_PER_MIN,
            heading: wrap_degrees(heading),
            vertical_rate: plan.vertical_rate,
        });

        let d = wind.drift(air, v, t, 1.0);
        ground = [ground[0] + v[0] + d[0], ground[1] + v[1] + d[1]];
        air = [air[0] + v[0], air[1] + v[1]];
    }
    FlightTrack { flight_id, samples }
}

fn random_plan<R: Rng>(cfg: &ScenarioConfig, cells: &[StormCell], r: &mut R) -> FlightPlan {
    let (wx, wy) = region_km();
    let px = cfg.pixel_km();
    let mut start = [0.0; 2];
    for _ in 0..100 {
        start = [r.gen_range(0.1 * wx..0.9 * wx), r.gen_range(0.1 * wy..0.9 * wy)];
        let free = cells.iter().filter(|c| c.avoided()).all(|c| {
            let ck = cell_km(c, 0.0, px);
            let radius = AVOID_RADIUS_SIGMAS * c.sigma * 0.5 * (px.0 + px.1);
            (start[0] - ck[0]).hypot(start[1] - ck[1]) > 1.2 * radius
        });
        if free {
            break;
        }
    }
    let to_centre = (0.5 * wx - start[0]).atan2(0.5 * wy - start[1]).to_degrees();
    let heading = wrap_degrees(to_centre + r.gen_range(-60.0..60.0));
    let altitude = r.gen_range(24_000.0..38_000.0);
    let span = cfg.duration_min as f64;
    let vertical_rate = if r.gen_bool(0.5) {
        0.0
    } else {
        let rate: f64 = r.gen_range(300.0..1_500.0);
        if r.gen_bool(0.5) {
            rate.min((ALT_LIMITS_FT.1 - altitude) / span)
        } else {
            -rate.min((altitude - ALT_LIMITS_FT.0) / span)
        }
    };
    FlightPlan {
        start,
        heading,
        airspeed: r.gen_range(380.0..480.0),
        altitude,
        vertical_rate,
    }
}

fn random_cells<R: Rng>(cfg: &ScenarioConfig, r: &mut R) -> Vec<StormCell> {
    let [h, w] = cfg.grid;
    (0..cfg.n_storm_cells)
        .map(|_| {
            let speed = r.gen_range(0.0..0.04);
            let dir: f64 = r.gen_range(0.0..std::f64::consts::TAU);
            StormCell {
                centre: [r.gen_range(0.0..w as f64), r.gen_range(0.0..h as f64)],
                velocity: [speed * dir.cos(), speed * dir.sin()],
                sigma: r.gen_range(CELL_SIGMA_PX.0..CELL_SIGMA_PX.1),
                peak: r.gen_range(0.3..1.0),
            }
        })
        .collect()
}

/// Convective intensity grid at time `t`.
pub fn convective_grid(cells: &[StormCell], height: usize, width: usize, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    for c in cells {
        let [cx, cy] = c.centre_at(t);
        let inv = 1.0 / (2.0 * c.sigma * c.sigma);
        for i in 0..height {
            let dy = i as f64 + 0.5 - cy;
            for j in 0..width {
                let dx = j as f64 + 0.5 - cx;
                out[i * width + j] += c.peak * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    out
}

/// Wind grids (knots) at time `t`, sampled at pixel centres.
pub fn wind_grids(wind: &WindField, height: usize, width: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
    let (wx, wy) = region_km();
    let (pw, ph) = (wx / width as f64, wy / height as f64);
    let mut u = vec![0.0; height * width];
    let mut v = vec![0.0; height * width];
    for i in 0..height {
        for j in 0..width {
            let w = wind.velocity((j as f64 + 0.5) * pw, (i as f64 + 0.5) * ph, t);
            u[i * width + j] = w[0] / KT_TO_KM_PER_MIN;
            v[i * width + j] = w[1] / KT_TO_KM_PER_MIN;
        }
    }
    (u, v)
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Generates tracks and weather frames; deterministic given `seed`.
pub fn generate_scenario(seed: u64, cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let [h, w] = cfg.grid;
    let wind = WindField::random(cfg.wind_strength, &mut rng::derived(seed, &[1]));
    let cells = random_cells(cfg, &mut rng::derived(seed, &[2]));
    let px = cfg.pixel_km();

    let plans: Vec<FlightPlan> = (0..cfg.n_flights)
        .map(|i| random_plan(cfg, &cells, &mut rng::derived(seed, &[3, i as u64])))
        .collect();
    let tracks: Vec<FlightTrack> = plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| fly(i as u32, plan, cfg.duration_min, &wind, &cells, px))
        .collect();

    let convective = (0..cfg.duration_min)
        .step_by(CONVECTIVE_CADENCE as usize)
        .map(|t| Frame {
            time: t,
            data: to_f32(convective_grid(&cells, h, w, t as f64)),
        })
        .collect();
    let (mut u_wind, mut v_wind) = (Vec::new(), Vec::new());
    for t in (0..cfg.duration_min).step_by(WIND_CADENCE as usize) {
        let (u, v) = wind_grids(&wind, h, w, t as f64);
        u_wind.push(Frame { time: t, data: to_f32(u) });
        v_wind.push(Frame { time: t, data: to_f32(v) });
    }
    Ok(Scenario {
        config: cfg.clone(),
        seed,
        tracks,
        weather: WeatherFrameSeries {
            height: h,
            width: w,
            convective,
            u_wind,
            v_wind,
        },
        wind,
        cells,
        plans,
    })
}
