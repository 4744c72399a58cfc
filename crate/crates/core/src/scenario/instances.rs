use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FlightTrack, Frame, WeatherFrameSeries, CONVECTIVE_CADENCE, WIND_CADENCE};
use crate::mixture::Position3D;
use crate::{Error, Result};

/// Lead times (minutes) for which instances can be built.
pub const SUPPORTED_LEAD_TIMES: [u32; 7] = [1, 2, 5, 10, 30, 45, 60];

/// Three weather channels, channel-major: convective, u wind, v wind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherStack {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl WeatherStack {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub flight_id: u32,
    pub t: u32,
    pub lead_time: u32,
    /// latitude, longitude, altitude, ground speed, heading, vertical rate
    pub traffic: [f64; 6],
    /// Raw (longitude, latitude, altitude) at `t + lead_time`.
    pub target: Position3D,
    pub weather: Arc<WeatherStack>,
}

/// Timestamps of the convective and wind frames attached at time `t`: the
/// latest frame at or before `t` for each cadence.
pub fn frame_times(t: u32) -> (u32, u32) {
    (t / CONVECTIVE_CADENCE * CONVECTIVE_CADENCE, t / WIND_CADENCE * WIND_CADENCE)
}

fn frame_at(frames: &[Frame], time: u32) -> Result<&Frame> {
    frames
        .iter()
        .find(|f| f.time == time)
        .ok_or_else(|| Error::Usage(format!("no weather frame stamped {time} min")))
}

/// One instance per `(flight, t)` with both `t` and `t + τ` in the track.
pub fn build_instances(tracks: &[FlightTrack], weather: &WeatherFrameSeries, lead_time: u32) -> Result<Vec<Instance>> {
    if !SUPPORTED_LEAD_TIMES.contains(&lead_time) {
        return Err(Error::Usage(format!(
            "lead time {lead_time} min is not one of {SUPPORTED_LEAD_TIMES:?}"
        )));
    }
    let mut stacks: HashMap<(u32, u32), Arc<WeatherStack>> = HashMap::new();
    let mut out = Vec::new();
    for track in tracks {
        let s = &track.samples;
        let tau = lead_time as usize;
        if s.len() <= tau {
            continue;
        }
        for i in 0..s.len() - tau {
            let (now, later) = (&s[i], &s[i + tau]);
            if later.t != now.t + lead_time {
                return Err(Error::Usage(format!(
                    "flight {} is not sampled at one-minute cadence near t = {}",
                    track.flight_id, now.t
                )));
            }
            let key = frame_times(now.t);
            let stack = match stacks.get(&key) {
                Some(st) => st.clone(),
                None => {
                    let conv = frame_at(&weather.convective, key.0)?;
                    let u = frame_at(&weather.u_wind, key.1)?;
                    let v = frame_at(&weather.v_wind, key.1)?;
                    let mut data = Vec::with_capacity(3 * conv.data.len());
                    data.extend_from_slice(&conv.data);
                    data.extend_from_slice(&u.data);
                    data.extend_from_slice(&v.data);
                    let st = Arc::new(WeatherStack {
                        height: weather.height,
                        width: weather.width,
                        data,
                    });
                    stacks.insert(key, st.clone());
                    st
                }
            };
            out.push(Instance {
                flight_id: track.flight_id,
                t: now.t,
                lead_time,
                traffic: [now.lat, now.lon, now.alt, now.ground_speed, now.heading, now.vertical_rate],
                target: Position3D::new(later.lon, later.lat, later.alt),
                weather: stack,
            });
        }
    }
    if out.is_empty() {
        log::warn!("lead time {lead_time} min exceeds every track; no instances built");
    }
    Ok(out)
}
