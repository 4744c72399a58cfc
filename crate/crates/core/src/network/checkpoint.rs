//! Versioned binary checkpoint.
//!
//! ```text
//! magic            8 bytes  "TGMMCKPT"
//! version          u32
//! header length    u32
//! header           JSON: { config, seed, parameter_names }
//! tensor count     u32
//! per tensor       u32 ndim, ndim × u64 dims, f64 values
//! transforms       9 × (f64 λ, u64 fitted_on, f64 mean, f64 std)
//!                  6 traffic features then longitude, latitude, altitude
//! wavelet          3 × (u32 levels, u32 drop)
//! channel scales   3 × f64
//! grid shape       2 × u64
//! end marker       4 bytes  "END."
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::preprocess::{PowerTransform, Preprocessor, WaveletCompressor};
use crate::{Error, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TGMMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const END_MARKER: &[u8; 4] = b"END.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub preprocessor: Preprocessor,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    seed: u64,
    parameter_names: Vec<String>,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(b: &mut Vec<u8>, v: f64) {
    b.extend_from_slice(&v.to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION);
        let header = serde_json::to_vec(&Header {
            config: self.model.config().clone(),
            seed: self.seed,
            parameter_names: self.model.parameter_names().to_vec(),
        })?;
        put_u32(&mut b, header.len() as u32);
        b.extend_from_slice(&header);
        let params = self.model.parameters();
        put_u32(&mut b, params.len() as u32);
        for p in params {
            put_u32(&mut b, p.ndim() as u32);
            for &d in p.shape() {
                put_u64(&mut b, d as u64);
            }
            for &v in p.data() {
                put_f64(&mut b, v);
            }
        }
        let pre = &self.preprocessor;
        for t in pre.traffic.iter().chain(&pre.target) {
            put_f64(&mut b, t.lambda);
            put_u64(&mut b, t.fitted_on as u64);
            put_f64(&mut b, t.mean);
            put_f64(&mut b, t.std);
        }
        for w in &pre.wavelet {
            put_u32(&mut b, w.levels as u32);
            put_u32(&mut b, w.drop as u32);
        }
        for &s in &pre.channel_scale {
            put_f64(&mut b, s);
        }
        for &d in &pre.grid_shape {
            put_u64(&mut b, d as u64);
        }
        b.extend_from_slice(END_MARKER);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| r.corrupt(&format!("header: {e}")))?;
        let count = r.u32()? as usize;
        if count != header.parameter_names.len() {
            return Err(r.corrupt("tensor count disagrees with header"));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.corrupt("implausible tensor rank"));
            }
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = match n {
                Some(n) if n.saturating_mul(8) <= r.remaining() => n,
                _ => return Err(r.corrupt("tensor larger than the file")),
            };
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push(Tensor::new(shape, data)?);
        }
        let mut transforms = [PowerTransform::identity(); 9];
        for t in transforms.iter_mut() {
            *t = PowerTransform {
                lambda: r.f64()?,
                fitted_on: r.u64()? as usize,
                mean: r.f64()?,
                std: r.f64()?,
            };
        }
        let mut wavelet = [WaveletCompressor { levels: 0, drop: 0 }; 3];
        for w in wavelet.iter_mut() {
            w.levels = r.u32()? as usize;
            w.drop = r.u32()? as usize;
        }
        let channel_scale = [r.f64()?, r.f64()?, r.f64()?];
        let grid_shape = [r.u64()? as usize, r.u64()? as usize];
        if r.take(4)? != END_MARKER {
            return Err(r.corrupt("missing end marker"));
        }
        if r.remaining() != 0 {
            return Err(r.corrupt("trailing bytes after end marker"));
        }
        let model = Model::from_parameters(header.config, params)?;
        if model.parameter_names() != header.parameter_names.as_slice() {
            return Err(r.corrupt("parameter names disagree with the config layout"));
        }
        let mut traffic = [PowerTransform::identity(); 6];
        traffic.copy_from_slice(&transforms[..6]);
        let mut target = [PowerTransform::identity(); 3];
        target.copy_from_slice(&transforms[6..]);
        Ok(Self {
            model,
            preprocessor: Preprocessor {
                traffic,
                target,
                wavelet,
                channel_scale,
                grid_shape,
            },
            seed: header.seed,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: &str) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.corrupt("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
