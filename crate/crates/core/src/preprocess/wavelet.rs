//! Orthonormal 2-D Haar (db1) multilevel analysis and level-dropping
//! compression.
//!
//! Each 2x2 block `[[a, b], [c, d]]` maps to
//! `LL = (a+b+c+d)/2`, `LH = (a+b−c−d)/2`, `HL = (a−b+c−d)/2`,
//! `HH = (a−b−c+d)/2`, and the analysis recurses on `LL`. Odd dimensions are
//! padded by replicating the last row/column before each level and cropped
//! again on synthesis. Level 0 is the finest.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A row-major 2-D field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Dimension(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailLevel {
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
    /// Shape of each detail band.
    pub band_shape: (usize, usize),
    /// Shape of the input to this level before padding.
    pub input_shape: (usize, usize),
}

impl DetailLevel {
    pub fn energy(&self) -> f64 {
        [&self.lh, &self.hl, &self.hh]
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveletPyramid {
    pub levels: Vec<DetailLevel>,
    pub approx: Grid,
    pub original_shape: (usize, usize),
}

/// Largest admissible depth for a grid: `⌊log₂ min(H, W)⌋`.
pub fn max_levels(height: usize, width: usize) -> usize {
    let m = height.min(width);
    if m == 0 {
        0
    } else {
        (usize::BITS - 1 - m.leading_zeros()) as usize
    }
}

fn analyse(grid: &Grid) -> (Grid, DetailLevel) {
    let (h, w) = (grid.height, grid.width);
    let (bh, bw) = (h.div_ceil(2), w.div_ceil(2));
    let clamp_y = |y: usize| y.min(h - 1);
    let clamp_x = |x: usize| x.min(w - 1);
    let n = bh * bw;
    let (mut ll, mut lh, mut hl, mut hh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..bh {
        for j in 0..bw {
            let a = grid.at(clamp_y(2 * i), clamp_x(2 * j));
            let b = grid.at(clamp_y(2 * i), clamp_x(2 * j + 1));
            let c = grid.at(clamp_y(2 * i + 1), clamp_x(2 * j));
            let d = grid.at(clamp_y(2 * i + 1), clamp_x(2 * j + 1));
            let k = i * bw + j;
            ll[k] = 0.5 * (a + b + c + d);
            lh[k] = 0.5 * (a + b - c - d);
            hl[k] = 0.5 * (a - b + c - d);
            hh[k] = 0.5 * (a - b - c + d);
        }
    }
    (
        Grid {
            height: bh,
            width: bw,
            data: ll,
        },
        DetailLevel {
            lh,
            hl,
            hh,
            band_shape: (bh, bw),
            input_shape: (h, w),
        },
    )
}

fn synthesise(approx: &Grid, level: &DetailLevel, zero_details: bool) -> Grid {
    let (bh, bw) = level.band_shape;
    let (h, w) = level.input_shape;
    let mut out = vec![0.0; h * w];
    for i in 0..bh {
        for j in 0..bw {
            let k = i * bw + j;
            let s = approx.data[k];
            let (lh, hl, hh) = if zero_details {
                (0.0, 0.0, 0.0)
            } else {
                (level.lh[k], level.hl[k], level.hh[k])
            };
            let block = [
                0.5 * (s + lh + hl + hh),
                0.5 * (s + lh - hl - hh),
                0.5 * (s - lh + hl - hh),
                0.5 * (s - lh - hl + hh),
            ];
            for (q, v) in block.into_iter().enumerate() {
                let (y, x) = (2 * i + q / 2, 2 * j + q % 2);
                if y < h && x < w {
                    out[y * w + x] = v;
                }
            }
        }
    }
    Grid {
        height: h,
        width: w,
        data: out,
    }
}

pub fn haar_decompose(grid: &Grid, levels: usize) -> Result<WaveletPyramid> {
    let limit = max_levels(grid.height, grid.width);
    if levels == 0 || levels > limit {
        return Err(Error::Config(format!(
            "Haar depth must lie in 1..={limit} for a {}x{} grid, got {levels}",
            grid.height, grid.width
        )));
    }
    let mut details = Vec::with_capacity(levels);
    let mut current = grid.clone();
    for _ in 0..levels {
        let (ll, d) = analyse(&current);
        details.push(d);
        current = ll;
    }
    Ok(WaveletPyramid {
        levels: details,
        approx: current,
        original_shape: (grid.height, grid.width),
    })
}

/// Synthesis with the `drop_finest` finest detail levels zeroed.
pub fn haar_reconstruct(pyramid: &WaveletPyramid, drop_finest: usize) -> Result<Grid> {
    if drop_finest >= pyramid.depth() {
        return Err(Error::Config(format!(
            "cannot drop {drop_finest} of {} levels",
            pyramid.depth()
        )));
    }
    let mut current = pyramid.approx.clone();
    for (q, level) in pyramid.levels.iter().enumerate().rev() {
        current = synthesise(&current, level, q < drop_finest);
    }
    Ok(current)
}

impl WaveletPyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Total coefficient energy.
    pub fn energy(&self) -> f64 {
        self.approx.energy() + self.levels.iter().map(DetailLevel::energy).sum::<f64>()
    }

    /// Fraction of coefficient energy kept when the `drop` finest levels are
    /// zeroed. A zero-energy pyramid keeps everything.
    pub fn retained_fraction(&self, drop: usize) -> f64 {
        let total = self.energy();
        if total == 0.0 {
            return 1.0;
        }
        let dropped: f64 = self.levels.iter().take(drop).map(DetailLevel::energy).sum();
        (total - dropped) / total
    }
}

/// The maximal number of finest levels that can be dropped while keeping at
/// least `threshold` of the energy, capped at `depth − 1`.
pub fn select_drop_levels(pyramid: &WaveletPyramid, threshold: f64) -> usize {
    (1..pyramid.depth())
        .take_while(|&d| pyramid.retained_fraction(d) >= threshold)
        .last()
        .unwrap_or(0)
}

/// Retained energy fraction for `drop` levels averaged over pyramids with
/// non-zero energy (1.0 if there are none).
pub fn mean_retained_fraction(pyramids: &[WaveletPyramid], drop: usize) -> f64 {
    let live: Vec<f64> = pyramids
        .iter()
        .filter(|p| p.energy() > 0.0)
        .map(|p| p.retained_fraction(drop))
        .collect();
    if live.is_empty() {
        1.0
    } else {
        live.iter().sum::<f64>() / live.len() as f64
    }
}

/// Dataset-level drop count: the largest `drop` whose average retained
/// fraction over `pyramids` stays at or above `threshold`.
pub fn select_drop_levels_mean(pyramids: &[WaveletPyramid], threshold: f64) -> usize {
    let depth = pyramids.iter().map(WaveletPyramid::depth).min().unwrap_or(1);
    (1..depth)
        .take_while(|&d| mean_retained_fraction(pyramids, d) >= threshold)
        .last()
        .unwrap_or(0)
}

/// Decompose, zero the finest levels, and reconstruct.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveletCompressor {
    pub levels: usize,
    pub drop: usize,
}

impl WaveletCompressor {
    pub fn apply(&self, grid: &Grid) -> Result<Grid> {
        if self.drop == 0 {
            return Ok(grid.clone());
        }
        haar_reconstruct(&haar_decompose(grid, self.levels)?, self.drop)
    }
}
