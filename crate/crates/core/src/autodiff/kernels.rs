//! Forward/backward kernels operating on raw row-major slices.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Valid output range along one axis for kernel offset `d`.
    fn span(len: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d).min(len as isize).max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// Zero-padded "same" cross-correlation plus bias.
pub(crate) fn conv2d_forward(dims: ConvDims, input: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let ConvDims { c_in, c_out, h, w, k } = dims;
    let hw = h * w;
    let pad = dims.pad();
    let mut out = vec![0.0; c_out * hw];
    for co in 0..c_out {
        let plane = &mut out[co * hw..(co + 1) * hw];
        plane.fill(bias[co]);
        for ci in 0..c_in {
            let src = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = ConvDims::span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = ConvDims::span(w, dx);
                    let wv = kernels[((co * c_in + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let row_out = &mut plane[y * w + x0..y * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let row_in = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (o, i) in row_out.iter_mut().zip(row_in) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernels: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    dims: ConvDims,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> ConvGrads {
    let ConvDims { c_in, c_out, h, w, k } = dims;
    let hw = h * w;
    let pad = dims.pad();
    let mut d_in = want[0].then(|| vec![0.0; input.len()]);
    let mut d_k = want[1].then(|| vec![0.0; kernels.len()]);
    let d_b = want[2].then(|| {
        (0..c_out)
            .map(|co| grad_out[co * hw..(co + 1) * hw].iter().sum())
            .collect()
    });

    if d_in.is_some() || d_k.is_some() {
        for co in 0..c_out {
            let g = &grad_out[co * hw..(co + 1) * hw];
            for ci in 0..c_in {
                let src = &input[ci * hw..(ci + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = ConvDims::span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = ConvDims::span(w, dx);
                        let kidx = ((co * c_in + ci) * k + ky) * k + kx;
                        let wv = kernels[kidx];
                        let sx0 = (x0 as isize + dx) as usize;
                        let n = x1 - x0;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            if d_k.is_some() {
                                let irow = &src[sy * w + sx0..sy * w + sx0 + n];
                                acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(di) = d_in.as_mut() {
                                if wv != 0.0 {
                                    let drow = &mut di[ci * hw + sy * w + sx0..ci * hw + sy * w + sx0 + n];
                                    for (d, gv) in drow.iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(dk) = d_k.as_mut() {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: d_in,
        kernels: d_k,
        bias: d_b,
    }
}

/// 2x2/stride-2 max pooling with edge-truncated final windows. Returns the
/// pooled values and, per output cell, the flat input index of the first
/// maximum in row-major order.
pub(crate) fn maxpool2d_forward(c: usize, h: usize, w: usize, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_idx];
                for y in (2 * oy)..(2 * oy + 2).min(h) {
                    for x in (2 * ox)..(2 * ox + 2).min(w) {
                        let idx = base + y * w + x;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Pole-free rational function `P(x) / (1 + |q₁x + q₂x²|)` with cubic `P`.
#[inline]
pub(crate) fn rational(x: f64, p: &[f64], q: &[f64]) -> f64 {
    let num = p[0] + x * (p[1] + x * (p[2] + x * p[3]));
    let a = x * (q[0] + x * q[1]);
    num / (1.0 + a.abs())
}

/// Partial derivatives of [`rational`] with respect to `x`, `p` and `q`.
#[inline]
pub(crate) fn rational_partials(x: f64, p: &[f64], q: &[f64]) -> (f64, [f64; 4], [f64; 2]) {
    let num = p[0] + x * (p[1] + x * (p[2] + x * p[3]));
    let dnum = p[1] + x * (2.0 * p[2] + 3.0 * x * p[3]);
    let a = x * (q[0] + x * q[1]);
    let da = q[0] + 2.0 * x * q[1];
    let den = 1.0 + a.abs();
    let sgn = if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    };
    let inv = 1.0 / den;
    let r_over_den = num * inv * inv;
    let dx = dnum * inv - r_over_den * sgn * da;
    let dp = [inv, x * inv, x * x * inv, x * x * x * inv];
    let dq = [-r_over_den * sgn * x, -r_over_den * sgn * x * x];
    (dx, dp, dq)
}
