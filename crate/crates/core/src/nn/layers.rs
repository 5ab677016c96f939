//! Layer primitives with hand-written backward passes.
//!
//! Row-batched helpers operate on `rows × dim` row-major slices. Weight
//! matrices are stored `[out, in]`.

use super::tensor::Tensor;
use crate::error::{check_len, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = W x + b` for a single input vector.
pub fn linear_forward(weights: &Tensor, bias: &Tensor, input: &[f64]) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = matrix_dims(weights)?;
    check_len(out_dim, bias.len(), "linear bias")?;
    check_len(in_dim, input.len(), "linear input")?;
    Ok(affine_rows(input, 1, in_dim, weights.data(), bias.data(), out_dim))
}

pub fn relu(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| v.max(0.0)).collect()
}

/// Numerically stable exp-normalize.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Gradient of a softmax given its output `p` and upstream `dp`.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}

pub(crate) fn matrix_dims(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape() {
        [o, i] => Ok((*o, *i)),
        s => Err(crate::error::Error::Dimension {
            expected: 2,
            got: s.len(),
            context: "weight matrix rank",
        }),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `Y[r] = W X[r] + b` for every row.
pub(crate) fn affine_rows(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    w: &[f64],
    b: &[f64],
    out_dim: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = b[o] + dot(&w[o * in_dim..(o + 1) * in_dim], xr);
        }
    }
    y
}

/// Backward of [`affine_rows`]. Accumulates into `dw`/`db` when present and
/// returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_rows_backward(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    w: &[f64],
    dy: &[f64],
    out_dim: usize,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
    need_dx: bool,
) -> Vec<f64> {
    let mut dx = if need_dx {
        vec![0.0; rows * in_dim]
    } else {
        Vec::new()
    };
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            if let Some(dw) = dw.as_deref_mut() {
                axpy(g, xr, &mut dw[o * in_dim..(o + 1) * in_dim]);
            }
            if let Some(db) = db.as_deref_mut() {
                db[o] += g;
            }
            if need_dx {
                axpy(g, &w[o * in_dim..(o + 1) * in_dim], &mut dx[r * in_dim..(r + 1) * in_dim]);
            }
        }
    }
    dx
}

/// Per-row layer normalization. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    rows: usize,
    dim: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (xr[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = gamma[i] * h + beta[i];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_rows_backward(
    xhat: &[f64],
    rstd: &[f64],
    rows: usize,
    dim: usize,
    gamma: &[f64],
    dy: &[f64],
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * dim];
    let n = dim as f64;
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let xh = &xhat[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        for i in 0..dim {
            dxhat[i] = dyr[i] * gamma[i];
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[i] += dyr[i] * xh[i];
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[i] += dyr[i];
            }
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dot(&dxhat, xh);
        let dxr = &mut dx[r * dim..(r + 1) * dim];
        for i in 0..dim {
            dxr[i] = rstd[r] / n * (n * dxhat[i] - sum_d - xh[i] * sum_dx);
        }
    }
    dx
}

/// Counter-based dropout mask source. Each `(site, index)` pair maps to a
/// fixed uniform draw for a given seed, independent of evaluation order.
#[derive(Debug, Clone, Copy)]
pub struct DropoutStream {
    seed: u64,
}

impl DropoutStream {
    pub fn new(seed: u64) -> Self {
        DropoutStream { seed }
    }

    /// Derives an independent stream, e.g. per sample within a step.
    pub fn fork(&self, salt: u64) -> Self {
        DropoutStream {
            seed: splitmix64(self.seed ^ splitmix64(salt.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }

    pub fn uniform(&self, site: u64, index: u64) -> f64 {
        let h = splitmix64(self.seed ^ splitmix64(site.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index));
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Inverted-dropout multipliers for `len` activations: `0` for dropped
    /// units, `1/(1-rate)` for kept ones.
    pub fn mask(&self, site: u64, len: usize, rate: f64) -> Vec<f64> {
        let keep = 1.0 / (1.0 - rate);
        (0..len)
            .map(|i| {
                if self.uniform(site, i as u64) < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
