//! Backward passes for the transformer-layer kernels in `ops`. Used only for
//! training, so nothing here charges FLOPs.

use crate::error::Result;
use crate::tensor::ops::{softmax_rows, FlopCounter};
use crate::tensor::Matrix;

/// For `y = x·w + b`: returns `(dx, dw, db)`.
pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let dx = dy.matmul(&w.transpose())?;
    let dw = x.transpose().matmul(dy)?;
    Ok((dx, dw, column_sums(dy)))
}

pub fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in s.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    s
}

/// Normalised input and per-row inverse standard deviation.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Same arithmetic as `ops::layernorm`, keeping what the backward pass needs.
pub fn layernorm_cached(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Matrix, LayerNormCache) {
    let n = x.cols() as f64;
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
        for (((o, &h), g), b) in out
            .row_mut(r)
            .iter_mut()
            .zip(xhat.row(r))
            .zip(gamma)
            .zip(beta)
        {
            *o = h * g + b;
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &Matrix,
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (rows, cols) = dy.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    for r in 0..rows {
        let xh = cache.xhat.row(r);
        let g = dy.row(r);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..cols {
            let d = g[c] * gamma[c];
            mean_d += d;
            mean_dx += d * xh[c];
            dgamma[c] += g[c] * xh[c];
            dbeta[c] += g[c];
        }
        mean_d /= n;
        mean_dx /= n;
        let inv = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (g[c] * gamma[c] - mean_d - xh[c] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Attention output together with its softmax weights.
pub fn attention_cached(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul(&k.transpose())?;
    scores.data_mut().iter_mut().for_each(|s| *s *= scale);
    let probs = softmax_rows(&scores, &mut FlopCounter::disabled());
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)` for `softmax(q·kᵀ/√d)·v`.
pub fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &Matrix,
    dout: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dv = probs.transpose().matmul(dout)?;
    let dp = dout.matmul(&v.transpose())?;
    let mut ds = dp.clone();
    for r in 0..ds.rows() {
        let p = probs.row(r);
        let dot: f64 = p.iter().zip(dp.row(r)).map(|(a, b)| a * b).sum();
        for (c, s) in ds.row_mut(r).iter_mut().enumerate() {
            *s = p[c] * (dp.get(r, c) - dot) * scale;
        }
    }
    let dq = ds.matmul(k)?;
    let dk = ds.transpose().matmul(q)?;
    Ok((dq, dk, dv))
}
