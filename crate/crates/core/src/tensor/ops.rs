//! Accounted kernels: every function here charges its cost to a
//! [`FlopCounter`] owned by the caller.
//!
//! Cost model: a multiply-accumulate is 2 FLOPs, a bias add or residual add
//! is 1 FLOP per element, and softmax, layer norm and GELU are
//! [`NORM_FLOPS_PER_ELEMENT`] per element.

use crate::error::{Error, Result};
use crate::tensor::matrix::gemm_into;
use crate::tensor::Matrix;

pub const NORM_FLOPS_PER_ELEMENT: u64 = 5;

/// Per-run FLOP tally. Disabled counters accept charges and ignore them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    enabled: bool,
    total: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self {
            enabled: true,
            total: 0,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            total: 0,
        }
    }

    #[inline]
    pub fn charge(&mut self, flops: u64) {
        if self.enabled {
            self.total += flops;
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn absorb(&mut self, other: &FlopCounter) {
        self.charge(other.total);
    }
}

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

pub fn matmul(a: &Matrix, b: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    let out = a.matmul(b)?;
    fc.charge(matmul_flops(a.rows(), a.cols(), b.cols()));
    Ok(out)
}

/// `x·w + b`, with `b` broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, b: &[f64], fc: &mut FlopCounter) -> Result<Matrix> {
    if b.len() != w.cols() {
        return Err(Error::Length {
            op: "linear bias",
            expected: w.cols(),
            actual: b.len(),
        });
    }
    if x.cols() != w.rows() {
        return Err(Error::Shape {
            op: "linear",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(b);
    }
    gemm_into(x, w, &mut out);
    fc.charge(matmul_flops(x.rows(), x.cols(), w.cols()) + (x.rows() * w.cols()) as u64);
    Ok(out)
}

pub fn linear_flops(n: usize, fan_in: usize, fan_out: usize) -> u64 {
    matmul_flops(n, fan_in, fan_out) + (n * fan_out) as u64
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Matrix, fc: &mut FlopCounter) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    fc.charge(NORM_FLOPS_PER_ELEMENT * a.data().len() as u64);
    out
}

pub fn layernorm(
    a: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    fc: &mut FlopCounter,
) -> Result<Matrix> {
    for (name, v) in [("layernorm gamma", gamma), ("layernorm beta", beta)] {
        if v.len() != a.cols() {
            return Err(Error::Length {
                op: name,
                expected: a.cols(),
                actual: v.len(),
            });
        }
    }
    let mut out = a.clone();
    let n = a.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    fc.charge(NORM_FLOPS_PER_ELEMENT * a.data().len() as u64);
    Ok(out)
}

/// Scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
///
/// Charges `2·nq·nk·d` for the scores, `nq·nk` for scaling, softmax, and
/// `2·nq·nk·dv` for the value mix.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "attention q/k",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "attention k/v",
            left: k.shape(),
            right: v.shape(),
        });
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = matmul(q, &k.transpose(), fc)?;
    scores.data_mut().iter_mut().for_each(|s| *s *= scale);
    fc.charge(scores.data().len() as u64);
    let weights = softmax_rows(&scores, fc);
    matmul(&weights, v, fc)
}

pub fn attention_flops(nq: usize, nk: usize, d: usize, dv: usize) -> u64 {
    matmul_flops(nq, d, nk)
        + (nq * nk) as u64
        + NORM_FLOPS_PER_ELEMENT * (nq * nk) as u64
        + matmul_flops(nq, nk, dv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`, cheaper than the libm routine.
#[inline]
fn tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_matrix(a: &Matrix, fc: &mut FlopCounter) -> Matrix {
    let mut out = a.clone();
    out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    fc.charge(NORM_FLOPS_PER_ELEMENT * a.data().len() as u64);
    out
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// In-place residual add, 1 FLOP per element.
pub fn add_assign(dst: &mut Matrix, src: &Matrix, fc: &mut FlopCounter) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Shape {
            op: "residual add",
            left: dst.shape(),
            right: src.shape(),
        });
    }
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
    fc.charge(src.data().len() as u64);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn tanh_matches_libm() {
        for i in -4000..=4000 {
            let u = i as f64 / 200.0;
            assert!((tanh(u) - u.tanh()).abs() < 1e-15, "{u}");
        }
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
        assert_eq!(tanh(0.0), 0.0);
    }

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let mut fc = FlopCounter::new();
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]), &mut fc);
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::from_rows(&[[1000.0, 1000.0]]), &mut fc);
        assert_eq!(s.data(), &[0.5, 0.5]);
        assert_eq!(fc.total(), 2 * 2 * NORM_FLOPS_PER_ELEMENT);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(4);
        let a = Matrix::uniform(4, 4, 5.0, &mut rng);
        let s = softmax_rows(&a, &mut FlopCounter::disabled());
        for r in 0..4 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let shifted = Matrix::from_vec(4, 4, a.data().iter().map(|v| v + 3.5).collect()).unwrap();
        let s2 = softmax_rows(&shifted, &mut FlopCounter::disabled());
        assert!(s.max_abs_diff(&s2) < 1e-12);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let a = Matrix::from_rows(&[[2.0, 2.0, 2.0]]);
        let out = layernorm(&a, &[1.0; 3], &[0.0; 3], 1e-5, &mut FlopCounter::disabled()).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layernorm_two_points() {
        let a = Matrix::from_rows(&[[1.0, 3.0]]);
        let out = layernorm(
            &a,
            &[1.0; 2],
            &[0.0; 2],
            1e-12,
            &mut FlopCounter::disabled(),
        )
        .unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-9);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layernorm_statistics() {
        let mut rng = Rng::new(8);
        let a = Matrix::uniform(3, 16, 4.0, &mut rng);
        let out = layernorm(
            &a,
            &[1.0; 16],
            &[0.0; 16],
            1e-5,
            &mut FlopCounter::disabled(),
        )
        .unwrap();
        for r in 0..3 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn one_hot_attention() {
        // Query aligned with key 1; large scale makes the softmax one-hot.
        let q = Matrix::from_rows(&[[0.0, 100.0, 0.0]]);
        let k = Matrix::from_rows(&[[100.0, 0.0, 0.0], [0.0, 100.0, 0.0], [0.0, 0.0, 100.0]]);
        let v = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let out = attention(&q, &k, &v, &mut FlopCounter::disabled()).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-9);
        assert!((out.get(0, 1) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn identical_queries_identical_rows() {
        let mut rng = Rng::new(2);
        let row: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let q = Matrix::from_rows(&[row.clone(), row.clone(), row]);
        let k = Matrix::uniform(5, 4, 1.0, &mut rng);
        let v = Matrix::uniform(5, 3, 1.0, &mut rng);
        let out = attention(&q, &k, &v, &mut FlopCounter::disabled()).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn attention_matches_composition() {
        let mut rng = Rng::new(21);
        let q = Matrix::uniform(3, 4, 1.0, &mut rng);
        let k = Matrix::uniform(3, 4, 1.0, &mut rng);
        let v = Matrix::uniform(3, 4, 1.0, &mut rng);
        let mut fc = FlopCounter::new();
        let out = attention(&q, &k, &v, &mut fc).unwrap();

        // Oracle: explicit loops for the scores, then the verified softmax.
        let mut scores = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..4).map(|c| q.get(i, c) * k.get(j, c)).sum();
                scores.set(i, j, dot / 2.0);
            }
        }
        let w = softmax_rows(&scores, &mut FlopCounter::disabled());
        let expected = w.matmul(&v).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-10);
        assert_eq!(fc.total(), attention_flops(3, 3, 4, 4));
        assert_eq!(fc.total(), 2 * 3 * 3 * 4 + 2 * 3 * 3 * 4 + 9 + 5 * 9);
    }

    #[test]
    fn counter_is_additive() {
        let mut rng = Rng::new(1);
        let a = Matrix::uniform(3, 5, 1.0, &mut rng);
        let b = Matrix::uniform(5, 2, 1.0, &mut rng);
        let mut fc = FlopCounter::new();
        let ab = matmul(&a, &b, &mut fc).unwrap();
        let _ = softmax_rows(&ab, &mut fc);
        assert_eq!(fc.total(), matmul_flops(3, 5, 2) + 5 * 6);

        let mut off = FlopCounter::disabled();
        let _ = matmul(&a, &b, &mut off).unwrap();
        assert_eq!(off.total(), 0);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
