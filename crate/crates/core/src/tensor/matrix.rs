use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length {
                op: "Matrix::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self { rows, cols, data }
    }

    /// Weight init used throughout the crate: uniform in `±1/sqrt(fan_in)`.
    pub fn init_weight(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self::uniform(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product without FLOP accounting.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_into(self, other, &mut out);
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Gathers the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `top` above `bottom`.
    pub fn vstack(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
        if top.cols != bottom.cols {
            return Err(Error::Shape {
                op: "vstack",
                left: top.shape(),
                right: bottom.shape(),
            });
        }
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Matrix {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }

    /// Splits into rows `[0, at)` and `[at, rows)`.
    pub fn split_rows(&self, at: usize) -> (Matrix, Matrix) {
        let at = at.min(self.rows);
        let (a, b) = self.data.split_at(at * self.cols);
        (
            Matrix {
                rows: at,
                cols: self.cols,
                data: a.to_vec(),
            },
            Matrix {
                rows: self.rows - at,
                cols: self.cols,
                data: b.to_vec(),
            },
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest elementwise relative difference, with unit floor on the scale.
    pub fn max_rel_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
            .fold(0.0, f64::max)
    }
}

/// `out += a * b`, i-k-j order. Each output row depends only on the matching
/// row of `a`, so results are bit-identical regardless of which rows are
/// batched together.
pub(crate) fn gemm_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the feature was just detected.
        unsafe { gemm_avx(a, b, out) };
        return;
    }
    gemm_tiled(a, b, out);
}

/// Same kernel compiled with wider vectors. No fused multiply-add is
/// enabled, so results are bitwise equal to the portable path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_avx(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    gemm_tiled(a, b, out);
}

// Every output accumulates over k in order, so results do not depend on
// the tiling.
#[inline(always)]
fn gemm_tiled(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    const T: usize = 4;
    const U: usize = 8;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let (ad, bd) = (&a.data, &b.data);
    let od = &mut out.data;
    let mut i = 0;
    while i + T <= m {
        let ar: [&[f64]; T] = std::array::from_fn(|r| &ad[(i + r) * k..(i + r + 1) * k]);
        let apack: Vec<[f64; T]> = (0..k)
            .map(|kk| std::array::from_fn(|r| ar[r][kk]))
            .collect();
        let mut j = 0;
        while j + U <= n {
            // Plain indexed loops over fixed-size arrays vectorize with or
            // without debug assertions.
            let mut acc = [[0.0; U]; T];
            for r in 0..T {
                let o = (i + r) * n + j;
                for c in 0..U {
                    acc[r][c] = od[o + c];
                }
            }
            let mut brows = bd.chunks_exact(n);
            for av in apack.iter() {
                let brow = brows.next().unwrap();
                let bv: [f64; U] = brow[j..j + U].try_into().unwrap();
                for r in 0..T {
                    for c in 0..U {
                        acc[r][c] += av[r] * bv[c];
                    }
                }
            }
            for r in 0..T {
                let o = (i + r) * n + j;
                for c in 0..U {
                    od[o + c] = acc[r][c];
                }
            }
            j += U;
        }
        if j < n {
            for (r, a) in ar.iter().enumerate() {
                row_tail(a, bd, &mut od[(i + r) * n..(i + r + 1) * n], j, n);
            }
        }
        i += T;
    }
    for r in i..m {
        row_tail(
            &ad[r * k..(r + 1) * k],
            bd,
            &mut od[r * n..(r + 1) * n],
            0,
            n,
        );
    }
}

/// Columns `from..n` of one output row.
#[inline(always)]
fn row_tail(a: &[f64], b: &[f64], out: &mut [f64], from: usize, n: usize) {
    for (kk, &av) in a.iter().enumerate() {
        for c in from..n {
            out[c] += av * b[kk * n + c];
        }
    }
}
