//! Row-major `f64` matrices and the value-level kernels shared by the
//! autodiff graph and the incremental decoder.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data does not match {rows}x{cols}");
        Matrix { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Matrix { rows: 1, cols: data.len(), data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_vec(len, self.cols, self.data[start * self.cols..(start + len) * self.cols].to_vec())
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_assign(beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: shapes and strides are checked above; the buffers do not alias
    // because `c` is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// `a · bᵀ`.
pub fn matmul_t(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(1.0, a, false, b, true, 0.0, &mut c);
    c
}

/// `x · w + bias` with `bias` a `1 × n` row.
pub fn linear(x: &Matrix, w: &Matrix, bias: &Matrix) -> Matrix {
    let mut y = matmul(x, w);
    add_row_in_place(&mut y, bias);
    y
}

pub fn add_row_in_place(x: &mut Matrix, bias: &Matrix) {
    assert_eq!(bias.rows, 1);
    assert_eq!(bias.cols, x.cols);
    for r in 0..x.rows {
        for (v, b) in x.row_mut(r).iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns the output, the normalized input and the
/// per-row reciprocal standard deviation.
pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let d = x.cols;
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut out = Matrix::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = xh[j] * gamma.data[j] + beta.data[j];
        }
    }
    (out, xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu_matrix(x: &Matrix) -> Matrix {
    Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|&v| gelu(v)).collect())
}

/// One attention group: queries `q_start..q_start+q_len` attend to keys
/// `k_start..k_start+k_len`. Keys past `k_len` (padding) are never seen.
/// With `causal`, relative query `i` sees relative keys `0..=i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub causal: bool,
}

impl AttnBlock {
    pub fn full(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Self {
        AttnBlock { q_start, q_len, k_start, k_len, causal: false }
    }

    #[inline]
    pub fn visible(&self, i: usize) -> usize {
        if self.causal {
            (i + 1).min(self.k_len)
        } else {
            self.k_len
        }
    }
}

/// Multi-head scaled dot-product attention over column-split heads.
/// Returns the output and the attention probabilities (flattened per
/// block, head, query row; each row `k_len` long).
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, blocks: &[AttnBlock]) -> (Matrix, Vec<f64>) {
    let d = q.cols;
    assert_eq!(d % heads, 0);
    assert_eq!(k.cols, d);
    assert_eq!(v.cols, d);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows, d);
    let total: usize = blocks.iter().map(|b| heads * b.q_len * b.k_len).sum();
    let mut probs = vec![0.0; total];
    let mut off = 0;
    for b in blocks {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..b.q_len {
                let qi = &q.row(b.q_start + i)[cols.clone()];
                let n = b.visible(i);
                let p = &mut probs[off..off + b.k_len];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate().take(n) {
                    let kj = &k.row(b.k_start + j)[cols.clone()];
                    let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    *pj = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in p.iter_mut().take(n) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let orow = &mut out.row_mut(b.q_start + i)[cols.clone()];
                for (j, pj) in p.iter_mut().enumerate().take(n) {
                    *pj /= z;
                    let vj = &v.row(b.k_start + j)[cols.clone()];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += *pj * vv;
                    }
                }
                off += b.k_len;
            }
        }
    }
    (out, probs)
}

/// Sinusoidal position table, `max_positions × d`.
pub fn sinusoidal_positions(max_positions: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(max_positions, d);
    for pos in 0..max_positions {
        let row = pe.row_mut(pos);
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows {
        kselect_core::math::log_softmax_in_place(out.row_mut(r));
    }
    out
}
