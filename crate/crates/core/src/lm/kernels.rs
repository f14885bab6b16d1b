//! Row-major dense kernels.
//!
//! Every kernel computes each output row from its input row alone, with a
//! fixed accumulation order. A row therefore gets bit-identical values
//! whether it is computed inside a full sequence or on its own during
//! cached incremental decoding.

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }
}

/// `x (n x k) . w (k x m) + b`.
pub fn linear(x: &[f64], k: usize, w: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(b.len(), m);
    let n = x.len() / k;
    let mut out = vec![0.0; n * m];
    for (xi, oi) in x.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        oi.copy_from_slice(b);
        for (&xv, wr) in xi.iter().zip(w.chunks_exact(m)) {
            for (o, &wv) in oi.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

pub fn transpose(w: &[f64], k: usize, m: usize) -> Vec<f64> {
    let mut t = vec![0.0; k * m];
    for i in 0..k {
        for j in 0..m {
            t[j * k + i] = w[i * m + j];
        }
    }
    t
}

/// Backward of [`linear`]: accumulates `dw += x^T dy`, `db += sum(dy)` and
/// returns `dx = dy w^T`.
pub fn linear_backward(
    x: &[f64],
    k: usize,
    w: &[f64],
    m: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    for (xi, dyi) in x.chunks_exact(k).zip(dy.chunks_exact(m)) {
        for (&xv, dwr) in xi.iter().zip(dw.chunks_exact_mut(m)) {
            if xv != 0.0 {
                for (d, &g) in dwr.iter_mut().zip(dyi) {
                    *d += xv * g;
                }
            }
        }
        for (d, &g) in db.iter_mut().zip(dyi) {
            *d += g;
        }
    }
    let wt = transpose(w, k, m);
    let n = dy.len() / m;
    let mut dx = vec![0.0; n * k];
    for (dyi, dxi) in dy.chunks_exact(m).zip(dx.chunks_exact_mut(k)) {
        for (&g, wr) in dyi.iter().zip(wt.chunks_exact(k)) {
            for (d, &wv) in dxi.iter_mut().zip(wr) {
                *d += g * wv;
            }
        }
    }
    dx
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LnTape {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], h: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnTape) {
    let n = x.len() / h;
    let mut out = vec![0.0; n * h];
    let mut tape = LnTape {
        xhat: vec![0.0; n * h],
        rstd: vec![0.0; n],
    };
    for i in 0..n {
        let xi = &x[i * h..(i + 1) * h];
        let mean = xi.iter().sum::<f64>() / h as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        tape.rstd[i] = rstd;
        for j in 0..h {
            let xh = (xi[j] - mean) * rstd;
            tape.xhat[i * h + j] = xh;
            out[i * h + j] = xh * g[j] + b[j];
        }
    }
    (out, tape)
}

pub fn layer_norm_backward(
    tape: &LnTape,
    h: usize,
    g: &[f64],
    dy: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() / h;
    let mut dx = vec![0.0; n * h];
    for i in 0..n {
        let xh = &tape.xhat[i * h..(i + 1) * h];
        let dyi = &dy[i * h..(i + 1) * h];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..h {
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
            let d = dyi[j] * g[j];
            mean_d += d;
            mean_dx += d * xh[j];
        }
        mean_d /= h as f64;
        mean_dx /= h as f64;
        let rstd = tape.rstd[i];
        for j in 0..h {
            let d = dyi[j] * g[j];
            dx[i * h + j] = rstd * (d - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
