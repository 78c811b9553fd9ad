//! Dense row-major matrices, the exact attention reference and spectral
//! measurements (operator norm by power iteration, stable rank).
//!
//! Everything here is the 64-bit reference path. The exact attention kernel
//! streams one output row at a time with a row-max shift before
//! exponentiation, recomputing logits on the second pass instead of holding
//! the full score matrix; peak memory stays O(n*d) while the counted work is
//! the standard dense-attention budget.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cost::CostMeter;
use crate::error::{Error, Result};

/// Seed for the deterministic start vector of [`operator_norm`].
const POWER_ITERATION_SEED: u64 = 0x5eed_9a77;

/// Row-major dense matrix of `f64`. Construction validates shape and that
/// every entry is finite; all downstream code may assume both.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadDataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        for (idx, &x) in data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFiniteEntry {
                    row: if cols == 0 { 0 } else { idx / cols },
                    col: if cols == 0 { 0 } else { idx % cols },
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Bytes of the numeric payload, for the analytic memory model.
    pub fn bytes(&self) -> u64 {
        (self.rows * self.cols * std::mem::size_of::<f64>()) as u64
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        DenseMatrix::from_raw(self.cols, self.rows, out)
    }

    /// `self * other`, counted at 2 flops per multiply-accumulate.
    pub fn matmul(&self, other: &DenseMatrix, meter: &CostMeter) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul inner dimension",
                expected: self.cols,
                got: other.rows,
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let lhs = self.row(i);
            let dst = &mut out[i * m..(i + 1) * m];
            for (l, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs = other.row(l);
                for (dj, &bj) in dst.iter_mut().zip(rhs.iter()) {
                    *dj += a * bj;
                }
            }
        }
        meter.add_flops(2 * (n * k * m) as u64);
        Ok(DenseMatrix::from_raw(n, m, out))
    }

    /// Entrywise difference `self - other`.
    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                context: "matrix subtraction shape",
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix::from_raw(self.rows, self.cols, data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Query/key/value triple for one attention instance. Queries and keys share
/// the feature dimension; keys and values share the sequence length, so
/// rectangular (`n_q != n_k`) instances are representable.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
}

impl AttentionInputs {
    pub fn new(q: DenseMatrix, k: DenseMatrix, v: DenseMatrix) -> Result<Self> {
        if q.cols() != k.cols() {
            return Err(Error::DimensionMismatch {
                context: "query/key feature dimension",
                expected: q.cols(),
                got: k.cols(),
            });
        }
        if k.rows() != v.rows() {
            return Err(Error::DimensionMismatch {
                context: "key/value sequence length",
                expected: k.rows(),
                got: v.rows(),
            });
        }
        if q.rows() == 0 || k.rows() == 0 || q.cols() == 0 {
            return Err(Error::Empty {
                context: "attention inputs",
            });
        }
        Ok(Self { q, k, v })
    }

    pub fn n_queries(&self) -> usize {
        self.q.rows()
    }

    pub fn n_keys(&self) -> usize {
        self.k.rows()
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    pub fn dim_v(&self) -> usize {
        self.v.cols()
    }

    pub fn q(&self) -> &DenseMatrix {
        &self.q
    }

    pub fn k(&self) -> &DenseMatrix {
        &self.k
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }
}

/// Frobenius norm, operator norm and stable rank of one matrix.
#[derive(Debug, Clone, Copy)]
pub struct SpectralStats {
    pub frobenius_norm: f64,
    pub operator_norm: f64,
    pub stable_rank: f64,
}

/// Power-iteration estimate of the largest singular value. `converged` is
/// false when `max_iters` ran out before successive estimates settled.
#[derive(Debug, Clone, Copy)]
pub struct OpNormEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Exact attention `D^-1 A V` with `A = exp(Q K^T / sqrt(d))` entrywise.
///
/// Streams one output row at a time: the first pass finds the row maximum of
/// the logits, the second re-derives each logit, exponentiates the shifted
/// value and accumulates both the normaliser and the value-row combination.
/// Softmax weights therefore never exceed one and the row sums match the
/// exact normaliser to machine precision.
pub fn exact_attention(inp: &AttentionInputs, meter: &CostMeter) -> Result<DenseMatrix> {
    let (n_q, n_k) = (inp.n_queries(), inp.n_keys());
    let (d, d_v) = (inp.dim(), inp.dim_v());
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // Pre-scaled queries so the inner loops are pure dot products.
    let mut q_scaled = inp.q.clone();
    for x in q_scaled.data.iter_mut() {
        *x *= inv_sqrt_d;
    }
    meter.add_flops((n_q * d) as u64);
    meter.alloc(q_scaled.bytes());

    let mut out = vec![0.0; n_q * d_v];
    meter.alloc((n_q * d_v * 8) as u64);

    for i in 0..n_q {
        let qi = q_scaled.row(i);

        let mut row_max = f64::NEG_INFINITY;
        for j in 0..n_k {
            let logit = dot(qi, inp.k.row(j));
            row_max = row_max.max(logit);
        }
        if !row_max.is_finite() {
            return Err(Error::AttentionOverflow { row: i });
        }

        let dst = &mut out[i * d_v..(i + 1) * d_v];
        let mut denom = 0.0;
        for j in 0..n_k {
            let logit = dot(qi, inp.k.row(j));
            let w = (logit - row_max).exp();
            denom += w;
            let vr = inp.v.row(j);
            for (o, &vx) in dst.iter_mut().zip(vr.iter()) {
                *o += w * vx;
            }
        }
        if !denom.is_finite() || denom <= 0.0 {
            return Err(Error::AttentionOverflow { row: i });
        }
        let inv = 1.0 / denom;
        for o in dst.iter_mut() {
            *o *= inv;
        }
    }
    // Counted per (i,j) pair: logits on both passes (2d each), shift + exp +
    // normaliser accumulation (3), value accumulation (2 d_v); plus the final
    // per-row scaling.
    meter.add_flops((n_q * n_k) as u64 * (4 * d as u64 + 2 * d_v as u64 + 3));
    meter.add_flops(n_q as u64 * (d_v as u64 + 1));

    meter.free(q_scaled.bytes());
    Ok(DenseMatrix::from_raw(n_q, d_v, out))
}

/// Materialised row-stochastic softmax matrix `D^-1 A` (row-max stabilised).
/// Used for spectral statistics and test oracles; costs `n_q * n_k` memory.
pub fn softmax_matrix(inp: &AttentionInputs, meter: &CostMeter) -> Result<DenseMatrix> {
    let (n_q, n_k) = (inp.n_queries(), inp.n_keys());
    let d = inp.dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let mut out = vec![0.0; n_q * n_k];
    meter.alloc((n_q * n_k * 8) as u64);
    for i in 0..n_q {
        let qi = inp.q.row(i);
        let dst = &mut out[i * n_k..(i + 1) * n_k];
        let mut row_max = f64::NEG_INFINITY;
        for (j, slot) in dst.iter_mut().enumerate() {
            let logit = dot(qi, inp.k.row(j)) * inv_sqrt_d;
            *slot = logit;
            row_max = row_max.max(logit);
        }
        if !row_max.is_finite() {
            return Err(Error::AttentionOverflow { row: i });
        }
        let mut denom = 0.0;
        for slot in dst.iter_mut() {
            *slot = (*slot - row_max).exp();
            denom += *slot;
        }
        let inv = 1.0 / denom;
        for slot in dst.iter_mut() {
            *slot *= inv;
        }
    }
    meter.add_flops((n_q * n_k) as u64 * (2 * d as u64 + 5));
    Ok(DenseMatrix::from_raw(n_q, n_k, out))
}

/// Exact softmax normalisers `D_ii = sum_j exp(<q_i, k_j>/sqrt(d))`, without
/// the row-max shift cancelling (returned in the raw scale). Oracle-grade.
pub fn attention_normalizers(inp: &AttentionInputs) -> Result<Vec<f64>> {
    let (n_q, n_k) = (inp.n_queries(), inp.n_keys());
    let d = inp.dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(n_q);
    for i in 0..n_q {
        let qi = inp.q.row(i);
        let mut logits = Vec::with_capacity(n_k);
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..n_k {
            let l = dot(qi, inp.k.row(j)) * inv_sqrt_d;
            row_max = row_max.max(l);
            logits.push(l);
        }
        if !row_max.is_finite() {
            return Err(Error::AttentionOverflow { row: i });
        }
        let sum: f64 = logits.iter().map(|l| (l - row_max).exp()).sum();
        out.push(sum * row_max.exp());
    }
    Ok(out)
}

/// Largest singular value via power iteration on `M^T M`, with a Gaussian
/// start vector drawn from a fixed seed so repeated calls agree bitwise.
/// A zero matrix short-circuits to zero.
pub fn operator_norm(m: &DenseMatrix, tol: f64, max_iters: usize, meter: &CostMeter) -> OpNormEstimate {
    operator_norm_seeded(m, tol, max_iters, POWER_ITERATION_SEED, meter)
}

pub fn operator_norm_seeded(
    m: &DenseMatrix,
    tol: f64,
    max_iters: usize,
    seed: u64,
    meter: &CostMeter,
) -> OpNormEstimate {
    if m.data.iter().all(|&x| x == 0.0) {
        return OpNormEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    let (r, c) = (m.rows, m.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);

    let mut u = vec![0.0; r];
    let mut sigma = 0.0f64;
    let mut converged = false;
    let mut iters = 0;

    for it in 1..=max_iters {
        iters = it;
        // u = M v
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = dot(m.row(i), &v);
        }
        let new_sigma = norm(&u);
        meter.add_flops((2 * r * c + 2 * r) as u64);
        if new_sigma == 0.0 {
            // Start vector fell in the null space; redraw once.
            v = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalize(&mut v);
            continue;
        }
        // v = M^T u, renormalised
        for x in v.iter_mut() {
            *x = 0.0;
        }
        for i in 0..r {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            for (vj, &mij) in v.iter_mut().zip(m.row(i).iter()) {
                *vj += ui * mij;
            }
        }
        normalize(&mut v);
        meter.add_flops((2 * r * c + 2 * c) as u64);

        if (new_sigma - sigma).abs() <= tol * new_sigma.max(f64::MIN_POSITIVE) {
            sigma = new_sigma;
            converged = true;
            break;
        }
        sigma = new_sigma;
    }

    OpNormEstimate {
        value: sigma,
        converged,
        iterations: iters,
    }
}

/// Frobenius norm, operator norm and stable rank `||M||_F^2 / ||M||_op^2`.
/// Errors on an all-zero matrix, where the stable rank is undefined.
pub fn spectral_stats(m: &DenseMatrix, meter: &CostMeter) -> Result<SpectralStats> {
    let frob = m.frobenius_norm();
    meter.add_flops((2 * m.rows * m.cols + 1) as u64);
    if frob == 0.0 {
        return Err(Error::ZeroMatrix {
            context: "spectral_stats",
        });
    }
    let op = operator_norm(m, 1e-10, 10_000, meter);
    let value = op.value.min(frob); // power iteration may not exceed Frobenius
    Ok(SpectralStats {
        frobenius_norm: frob,
        operator_norm: value,
        stable_rank: (frob * frob) / (value * value),
    })
}

/// `||approx - exact||_op / ||exact||_op`. Errors when shapes differ or the
/// reference matrix is all zeros.
pub fn relative_opnorm_error(
    exact: &DenseMatrix,
    approx: &DenseMatrix,
    meter: &CostMeter,
) -> Result<f64> {
    let diff = approx.sub(exact)?;
    meter.add_flops((exact.rows * exact.cols) as u64);
    let denom = operator_norm(exact, 1e-10, 10_000, meter).value;
    if denom == 0.0 {
        return Err(Error::ZeroMatrix {
            context: "relative_opnorm_error reference",
        });
    }
    let num = operator_norm(&diff, 1e-10, 10_000, meter).value;
    Ok(num / denom)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}
