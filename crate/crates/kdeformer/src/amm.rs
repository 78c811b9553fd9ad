//! Spectral-norm approximate matrix multiplication by importance sampling.
//!
//! `X^T Y` is estimated as `X^T Pi^T Pi Y` where `Pi` has `m` rows, each a
//! scaled standard basis vector `(1/sqrt(m p_l)) e_l^T` with `l` drawn i.i.d.
//! from a probability vector `p`. The estimate is unbiased for any positive
//! `p`; when `p_i` is at least a quarter of the mixed-norm weight
//! `(|x_i|^2 + gamma |y_i|^2) / (|X|_F^2 + gamma |Y|_F^2)` with
//! `gamma = |X|_op^2 / |Y|_op^2`, a sample count of order
//! `eps^-2 log n (srank(X) + srank(Y))` keeps the operator-norm error below
//! `eps |X|_op |Y|_op` with high probability.
//!
//! Draws use a Vose alias table (O(n) build, O(1) per sample) so sampling
//! with replacement matches the i.i.d. model exactly. A deterministic full
//! mode ([`SamplingMatrix::deterministic_full`]) selects every row once with
//! unit weight, making the product exact — the regression baseline.

use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default multiplier for [`sample_count`]. The concentration argument only
/// fixes the sample count up to a constant; this value is calibrated on
/// clustered attention-shaped instances at n = 512, eps = 0.25: the smallest
/// round value whose worst observed error over 100 seeded trials stays at
/// least 15% below `eps |X|_op |Y|_op` (0.35 is the empirical edge where the
/// worst trial grazes the budget).
pub const DEFAULT_SAMPLE_CONSTANT: f64 = 0.5;

/// Number of sampling-matrix rows prescribed for relative error `epsilon`
/// on `n`-row factors whose stable ranks sum to `srank_sum`:
/// `ceil(c * epsilon^-2 * ln n * srank_sum)`, at least 1.
pub fn sample_count(epsilon: f64, n: usize, srank_sum: f64, c: f64) -> usize {
    let m = c * epsilon.powi(-2) * (n as f64).ln() * srank_sum;
    (m.ceil() as usize).max(1)
}

/// Alias table for O(1) draws from a fixed discrete distribution.
#[derive(Debug, Clone)]
struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    /// Vose construction: entries are scaled by `n` and paired so that every
    /// column of the table mixes at most two outcomes. Zero-mass entries end
    /// up with acceptance probability zero and are never returned.
    fn build(p: &[f64], meter: &CostMeter) -> AliasTable {
        let n = p.len();
        let mut scaled: Vec<f64> = p.iter().map(|&v| v * n as f64).collect();
        let mut prob = vec![0.0; n];
        let mut alias = vec![0u32; n];
        let mut small: Vec<u32> = Vec::new();
        let mut large: Vec<u32> = Vec::new();
        for (i, &s) in scaled.iter().enumerate() {
            if s < 1.0 {
                small.push(i as u32);
            } else {
                large.push(i as u32);
            }
        }
        let mut pair_steps = 0u64;
        while !small.is_empty() && !large.is_empty() {
            let (s, l) = (small.pop().unwrap(), large.pop().unwrap());
            prob[s as usize] = scaled[s as usize];
            alias[s as usize] = l;
            scaled[l as usize] = (scaled[l as usize] + scaled[s as usize]) - 1.0;
            pair_steps += 1;
            if scaled[l as usize] < 1.0 {
                small.push(l);
            } else {
                large.push(l);
            }
        }
        // Leftovers hold mass 1 up to rounding.
        for i in large.into_iter().chain(small) {
            prob[i as usize] = 1.0;
        }
        meter.add_flops(n as u64 + 2 * pair_steps);
        AliasTable { prob, alias }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let k = rng.gen_range(0..self.prob.len());
        if rng.gen::<f64>() < self.prob[k] {
            k
        } else {
            self.alias[k] as usize
        }
    }

    fn bytes(&self) -> u64 {
        (self.prob.len() * 8 + self.alias.len() * 4) as u64
    }
}

/// Importance-sampling distribution `p_i ∝ beta_i + gamma * |y_i|^2` over
/// row indices, together with the ingredients it was built from. Immutable
/// once built; the embedded alias table makes each draw O(1).
#[derive(Debug, Clone)]
pub struct SamplingDistribution {
    p: Vec<f64>,
    beta: Vec<f64>,
    gamma: f64,
    row_norms_y_sq: Vec<f64>,
    alias: AliasTable,
}

impl SamplingDistribution {
    /// Normalized probabilities; sum to 1 within 1e-12.
    pub fn p(&self) -> &[f64] {
        &self.p
    }

    /// Column-norm estimates the distribution was built from.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Operator-norm ratio weighting the `|y_i|^2` term.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Squared row norms of the right factor.
    pub fn row_norms_y_sq(&self) -> &[f64] {
        &self.row_norms_y_sq
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Heap bytes held by the distribution (three f64 vectors plus the
    /// alias table).
    pub fn bytes(&self) -> u64 {
        (self.p.len() * 24) as u64 + self.alias.bytes()
    }
}

/// Builds the sampling distribution `p_i ∝ beta_i + gamma * |y_i|^2`.
///
/// `beta` must be entrywise nonnegative and `gamma` nonnegative; the total
/// mass must be positive. The result is exactly the hand-normalized vector
/// (one pass, no reordering), so equal inputs give equal outputs bitwise.
pub fn build_distribution(
    beta: &[f64],
    row_norms_y_sq: &[f64],
    gamma: f64,
    meter: &CostMeter,
) -> Result<SamplingDistribution> {
    if beta.len() != row_norms_y_sq.len() {
        return Err(Error::DimensionMismatch {
            context: "build_distribution beta vs row norms",
            expected: beta.len(),
            got: row_norms_y_sq.len(),
        });
    }
    if beta.is_empty() {
        return Err(Error::Empty {
            context: "build_distribution",
        });
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::BadParameter {
            name: "gamma",
            value: gamma,
            range: "[0, inf)",
        });
    }
    for (i, arr) in [beta, row_norms_y_sq].into_iter().enumerate() {
        for (j, &v) in arr.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                let _ = i;
                return Err(Error::NegativeWeight { index: j, value: v });
            }
        }
    }

    let n = beta.len();
    let mut p: Vec<f64> = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let t = beta[i] + gamma * row_norms_y_sq[i];
        total += t;
        p.push(t);
    }
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    for v in p.iter_mut() {
        *v /= total;
    }
    meter.add_flops(4 * n as u64);

    let alias = AliasTable::build(&p, meter);
    let dist = SamplingDistribution {
        p,
        beta: beta.to_vec(),
        gamma,
        row_norms_y_sq: row_norms_y_sq.to_vec(),
        alias,
    };
    meter.alloc(dist.bytes());
    Ok(dist)
}

/// `m` scaled basis-vector rows: row `r` selects `indices[r]` with weight
/// `1/sqrt(m * p[indices[r]])`. Only the index list and weights are stored;
/// the dense `m x n` form never materializes.
#[derive(Debug, Clone)]
pub struct SamplingMatrix {
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl SamplingMatrix {
    /// Number of sampled rows.
    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Selects every row exactly once with unit weight — the `m = n`,
    /// uniform-`p` case of the weight rule — so the sampled product equals
    /// the exact one. Used as the regression baseline.
    pub fn deterministic_full(n: usize) -> SamplingMatrix {
        SamplingMatrix {
            indices: (0..n as u32).collect(),
            weights: vec![1.0; n],
        }
    }

    /// Heap bytes (4 per index + 8 per weight).
    pub fn bytes(&self) -> u64 {
        (self.indices.len() * 12) as u64
    }
}

/// Draws `m` i.i.d. row indices from `dist` and attaches the
/// `1/sqrt(m * p)` weights. Deterministic in `seed`.
pub fn draw_sampling_matrix(
    dist: &SamplingDistribution,
    m: usize,
    seed: u64,
    meter: &CostMeter,
) -> Result<SamplingMatrix> {
    if m == 0 {
        return Err(Error::BadParameter {
            name: "m",
            value: 0.0,
            range: "[1, inf)",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for _ in 0..m {
        let l = dist.alias.sample(&mut rng);
        indices.push(l as u32);
        weights.push(1.0 / (m as f64 * dist.p[l]).sqrt());
    }
    meter.add_flops(3 * m as u64);
    let pi = SamplingMatrix { indices, weights };
    meter.alloc(pi.bytes());
    Ok(pi)
}

/// Computes `X^T Pi^T Pi Y = sum_r weights[r]^2 * x_l_r y_l_r^T` touching
/// only the sampled rows: `x_t` is `X^T` (q x n), `y` is `Y` (n x d), and
/// the output is q x d. Accumulation runs in draw order, so the full
/// deterministic sampling matrix reproduces `X^T Y` bitwise.
pub fn amm_product(
    x_t: &DenseMatrix,
    y: &DenseMatrix,
    pi: &SamplingMatrix,
    meter: &CostMeter,
) -> Result<DenseMatrix> {
    let n = y.rows();
    if x_t.cols() != n {
        return Err(Error::DimensionMismatch {
            context: "amm_product X^T columns vs Y rows",
            expected: n,
            got: x_t.cols(),
        });
    }
    let (q, d) = (x_t.rows(), y.cols());
    let mut out = vec![0.0; q * d];
    for (r, &l) in pi.indices.iter().enumerate() {
        let l = l as usize;
        if l >= n {
            return Err(Error::SampleIndexOutOfRange { index: l, n });
        }
        let w2 = pi.weights[r] * pi.weights[r];
        let yl = y.row(l);
        for a in 0..q {
            let coeff = w2 * x_t.get(a, l);
            let dst = &mut out[a * d..(a + 1) * d];
            for (o, &yv) in dst.iter_mut().zip(yl.iter()) {
                *o += coeff * yv;
            }
        }
    }
    // Per sampled row: the weight square, one scale per output row, and a
    // multiply-accumulate per output entry.
    meter.add_flops(pi.m() as u64 * (1 + q as u64 * (1 + 2 * d as u64)));
    meter.alloc((q * d * 8) as u64);
    Ok(DenseMatrix::new(q, d, out)?)
}
