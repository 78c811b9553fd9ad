//! End-to-end approximate attention.
//!
//! The basic variant estimates the softmax normalizers, importance-samples
//! `m` key columns by their estimated contribution to the output, and
//! returns `D~^-1 A Pi^T Pi V` built from those columns alone. The
//! practical variant first extracts the hash-collided heavy entries of `A`
//! into a block-sparse component, applies it exactly, and spends the
//! sampling budget only on the residual, whose sampling distribution
//! subtracts the mass the sparse component already covers.
//!
//! Sampling distributions combine two terms per key `j`: the estimated
//! squared column norm of the normalized attention matrix (`beta_j`) and
//! `gamma * |v_j|^2` with `gamma = |V|_op^-2`, so keys matter both for how
//! much attention they receive and for how much value mass they carry.

use crate::amm::{build_distribution, draw_sampling_matrix, SamplingDistribution, SamplingMatrix};
use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::lsh::{
    equalize_buckets, hash_points, sparse_attention, AngularLshFunction, BucketAssignment,
    SparseComponent,
};
use crate::matrix::{attention_normalizers, operator_norm, AttentionInputs, DenseMatrix};
use crate::wexp::{wexp_kde, WexpParams};

/// Negative residual column-norm estimates (possible because the column
/// norms are themselves approximate) are clamped to this fraction of the
/// largest estimate, keeping every sampling probability positive.
pub const RESIDUAL_CLAMP_REL: f64 = 1e-12;

/// Relative accuracy used for the column-norm estimates feeding the
/// sampling distribution; a constant-factor estimate is enough because
/// sampling probabilities only need to dominate the true ones up to a
/// constant.
const COLUMN_NORM_EPSILON: f64 = 1.0 / 3.0;

const OPNORM_TOL: f64 = 1e-10;
const OPNORM_ITERS: usize = 10_000;

/// Estimated softmax normalizers: `alpha[i]` approximates the row sum
/// `D_ii` within `(1 +- epsilon_used/3)`.
#[derive(Debug, Clone)]
pub struct ScalingEstimate {
    alpha: Vec<f64>,
    epsilon_used: f64,
}

impl ScalingEstimate {
    /// Validates that every normalizer is positive and finite.
    pub fn new(alpha: Vec<f64>, epsilon_used: f64) -> Result<Self> {
        for &a in &alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::BadParameter {
                    name: "alpha entry",
                    value: a,
                    range: "(0, inf)",
                });
            }
        }
        if alpha.is_empty() {
            return Err(Error::Empty {
                context: "scaling estimate",
            });
        }
        Ok(ScalingEstimate {
            alpha,
            epsilon_used,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn epsilon_used(&self) -> f64 {
        self.epsilon_used
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        (self.alpha.len() * 8) as u64
    }
}

/// Whether the pipeline estimates its normalizers and column norms or
/// replaces them by the exact dense oracles (test/regression mode: the
/// oracle costs a full dense pass).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMode {
    Estimated,
    ExactOracle,
}

/// Shape of the hash-derived sparse component.
#[derive(Debug, Clone, Copy)]
pub struct LshConfig {
    /// Hyperplane count (label bits).
    pub rank_r: usize,
    /// Rows per equalized block on each side.
    pub block_size: usize,
}

/// Everything the sampling front-end produces: the normalizer estimates,
/// the column distribution they induce, and the drawn sampling matrix.
#[derive(Debug)]
pub struct SamplerOutput {
    pub scaling: ScalingEstimate,
    pub distribution: SamplingDistribution,
    pub sampler: SamplingMatrix,
}

/// Approximate attention output with its audit trail.
#[derive(Debug)]
pub struct ApproxAttentionOutput {
    /// `n_q x d_v`, same shape as exact attention; all entries finite.
    pub output: DenseMatrix,
    pub scaling: ScalingEstimate,
    pub sampler: SamplingMatrix,
    /// Stored entries of the sparse component (zero for the basic variant).
    pub sparse_nnz: usize,
    /// Block assignments behind the sparse component (`None` for the basic
    /// variant), kept so callers can audit the sparse/residual split.
    pub buckets: Option<(BucketAssignment, BucketAssignment)>,
    /// Floating-point operations spent inside this call.
    pub flops: u64,
}

fn validate_budget(m: usize, epsilon: f64) -> Result<()> {
    if m == 0 {
        return Err(Error::BadParameter {
            name: "m",
            value: 0.0,
            range: "[1, inf)",
        });
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::BadParameter {
            name: "epsilon",
            value: epsilon,
            range: "(0, 1)",
        });
    }
    Ok(())
}

/// Copy of `m` with every entry multiplied by `fac`.
fn scaled_copy(m: &DenseMatrix, fac: f64, meter: &CostMeter) -> Result<DenseMatrix> {
    let data: Vec<f64> = m.data().iter().map(|v| v * fac).collect();
    meter.add_flops(data.len() as u64);
    let out = DenseMatrix::new(m.rows(), m.cols(), data)?;
    meter.alloc(out.bytes());
    Ok(out)
}

fn free_matrix(m: DenseMatrix, meter: &CostMeter) {
    meter.free(m.bytes());
}

/// `gamma = |V|_op^-2`, or zero for an all-zero value matrix (whose
/// contribution to the output is zero regardless of sampling).
fn value_gamma(v: &DenseMatrix, meter: &CostMeter) -> f64 {
    let op = operator_norm(v, OPNORM_TOL, OPNORM_ITERS, meter).value;
    if op > 0.0 {
        meter.add_flops(2);
        1.0 / (op * op)
    } else {
        0.0
    }
}

fn row_norms_sq(m: &DenseMatrix, meter: &CostMeter) -> Vec<f64> {
    let out: Vec<f64> = (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v * v).sum())
        .collect();
    meter.add_flops((m.rows() * m.cols() * 2) as u64);
    out
}

/// Normalizer estimates for every query row: weighted exponential kernel
/// sums over the keys at relative error `epsilon/3`.
fn estimate_alpha(
    inp: &AttentionInputs,
    epsilon: f64,
    seed: u64,
    meter: &CostMeter,
) -> Result<ScalingEstimate> {
    let d = inp.dim();
    let fac = 1.0 / (d as f64).powf(0.25);
    let keys = scaled_copy(inp.k(), fac, meter)?;
    let queries = scaled_copy(inp.q(), fac, meter)?;
    let ones = vec![1.0; inp.n_keys()];
    let params = WexpParams::new(epsilon / 3.0)?;
    let report = wexp_kde(&keys, &queries, &ones, &params, mix64(seed, 1), meter)?;
    free_matrix(keys, meter);
    free_matrix(queries, meter);
    ScalingEstimate::new(report.alpha, epsilon)
}

/// Squared-column-norm estimates of the normalized attention matrix:
/// `beta_j ~ sum_i alpha_i^-2 exp(2 <q_i, k_j> / sqrt(d))`, one per key.
fn estimate_beta(
    inp: &AttentionInputs,
    scaling: &ScalingEstimate,
    seed: u64,
    meter: &CostMeter,
) -> Result<Vec<f64>> {
    let d = inp.dim();
    let fac = std::f64::consts::SQRT_2 / (d as f64).powf(0.25);
    let queries = scaled_copy(inp.q(), fac, meter)?;
    let keys = scaled_copy(inp.k(), fac, meter)?;
    let u: Vec<f64> = scaling.alpha().iter().map(|&a| 1.0 / (a * a)).collect();
    meter.add_flops(2 * u.len() as u64);
    let params = WexpParams::new(COLUMN_NORM_EPSILON)?;
    let report = wexp_kde(&queries, &keys, &u, &params, mix64(seed, 2), meter)?;
    free_matrix(queries, meter);
    free_matrix(keys, meter);
    Ok(report.alpha)
}

/// Exact softmax normalizers, flop-metered like the dense pass it is.
fn oracle_alpha(inp: &AttentionInputs, epsilon: f64, meter: &CostMeter) -> Result<ScalingEstimate> {
    let alpha = attention_normalizers(inp)?;
    meter.add_flops((inp.n_queries() * inp.n_keys() * (2 * inp.dim() + 2)) as u64);
    ScalingEstimate::new(alpha, epsilon)
}

/// Exact `beta_j = sum_i u_i exp(2 <q_i, k_j> / sqrt(d))` for the oracle
/// mode, where `u_i = alpha_i^-2`.
fn oracle_beta(
    inp: &AttentionInputs,
    scaling: &ScalingEstimate,
    meter: &CostMeter,
) -> Result<Vec<f64>> {
    let (n_q, n_k, d) = (inp.n_queries(), inp.n_keys(), inp.dim());
    let scale = 2.0 / (d as f64).sqrt();
    let u: Vec<f64> = scaling.alpha().iter().map(|&a| 1.0 / (a * a)).collect();
    let mut beta = vec![0.0; n_k];
    for i in 0..n_q {
        let qi = inp.q().row(i);
        for (j, b) in beta.iter_mut().enumerate() {
            let dot: f64 = qi.iter().zip(inp.k().row(j)).map(|(a, c)| a * c).sum();
            let e = (dot * scale).exp();
            if !e.is_finite() {
                return Err(Error::Overflow {
                    context: "oracle column norm exponential",
                    row: i,
                });
            }
            *b += u[i] * e;
        }
    }
    meter.add_flops((2 * n_q + n_q * n_k * (2 * d + 4)) as u64);
    Ok(beta)
}

/// Normalizer estimates plus the column-sampling distribution and a drawn
/// sampling matrix of `m` columns.
///
/// At `m >= n_keys` the random draw is replaced by the deterministic full
/// selection (every column once, unit weight), making the downstream
/// sampled product exact.
pub fn kdeformer_sampler(
    inp: &AttentionInputs,
    m: usize,
    epsilon: f64,
    seed: u64,
    meter: &CostMeter,
) -> Result<SamplerOutput> {
    validate_budget(m, epsilon)?;
    let scaling = estimate_alpha(inp, epsilon, seed, meter)?;
    let beta = estimate_beta(inp, &scaling, seed, meter)?;
    let gamma = value_gamma(inp.v(), meter);
    let vnorms = row_norms_sq(inp.v(), meter);
    let distribution = build_distribution(&beta, &vnorms, gamma, meter)?;
    let sampler = if m >= inp.n_keys() {
        SamplingMatrix::deterministic_full(inp.n_keys())
    } else {
        draw_sampling_matrix(&distribution, m, mix64(seed, 3), meter)?
    };
    Ok(SamplerOutput {
        scaling,
        distribution,
        sampler,
    })
}

/// Sampling distribution for the residual after the sparse component:
/// `p_j ∝ max(beta_j - sparse_col_sq_j, floor) + gamma * |v_j|^2`.
///
/// `sparse_col_sq` must be the per-key collision mass weighted by the SAME
/// normalizers passed as `alpha` (`sum_i alpha_i^-2 a_ij^2` over stored
/// entries), so the subtraction matches the column norms `beta` estimates;
/// `alpha` itself only guards that precondition's sanity here. The floor is
/// [`RESIDUAL_CLAMP_REL`] times the largest `beta_j`.
pub fn residual_distribution(
    beta: &[f64],
    alpha: &[f64],
    sparse_col_sq: &[f64],
    gamma: f64,
    row_norms_v_sq: &[f64],
    meter: &CostMeter,
) -> Result<SamplingDistribution> {
    if beta.len() != sparse_col_sq.len() {
        return Err(Error::DimensionMismatch {
            context: "residual_distribution sparse column mass",
            expected: beta.len(),
            got: sparse_col_sq.len(),
        });
    }
    for &a in alpha {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::BadParameter {
                name: "alpha entry",
                value: a,
                range: "(0, inf)",
            });
        }
    }
    let max_beta = beta.iter().cloned().fold(0.0f64, f64::max);
    let floor = RESIDUAL_CLAMP_REL * max_beta;
    let residual: Vec<f64> = beta
        .iter()
        .zip(sparse_col_sq.iter())
        .map(|(&b, &s)| (b - s).max(floor))
        .collect();
    meter.add_flops(2 * beta.len() as u64);
    build_distribution(&residual, row_norms_v_sq, gamma, meter)
}

/// Sampled half of the output: `out[i,:] += w_r^2 * A[i, l_r] * V[l_r,:]`
/// over the drawn columns, skipping entries claimed by the sparse pattern
/// (`skip` returns the colliding query rows of a key column). Returns the
/// accumulator before the `1/alpha_i` row scaling.
fn sampled_column_sum(
    inp: &AttentionInputs,
    pi: &SamplingMatrix,
    skip: Option<(&BucketAssignment, &BucketAssignment)>,
    meter: &CostMeter,
) -> Result<Vec<f64>> {
    let (n_q, n_k) = (inp.n_queries(), inp.n_keys());
    let (d, d_v) = (inp.dim(), inp.dim_v());
    let scale = 1.0 / (d as f64).sqrt();

    // Key column -> sorted block, to find its colliding queries.
    let pos_k: Option<Vec<usize>> = skip.map(|(_, bk)| {
        let mut pos = vec![0usize; n_k];
        for (p, &i) in bk.permutation().iter().enumerate() {
            pos[i as usize] = p;
        }
        pos
    });

    let mut acc = vec![0.0; n_q * d_v];
    meter.alloc((n_q * d_v * 8) as u64);
    let mut collided = vec![false; n_q];
    let mut flops: u64 = 0;
    for (r, &l) in pi.indices().iter().enumerate() {
        let l = l as usize;
        if l >= n_k {
            return Err(Error::SampleIndexOutOfRange { index: l, n: n_k });
        }
        let w = pi.weights()[r];
        let w2 = w * w;
        let colliders: &[u32] = match (&skip, &pos_k) {
            (Some((bq, _)), Some(pos)) => bq.block_members(pos[l] / bq.block_size()),
            _ => &[],
        };
        for &qi in colliders {
            collided[qi as usize] = true;
        }
        let krow = inp.k().row(l);
        let vrow = inp.v().row(l);
        for i in 0..n_q {
            if collided[i] {
                continue;
            }
            let dot: f64 = inp.q().row(i).iter().zip(krow).map(|(a, b)| a * b).sum();
            let a = (dot * scale).exp();
            if !a.is_finite() {
                return Err(Error::Overflow {
                    context: "sampled attention exponential",
                    row: i,
                });
            }
            let coeff = w2 * a;
            let dst = &mut acc[i * d_v..(i + 1) * d_v];
            for (o, &vv) in dst.iter_mut().zip(vrow) {
                *o += coeff * vv;
            }
            flops += (2 * d + 3 + 2 * d_v) as u64;
        }
        flops += 1; // w^2
        for &qi in colliders {
            collided[qi as usize] = false;
        }
    }
    meter.add_flops(flops);
    Ok(acc)
}

/// Basic variant: `D~^-1 A Pi^T Pi V` from `m` sampled key columns, cost
/// `O(n m (d + d_v))`; never materializes the full attention matrix.
pub fn approximate_attention_basic(
    inp: &AttentionInputs,
    m: usize,
    epsilon: f64,
    mode: ScalingMode,
    seed: u64,
    meter: &CostMeter,
) -> Result<ApproxAttentionOutput> {
    let flops_start = meter.flops();
    validate_budget(m, epsilon)?;
    let (scaling, sampler) = match mode {
        ScalingMode::Estimated => {
            let out = kdeformer_sampler(inp, m, epsilon, seed, meter)?;
            (out.scaling, out.sampler)
        }
        ScalingMode::ExactOracle => {
            let scaling = oracle_alpha(inp, epsilon, meter)?;
            let sampler = if m >= inp.n_keys() {
                SamplingMatrix::deterministic_full(inp.n_keys())
            } else {
                let beta = oracle_beta(inp, &scaling, meter)?;
                let gamma = value_gamma(inp.v(), meter);
                let vnorms = row_norms_sq(inp.v(), meter);
                let dist = build_distribution(&beta, &vnorms, gamma, meter)?;
                draw_sampling_matrix(&dist, m, mix64(seed, 3), meter)?
            };
            (scaling, sampler)
        }
    };

    let mut acc = sampled_column_sum(inp, &sampler, None, meter)?;
    let d_v = inp.dim_v();
    for (i, &a) in scaling.alpha().iter().enumerate() {
        let inv = 1.0 / a;
        for x in &mut acc[i * d_v..(i + 1) * d_v] {
            *x *= inv;
        }
    }
    meter.add_flops((scaling.len() * (1 + d_v)) as u64);
    let output = DenseMatrix::new(inp.n_queries(), d_v, acc)?;

    Ok(ApproxAttentionOutput {
        output,
        scaling,
        sampler,
        sparse_nnz: 0,
        buckets: None,
        flops: meter.flops() - flops_start,
    })
}

/// Practical variant: hash-extracted block-sparse component applied
/// exactly in `O(d * nnz)`, plus a sampled residual whose distribution
/// subtracts the sparse component's per-column mass. Sampled columns skip
/// collided entries, so nothing is counted twice.
pub fn approximate_attention_practical(
    inp: &AttentionInputs,
    m: usize,
    epsilon: f64,
    lsh: LshConfig,
    mode: ScalingMode,
    seed: u64,
    meter: &CostMeter,
) -> Result<ApproxAttentionOutput> {
    let flops_start = meter.flops();
    validate_budget(m, epsilon)?;
    let scaling = match mode {
        ScalingMode::Estimated => estimate_alpha(inp, epsilon, seed, meter)?,
        ScalingMode::ExactOracle => oracle_alpha(inp, epsilon, meter)?,
    };

    let f = AngularLshFunction::new(lsh.rank_r, inp.dim(), mix64(seed, 11), meter)?;
    let labels_q = hash_points(&f, inp.q(), meter)?;
    let labels_k = hash_points(&f, inp.k(), meter)?;
    let (bq, bk) = equalize_buckets(&labels_q, &labels_k, lsh.block_size, meter)?;
    let sparse = sparse_attention(inp, &bq, &bk, meter)?;

    let beta = match mode {
        ScalingMode::Estimated => estimate_beta(inp, &scaling, seed, meter)?,
        ScalingMode::ExactOracle => oracle_beta(inp, &scaling, meter)?,
    };
    let u: Vec<f64> = scaling.alpha().iter().map(|&a| 1.0 / (a * a)).collect();
    meter.add_flops(2 * u.len() as u64);
    let sparse_col_sq = sparse.column_squares_weighted(&u, meter)?;
    let gamma = value_gamma(inp.v(), meter);
    let vnorms = row_norms_sq(inp.v(), meter);
    let dist = residual_distribution(&beta, scaling.alpha(), &sparse_col_sq, gamma, &vnorms, meter)?;
    let sampler = if m >= inp.n_keys() {
        SamplingMatrix::deterministic_full(inp.n_keys())
    } else {
        draw_sampling_matrix(&dist, m, mix64(seed, 3), meter)?
    };

    let inv_alpha: Vec<f64> = scaling.alpha().iter().map(|&a| 1.0 / a).collect();
    meter.add_flops(inv_alpha.len() as u64);
    let sparse_out = sparse.apply_scaled(&inv_alpha, inp.v(), meter)?;
    let mut acc = sampled_column_sum(inp, &sampler, Some((&bq, &bk)), meter)?;

    let d_v = inp.dim_v();
    for i in 0..inp.n_queries() {
        let inv = inv_alpha[i];
        let srow = sparse_out.row(i);
        for (x, &s) in acc[i * d_v..(i + 1) * d_v].iter_mut().zip(srow) {
            *x = *x * inv + s;
        }
    }
    meter.add_flops((inp.n_queries() * 2 * d_v) as u64);
    free_matrix(sparse_out, meter);
    let output = DenseMatrix::new(inp.n_queries(), d_v, acc)?;

    Ok(ApproxAttentionOutput {
        output,
        scaling,
        sampler,
        sparse_nnz: sparse.nnz(),
        buckets: Some((bq, bk)),
        flops: meter.flops() - flops_start,
    })
}

/// Dense form of the sparse/residual split for small oracles: returns
/// `(A_spar, A - A_spar)` as dense matrices in original indices.
pub fn dense_split(
    inp: &AttentionInputs,
    sparse: &SparseComponent,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let (n_q, n_k, d) = (inp.n_queries(), inp.n_keys(), inp.dim());
    let scale = 1.0 / (d as f64).sqrt();
    let spar = sparse.to_dense();
    let mut res = DenseMatrix::zeros(n_q, n_k);
    for i in 0..n_q {
        let qi = inp.q().row(i);
        for j in 0..n_k {
            let dot: f64 = qi.iter().zip(inp.k().row(j)).map(|(a, b)| a * b).sum();
            let a = (dot * scale).exp();
            if !a.is_finite() {
                return Err(Error::Overflow {
                    context: "dense split exponential",
                    row: i,
                });
            }
            res.set(i, j, a - spar.get(i, j));
        }
    }
    Ok((spar, res))
}

/// Residual sample count for a total working-memory budget of `n * k`
/// when the sparse component holds `ceil(n/block_size) * block_size^2`
/// entries: the sparse part consumes `nnz/n` columns' worth of the budget
/// and the rest goes to sampling. Never returns less than one sample.
pub fn residual_samples_for_budget(k: usize, n: usize, block_size: usize) -> usize {
    let num_blocks = n.div_ceil(block_size);
    let sparse_cols = (num_blocks * block_size * block_size).div_ceil(n);
    k.saturating_sub(sparse_cols).max(1)
}

fn mix64(seed: u64, v: u64) -> u64 {
    let mut z = seed ^ v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
