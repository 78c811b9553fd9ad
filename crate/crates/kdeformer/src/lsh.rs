//! Sign-pattern (angular) locality-sensitive hashing with equal-sized
//! buckets, plus the block-diagonal sparse attention component built on it.
//!
//! A rank-`r` hash labels a point by the `r` signs of random hyperplane
//! projections, so two points collide with probability `(1 - theta/pi)^r`
//! in their angle `theta`. Raw buckets are uneven; to get even ones the
//! points are sorted by the Gray rank of their label — an ordering of all
//! r-bit labels in which consecutive labels differ in exactly one bit, so
//! consecutive buckets are geometric neighbors — and the sorted sequence is
//! cut into fixed-size blocks. Spillover from uneven buckets then only
//! crosses into Gray-adjacent buckets at block boundaries.
//!
//! [`sparse_attention`] pairs the i-th block of sorted queries with the
//! i-th block of sorted keys and materializes exactly those rectangles of
//! `exp(<q, k> / sqrt(d))`, i.e. the diagonal blocks of the permuted
//! attention matrix, reverse-permuted back to original indices.

use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::matrix::{AttentionInputs, DenseMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Largest supported label width in bits.
pub const MAX_LSH_RANK: usize = 30;

/// All `2^r` r-bit labels ordered so consecutive labels differ in exactly
/// one bit, built by reflect-and-append: the order for `r` bits is the
/// order for `r-1` bits with a 0 appended as the new most significant bit,
/// followed by the same order reversed with a 1 appended.
pub fn gray_order(r: usize) -> Result<Vec<u32>> {
    if r == 0 || r > MAX_LSH_RANK {
        return Err(Error::BadLshRank { got: r });
    }
    let mut seq: Vec<u32> = vec![0, 1];
    for bit in 1..r {
        let half = seq.len();
        for j in (0..half).rev() {
            seq.push(seq[j] | (1 << bit));
        }
    }
    Ok(seq)
}

/// Position of `label` in [`gray_order`] of any width covering it: the
/// standard prefix-xor inverse of the reflected code.
pub fn gray_rank(label: u32) -> u32 {
    let mut rank = label;
    rank ^= rank >> 1;
    rank ^= rank >> 2;
    rank ^= rank >> 4;
    rank ^= rank >> 8;
    rank ^= rank >> 16;
    rank
}

/// Rank-`r` hyperplane hash: label bit `k` (value `1 << k`) is set when the
/// k-th hyperplane normal has nonnegative inner product with the point.
#[derive(Debug, Clone)]
pub struct AngularLshFunction {
    rank_r: usize,
    normals: DenseMatrix,
    seed: u64,
}

impl AngularLshFunction {
    /// Draws `rank_r` i.i.d. standard Gaussian normals in dimension `dim`,
    /// deterministically in `seed`.
    pub fn new(rank_r: usize, dim: usize, seed: u64, meter: &CostMeter) -> Result<Self> {
        if rank_r == 0 || rank_r > MAX_LSH_RANK {
            return Err(Error::BadLshRank { got: rank_r });
        }
        if dim == 0 {
            return Err(Error::Empty {
                context: "angular lsh dimension",
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rank_r * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let normals = DenseMatrix::new(rank_r, dim, data)?;
        meter.alloc(normals.bytes());
        Ok(AngularLshFunction {
            rank_r,
            normals,
            seed,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank_r
    }

    pub fn dim(&self) -> usize {
        self.normals.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bytes(&self) -> u64 {
        self.normals.bytes()
    }
}

/// Per-point r-bit labels from the hyperplane signs.
pub fn hash_points(
    f: &AngularLshFunction,
    pts: &DenseMatrix,
    meter: &CostMeter,
) -> Result<Vec<u32>> {
    let d = f.dim();
    if pts.cols() != d {
        return Err(Error::DimensionMismatch {
            context: "hash_points dimension",
            expected: d,
            got: pts.cols(),
        });
    }
    let n = pts.rows();
    let mut labels = vec![0u32; n];
    for (i, label) in labels.iter_mut().enumerate() {
        let x = pts.row(i);
        for k in 0..f.rank_r {
            let w = f.normals.row(k);
            let dot: f64 = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            if dot >= 0.0 {
                *label |= 1 << k;
            }
        }
    }
    meter.add_flops((n * f.rank_r * 2 * d) as u64);
    Ok(labels)
}

/// One side's bucket layout: points sorted by the Gray rank of their label
/// (stable in the original index), cut into `num_blocks` chunks of at most
/// `block_size` members. Positions past `n` in the padded grid are phantom:
/// they carry no point and no attention mass.
#[derive(Debug, Clone)]
pub struct BucketAssignment {
    raw_labels: Vec<u32>,
    permutation: Vec<u32>,
    block_size: usize,
    num_blocks: usize,
}

impl BucketAssignment {
    /// Number of real points.
    pub fn n(&self) -> usize {
        self.raw_labels.len()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// Grid length including phantom padding.
    pub fn padded_len(&self) -> usize {
        self.block_size * self.num_blocks
    }

    /// Hash label of point `i` in original numbering.
    pub fn raw_labels(&self) -> &[u32] {
        &self.raw_labels
    }

    /// Sorted order: `permutation()[pos]` is the original index of the
    /// point at sorted position `pos`.
    pub fn permutation(&self) -> &[u32] {
        &self.permutation
    }

    /// Original indices of the real members of block `b`.
    pub fn block_members(&self, b: usize) -> &[u32] {
        let lo = (b * self.block_size).min(self.permutation.len());
        let hi = ((b + 1) * self.block_size).min(self.permutation.len());
        &self.permutation[lo..hi]
    }

    pub fn bytes(&self) -> u64 {
        ((self.raw_labels.len() + self.permutation.len()) * 4) as u64
    }
}

/// Sorts queries and keys by the Gray rank of their labels (stable within
/// ties) and chunks both into the same number of `block_size`-sized blocks;
/// the shorter side is padded with phantom positions.
pub fn equalize_buckets(
    labels_q: &[u32],
    labels_k: &[u32],
    block_size: usize,
    meter: &CostMeter,
) -> Result<(BucketAssignment, BucketAssignment)> {
    if block_size == 0 {
        return Err(Error::BadParameter {
            name: "block_size",
            value: 0.0,
            range: "[1, inf)",
        });
    }
    if labels_q.is_empty() || labels_k.is_empty() {
        return Err(Error::Empty {
            context: "equalize_buckets labels",
        });
    }
    let longest = labels_q.len().max(labels_k.len());
    let num_blocks = longest.div_ceil(block_size);
    let build = |labels: &[u32]| -> BucketAssignment {
        let mut perm: Vec<u32> = (0..labels.len() as u32).collect();
        perm.sort_by_key(|&i| gray_rank(labels[i as usize]));
        let ba = BucketAssignment {
            raw_labels: labels.to_vec(),
            permutation: perm,
            block_size,
            num_blocks,
        };
        meter.alloc(ba.bytes());
        ba
    };
    Ok((build(labels_q), build(labels_k)))
}

/// One diagonal block of the permuted attention matrix: the real queries
/// and keys it pairs (original indices) and the dense rectangle of
/// `exp(<q, k> / sqrt(d))` values, row-major per query.
#[derive(Debug, Clone)]
struct SparseBlock {
    q_idx: Vec<u32>,
    k_idx: Vec<u32>,
    values: Vec<f64>,
}

/// Block-sparse attention component: the union of per-block rectangles,
/// indexed by original query/key numbering. Entries not covered by any
/// block are zero.
#[derive(Debug, Clone)]
pub struct SparseComponent {
    blocks: Vec<SparseBlock>,
    n_q: usize,
    n_k: usize,
    nnz: usize,
}

impl SparseComponent {
    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn n_queries(&self) -> usize {
        self.n_q
    }

    pub fn n_keys(&self) -> usize {
        self.n_k
    }

    /// Visits every stored entry as `(query, key, value)`.
    pub fn for_each_entry(&self, mut f: impl FnMut(usize, usize, f64)) {
        for blk in &self.blocks {
            for (a, &qi) in blk.q_idx.iter().enumerate() {
                for (b, &kj) in blk.k_idx.iter().enumerate() {
                    f(qi as usize, kj as usize, blk.values[a * blk.k_idx.len() + b]);
                }
            }
        }
    }

    /// Dense `n_q x n_k` form with zeros off the stored pattern.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_q, self.n_k);
        self.for_each_entry(|i, j, v| out.set(i, j, v));
        out
    }

    /// Row sums of the stored entries — the sparse component's contribution
    /// to each query's softmax normalizer.
    pub fn row_sums(&self, meter: &CostMeter) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_q];
        self.for_each_entry(|i, _, v| sums[i] += v);
        meter.add_flops(self.nnz as u64);
        sums
    }

    /// Per-key sums of squared entries, each query row weighted by `u`:
    /// `out[j] = sum_i u[i] * a_ij^2` over stored entries.
    pub fn column_squares_weighted(&self, u: &[f64], meter: &CostMeter) -> Result<Vec<f64>> {
        if u.len() != self.n_q {
            return Err(Error::DimensionMismatch {
                context: "column_squares_weighted row weights",
                expected: self.n_q,
                got: u.len(),
            });
        }
        let mut sums = vec![0.0; self.n_k];
        self.for_each_entry(|i, j, v| sums[j] += u[i] * v * v);
        meter.add_flops(3 * self.nnz as u64);
        Ok(sums)
    }

    /// Unweighted per-key sums of squared entries.
    pub fn column_squares(&self, meter: &CostMeter) -> Vec<f64> {
        self.column_squares_weighted(&vec![1.0; self.n_q], meter)
            .expect("weights sized to n_q")
    }

    /// `diag(row_scale) * A_spar * v`: the sparse half of the attention
    /// output, touching only stored entries.
    pub fn apply_scaled(
        &self,
        row_scale: &[f64],
        v: &DenseMatrix,
        meter: &CostMeter,
    ) -> Result<DenseMatrix> {
        if row_scale.len() != self.n_q {
            return Err(Error::DimensionMismatch {
                context: "apply_scaled row scales",
                expected: self.n_q,
                got: row_scale.len(),
            });
        }
        if v.rows() != self.n_k {
            return Err(Error::DimensionMismatch {
                context: "apply_scaled value rows",
                expected: self.n_k,
                got: v.rows(),
            });
        }
        let d_v = v.cols();
        let mut out = vec![0.0; self.n_q * d_v];
        for blk in &self.blocks {
            for (a, &qi) in blk.q_idx.iter().enumerate() {
                let dst = &mut out[qi as usize * d_v..(qi as usize + 1) * d_v];
                for (b, &kj) in blk.k_idx.iter().enumerate() {
                    let w = blk.values[a * blk.k_idx.len() + b] * row_scale[qi as usize];
                    for (o, &vv) in dst.iter_mut().zip(v.row(kj as usize)) {
                        *o += w * vv;
                    }
                }
            }
        }
        meter.add_flops(self.nnz as u64 * (2 * d_v as u64 + 1));
        meter.alloc((self.n_q * d_v * 8) as u64);
        DenseMatrix::new(self.n_q, d_v, out)
    }

    pub fn bytes(&self) -> u64 {
        self.blocks
            .iter()
            .map(|b| (b.q_idx.len() * 4 + b.k_idx.len() * 4 + b.values.len() * 8) as u64)
            .sum()
    }
}

/// Materializes the diagonal blocks of the permuted attention matrix:
/// block `b` of sorted queries attends block `b` of sorted keys, and every
/// stored value is `exp(<q_i, k_j> / sqrt(d))` in original indices.
/// Phantom padding positions carry no entries.
pub fn sparse_attention(
    inp: &AttentionInputs,
    ba_q: &BucketAssignment,
    ba_k: &BucketAssignment,
    meter: &CostMeter,
) -> Result<SparseComponent> {
    if ba_q.num_blocks != ba_k.num_blocks {
        return Err(Error::BlockMismatch {
            q_blocks: ba_q.num_blocks,
            k_blocks: ba_k.num_blocks,
        });
    }
    if ba_q.n() != inp.n_queries() {
        return Err(Error::DimensionMismatch {
            context: "sparse_attention query assignment",
            expected: inp.n_queries(),
            got: ba_q.n(),
        });
    }
    if ba_k.n() != inp.n_keys() {
        return Err(Error::DimensionMismatch {
            context: "sparse_attention key assignment",
            expected: inp.n_keys(),
            got: ba_k.n(),
        });
    }
    let d = inp.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut blocks = Vec::with_capacity(ba_q.num_blocks);
    let mut nnz = 0usize;
    for b in 0..ba_q.num_blocks {
        let q_idx = ba_q.block_members(b);
        let k_idx = ba_k.block_members(b);
        if q_idx.is_empty() || k_idx.is_empty() {
            continue;
        }
        let mut values = Vec::with_capacity(q_idx.len() * k_idx.len());
        for &qi in q_idx {
            let qrow = inp.q().row(qi as usize);
            for &kj in k_idx {
                let krow = inp.k().row(kj as usize);
                let dot: f64 = qrow.iter().zip(krow.iter()).map(|(a, b)| a * b).sum();
                let v = (dot * scale).exp();
                if !v.is_finite() {
                    return Err(Error::Overflow {
                        context: "sparse attention exponential",
                        row: qi as usize,
                    });
                }
                values.push(v);
            }
        }
        nnz += values.len();
        blocks.push(SparseBlock {
            q_idx: q_idx.to_vec(),
            k_idx: k_idx.to_vec(),
            values,
        });
    }
    meter.add_flops(nnz as u64 * (2 * d as u64 + 2));
    let sc = SparseComponent {
        blocks,
        n_q: inp.n_queries(),
        n_k: inp.n_keys(),
        nnz,
    };
    meter.alloc(sc.bytes());
    Ok(sc)
}
