//! Gaussian kernel-density estimation with a density floor.
//!
//! `exact_gaussian_kde` is the linear-scan reference. `preprocess_kde` /
//! `query_kde` implement the sublinear estimator behind the floor contract:
//! queries whose density falls below `mu_floor` report zero, queries at or
//! above it get a `(1 +- epsilon)` estimate with high probability.
//!
//! The structure hashes the dataset with Euclidean (bucketed projection) LSH
//! at a ladder of geometric scale levels. A query is answered by three arms,
//! cheapest first:
//!
//! 1. a uniform-sampling arm whose variance bound covers high-density
//!    queries at a few hundred kernel evaluations;
//! 2. per level, the exact "head": points from the query's bucket union are
//!    stamped and evaluated exactly (importance concentrates there); when
//!    the union is large only multi-table colliders are stamped, while
//! 3. the "tail" (everything not yet stamped) is estimated by uniform
//!    sampling with an empirical-Bernstein stopping rule.
//!
//! Descending a level widens the buckets, growing the head and shrinking the
//! worst-case tail kernel value, so the confidence target is eventually met;
//! once buckets stop discriminating, the query completes exactly instead of
//! descending further. The estimate `head/n + mean(tail)` is unbiased at
//! every level; capture quality only affects cost.
//!
//! Internally the descent is resumable: a [`QueryCursor`] holds the arm
//! state so a driver that lowers its floor round by round can continue each
//! query where it paused instead of re-descending, and [`extend_ladder`]
//! appends deeper levels to an existing structure (cheap, since the
//! projection pass is shared). All sampling is driven by a stream derived
//! from the structure seed and the query's bit pattern, so identical inputs
//! give bitwise identical outputs and concurrent queries are safe.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Concatenated projections per hash table; sharpens bucket discrimination.
const LSH_CONCAT: usize = 3;
/// Bucket width as a multiple of the level's capture radius.
const WIDTH_MULT: f64 = 2.0;
/// Kernel-value ratio between consecutive scale levels.
const LEVEL_RATIO: f64 = 4.0;
/// Kernel value targeted by the tightest level.
const TOP_LEVEL_KERNEL: f64 = 0.5;
/// Tail draws per stopping-rule check.
const TAIL_BATCH: usize = 64;
/// Batches to spend per level before widening the head.
const MAX_BATCHES_PER_LEVEL: usize = 4;
/// Batches allowed at the loosest level before accepting the estimate as is.
const LAST_LEVEL_MAX_BATCHES: usize = 32;
/// Bucket-union size above which the head keeps only members colliding in
/// at least two tables. Isolated single-table collisions are dominated by
/// unrelated far-away points, and evaluating them exactly would cost a
/// large fraction of a full scan; leaving them in the sampled tail keeps
/// the estimate unbiased at a fraction of the price.
const UNION_FILTER_TRIGGER: usize = 8 * TAIL_BATCH;
/// Cap on the uniform arm before falling through to the bucketed arms.
const UNIFORM_ARM_BATCHES: usize = 8;
/// Confidence multiplier for the empirical-Bernstein halfwidth.
const Z_CONF: f64 = 2.4;

/// Parameters for [`preprocess_kde`]. `repetitions` sets the minimum number
/// of tail batches before the stopping rule may fire; `hash_tables` is the
/// number of independent LSH tables per scale level. `top_kernel` is an
/// upper bound on any point's kernel value at any query: the ladder's
/// tightest level targets it, so callers that know their geometry caps the
/// kernel below 1 (see the augmented exponential-sum driver) skip scale
/// levels whose buckets could never discriminate.
#[derive(Debug, Clone)]
pub struct KdeParams {
    pub epsilon: f64,
    pub mu_floor: f64,
    pub repetitions: usize,
    pub hash_tables: usize,
    pub top_kernel: f64,
}

impl KdeParams {
    pub fn new(epsilon: f64, mu_floor: f64) -> Result<Self> {
        let p = Self {
            epsilon,
            mu_floor,
            repetitions: 2,
            hash_tables: 24,
            top_kernel: TOP_LEVEL_KERNEL,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::BadParameter {
                name: "epsilon",
                value: self.epsilon,
                range: "(0, 1)",
            });
        }
        if !(self.mu_floor > 0.0 && self.mu_floor < 1.0) {
            return Err(Error::BadParameter {
                name: "mu_floor",
                value: self.mu_floor,
                range: "(0, 1)",
            });
        }
        if self.repetitions < 1 {
            return Err(Error::BadParameter {
                name: "repetitions",
                value: self.repetitions as f64,
                range: ">= 1",
            });
        }
        if self.hash_tables < 1 {
            return Err(Error::BadParameter {
                name: "hash_tables",
                value: self.hash_tables as f64,
                range: ">= 1",
            });
        }
        if !(self.top_kernel > 0.0 && self.top_kernel <= 1.0) {
            return Err(Error::BadParameter {
                name: "top_kernel",
                value: self.top_kernel,
                range: "(0, 1]",
            });
        }
        Ok(())
    }
}

/// Query structure built by [`preprocess_kde`]; append-only via
/// [`extend_ladder`], otherwise immutable.
pub struct KdeDataStructure {
    points: DenseMatrix,
    params: KdeParams,
    seed: u64,
    offsets_seed: u64,
    /// Projection directions, one slice of `dim` per (table, concat) pair.
    directions: Vec<f64>,
    /// Per level: bucket width and per-(table, concat) offsets.
    levels: Vec<LevelTables>,
    /// Packed bucket label per (level, table, point); used for membership
    /// tests when classifying tail samples.
    labels: Vec<u64>,
}

struct LevelTables {
    width: f64,
    offsets: Vec<f64>,
    /// One bucket map per table: packed label -> member indices.
    buckets: Vec<HashMap<u64, Vec<u32>>>,
}

impl KdeDataStructure {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn params(&self) -> &KdeParams {
        &self.params
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Bytes of the numeric payload (dataset copy, projection directions,
    /// labels, bucket member lists) for the analytic memory model.
    pub fn bytes(&self) -> u64 {
        let members: usize = self
            .levels
            .iter()
            .flat_map(|l| l.buckets.iter())
            .map(|b| b.values().map(|v| v.len() * 4).sum::<usize>())
            .sum();
        self.points.bytes()
            + ((self.directions.len() + self.labels.len()) * 8) as u64
            + members as u64
    }
}

/// Exact Gaussian KDE `mu_X(q) = (1/n) sum_i exp(-||q - x_i||^2 / 2)`,
/// evaluated with a max-shift so far-away datasets underflow gracefully.
pub fn exact_gaussian_kde(x: &DenseMatrix, q: &[f64]) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::Empty {
            context: "exact_gaussian_kde dataset",
        });
    }
    if q.len() != x.cols() {
        return Err(Error::DimensionMismatch {
            context: "exact_gaussian_kde query dimension",
            expected: x.cols(),
            got: q.len(),
        });
    }
    let n = x.rows();
    let mut exponents = Vec::with_capacity(n);
    let mut max_e = f64::NEG_INFINITY;
    for i in 0..n {
        let e = -0.5 * sq_dist(q, x.row(i));
        max_e = max_e.max(e);
        exponents.push(e);
    }
    let sum: f64 = exponents.iter().map(|e| (e - max_e).exp()).sum();
    Ok((max_e + sum.ln() - (n as f64).ln()).exp())
}

/// Projection pass shared by every level (and reusable across structures
/// over the same dataset): Gaussian directions plus each point's projected
/// coordinates. This is the only O(n d) part of preprocessing, so callers
/// that deepen structures at successively lower floors (see the weighted
/// exponential driver) compute it once.
pub(crate) struct SharedProjections {
    tables: usize,
    directions: Vec<f64>,
    proj: Vec<f64>,
}

impl SharedProjections {
    pub(crate) fn bytes(&self) -> u64 {
        ((self.directions.len() + self.proj.len()) * 8) as u64
    }
}

/// Draw directions and project every point once. Deterministic in the seed.
pub(crate) fn project_points(
    x: &DenseMatrix,
    tables: usize,
    seed: u64,
    meter: &CostMeter,
) -> SharedProjections {
    let n = x.rows();
    let d = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, 0x9e37_79b9_7f4a_7c15));
    let mut directions = vec![0.0; tables * LSH_CONCAT * d];
    for v in directions.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let mut proj = vec![0.0; n * tables * LSH_CONCAT];
    for i in 0..n {
        let row = x.row(i);
        for p in 0..tables * LSH_CONCAT {
            proj[i * tables * LSH_CONCAT + p] = dot_slices(row, &directions[p * d..(p + 1) * d]);
        }
    }
    meter.add_flops((n * tables * LSH_CONCAT * 2 * d) as u64);
    let shared = SharedProjections {
        tables,
        directions,
        proj,
    };
    meter.alloc(shared.bytes());
    shared
}

/// Build the leveled LSH structure. Deterministic for a fixed seed; the
/// returned structure is immutable and safe to query from many threads.
pub fn preprocess_kde(
    x: &DenseMatrix,
    params: &KdeParams,
    seed: u64,
    meter: &CostMeter,
) -> Result<KdeDataStructure> {
    params.validate()?;
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Empty {
            context: "preprocess_kde dataset",
        });
    }
    let shared = project_points(x, params.hash_tables, mix64(seed, 0xd1ec), meter);
    let ds = preprocess_with(x, params, mix64(seed, 0x0ff5), &shared, meter);
    meter.free(shared.bytes());
    ds
}

/// Build a structure re-using an existing projection pass. Each level's
/// offsets are seeded from `(offsets_seed, level index)`, so a ladder built
/// in one shot and a ladder extended level by level are identical.
pub(crate) fn preprocess_with(
    x: &DenseMatrix,
    params: &KdeParams,
    offsets_seed: u64,
    shared: &SharedProjections,
    meter: &CostMeter,
) -> Result<KdeDataStructure> {
    params.validate()?;
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Empty {
            context: "preprocess_kde dataset",
        });
    }
    if params.hash_tables != shared.tables {
        return Err(Error::DimensionMismatch {
            context: "shared projection table count",
            expected: params.hash_tables,
            got: shared.tables,
        });
    }
    let mut ds = KdeDataStructure {
        points: x.clone(),
        params: params.clone(),
        seed: offsets_seed,
        offsets_seed,
        directions: shared.directions.clone(),
        levels: Vec::new(),
        labels: Vec::new(),
    };
    for (li, &kappa) in level_kernels(params.mu_floor, params.top_kernel)
        .iter()
        .enumerate()
    {
        push_level(&mut ds, kappa, li, shared, meter);
    }
    meter.alloc(ds.bytes());
    Ok(ds)
}

/// Append levels so the ladder covers `mu_floor` (no-op when it already
/// does). Existing levels, labels and cursors stay valid: the ladder is
/// strictly append-only.
pub(crate) fn extend_ladder(
    ds: &mut KdeDataStructure,
    mu_floor: f64,
    shared: &SharedProjections,
    meter: &CostMeter,
) -> Result<()> {
    if !(mu_floor > 0.0 && mu_floor < 1.0) {
        return Err(Error::BadParameter {
            name: "mu_floor",
            value: mu_floor,
            range: "(0, 1)",
        });
    }
    debug_assert_eq!(shared.tables, ds.params.hash_tables);
    let kernels = level_kernels(mu_floor, ds.params.top_kernel);
    let old_bytes = ds.bytes();
    for li in ds.levels.len()..kernels.len() {
        push_level(ds, kernels[li], li, shared, meter);
    }
    ds.params.mu_floor = ds.params.mu_floor.min(mu_floor);
    meter.alloc(ds.bytes() - old_bytes);
    Ok(())
}

/// Quantise the shared projections at one level's width and append it.
fn push_level(
    ds: &mut KdeDataStructure,
    kappa: f64,
    li: usize,
    shared: &SharedProjections,
    meter: &CostMeter,
) {
    let n = ds.points.rows();
    let tables = shared.tables;
    let radius = (2.0 * (1.0 / kappa).ln()).sqrt();
    let width = WIDTH_MULT * radius;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(ds.offsets_seed, li as u64));
    let mut offsets = vec![0.0; tables * LSH_CONCAT];
    for o in offsets.iter_mut() {
        *o = rng.gen_range(0.0..width);
    }
    let mut buckets: Vec<HashMap<u64, Vec<u32>>> = vec![HashMap::new(); tables];
    ds.labels.resize((li + 1) * tables * n, 0);
    for i in 0..n {
        let base = i * tables * LSH_CONCAT;
        for (t, bucket_map) in buckets.iter_mut().enumerate() {
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for c in 0..LSH_CONCAT {
                let p = t * LSH_CONCAT + c;
                let cell = ((shared.proj[base + p] + offsets[p]) / width).floor() as i64;
                h = mix64(h, cell as u64);
            }
            ds.labels[(li * tables + t) * n + i] = h;
            bucket_map.entry(h).or_default().push(i as u32);
        }
    }
    meter.add_flops((n * tables * LSH_CONCAT * 2) as u64);
    ds.levels.push(LevelTables {
        width,
        offsets,
        buckets,
    });
}

/// Density estimate honouring the floor contract: returns 0 when the
/// estimate lands below `mu_floor * (1 - epsilon)`, otherwise an unbiased
/// `(1 +- epsilon)`-accurate value with high probability.
pub fn query_kde(ds: &KdeDataStructure, q: &[f64], meter: &CostMeter) -> Result<f64> {
    let detail = query_kde_detailed(ds, q, meter)?;
    let floor_target = ds.params.mu_floor * (1.0 - ds.params.epsilon);
    Ok(if detail.estimate < floor_target {
        0.0
    } else {
        detail.estimate
    })
}

/// One-shot variant of the cursor machinery at the structure's own floor.
pub(crate) fn query_kde_detailed(
    ds: &KdeDataStructure,
    q: &[f64],
    meter: &CostMeter,
) -> Result<QueryDetail> {
    let mut cursor = QueryCursor::new(ds, q)?;
    advance_query(ds, q, &mut cursor, ds.params.mu_floor, meter)
}

/// Raw estimate plus the confidence halfwidth the stopping rule achieved.
/// Exactly-resolved queries report a zero halfwidth. Drivers that do not
/// need the floor semantics can resolve a query whenever
/// `halfwidth <= (epsilon/2) * estimate`.
pub(crate) struct QueryDetail {
    pub estimate: f64,
    pub halfwidth: f64,
}

#[derive(PartialEq)]
enum Phase {
    Uniform,
    Bucketed,
    Finished,
}

/// Paused state of one query's descent, resumable at ever-lower floors.
pub(crate) struct QueryCursor {
    rng: ChaCha8Rng,
    phase: Phase,
    tail: TailStats,
    uniform_batches: usize,
    uniform_bailed: bool,
    qproj: Vec<f64>,
    qlabels: Vec<u64>,
    level: usize,
    level_batches: usize,
    level_entered: bool,
    head: Vec<u32>,
    head_sum: f64,
    finished: Option<(f64, f64)>,
    exact_done: bool,
}

impl QueryCursor {
    pub(crate) fn new(ds: &KdeDataStructure, q: &[f64]) -> Result<Self> {
        if q.len() != ds.dim() {
            return Err(Error::DimensionMismatch {
                context: "query_kde query dimension",
                expected: ds.dim(),
                got: q.len(),
            });
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(query_seed(ds.seed, q)),
            phase: Phase::Uniform,
            tail: TailStats::new(),
            uniform_batches: 0,
            uniform_bailed: false,
            qproj: Vec::new(),
            qlabels: Vec::new(),
            level: 0,
            level_batches: 0,
            level_entered: false,
            head: Vec::new(),
            head_sum: 0.0,
            finished: None,
            exact_done: false,
        })
    }

    /// Bytes a driver holding this cursor should account for.
    pub(crate) fn bytes(&self) -> u64 {
        ((self.qproj.len() + self.qlabels.len()) * 8 + self.head.len() * 4 + 192) as u64
    }
}

/// Run one query until its stopping rule meets the target for `mu_floor`
/// (or the structure is out of levels), starting from wherever `cursor`
/// paused. Repeated calls with the same floor return the same answer
/// without extra work only if the cursor paused on an accept; lowering the
/// floor tightens the target and resumes the descent.
pub(crate) fn advance_query(
    ds: &KdeDataStructure,
    q: &[f64],
    cursor: &mut QueryCursor,
    mu_floor: f64,
    meter: &CostMeter,
) -> Result<QueryDetail> {
    if q.len() != ds.dim() {
        return Err(Error::DimensionMismatch {
            context: "query_kde query dimension",
            expected: ds.dim(),
            got: q.len(),
        });
    }
    let n = ds.len();
    let d = ds.dim();
    let tables = ds.params.hash_tables;
    let eps = ds.params.epsilon;
    let floor_target = mu_floor * (1.0 - eps);

    if let Some((est, hw)) = cursor.finished {
        if cursor.exact_done || cursor.level + 1 >= ds.levels.len() {
            return Ok(QueryDetail {
                estimate: est,
                halfwidth: hw,
            });
        }
        // The ladder grew since this cursor ran out of levels: resume.
        cursor.finished = None;
        cursor.phase = Phase::Bucketed;
        cursor.level += 1;
        cursor.level_entered = false;
    }

    if cursor.phase == Phase::Uniform {
        // Uniform arm: its halfwidth uses the trivial range bound 1, making
        // it sound without any structural help; that confines it to
        // genuinely dense queries, which is exactly its job. The accept
        // check runs before each draw so a resumed cursor re-checks its
        // paused state against the new target before spending anything.
        // The batch cap scales with `n` because the arm competes with an
        // exact scan: a draw costs the same as one scanned point, so
        // sampling wins as long as the draws needed stay below `n`. Capping
        // at half keeps a 2x margin against an understated projection.
        let uniform_cap = UNIFORM_ARM_BATCHES.max(n / (2 * TAIL_BATCH));
        loop {
            if cursor.uniform_batches >= 1 {
                let target = 0.5 * eps * cursor.tail.mean.max(floor_target);
                let hw = cursor.tail.halfwidth(1.0);
                if hw <= target {
                    return Ok(QueryDetail {
                        estimate: cursor.tail.mean,
                        halfwidth: hw,
                    });
                }
                if cursor.uniform_bailed || cursor.uniform_batches >= uniform_cap {
                    break;
                }
            }
            for _ in 0..TAIL_BATCH {
                let u = cursor.rng.gen_range(0..n);
                let k = gauss_kernel(q, ds.points.row(u));
                cursor.tail.push(k);
            }
            cursor.uniform_batches += 1;
            meter.add_flops((TAIL_BATCH * (2 * d + 2) + TAIL_BATCH * 3) as u64);
            if cursor.uniform_batches == 1 {
                // Projected draws needed against the floor-free target; bail
                // to the bucketed arms when the cap cannot cover them.
                // Keeping the floor out of this decision makes the arm's
                // control flow identical across floors (so resumed and
                // one-shot descents fork the same way), and the flag is
                // latched because a resumed cursor must not re-decide it.
                let tgt = 0.5 * eps * cursor.tail.mean;
                let var_need = (Z_CONF * Z_CONF * cursor.tail.variance()) / (tgt * tgt);
                let range_need = 3.0 * Z_CONF * Z_CONF / tgt;
                let cap = (uniform_cap * TAIL_BATCH) as f64;
                cursor.uniform_bailed = !(var_need.max(range_need) <= cap);
            }
        }
        cursor.phase = Phase::Bucketed;
        cursor.level = 0;
        cursor.level_entered = false;
    }

    // Bucketed arms: exact head by bucket union, sampled tail.
    if cursor.qproj.is_empty() {
        cursor.qproj = vec![0.0; tables * LSH_CONCAT];
        for (p, slot) in cursor.qproj.iter_mut().enumerate() {
            *slot = dot_slices(q, &ds.directions[p * d..(p + 1) * d]);
        }
        meter.add_flops((tables * LSH_CONCAT * 2 * d) as u64);
    }
    let mut in_head = vec![false; n];
    for &i in &cursor.head {
        in_head[i as usize] = true;
    }

    loop {
        let li = cursor.level;
        let level = &ds.levels[li];
        if !cursor.level_entered {
            cursor.qlabels = vec![0u64; tables];
            for (t, qlab) in cursor.qlabels.iter_mut().enumerate() {
                let mut h = 0xcbf2_9ce4_8422_2325u64;
                for c in 0..LSH_CONCAT {
                    let p = t * LSH_CONCAT + c;
                    let cell =
                        ((cursor.qproj[p] + level.offsets[p]) / level.width).floor() as i64;
                    h = mix64(h, cell as u64);
                }
                *qlab = h;
            }
            meter.add_flops((tables * LSH_CONCAT * 2) as u64);

            // Candidate head: the union of the query's buckets, counted
            // with multiplicity. Large unions are dominated by isolated
            // single-table collisions with unrelated points, so above the
            // trigger only multi-table colliders join the head; the rest
            // stay in the sampled tail, which remains unbiased because the
            // tail excludes exactly the stamped set.
            let mut counts: HashMap<u32, u32> = HashMap::new();
            let mut union_order: Vec<u32> = Vec::new();
            for (t, qlab) in cursor.qlabels.iter().enumerate() {
                if let Some(members) = level.buckets[t].get(qlab) {
                    for &i in members {
                        if !in_head[i as usize] {
                            let c = counts.entry(i).or_insert(0);
                            if *c == 0 {
                                union_order.push(i);
                            }
                            *c += 1;
                        }
                    }
                }
            }
            let needed = if union_order.len() > UNION_FILTER_TRIGGER { 2 } else { 1 };
            let candidates = union_order
                .iter()
                .filter(|i| counts[i] >= needed)
                .count();

            // Exact completion: once the buckets stop discriminating (the
            // head candidates rival what is left unstamped) finishing the
            // scan is both cheaper than further levels and exact.
            let unstamped = n - cursor.head.len();
            if unstamped <= 2 * TAIL_BATCH || 5 * candidates >= 3 * unstamped {
                let mut sum = cursor.head_sum;
                for (i, seen) in in_head.iter().enumerate() {
                    if !seen {
                        sum += gauss_kernel(q, ds.points.row(i));
                    }
                }
                meter.add_flops((unstamped * (2 * d + 2)) as u64);
                let est = sum / n as f64;
                cursor.exact_done = true;
                cursor.finished = Some((est, 0.0));
                cursor.phase = Phase::Finished;
                return Ok(QueryDetail {
                    estimate: est,
                    halfwidth: 0.0,
                });
            }

            for &i in &union_order {
                if counts[&i] >= needed {
                    in_head[i as usize] = true;
                    cursor.head.push(i);
                    cursor.head_sum += gauss_kernel(q, ds.points.row(i as usize));
                }
            }
            meter.add_flops(candidates as u64 * (2 * d as u64 + 2));
            cursor.level_entered = true;
            cursor.level_batches = 0;
            cursor.tail = TailStats::new();
        }

        let is_last = li + 1 == ds.levels.len();
        // As in the uniform arm, the level's batch cap competes with the
        // exact completion of the remaining unstamped points: a tail whose
        // stopping rule needs up to a half-scan of draws is still clearly
        // worth sampling. `head.len()` is fixed while a level is active, so
        // the cap is identical however the descent is paused and resumed.
        let half_scan = (n - cursor.head.len()) / (2 * TAIL_BATCH);
        let max_batches = if is_last {
            LAST_LEVEL_MAX_BATCHES.max(half_scan)
        } else {
            MAX_BATCHES_PER_LEVEL.max(half_scan)
        };
        let head_mean = cursor.head_sum / n as f64;
        loop {
            if cursor.level_batches >= ds.params.repetitions {
                let est = head_mean + cursor.tail.mean;
                let target = 0.5 * eps * est.max(floor_target);
                let hw = cursor.tail.halfwidth(cursor.tail.max);
                if hw <= target {
                    return Ok(QueryDetail {
                        estimate: est,
                        halfwidth: hw,
                    });
                }
                // Floor-free projection (the level-local analogue of the
                // uniform arm's bail): draws needed to close the relative
                // band, assuming the observed variance and range are
                // representative. When even the full allowance cannot close
                // it, move on now instead of burning the remaining batches.
                // Using the floor-free target keeps the decision a pure
                // function of the draw state, so resumed and one-shot
                // descents stay in lockstep.
                let tgt = 0.5 * eps * est;
                let var_need = 4.0 * Z_CONF * Z_CONF * cursor.tail.variance() / (tgt * tgt);
                let range_need = 6.0 * Z_CONF * Z_CONF * cursor.tail.max / tgt;
                let cap = (max_batches * TAIL_BATCH) as f64;
                if !(var_need.max(range_need) <= cap) {
                    break;
                }
            }
            if cursor.level_batches >= max_batches {
                break;
            }
            for _ in 0..TAIL_BATCH {
                let u = cursor.rng.gen_range(0..n);
                if in_head[u] {
                    cursor.tail.push(0.0);
                } else {
                    let k = gauss_kernel(q, ds.points.row(u));
                    cursor.tail.push(k);
                    meter.add_flops((2 * d + 2) as u64);
                }
            }
            cursor.level_batches += 1;
            meter.add_flops((TAIL_BATCH * 3) as u64);
        }

        if is_last {
            // Out of levels: report the best estimate so far and remember
            // the ladder length so a later extension can resume.
            let est = head_mean + cursor.tail.mean;
            let hw = cursor.tail.halfwidth(cursor.tail.max);
            cursor.finished = Some((est, hw));
            cursor.phase = Phase::Finished;
            return Ok(QueryDetail {
                estimate: est,
                halfwidth: hw,
            });
        }
        cursor.level += 1;
        cursor.level_entered = false;
    }
}

/// Kernel values targeted by each scale level, tightest first, reaching a
/// quarter of the floor so boundary densities stay under control. The top
/// is capped at the default even when the caller's kernel bound is looser,
/// since radii above it stop being selective anyway.
fn level_kernels(mu_floor: f64, top_kernel: f64) -> Vec<f64> {
    let mut kernels = vec![top_kernel.min(TOP_LEVEL_KERNEL)];
    let cutoff = (mu_floor / 4.0).max(1e-18);
    while *kernels.last().unwrap() > cutoff {
        kernels.push(kernels.last().unwrap() / LEVEL_RATIO);
    }
    kernels
}

/// Running mean/variance/max of tail draws.
struct TailStats {
    count: usize,
    mean: f64,
    m2: f64,
    max: f64,
}

impl TailStats {
    fn new() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            max: 0.0,
        }
    }

    fn push(&mut self, y: f64) {
        self.count += 1;
        let delta = y - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (y - self.mean);
        self.max = self.max.max(y);
    }

    fn variance(&self) -> f64 {
        if self.count < 2 {
            return f64::INFINITY;
        }
        self.m2 / (self.count - 1) as f64
    }

    /// Confidence halfwidth given a bound on the draw range. The bucketed
    /// tail may pass its observed maximum (heavy points collide with the
    /// query with high probability, so they are either in the exact head or
    /// excluded from the tail, leaving the observed range representative);
    /// the uniform arm has no such structural protection and must pass the
    /// trivial kernel bound 1.
    fn halfwidth(&self, range: f64) -> f64 {
        if self.count < 2 {
            return f64::INFINITY;
        }
        let m = self.count as f64;
        Z_CONF * (self.variance() / m).sqrt() + 3.0 * Z_CONF * Z_CONF * range / m
    }
}

fn gauss_kernel(a: &[f64], b: &[f64]) -> f64 {
    (-0.5 * sq_dist(a, b)).exp()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

/// SplitMix64-style avalanche combine.
fn mix64(seed: u64, v: u64) -> u64 {
    let mut z = seed ^ v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-query RNG seed from the structure seed and the query bit pattern, so
/// queries are pure and thread-safe yet fully deterministic.
fn query_seed(seed: u64, q: &[f64]) -> u64 {
    let mut h = mix64(seed, 0x51ab_c0de);
    for &x in q {
        h = mix64(h, x.to_bits());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::CostMeter;

    fn meter() -> CostMeter {
        CostMeter::new()
    }

    /// Compensated (Neumaier) summation oracle for the exact KDE.
    fn kde_oracle(x: &DenseMatrix, q: &[f64]) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for i in 0..x.rows() {
            let term = (-0.5 * sq_dist(q, x.row(i))).exp();
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
        (sum + comp) / x.rows() as f64
    }

    fn seeded_points(n: usize, d: usize, seed: u64, scale: f64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
            .collect();
        DenseMatrix::new(n, d, data).unwrap()
    }

    #[test]
    fn exact_kde_at_dataset_point() {
        let x = DenseMatrix::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let v = exact_gaussian_kde(&x, &[0.5, -1.0, 2.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_kde_duplicate_points() {
        let mut data = Vec::new();
        for _ in 0..7 {
            data.extend_from_slice(&[1.0, 2.0]);
        }
        let x = DenseMatrix::new(7, 2, data).unwrap();
        let v = exact_gaussian_kde(&x, &[1.0, 2.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_kde_matches_compensated_oracle() {
        let x = seeded_points(64, 8, 7, 1.0);
        let q = seeded_points(1, 8, 8, 1.0);
        let got = exact_gaussian_kde(&x, q.row(0)).unwrap();
        let want = kde_oracle(&x, q.row(0));
        assert!((got - want).abs() / want < 1e-12);
    }

    #[test]
    fn exact_kde_dimension_mismatch() {
        let x = seeded_points(4, 3, 9, 1.0);
        assert!(exact_gaussian_kde(&x, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(KdeParams::new(0.0, 0.5).is_err());
        assert!(KdeParams::new(0.5, 0.0).is_err());
        assert!(KdeParams::new(0.5, 1.0).is_err());
        let mut p = KdeParams::new(0.5, 0.5).unwrap();
        p.repetitions = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn single_point_dataset_respects_floor() {
        let x = DenseMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let params = KdeParams::new(0.3, 0.5).unwrap();
        let ds = preprocess_kde(&x, &params, 11, &meter()).unwrap();

        // Query at the point: density 1, well above the floor.
        let at = query_kde(&ds, &[0.0, 0.0], &meter()).unwrap();
        assert!((at - 1.0).abs() < 1e-9, "got {at}");

        // Query at distance D with exp(-D^2/2) = 0.25 < 0.5: below floor.
        let dist = (2.0f64 * 4.0f64.ln()).sqrt();
        let far = query_kde(&ds, &[dist, 0.0], &meter()).unwrap();
        assert_eq!(far, 0.0);
    }

    #[test]
    fn high_floor_spread_data_mostly_zero() {
        let x = seeded_points(128, 4, 21, 6.0);
        let params = KdeParams::new(0.3, 0.9).unwrap();
        let ds = preprocess_kde(&x, &params, 22, &meter()).unwrap();
        let queries = seeded_points(32, 4, 23, 6.0);
        let zeros = (0..32)
            .filter(|&i| query_kde(&ds, queries.row(i), &meter()).unwrap() == 0.0)
            .count();
        assert!(zeros >= 30, "only {zeros}/32 queries reported zero");
    }

    #[test]
    fn query_is_bitwise_deterministic() {
        let x = seeded_points(256, 6, 31, 1.2);
        let params = KdeParams::new(0.25, 1.0 / 256.0).unwrap();
        let ds1 = preprocess_kde(&x, &params, 77, &meter()).unwrap();
        let ds2 = preprocess_kde(&x, &params, 77, &meter()).unwrap();
        let queries = seeded_points(16, 6, 32, 1.2);
        for i in 0..16 {
            let a = query_kde(&ds1, queries.row(i), &meter()).unwrap();
            let b = query_kde(&ds2, queries.row(i), &meter()).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "query {i}");
        }
    }

    #[test]
    fn level_ladder_reaches_quarter_floor() {
        let ks = level_kernels(1.0 / 1024.0, TOP_LEVEL_KERNEL);
        assert_eq!(ks[0], TOP_LEVEL_KERNEL);
        assert!(*ks.last().unwrap() <= 1.0 / 4096.0);
        for w in ks.windows(2) {
            assert!((w[0] / w[1] - LEVEL_RATIO).abs() < 1e-12);
        }
        // A kernel bound below the default shifts the whole ladder down.
        let low = level_kernels(1.0 / 1024.0, 1.0 / 256.0);
        assert_eq!(low[0], 1.0 / 256.0);
        assert!(low.len() < ks.len());
        // A bound above the default is capped at it.
        assert_eq!(level_kernels(0.5, 1.0)[0], TOP_LEVEL_KERNEL);
    }

    #[test]
    fn preprocess_rejects_empty() {
        let params = KdeParams::new(0.3, 0.5).unwrap();
        let x = DenseMatrix::zeros(0, 3);
        assert!(preprocess_kde(&x, &params, 1, &meter()).is_err());
    }

    #[test]
    fn extended_ladder_matches_direct_build() {
        let x = seeded_points(200, 5, 41, 1.0);
        let shared = project_points(&x, 24, 9, &meter());
        let shallow = KdeParams::new(0.3, 1.0 / 8.0).unwrap();
        let deep = KdeParams::new(0.3, 1.0 / 512.0).unwrap();

        let mut extended = preprocess_with(&x, &shallow, 5, &shared, &meter()).unwrap();
        extend_ladder(&mut extended, 1.0 / 512.0, &shared, &meter()).unwrap();
        let direct = preprocess_with(&x, &deep, 5, &shared, &meter()).unwrap();

        assert_eq!(extended.num_levels(), direct.num_levels());
        assert_eq!(extended.bytes(), direct.bytes());
        assert_eq!(extended.labels, direct.labels);

        let queries = seeded_points(8, 5, 42, 1.0);
        for i in 0..8 {
            let a = query_kde(&extended, queries.row(i), &meter()).unwrap();
            let b = query_kde(&direct, queries.row(i), &meter()).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "query {i}");
        }
    }

    #[test]
    fn cursor_resume_reaches_one_shot_answer() {
        // Descend with a paused cursor at a schedule of halving floors; the
        // final resolved estimate must match the one-shot deep query bit
        // for bit (same draw stream, same state machine).
        let x = seeded_points(512, 8, 51, 0.8);
        let shared = project_points(&x, 24, 3, &meter());
        let deep_floor = 1.0 / 8192.0;
        let deep = KdeParams::new(0.3, deep_floor).unwrap();
        let ds = preprocess_with(&x, &deep, 7, &shared, &meter()).unwrap();
        let queries = seeded_points(12, 8, 52, 2.0);

        for i in 0..12 {
            let q = queries.row(i);
            let one_shot = query_kde_detailed(&ds, q, &meter()).unwrap();

            let mut cursor = QueryCursor::new(&ds, q).unwrap();
            let mut floor: f64 = 1.0 / 512.0;
            let mut last = advance_query(&ds, q, &mut cursor, floor, &meter()).unwrap();
            while floor > deep_floor {
                floor *= 0.5;
                last = advance_query(&ds, q, &mut cursor, floor.max(deep_floor), &meter())
                    .unwrap();
            }
            assert_eq!(
                last.estimate.to_bits(),
                one_shot.estimate.to_bits(),
                "query {i}"
            );
        }
    }
}
