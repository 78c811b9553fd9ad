//! Weighted exponential kernel sums `alpha_j = sum_i v_i exp(<x_i, y_j>)`
//! to multiplicative accuracy, in time sublinear in `n` per query for
//! well-behaved inputs.
//!
//! The exponential kernel reduces to a Gaussian KDE by augmenting each
//! point with one extra coordinate. With `L_i = ln v_i + ||x_i||^2/2` and
//! an anchor `A = max_i L_i`, the augmented point `x'_i = [x_i; w_i]` with
//! `w_i = sqrt(2 (A - L_i))` satisfies
//!
//! ```text
//! exp(-||x'_i - [y; 0]||^2 / 2) = (v_i e^{||x_i||^2/2} / e^A) exp(-||x_i - y||^2/2)
//! ```
//!
//! so the plain Gaussian density of the augmented dataset at `[y; 0]`
//! equals `alpha(y) * exp(-||y||^2/2) / (n e^A)`. Any anchor at or above
//! `max L_i` keeps the offsets real; the maximum is the smallest valid
//! choice, and that matters: the heaviest point gets offset zero, so
//! augmented distances start near zero and the hashing structure keeps its
//! discriminating power. (A larger anchor — say `logsumexp L_i` — pushes
//! every point onto a thin far-away shell where buckets either catch
//! everything or nothing.) Per-point masses `lambda_i = e^{L_i - A}` lie in
//! `(0, 1]` with the maximum attained.
//!
//! Densities are not known in advance, so the driver guesses the floor
//! `1/n`, queries all coordinates, keeps the ones whose relative confidence
//! band resolves, halves the floor, and repeats. One hashing structure
//! serves every round: its level ladder is extended as the floor drops and
//! each unresolved query holds a cursor that resumes its descent instead of
//! restarting, so a query pays for each level at most once across the whole
//! loop. The loop stops when the modelled per-query structure cost (which
//! grows as `mu^-tau`) would exceed the cost of answering the few survivors
//! exactly, or after a hard cap of `ceil(log2 n) + 1` rounds; stragglers
//! are then answered by an exact log-sum-exp scan, so accuracy never
//! degrades — late rounds only shift work to the exact path.

use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::kde::{self, KdeParams};
use crate::matrix::DenseMatrix;

/// Default cost-model exponent for the floor-halving guard: per-query cost
/// of the hashing structure is modelled as `mu^-tau` kernel evaluations.
pub const DEFAULT_TAU: f64 = 0.173;

/// Datasets at or below this size skip hashing entirely; an exact scan is
/// cheaper than building even one structure.
const EXACT_CUTOFF: usize = 32;

#[derive(Debug, Clone)]
pub struct WexpParams {
    pub epsilon: f64,
    pub tau: f64,
}

impl WexpParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        let p = Self {
            epsilon,
            tau: DEFAULT_TAU,
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
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::BadParameter {
                name: "tau",
                value: self.tau,
                range: "(0, 1]",
            });
        }
        Ok(())
    }
}

/// Result of [`wexp_kde`] with diagnostics about the floor-halving loop.
#[derive(Debug, Clone)]
pub struct WexpReport {
    /// One estimate per query row, in linear scale.
    pub alpha: Vec<f64>,
    /// Hashing rounds executed (never more than `ceil(log2 n) + 1`).
    pub rounds: usize,
    /// Queries answered by the exact fallback scan.
    pub exact_fallbacks: usize,
    /// Unresolved query count at the start of each hashing round.
    pub survivors_per_round: Vec<usize>,
}

/// Augmented dataset realising the exponential-to-Gaussian reduction.
/// Zero-weight points are dropped (they contribute nothing to any sum);
/// `kept` maps augmented rows back to original indices. `min_offset` is the
/// smallest augmentation coordinate (zero for the max-anchored reduction):
/// every query lands at 0 in that coordinate, so no kernel value can exceed
/// `exp(-min_offset^2 / 2)` — a bound the query structure uses to skip
/// unselective scale levels.
pub struct Augmentation {
    pub points: DenseMatrix,
    pub log_anchor: f64,
    pub kept: Vec<usize>,
    pub min_offset: f64,
}

/// Exact `alpha_j = sum_i v_i exp(<x_i, y_j>)` via log-sum-exp, the oracle
/// for the approximate path. Errors if a value overflows f64.
pub fn exact_wexp_kde(x: &DenseMatrix, y: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    validate_inputs(x, y, v)?;
    let mut alpha = Vec::with_capacity(y.rows());
    for j in 0..y.rows() {
        let ln_a = exact_log_alpha(x, y.row(j), v, None);
        alpha.push(finite_exp(ln_a, j)?);
    }
    Ok(alpha)
}

/// Build the augmentation. Requires at least one positive weight.
pub fn build_augmentation(x: &DenseMatrix, v: &[f64], meter: &CostMeter) -> Result<Augmentation> {
    validate_weights(x, v)?;
    let d = x.cols();
    let kept: Vec<usize> = (0..x.rows()).filter(|&i| v[i] > 0.0).collect();
    if kept.is_empty() {
        return Err(Error::ZeroMass);
    }

    // L_i = ln v_i + ||x_i||^2 / 2, anchored at its maximum.
    let mut log_mass = Vec::with_capacity(kept.len());
    for &i in &kept {
        let sq: f64 = x.row(i).iter().map(|a| a * a).sum();
        log_mass.push(v[i].ln() + 0.5 * sq);
    }
    let log_anchor = log_mass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    meter.add_flops((kept.len() * (2 * d + 4)) as u64 + kept.len() as u64);

    let mut data = vec![0.0; kept.len() * (d + 1)];
    let mut min_offset = f64::INFINITY;
    for (r, &i) in kept.iter().enumerate() {
        data[r * (d + 1)..r * (d + 1) + d].copy_from_slice(x.row(i));
        // log_anchor >= L_i by construction; the max guards the row that
        // attains it against a negative rounding residue.
        let w = (2.0 * (log_anchor - log_mass[r]).max(0.0)).sqrt();
        data[r * (d + 1) + d] = w;
        min_offset = min_offset.min(w);
    }
    meter.add_flops(3 * kept.len() as u64);
    let points = DenseMatrix::new(kept.len(), d + 1, data)?;
    meter.alloc(points.bytes());
    Ok(Augmentation {
        points,
        log_anchor,
        kept,
        min_offset,
    })
}

/// Approximate weighted exponential kernel sums: each returned coordinate
/// is within `(1 +- epsilon)` of the true value with high probability
/// (exactly, for coordinates answered by the fallback scan).
pub fn wexp_kde(
    x: &DenseMatrix,
    y: &DenseMatrix,
    v: &[f64],
    params: &WexpParams,
    seed: u64,
    meter: &CostMeter,
) -> Result<WexpReport> {
    params.validate()?;
    validate_inputs(x, y, v)?;
    let m = y.rows();
    let eps = params.epsilon;

    // All-zero weights: every sum is exactly zero.
    if v.iter().all(|&w| w == 0.0) {
        return Ok(WexpReport {
            alpha: vec![0.0; m],
            rounds: 0,
            exact_fallbacks: 0,
            survivors_per_round: Vec::new(),
        });
    }

    let aug = build_augmentation(x, v, meter)?;
    let n_kept = aug.points.rows();
    let d = x.cols();

    // ln of the conversion factor from augmented density to alpha:
    // alpha_j = mu([y_j; 0]) * n * e^A * exp(||y_j||^2 / 2).
    let mut y_aug_data = vec![0.0; m * (d + 1)];
    let mut ln_scale = Vec::with_capacity(m);
    for j in 0..m {
        let row = y.row(j);
        y_aug_data[j * (d + 1)..j * (d + 1) + d].copy_from_slice(row);
        let sq: f64 = row.iter().map(|a| a * a).sum();
        ln_scale.push((n_kept as f64).ln() + aug.log_anchor + 0.5 * sq);
    }
    meter.add_flops((m * (2 * d + 3)) as u64);
    let y_aug = DenseMatrix::new(m, d + 1, y_aug_data)?;
    meter.alloc(y_aug.bytes());

    let mut alpha = vec![0.0; m];
    meter.alloc(8 * m as u64);
    let mut survivors: Vec<usize> = (0..m).collect();
    let mut mu_floor = 1.0 / n_kept as f64;
    let round_cap = (n_kept as f64).log2().ceil() as usize + 1;
    let mut rounds = 0usize;
    let mut survivors_per_round = Vec::new();

    // The projection pass is the only O(n d) part of structure building, and
    // it is independent of the floor; compute it once and let every round
    // re-quantise it at its own widths. The augmentation offset bounds every
    // kernel value, which spares the ladder its unselective top levels.
    let mut kde_defaults = KdeParams::new(eps, 0.5)?;
    kde_defaults.top_kernel = (-0.5 * aug.min_offset * aug.min_offset)
        .exp()
        .max(f64::MIN_POSITIVE);
    let shared = if n_kept > EXACT_CUTOFF {
        Some(kde::project_points(
            &aug.points,
            kde_defaults.hash_tables,
            mix64(seed, 0xd19e_c715),
            meter,
        ))
    } else {
        None
    };

    let mut ds: Option<kde::KdeDataStructure> = None;
    let mut cursors: Vec<Option<kde::QueryCursor>> = (0..m).map(|_| None).collect();
    let mut cursor_acct = vec![0u64; m];
    let mut result: Result<()> = Ok(());
    let mut exact_fallbacks = 0usize;
    while !survivors.is_empty() {
        // Hash only while the modelled per-query structure cost stays below
        // the exact-scan cost of the surviving coordinates, the floor is a
        // valid density, and the hard round cap is not exhausted.
        let guard = mu_floor.powf(-params.tau) <= eps * eps * survivors.len() as f64;
        if shared.is_none() || !guard || rounds >= round_cap || mu_floor >= 1.0 {
            break;
        }
        survivors_per_round.push(survivors.len());
        let round = (|| -> Result<(Vec<usize>, Vec<usize>)> {
            if ds.is_none() {
                let kde_params = KdeParams {
                    mu_floor,
                    ..kde_defaults.clone()
                };
                ds = Some(kde::preprocess_with(
                    &aug.points,
                    &kde_params,
                    mix64(seed, 0x0ff5_e75e),
                    shared.as_ref().unwrap(),
                    meter,
                )?);
            } else {
                kde::extend_ladder(
                    ds.as_mut().unwrap(),
                    mu_floor,
                    shared.as_ref().unwrap(),
                    meter,
                )?;
            }
            let ds = ds.as_ref().unwrap();
            let mut still = Vec::new();
            let mut hopeless = Vec::new();
            for &j in &survivors {
                if cursors[j].is_none() {
                    cursors[j] = Some(kde::QueryCursor::new(ds, y_aug.row(j))?);
                }
                let cursor = cursors[j].as_mut().unwrap();
                let detail = kde::advance_query(ds, y_aug.row(j), cursor, mu_floor, meter)?;
                let bytes = cursor.bytes();
                if bytes >= cursor_acct[j] {
                    meter.alloc(bytes - cursor_acct[j]);
                } else {
                    meter.free(cursor_acct[j] - bytes);
                }
                cursor_acct[j] = bytes;
                // The driver needs the value, not the floor semantics:
                // accept as soon as the relative confidence band is met,
                // even below the current floor.
                let done = if detail.halfwidth <= 0.5 * eps * detail.estimate {
                    alpha[j] = finite_exp(safe_ln(detail.estimate) + ln_scale[j], j)?;
                    meter.add_flops(3);
                    true
                } else if detail.estimate + detail.halfwidth < mu_floor / 16.0 {
                    // So far below the floor that several more halvings
                    // would be needed; the exact scan is cheaper.
                    hopeless.push(j);
                    true
                } else {
                    still.push(j);
                    false
                };
                if done {
                    meter.free(cursor_acct[j]);
                    cursor_acct[j] = 0;
                    cursors[j] = None;
                }
            }
            Ok((still, hopeless))
        })();
        match round {
            Ok((still, hopeless)) => {
                survivors = still;
                for &j in &hopeless {
                    let ln_a = exact_log_alpha(x, y.row(j), v, Some(meter));
                    match finite_exp(ln_a, j) {
                        Ok(a) => alpha[j] = a,
                        Err(e) => {
                            result = Err(e);
                            break;
                        }
                    }
                }
                exact_fallbacks += hopeless.len();
                if result.is_err() {
                    break;
                }
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
        mu_floor *= 0.5;
        rounds += 1;
    }

    // Stragglers (or everything, when hashing never engaged) get the exact
    // log-sum-exp scan.
    if result.is_ok() {
        exact_fallbacks += survivors.len();
        for &j in &survivors {
            let ln_a = exact_log_alpha(x, y.row(j), v, Some(meter));
            match finite_exp(ln_a, j) {
                Ok(a) => alpha[j] = a,
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
    }

    if let Some(ds) = &ds {
        meter.free(ds.bytes());
    }
    for &bytes in &cursor_acct {
        meter.free(bytes);
    }
    if let Some(shared) = &shared {
        meter.free(shared.bytes());
    }
    meter.free(aug.points.bytes());
    meter.free(y_aug.bytes());
    result?;
    Ok(WexpReport {
        alpha,
        rounds,
        exact_fallbacks,
        survivors_per_round,
    })
}

/// `ln sum_i v_i exp(<x_i, y>)` over positive weights, max-shifted.
fn exact_log_alpha(x: &DenseMatrix, y: &[f64], v: &[f64], meter: Option<&CostMeter>) -> f64 {
    let d = x.cols();
    let mut terms = Vec::new();
    for i in 0..x.rows() {
        if v[i] > 0.0 {
            let dot: f64 = x.row(i).iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            terms.push(v[i].ln() + dot);
        }
    }
    if let Some(mt) = meter {
        mt.add_flops((terms.len() * (2 * d + 2)) as u64 + 2 * terms.len() as u64);
    }
    if terms.is_empty() {
        return f64::NEG_INFINITY;
    }
    log_sum_exp(&terms)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

fn safe_ln(v: f64) -> f64 {
    if v <= 0.0 {
        f64::NEG_INFINITY
    } else {
        v.ln()
    }
}

fn finite_exp(ln_value: f64, row: usize) -> Result<f64> {
    if ln_value == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let v = ln_value.exp();
    if !v.is_finite() {
        return Err(Error::Overflow {
            context: "weighted exponential kernel sum",
            row,
        });
    }
    Ok(v)
}

fn validate_inputs(x: &DenseMatrix, y: &DenseMatrix, v: &[f64]) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Empty {
            context: "wexp dataset",
        });
    }
    if y.rows() == 0 {
        return Err(Error::Empty {
            context: "wexp queries",
        });
    }
    if y.cols() != x.cols() {
        return Err(Error::DimensionMismatch {
            context: "wexp query dimension",
            expected: x.cols(),
            got: y.cols(),
        });
    }
    validate_weights(x, v)
}

fn validate_weights(x: &DenseMatrix, v: &[f64]) -> Result<()> {
    if v.len() != x.rows() {
        return Err(Error::DimensionMismatch {
            context: "wexp weight vector length",
            expected: x.rows(),
            got: v.len(),
        });
    }
    for (i, &w) in v.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::NegativeWeight { index: i, value: w });
        }
    }
    Ok(())
}

fn mix64(seed: u64, v: u64) -> u64 {
    let mut z = seed ^ v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
