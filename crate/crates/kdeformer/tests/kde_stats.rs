//! Statistical contract tests for the sublinear Gaussian KDE.
//!
//! These exercise the floor contract on clustered data: relative accuracy
//! above the floor, zero reporting below it, cost that does not increase
//! with the floor, and determinism of the whole pipeline.

mod common;

use common::{blob_query_mix, gaussian_blobs};
use kdeformer::kde::{exact_gaussian_kde, preprocess_kde, query_kde, KdeParams};
use kdeformer::CostMeter;

const N: usize = 1024;
const D: usize = 16;
const CLUSTERS: usize = 8;
const CENTRE_SCALE: f64 = 1.0;
const POINT_SCALE: f64 = 0.38;

#[test]
fn sandwich_and_zero_contract_on_blobs() {
    let eps = 0.25;
    let mu_floor = 1.0 / N as f64;
    let suite = gaussian_blobs(N, D, CLUSTERS, CENTRE_SCALE, POINT_SCALE, 42);
    let queries = blob_query_mix(&suite, 200, POINT_SCALE, 43);
    let params = KdeParams::new(eps, mu_floor).unwrap();
    let meter = CostMeter::new();
    let ds = preprocess_kde(&suite.points, &params, 777, &meter).unwrap();

    let mut above = 0usize;
    let mut violations = 0usize;
    let mut zeros = 0usize;
    for i in 0..queries.rows() {
        let q = queries.row(i);
        let exact = exact_gaussian_kde(&suite.points, q).unwrap();
        let est = query_kde(&ds, q, &meter).unwrap();
        if est == 0.0 {
            zeros += 1;
            // Zero is only allowed for densities below the floor band.
            assert!(
                exact < mu_floor * (1.0 + eps),
                "query {i}: reported zero at density {exact:.3e} (floor {mu_floor:.3e})"
            );
        }
        if exact >= mu_floor {
            above += 1;
            if est <= 0.0 || (est - exact).abs() > eps * exact {
                violations += 1;
            }
        }
    }
    // The mix must genuinely cover both sides of the floor.
    assert!(above >= 80, "only {above}/200 queries above the floor");
    assert!(zeros >= 20, "only {zeros}/200 queries reported zero");
    let budget = above / 20; // 5% failure budget
    assert!(
        violations <= budget,
        "{violations}/{above} above-floor queries outside (1 +- {eps}), budget {budget}"
    );
}

#[test]
fn query_cost_non_increasing_in_floor() {
    let eps = 0.25;
    let suite = gaussian_blobs(N, D, CLUSTERS, CENTRE_SCALE, POINT_SCALE, 52);
    let queries = blob_query_mix(&suite, 60, POINT_SCALE, 53);
    let floors = [1.0 / N as f64, 8.0 / N as f64, 64.0 / N as f64, 0.25];

    let mut costs = Vec::new();
    for &floor in &floors {
        let params = KdeParams::new(eps, floor).unwrap();
        let build_meter = CostMeter::new();
        let ds = preprocess_kde(&suite.points, &params, 888, &build_meter).unwrap();
        let meter = CostMeter::new();
        for i in 0..queries.rows() {
            query_kde(&ds, queries.row(i), &meter).unwrap();
        }
        costs.push(meter.flops());
    }
    for (i, w) in costs.windows(2).enumerate() {
        assert!(
            w[1] as f64 <= w[0] as f64 * 1.02,
            "aggregate query flops rose from {} (floor {}) to {} (floor {})",
            w[0],
            floors[i],
            w[1],
            floors[i + 1]
        );
    }
    // A floor above every density in the suite should be dramatically
    // cheaper than the tightest floor, not marginally.
    assert!(
        (*costs.last().unwrap() as f64) < costs[0] as f64 * 0.7,
        "costs across floors: {costs:?}"
    );
}

#[test]
fn structure_bytes_accounted_and_deterministic() {
    let suite = gaussian_blobs(256, 8, 4, 1.0, 0.4, 61);
    let params = KdeParams::new(0.3, 1.0 / 256.0).unwrap();
    let meter = CostMeter::new();
    let ds = preprocess_kde(&suite.points, &params, 99, &meter).unwrap();
    assert!(ds.bytes() > 0);
    // The projection scratch is freed; only the structure stays live.
    assert_eq!(meter.live_bytes(), ds.bytes());
    assert!(meter.peak_bytes() >= ds.bytes());
    // Payload should dominate neither extreme: more than the raw points,
    // but within a constant factor of points + labels.
    assert!(ds.bytes() >= suite.points.bytes());
    let labels = (256 * params.hash_tables * ds.num_levels() * 8) as u64;
    assert!(ds.bytes() <= suite.points.bytes() + labels + labels);

    let ds2 = preprocess_kde(&suite.points, &params, 99, &CostMeter::new()).unwrap();
    assert_eq!(ds.bytes(), ds2.bytes());
    assert_eq!(ds.num_levels(), ds2.num_levels());
}

#[test]
fn estimates_track_exact_across_scales() {
    // Medium-accuracy smoke on a smaller instance with a different shape
    // (fewer, tighter clusters) to catch generator-specific tuning.
    let suite = gaussian_blobs(512, 8, 3, 1.4, 0.3, 71);
    let queries = blob_query_mix(&suite, 80, 0.3, 72);
    let eps = 0.3;
    let floor = 1.0 / 512.0;
    let params = KdeParams::new(eps, floor).unwrap();
    let ds = preprocess_kde(&suite.points, &params, 101, &CostMeter::new()).unwrap();
    let meter = CostMeter::new();

    let mut above = 0usize;
    let mut violations = 0usize;
    for i in 0..queries.rows() {
        let q = queries.row(i);
        let exact = exact_gaussian_kde(&suite.points, q).unwrap();
        let est = query_kde(&ds, q, &meter).unwrap();
        if exact >= floor {
            above += 1;
            if est <= 0.0 || (est - exact).abs() > eps * exact {
                violations += 1;
            }
        }
    }
    assert!(above >= 30, "only {above}/80 above the floor");
    assert!(
        violations * 20 <= above + 19,
        "{violations}/{above} outside (1 +- {eps})"
    );
}
