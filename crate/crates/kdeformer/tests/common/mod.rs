//! Shared generators for the statistical integration suites.

#![allow(dead_code)]

use kdeformer::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian mixture: `clusters` centres drawn N(0, centre_scale^2 I), points
/// assigned round-robin and jittered by N(0, point_scale^2 I). Round-robin
/// keeps every cluster populated at any size, and the whole draw is
/// deterministic in the seed.
pub struct BlobSuite {
    pub points: DenseMatrix,
    pub centres: DenseMatrix,
}

pub fn gaussian_blobs(
    n: usize,
    d: usize,
    clusters: usize,
    centre_scale: f64,
    point_scale: f64,
    seed: u64,
) -> BlobSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = vec![0.0; clusters * d];
    for v in centres.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = g * centre_scale;
    }
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        let c = i % clusters;
        for j in 0..d {
            let g: f64 = StandardNormal.sample(&mut rng);
            data[i * d + j] = centres[c * d + j] + g * point_scale;
        }
    }
    BlobSuite {
        points: DenseMatrix::new(n, d, data).unwrap(),
        centres: DenseMatrix::new(clusters, d, centres).unwrap(),
    }
}

/// Query mix spanning the density range of a blob suite: near-cluster
/// queries (jittered centres), mid queries (shrunk centres, between the
/// bulk and the background), and far background queries.
pub fn blob_query_mix(suite: &BlobSuite, count: usize, point_scale: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = suite.points.cols();
    let clusters = suite.centres.rows();
    let mut data = vec![0.0; count * d];
    for i in 0..count {
        let kind = i % 4;
        let c = rng.gen_range(0..clusters);
        let centre = suite.centres.row(c);
        for j in 0..d {
            let g: f64 = StandardNormal.sample(&mut rng);
            data[i * d + j] = match kind {
                // Inside a cluster.
                0 | 1 => centre[j] + g * point_scale,
                // Between the bulk and the background.
                2 => centre[j] * 0.6 + g * point_scale,
                // Background.
                _ => g * (3.0 * point_scale) + centre[j] * 1.8,
            };
        }
    }
    DenseMatrix::new(count, d, data).unwrap()
}

/// Standard Gaussian matrix, deterministic in the seed.
pub fn gaussian_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * scale
        })
        .collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

/// Copy of `m` with every entry multiplied by `fac`.
pub fn rescale(m: &DenseMatrix, fac: f64) -> DenseMatrix {
    let data: Vec<f64> = m.data().iter().map(|v| v * fac).collect();
    DenseMatrix::new(m.rows(), m.cols(), data).unwrap()
}

/// Gaussian mixture with mutually orthogonal centres of equal norm
/// `centre_scale` (Gram-Schmidt over seeded Gaussian draws; needs
/// `clusters <= d`). Orthogonality keeps cross-cluster inner products at
/// noise level, giving cleanly separated attention clusters.
pub fn orthogonal_blobs(
    n: usize,
    d: usize,
    clusters: usize,
    centre_scale: f64,
    point_scale: f64,
    seed: u64,
) -> BlobSuite {
    assert!(clusters <= d, "need at most d orthogonal directions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(clusters);
    while centres.len() < clusters {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in &centres {
            let dot: f64 = v.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c.iter()) {
                *vi -= dot * ci;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        centres.push(v);
    }
    let mut cdata = Vec::with_capacity(clusters * d);
    for c in &centres {
        cdata.extend(c.iter().map(|v| v * centre_scale));
    }
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        let c = i % clusters;
        for j in 0..d {
            let g: f64 = StandardNormal.sample(&mut rng);
            data[i * d + j] = cdata[c * d + j] + g * point_scale;
        }
    }
    BlobSuite {
        points: DenseMatrix::new(n, d, data).unwrap(),
        centres: DenseMatrix::new(clusters, d, cdata).unwrap(),
    }
}
