//! Sub-quadratic approximate dot-product attention with spectral-norm error
//! control.
//!
//! The crate is organised around one estimator family:
//!
//! * [`matrix`] - dense row-major matrices, the exact attention reference,
//!   power-iteration operator norms and stable ranks.
//! * [`kde`] - a hashing-based Gaussian kernel-density structure with a
//!   density floor contract (below-floor queries report zero).
//! * [`wexp`] - weighted exponential kernel sums reduced to Gaussian KDE via
//!   dataset augmentation, with an adaptive floor-halving loop and an exact
//!   fallback for the leftovers.
//! * [`amm`] - approximate matrix multiplication by importance-sampled rows
//!   (alias-method sampling, optional deterministic full mode).
//! * [`lsh`] - sign-pattern (angular) LSH, Gray-code bucket ordering,
//!   equal-sized blocking and the block-diagonal sparse attention component.
//! * [`pipeline`] - the samplers and the two end-to-end estimators
//!   (sampled-columns "basic", sparse-plus-residual "practical").
//! * [`method`] - a small registry exposing `exact`, `kdeformer-basic` and
//!   `kdeformer-practical` behind one trait for runtime selection.
//!
//! All randomised components take explicit `u64` seeds and are bitwise
//! deterministic for a fixed seed. Computation is single-threaded; shared
//! structures are immutable after construction so concurrent reads are safe.
//! Arithmetic is `f64` throughout; instrumented operation counts and the
//! analytic memory model are tracked through [`cost::CostMeter`].

pub mod amm;
pub mod cost;
pub mod error;
pub mod kde;
pub mod lsh;
pub mod matrix;
pub mod method;
pub mod pipeline;
pub mod wexp;

pub use cost::CostMeter;
pub use error::{Error, Result};
pub use matrix::{AttentionInputs, DenseMatrix, SpectralStats};
