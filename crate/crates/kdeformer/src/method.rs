//! Runtime-selectable attention strategies behind one trait.
//!
//! Each strategy is a stateless unit struct implementing
//! [`AttentionMethod`]; [`lookup_method`] resolves one by its registered
//! name so drivers can pick the algorithm from a config file or CLI flag
//! without compile-time dispatch. The registered names are `exact`,
//! `kdeformer-basic` and `kdeformer-practical`.
//!
//! All strategies share one budget convention: `budget` is the feature
//! dimension `k`, i.e. the approximation may hold at most `n·k` working
//! values. The plain sampled strategy spends the whole budget on sampled
//! columns; the sparse-plus-residual strategy first reserves the columns
//! its block-diagonal component occupies and samples with the remainder,
//! so the two are comparable at equal memory.

use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::matrix::{exact_attention, AttentionInputs, DenseMatrix};
use crate::pipeline::{
    approximate_attention_basic, approximate_attention_practical, residual_samples_for_budget,
    LshConfig, ScalingMode,
};

/// Knobs shared by every strategy. Strategies ignore the fields they do
/// not use (the exact reference ignores everything but the inputs).
#[derive(Debug, Clone, Copy)]
pub struct MethodOptions {
    /// Feature-dimension budget `k`: at most `n·k` working values.
    pub budget: usize,
    /// Target relative spectral error; drives the normalizer accuracy.
    pub epsilon: f64,
    /// Hash rank and block size for the sparse component.
    pub lsh: LshConfig,
    /// Estimated normalizers, or the exact oracle for ground-truth runs.
    pub scaling: ScalingMode,
}

impl MethodOptions {
    /// Options with a given budget and conventional defaults elsewhere:
    /// `epsilon = 0.5`, hash rank 8, block size 32, estimated scaling.
    pub fn new(budget: usize) -> Self {
        MethodOptions {
            budget,
            epsilon: 0.5,
            lsh: LshConfig {
                rank_r: 8,
                block_size: 32,
            },
            scaling: ScalingMode::Estimated,
        }
    }
}

/// What every strategy returns: the attention estimate plus the cost
/// evidence drivers record.
#[derive(Debug)]
pub struct MethodOutput {
    /// `n_q x d_v` attention estimate, all entries finite.
    pub output: DenseMatrix,
    /// Operations spent inside the call, by the house counting model.
    pub flops: u64,
    /// Stored entries of the sparse component; zero for strategies
    /// without one.
    pub sparse_nnz: usize,
}

/// One attention algorithm selectable by name.
pub trait AttentionMethod {
    /// The registered name, e.g. `"kdeformer-practical"`.
    fn name(&self) -> &'static str;

    /// Runs the strategy on one attention instance. Deterministic in
    /// `seed` for fixed inputs and options.
    fn run(
        &self,
        inp: &AttentionInputs,
        opts: &MethodOptions,
        seed: u64,
        meter: &CostMeter,
    ) -> Result<MethodOutput>;
}

/// Dense reference: computes attention exactly and ignores the budget.
struct ExactMethod;

impl AttentionMethod for ExactMethod {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn run(
        &self,
        inp: &AttentionInputs,
        _opts: &MethodOptions,
        _seed: u64,
        meter: &CostMeter,
    ) -> Result<MethodOutput> {
        let start = meter.flops();
        let output = exact_attention(inp, meter)?;
        Ok(MethodOutput {
            output,
            flops: meter.flops() - start,
            sparse_nnz: 0,
        })
    }
}

/// Sampled-columns estimator: the whole budget buys sampled columns.
struct BasicMethod;

impl AttentionMethod for BasicMethod {
    fn name(&self) -> &'static str {
        "kdeformer-basic"
    }

    fn run(
        &self,
        inp: &AttentionInputs,
        opts: &MethodOptions,
        seed: u64,
        meter: &CostMeter,
    ) -> Result<MethodOutput> {
        let got = approximate_attention_basic(
            inp,
            opts.budget,
            opts.epsilon,
            opts.scaling,
            seed,
            meter,
        )?;
        Ok(MethodOutput {
            output: got.output,
            flops: got.flops,
            sparse_nnz: got.sparse_nnz,
        })
    }
}

/// Sparse-plus-residual estimator: the sparse component's columns are
/// charged against the budget and the remainder buys residual samples.
struct PracticalMethod;

impl AttentionMethod for PracticalMethod {
    fn name(&self) -> &'static str {
        "kdeformer-practical"
    }

    fn run(
        &self,
        inp: &AttentionInputs,
        opts: &MethodOptions,
        seed: u64,
        meter: &CostMeter,
    ) -> Result<MethodOutput> {
        let m = residual_samples_for_budget(opts.budget, inp.n_keys(), opts.lsh.block_size);
        let got = approximate_attention_practical(
            inp,
            m,
            opts.epsilon,
            opts.lsh,
            opts.scaling,
            seed,
            meter,
        )?;
        Ok(MethodOutput {
            output: got.output,
            flops: got.flops,
            sparse_nnz: got.sparse_nnz,
        })
    }
}

/// Names accepted by [`lookup_method`], in registry order.
pub const METHOD_NAMES: [&str; 3] = ["exact", "kdeformer-basic", "kdeformer-practical"];

/// Resolves a strategy by registered name.
pub fn lookup_method(name: &str) -> Result<Box<dyn AttentionMethod>> {
    match name {
        "exact" => Ok(Box::new(ExactMethod)),
        "kdeformer-basic" => Ok(Box::new(BasicMethod)),
        "kdeformer-practical" => Ok(Box::new(PracticalMethod)),
        _ => Err(Error::UnknownMethod {
            name: name.to_string(),
        }),
    }
}
