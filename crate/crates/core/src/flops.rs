//! Analytic FLOP accounting for the two-pass ranking pipeline.
//!
//! One cost convention is used everywhere, by both the closed-form counts
//! here and the instrumented counter in [`crate::tensor::Graph`]:
//!
//! * matrix multiply (m x k)(k x n): `2*m*k*n`
//! * elementwise add / multiply / scale / bias / sum: `1` per element
//! * softmax over a row of width w: `5*w` (max, subtract, exp, sum, divide)
//! * layer norm over a row of width w: `7*w` (mean, variance, center, scale,
//!   shift)
//! * GELU: `5` per element; logistic sigmoid: `4` per element
//! * cross-entropy: `6` per unmasked slot
//! * embedding lookups, slicing, stacking, reshapes: `0` (copies)
//!
//! Only forward-pass work is counted; the reports model inference cost.

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Per-op costs shared with the graph executor.
pub mod cost {
    pub fn matmul(m: usize, k: usize, n: usize) -> u64 {
        2 * m as u64 * k as u64 * n as u64
    }

    pub fn elementwise(n: usize) -> u64 {
        n as u64
    }

    pub fn softmax(rows: usize, cols: usize) -> u64 {
        5 * rows as u64 * cols as u64
    }

    pub fn layer_norm(rows: usize, cols: usize) -> u64 {
        7 * rows as u64 * cols as u64
    }

    pub fn gelu(n: usize) -> u64 {
        5 * n as u64
    }

    pub fn sigmoid(n: usize) -> u64 {
        4 * n as u64
    }

    pub fn bce(n_unmasked: usize) -> u64 {
        6 * n_unmasked as u64
    }
}

/// Closed-form forward cost of one encoder pass over a sequence of
/// `seq_len` positions, mirroring the executed op stream exactly.
pub fn encoder_flops(config: &EncoderConfig, seq_len: usize) -> u64 {
    let s = seq_len as u64;
    let h = config.hidden as u64;
    let a = config.heads as u64;
    let d = h / a;
    let f = config.ffn_dim as u64;

    let mut total = 0u64;

    // input assembly
    if config.token_inputs {
        if config.use_segments {
            total += s * h;
        }
        if config.use_positional {
            total += s * h;
        }
        total += 7 * s * h; // embedding layer norm
    } else if config.use_positional {
        total += s * h;
    }

    // per transformer layer
    let per_layer = {
        let projections = 4 * (2 * s * h * h + s * h); // q,k,v,o with biases
        let attention = a * (2 * (2 * s * s * d) + 7 * s * s); // scores+context, scale+mask+softmax
        let residual_norms = 2 * (s * h + 7 * s * h);
        let ffn = 2 * s * h * f + s * f + 5 * s * f + 2 * s * f * h + s * h;
        projections + attention + residual_norms + ffn
    };
    total += config.layers as u64 * per_layer;

    total
}

/// Cost of projecting `rows` hidden vectors to scalars with a shared
/// linear head (weight plus bias).
pub fn linear_head_flops(rows: usize, hidden: usize) -> u64 {
    cost::matmul(rows, hidden, 1) + rows as u64
}

/// Cost breakdown of a full two-pass ranking run.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub queries: usize,
    pub first_pass_passages: u64,
    pub first_pass_flops: f64,
    pub second_pass_passages: u64,
    pub second_pass_flops: f64,
    pub total_flops: f64,
    pub flops_per_query: f64,
    /// total cost relative to the first pass alone (the baseline re-ranker)
    pub ratio_vs_baseline: f64,
    pub avg_passages_per_doc: f64,
}

impl FlopsReport {
    pub const TSV_HEADER: &'static str = "queries\tfirst_pass_passages\tfirst_pass_tflops\tsecond_pass_passages\tsecond_pass_tflops\ttflops_per_query\tratio_vs_baseline\tavg_passages_per_doc";

    pub fn to_tsv_row(&self) -> String {
        const T: f64 = 1e12;
        format!(
            "{}\t{}\t{:.3}\t{}\t{:.3}\t{:.3}\t{:.3}x\t{:.3}",
            self.queries,
            self.first_pass_passages,
            self.first_pass_flops / T,
            self.second_pass_passages,
            self.second_pass_flops / T,
            self.flops_per_query / T,
            self.ratio_vs_baseline,
            self.avg_passages_per_doc,
        )
    }
}

/// Aggregates per-stage passage counts and per-passage costs into totals,
/// per-query cost, and the overhead ratio against the first pass alone.
pub fn pipeline_flops(
    queries: usize,
    first_pass_passages: u64,
    second_pass_passages: u64,
    first_pass_cost_per_passage: f64,
    second_pass_cost_per_passage: f64,
    docs_per_query: usize,
) -> Result<FlopsReport> {
    if queries == 0 {
        return Err(Error::Invalid("pipeline_flops requires at least one query".into()));
    }
    if first_pass_cost_per_passage < 0.0 || second_pass_cost_per_passage < 0.0 {
        return Err(Error::Invalid("per-passage costs must be non-negative".into()));
    }
    let first = first_pass_passages as f64 * first_pass_cost_per_passage;
    let second = second_pass_passages as f64 * second_pass_cost_per_passage;
    let total = first + second;
    let ratio = if first == 0.0 { 1.0 } else { total / first };
    Ok(FlopsReport {
        queries,
        first_pass_passages,
        first_pass_flops: first,
        second_pass_passages,
        second_pass_flops: second,
        total_flops: total,
        flops_per_query: total / queries as f64,
        ratio_vs_baseline: ratio,
        avg_passages_per_doc: first_pass_passages as f64
            / (queries as f64 * docs_per_query as f64),
    })
}

/// Second-pass slots per query: every group re-scores its `n` candidates
/// plus the `m` prototype documents.
pub fn second_pass_passages_per_query(k: usize, n: usize, o: usize, m: usize) -> Result<u64> {
    let groups = crate::group::group_count(k, n, o)?;
    Ok(groups as u64 * (n + m) as u64)
}
