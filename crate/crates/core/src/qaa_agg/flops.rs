//! Analytic operation counts for the aggregation head.
//!
//! Convention: a multiply-add is 2 FLOPs, a bias add or elementwise scale is
//! 1 FLOP, softmax is 4 FLOPs per element, and L2 normalization is 3 FLOPs
//! per element. Stages that only touch parameters (query refinement and the
//! reference codebook) are listed separately because inference caches them.

use super::{ImageSpec, QaaConfig};
use crate::error::Result;

pub const FLOP_CONVENTION: &str =
    "2 FLOPs per multiply-add; 1 per bias add or scale; softmax 4 per element; L2 normalization 3 per element";

#[derive(Clone, Debug, PartialEq)]
pub struct StageFlops {
    pub name: &'static str,
    pub flops: u64,
    /// Stage depends only on parameters and is cached at inference.
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopProfile {
    pub stages: Vec<StageFlops>,
    /// Per-image inference cost (non-cached stages).
    pub inference_flops: u64,
    /// Cost of the cacheable stages.
    pub cached_flops: u64,
    pub params: u64,
    pub convention: &'static str,
}

impl FlopProfile {
    pub fn inference_gflops(&self) -> f64 {
        self.inference_flops as f64 / 1e9
    }

    pub fn total_flops(&self) -> u64 {
        self.inference_flops + self.cached_flops
    }
}

fn linear_flops(rows: u64, d_in: u64, d_out: u64) -> u64 {
    2 * rows * d_in * d_out + rows * d_out
}

/// Attention core (scores, scaling, softmax, weighted sum) for `n_q` queries
/// over `n_k` keys at width `d` split into `heads`.
fn attention_core(n_q: u64, n_k: u64, d: u64, heads: u64) -> u64 {
    let scores = 2 * n_q * n_k * d;
    let scale = heads * n_q * n_k;
    let softmax = 4 * heads * n_q * n_k;
    let weighted = 2 * n_q * n_k * d;
    scores + scale + softmax + weighted
}

fn self_attention_stage(n: u64, d: u64, heads: u64) -> u64 {
    // Q, K, V and output projections, attention core, residual add.
    4 * linear_flops(n, d, d) + attention_core(n, n, d, heads) + n * d
}

pub fn count_flops(config: &QaaConfig, img: &ImageSpec) -> Result<FlopProfile> {
    config.validate()?;
    let p = img.patches()? as u64;
    let n_q = config.n_q as u64;
    let c_o = config.c_o as u64;
    let c_f = config.c_f as u64;
    let c_r = config.c_r as u64;
    let c_d = c_r * c_f;
    let h_o = config.heads_for(config.c_o) as u64;
    let h_r = config.heads_for(config.c_r) as u64;

    let stages = vec![
        StageFlops {
            name: "feature_self_attention",
            flops: self_attention_stage(n_q, c_o, h_o),
            cached: true,
        },
        StageFlops {
            name: "reference_self_attention",
            flops: self_attention_stage(n_q, c_r, h_r),
            cached: true,
        },
        StageFlops {
            name: "prediction_query_projection",
            flops: linear_flops(n_q, c_o, c_o),
            cached: false,
        },
        StageFlops {
            name: "prediction_key_value_projection",
            flops: 2 * linear_flops(p, c_o, c_o),
            cached: false,
        },
        StageFlops {
            name: "prediction_attention",
            flops: attention_core(n_q, p, c_o, h_o),
            cached: false,
        },
        StageFlops {
            name: "prediction_output_projection",
            flops: linear_flops(n_q, c_o, c_o),
            cached: false,
        },
        StageFlops {
            name: "channel_projection",
            flops: linear_flops(n_q, c_o, c_f),
            cached: false,
        },
        StageFlops {
            name: "cross_query_similarity",
            flops: 2 * c_r * c_f * n_q,
            cached: false,
        },
        StageFlops {
            name: "normalization",
            flops: 2 * 3 * c_d,
            cached: false,
        },
    ];

    let inference_flops = stages.iter().filter(|s| !s.cached).map(|s| s.flops).sum();
    let cached_flops = stages.iter().filter(|s| s.cached).map(|s| s.flops).sum();
    let mha = |d: u64| 4 * d * d + 4 * d;
    let params = n_q * c_o + n_q * c_r + 2 * mha(c_o) + c_o * c_f + c_f + mha(c_r);

    Ok(FlopProfile {
        stages,
        inference_flops,
        cached_flops,
        params,
        convention: FLOP_CONVENTION,
    })
}
