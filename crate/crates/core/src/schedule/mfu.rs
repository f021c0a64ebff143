use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterSpec, ParallelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsFormula {
    /// `6N` per token.
    SixN,
    /// `6N + 12 * layers * hidden * span`, span being the attention window.
    #[default]
    SixNPlusAttention,
}

impl FlopsFormula {
    pub fn per_token(self, cfg: &ParallelConfig) -> f64 {
        let six_n = 6.0 * cfg.param_count();
        match self {
            FlopsFormula::SixN => six_n,
            FlopsFormula::SixNPlusAttention => {
                six_n + 12.0 * cfg.layers as f64 * cfg.hidden as f64 * cfg.window() as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfuReport {
    pub iteration_time: f64,
    pub tokens_per_s: f64,
    pub flops_per_token: f64,
    /// Aggregate achieved FLOP/s across all ranks.
    pub achieved_flops: f64,
    pub mfu: f64,
}

pub fn compute_mfu(
    iteration_time: f64,
    cfg: &ParallelConfig,
    cluster: &ClusterSpec,
    formula: FlopsFormula,
) -> MfuReport {
    let tokens_per_s = cfg.global_batch as f64 * cfg.seq_len as f64 / iteration_time;
    let flops_per_token = formula.per_token(cfg);
    let achieved_flops = tokens_per_s * flops_per_token;
    let peak = cfg.ranks() as f64 * cluster.peak_flops_per_gpu;
    MfuReport {
        iteration_time,
        tokens_per_s,
        flops_per_token,
        achieved_flops,
        mfu: achieved_flops / peak,
    }
}

/// Bubble quantity summed over `steps` iterations when each iteration's
/// batch is `batch_multiplier` times larger.
pub fn analytic_bubbles(p: usize, v: usize, m: usize, steps: usize, batch_multiplier: usize) -> f64 {
    steps as f64 / v as f64 * (p as f64 - 1.0) / (m as f64 * batch_multiplier as f64)
}
