//! Algorithmic FLOPs: GEMM-only operation counts.
//!
//! Only the projections (Q, K, V, Out), the two attention products (QKᵀ and AV)
//! and the three feed-forward matrices are counted; element-wise work and the
//! output head are not. [`GemmCounter`] is the instrumented side of the ledger
//! and must agree with [`flops_step_actual`] to the unit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::StepTrace;

/// Per-step algorithmic FLOPs of a full recompute over `batch·seq_len` positions:
///
/// `L·(4·B·H·N²·d_h + 2·B·N·d² + 2·B·N·d² + 4·B·N·d·H_kv·d_h + 6·B·N·d·d_ff)`
pub fn flops_base_step(cfg: &ModelConfig, batch: u64, seq_len: u64) -> u64 {
    per_layer_flops(cfg, seq_len, batch * seq_len) * cfg.n_layers as u64
}

/// FLOPs when only `computed_rows` of the `batch·seq_len` rows issue queries
/// and run projections/FFN; every computed query still attends to all keys.
/// Equals `(computed_rows / (B·N)) · flops_base_step` exactly.
pub fn flops_step_actual(
    cfg: &ModelConfig,
    batch: u64,
    seq_len: u64,
    computed_rows: u64,
) -> Result<u64> {
    if computed_rows > batch * seq_len {
        return Err(Error::InvalidInput(format!(
            "computed rows {computed_rows} exceed B·N = {}",
            batch * seq_len
        )));
    }
    Ok(per_layer_flops(cfg, seq_len, computed_rows) * cfg.n_layers as u64)
}

// Every term carries exactly one factor of the row count, so replacing B·N by
// C rows scales the whole expression by C/(B·N) without rounding.
fn per_layer_flops(cfg: &ModelConfig, seq_len: u64, rows: u64) -> u64 {
    let d = cfg.d_model as u64;
    let h = cfg.n_heads as u64;
    let dh = cfg.head_dim() as u64;
    let hkv = cfg.n_kv_heads as u64;
    let dff = cfg.d_ff as u64;
    let attention = 4 * rows * h * seq_len * dh;
    let q = 2 * rows * d * d;
    let out = 2 * rows * d * d;
    let kv = 4 * rows * d * hkv * dh;
    let ffn = 6 * rows * d * dff;
    attention + q + out + kv + ffn
}

/// Output-head GEMM cost for `rows` rows; reported separately, never part of the totals.
pub fn head_flops(cfg: &ModelConfig, rows: u64) -> u64 {
    2 * rows * cfg.d_model as u64 * cfg.vocab_size as u64
}

/// Counts `2·m·n·k` for every `m×k · k×n` product routed through it.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct GemmCounter {
    flops: u64,
    head_flops: u64,
}

impl GemmCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn gemm(&mut self, m: usize, n: usize, k: usize) {
        self.flops += 2 * (m as u64) * (n as u64) * (k as u64);
    }

    pub fn head_gemm(&mut self, m: usize, n: usize, k: usize) {
        self.head_flops += 2 * (m as u64) * (n as u64) * (k as u64);
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn head_flops(&self) -> u64 {
        self.head_flops
    }
}

/// `Σ_b Σ_t M_{t,b} / Σ_b Σ_t B·N_b` over a collection of per-batch traces.
pub fn micro_active_ratio(traces: &[&[StepTrace]]) -> Result<f64> {
    let mut active = 0u64;
    let mut total = 0u64;
    for trace in traces {
        for step in trace.iter() {
            active += step.active as u64;
            total += step.positions as u64;
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("micro-averaged ratio over no steps".into()));
    }
    Ok(active as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFlops {
    pub t: usize,
    pub f_base: u64,
    pub f_actual: u64,
    pub ratio: f64,
    pub active: usize,
    pub computed: usize,
}

/// Per-step and aggregate FLOPs of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub steps: Vec<StepFlops>,
    pub total_base: u64,
    pub total_actual: u64,
    pub total_ratio: f64,
    pub active_ratio: f64,
    /// Output-head GEMMs, informational.
    pub total_head_flops: u64,
    /// Unlock-probe GEMMs, informational.
    pub total_probe_flops: u64,
}

impl FlopsReport {
    pub fn from_trace(trace: &[StepTrace]) -> Result<Self> {
        let steps: Vec<StepFlops> = trace
            .iter()
            .map(|s| StepFlops {
                t: s.t,
                f_base: s.f_base,
                f_actual: s.f_actual,
                ratio: s.ratio(),
                active: s.active,
                computed: s.computed,
            })
            .collect();
        let total_base: u64 = steps.iter().map(|s| s.f_base).sum();
        let total_actual: u64 = steps.iter().map(|s| s.f_actual).sum();
        Ok(Self {
            total_ratio: if total_base == 0 {
                0.0
            } else {
                total_actual as f64 / total_base as f64
            },
            active_ratio: micro_active_ratio(&[trace])?,
            total_head_flops: trace.iter().map(|s| s.head_flops).sum(),
            total_probe_flops: trace.iter().map(|s| s.probe_flops).sum(),
            steps,
            total_base,
            total_actual,
        })
    }
}
