//! Hardware and workload descriptions and the analytic cost model.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// Sustained FLOP/s per rank.
    pub flops_per_s: f64,
    /// Collective latency (s) and inverse bandwidth (s/byte) within a node.
    pub intra_alpha: f64,
    pub intra_beta: f64,
    pub inter_alpha: f64,
    pub inter_beta: f64,
    pub ranks_per_node: usize,
    pub ep: usize,
    #[serde(default = "one")]
    pub tp: usize,
    /// Fractional compute slowdown while a collective runs concurrently.
    #[serde(default)]
    pub contention: f64,
}

fn one() -> usize {
    1
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.flops_per_s, self.intra_beta, self.inter_beta];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(SimError::Config("throughput and betas must be positive".into()));
        }
        if !(self.intra_alpha >= 0.0 && self.inter_alpha >= 0.0) {
            return Err(SimError::Config("alphas must be non-negative".into()));
        }
        if self.ranks_per_node == 0 || self.ep == 0 || self.tp == 0 {
            return Err(SimError::Config("ranks_per_node, ep and tp must be >= 1".into()));
        }
        if self.ep > self.ranks_per_node && self.ep % self.ranks_per_node != 0 {
            return Err(SimError::Config(format!(
                "ep {} spanning nodes must be a multiple of ranks_per_node {}",
                self.ep, self.ranks_per_node
            )));
        }
        if !(0.0..=1.0).contains(&self.contention) {
            return Err(SimError::Config("contention must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn crosses_nodes(&self) -> bool {
        self.ep > self.ranks_per_node
    }
}

/// Model dimensions and per-rank batch of the simulated workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Key/value heads; equal to `n_heads` for plain multi-head attention.
    #[serde(default)]
    pub n_kv_heads: Option<usize>,
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    #[serde(default)]
    pub shared_expert_hidden: usize,
    /// Tokens processed per rank per micro-batch.
    pub tokens: usize,
    pub seq_len: usize,
    pub bytes_per_element: f64,
    /// Tokens per local expert at which grouped expert GEMMs reach half
    /// of peak efficiency; 0 disables the correction.
    #[serde(default)]
    pub expert_half_efficiency_tokens: f64,
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.d_model, self.n_heads, self.head_dim, self.n_experts, self.top_k, self.expert_hidden, self.tokens, self.seq_len];
        if dims.contains(&0) {
            return Err(SimError::Config("workload dimensions must be positive".into()));
        }
        if self.top_k > self.n_experts {
            return Err(SimError::Config("top_k exceeds n_experts".into()));
        }
        if !(self.bytes_per_element > 0.0) || !(self.expert_half_efficiency_tokens >= 0.0) {
            return Err(SimError::Config("bytes_per_element must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer forward durations in microseconds. Backward compute takes
/// `backward_factor` times as long; backward collectives move the same bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpDurations {
    pub gate: f64,
    pub dispatch: f64,
    pub attn_qkv: f64,
    pub attn_core: f64,
    pub routed_experts: f64,
    pub combine: f64,
    pub shared_expert: f64,
    #[serde(default)]
    pub allreduce_attn: f64,
    #[serde(default)]
    pub allreduce_moe: f64,
    #[serde(default)]
    pub norm: f64,
    #[serde(default = "two")]
    pub backward_factor: f64,
}

fn two() -> f64 {
    2.0
}

impl OpDurations {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gate,
            self.dispatch,
            self.attn_qkv,
            self.attn_core,
            self.routed_experts,
            self.combine,
            self.shared_expert,
            self.allreduce_attn,
            self.allreduce_moe,
            self.norm,
            self.backward_factor,
        ];
        if all.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(SimError::Config("durations must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn with_zero_comm(&self) -> Self {
        Self { dispatch: 0.0, combine: 0.0, allreduce_attn: 0.0, allreduce_moe: 0.0, ..self.clone() }
    }

    /// Compute time of one forward layer.
    pub fn layer_compute(&self) -> f64 {
        self.attn_qkv + self.attn_core + self.gate + self.routed_experts + self.shared_expert
    }
}

const US: f64 = 1e6;

/// All-to-all time for `bytes` leaving each rank, balanced over `ep` ranks.
pub fn all_to_all_us(hw: &HardwareProfile, bytes: f64) -> f64 {
    if hw.ep <= 1 {
        return 0.0;
    }
    let ep = hw.ep as f64;
    let local = hw.ep.min(hw.ranks_per_node) as f64;
    let intra = bytes * (local - 1.0) / ep * hw.intra_beta;
    let inter = bytes * (ep - local) / ep * hw.inter_beta;
    let alpha = if hw.crosses_nodes() { hw.inter_alpha } else { hw.intra_alpha };
    (alpha + intra.max(inter)) * US
}

/// Ring all-reduce time over a group of `n` ranks within one node.
pub fn all_reduce_us(hw: &HardwareProfile, n: usize, payload: f64) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let bytes = 2.0 * (n as f64 - 1.0) / n as f64 * payload;
    (hw.intra_alpha + bytes * hw.intra_beta) * US
}

fn compute_us(hw: &HardwareProfile, flops: f64) -> f64 {
    flops / hw.flops_per_s * US
}

struct Flops {
    qkv: f64,
    core: f64,
    gate: f64,
    routed: f64,
    shared: f64,
}

fn layer_flops(w: &Workload) -> Flops {
    let t = w.tokens as f64;
    let d = w.d_model as f64;
    let q = (w.n_heads * w.head_dim) as f64;
    let kv = (w.n_kv_heads.unwrap_or(w.n_heads) * w.head_dim) as f64;
    // causal attention sees on average half the sequence
    let ctx = w.seq_len as f64 / 2.0;
    Flops {
        qkv: 2.0 * t * d * (q + 2.0 * kv),
        core: 4.0 * t * ctx * q + 2.0 * t * q * d,
        gate: 2.0 * t * d * w.n_experts as f64,
        routed: 6.0 * t * w.top_k as f64 * d * w.expert_hidden as f64,
        shared: 6.0 * t * d * w.shared_expert_hidden as f64,
    }
}

fn expert_efficiency(w: &Workload, tokens_per_expert: f64) -> f64 {
    if w.expert_half_efficiency_tokens == 0.0 {
        1.0
    } else {
        tokens_per_expert / (tokens_per_expert + w.expert_half_efficiency_tokens)
    }
}

/// Training step durations: attention unsharded, experts sharded `ep` ways
/// with balanced routing, dispatch/combine as all-to-all.
pub fn training_durations(w: &Workload, hw: &HardwareProfile) -> Result<OpDurations> {
    w.validate()?;
    hw.validate()?;
    if w.n_experts % hw.ep != 0 {
        return Err(SimError::Config(format!("ep {} does not divide {} experts", hw.ep, w.n_experts)));
    }
    let f = layer_flops(w);
    // each rank receives tokens·top_k rows spread over its E/ep experts
    let per_expert = w.tokens as f64 * w.top_k as f64 * hw.ep as f64 / w.n_experts as f64;
    let a2a_bytes = w.tokens as f64 * w.top_k as f64 * w.d_model as f64 * w.bytes_per_element;
    let a2a = all_to_all_us(hw, a2a_bytes);
    Ok(OpDurations {
        gate: compute_us(hw, f.gate),
        dispatch: a2a,
        attn_qkv: compute_us(hw, f.qkv),
        attn_core: compute_us(hw, f.core),
        routed_experts: compute_us(hw, f.routed) / expert_efficiency(w, per_expert),
        combine: a2a,
        shared_expert: compute_us(hw, f.shared),
        allreduce_attn: 0.0,
        allreduce_moe: 0.0,
        norm: 0.0,
        backward_factor: 2.0,
    })
}

/// Prefill durations with replicated activations: attention heads split
/// `tp` ways, experts (shared included) split `ep` ways, one all-reduce
/// after each sub-block.
pub fn inference_durations(w: &Workload, hw: &HardwareProfile) -> Result<OpDurations> {
    w.validate()?;
    hw.validate()?;
    if w.n_experts % hw.ep != 0 {
        return Err(SimError::Config(format!("ep {} does not divide {} experts", hw.ep, w.n_experts)));
    }
    let f = layer_flops(w);
    let (tp, ep) = (hw.tp as f64, hw.ep as f64);
    let per_expert = w.tokens as f64 * w.top_k as f64 / w.n_experts as f64;
    let payload = w.tokens as f64 * w.d_model as f64 * w.bytes_per_element;
    Ok(OpDurations {
        gate: compute_us(hw, f.gate),
        dispatch: 0.0,
        attn_qkv: compute_us(hw, f.qkv) / tp,
        attn_core: compute_us(hw, f.core) / tp,
        routed_experts: compute_us(hw, f.routed) / ep / expert_efficiency(w, per_expert),
        combine: 0.0,
        shared_expert: compute_us(hw, f.shared) / ep,
        allreduce_attn: all_reduce_us(hw, hw.tp, payload),
        allreduce_moe: all_reduce_us(hw, hw.ep, payload),
        norm: 0.0,
        backward_factor: 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw(ep: usize) -> HardwareProfile {
        HardwareProfile {
            flops_per_s: 1e12,
            intra_alpha: 0.0,
            intra_beta: 1e-9,
            inter_alpha: 0.0,
            inter_beta: 4e-9,
            ranks_per_node: 8,
            ep,
            tp: 1,
            contention: 0.0,
        }
    }

    #[test]
    fn all_to_all_scales_with_remote_fraction() {
        assert_eq!(all_to_all_us(&hw(1), 1e6), 0.0);
        // 7/8 of a MB over 1 GB/s
        assert!((all_to_all_us(&hw(8), 1e6) - 875.0).abs() < 1e-9);
        // 16 ranks: half the bytes cross nodes at 4 ns/byte
        assert!((all_to_all_us(&hw(16), 1e6) - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn all_reduce_bytes() {
        assert!((all_reduce_us(&hw(8), 8, 1e6) - 1750.0).abs() < 1e-9);
        assert_eq!(all_reduce_us(&hw(8), 1, 1e6), 0.0);
    }

    #[test]
    fn rejects_bad_profiles() {
        let mut p = hw(12);
        assert!(p.validate().is_err());
        p.ep = 8;
        p.contention = 2.0;
        assert!(p.validate().is_err());
    }
}
