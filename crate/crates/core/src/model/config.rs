use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Architectural description of the toy MoE transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    /// Hidden width of the always-active shared expert; 0 disables it.
    pub shared_expert_hidden: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            bail!(Config, "n_layers must be at least 1");
        }
        if self.d_model != self.n_heads * self.head_dim {
            bail!(
                Config,
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model,
                self.n_heads,
                self.head_dim
            );
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            bail!(Config, "head_dim must be even and positive for rotary embeddings");
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            bail!(Config, "top_k {} outside 1..={}", self.top_k, self.n_experts);
        }
        if self.expert_hidden == 0 {
            bail!(Config, "expert_hidden must be positive");
        }
        if self.vocab < 2 {
            bail!(Config, "vocab must be at least 2");
        }
        if self.max_seq_len == 0 {
            bail!(Config, "max_seq_len must be positive");
        }
        Ok(())
    }
}

/// How a layer's two sub-blocks pick their inputs from the residual stream.
///
/// With `o` the residual after each layer and `a`, `s`, `r` the attention,
/// shared-expert and routed-expert outputs:
///
/// | mode     | attention input          | MoE input      |
/// |----------|--------------------------|----------------|
/// | Regular  | `o[k-1]`                 | `o[k-1] + a[k]`|
/// | Outdated | `o[k-2] + a[k-1]`        | `o[k-1]`       |
/// | Partial  | `o[k-2] + a[k-1] + s[k-1]` | `o[k-1] + a[k]`|
/// | Hybrid   | `o[k-2] + a[k-1] + s[k-1]` | `o[k-1]`       |
///
/// Layer 1 reads `o[0]` for both inputs in the rewired modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivityMode {
    Regular,
    Outdated,
    Partial,
    Hybrid,
}

impl ConnectivityMode {
    pub const ALL: [ConnectivityMode; 4] = [
        ConnectivityMode::Regular,
        ConnectivityMode::Outdated,
        ConnectivityMode::Partial,
        ConnectivityMode::Hybrid,
    ];

    /// True when the MoE input does not wait on this layer's attention output.
    pub fn moe_skips_attention(self) -> bool {
        matches!(self, ConnectivityMode::Outdated | ConnectivityMode::Hybrid)
    }
}

/// Which layers a conversion rewires.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    All,
    None,
    FirstN(usize),
    LastN(usize),
    /// Zero-based layer indices.
    Explicit(Vec<usize>),
}

impl MaskSpec {
    /// Per-layer flags marking converted layers.
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<bool>> {
        let mut mask = vec![false; n_layers];
        match self {
            MaskSpec::All => mask.iter_mut().for_each(|m| *m = true),
            MaskSpec::None => {}
            MaskSpec::FirstN(n) | MaskSpec::LastN(n) if *n > n_layers => {
                bail!(Config, "cannot convert {n} of {n_layers} layers")
            }
            MaskSpec::FirstN(n) => mask[..*n].iter_mut().for_each(|m| *m = true),
            MaskSpec::LastN(n) => mask[n_layers - n..].iter_mut().for_each(|m| *m = true),
            MaskSpec::Explicit(ids) => {
                for &i in ids {
                    if i >= n_layers {
                        bail!(Config, "layer {i} out of range for {n_layers} layers");
                    }
                    mask[i] = true;
                }
            }
        }
        Ok(mask)
    }
}
