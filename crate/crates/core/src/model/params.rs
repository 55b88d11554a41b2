use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

/// Indices of one expert's `(W1, W2, W3)` in the parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpIds {
    pub w1: usize,
    pub w2: usize,
    pub w3: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub router: usize,
    pub experts: Vec<MlpIds>,
    pub shared: Option<MlpIds>,
}

/// Position of every named tensor, derived from the config alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub embed: usize,
    pub layers: Vec<LayerIds>,
    pub final_norm: usize,
    pub lm_head: usize,
    pub specs: Vec<(String, Vec<usize>)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            specs.push((name, shape));
            specs.len() - 1
        };
        let (d, c, cs) = (cfg.d_model, cfg.expert_hidden, cfg.shared_expert_hidden);
        let embed = add("embed".into(), vec![cfg.vocab, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            let attn_norm = add(format!("{p}.attn_norm"), vec![d]);
            let wq = add(format!("{p}.attn.wq"), vec![d, d]);
            let wk = add(format!("{p}.attn.wk"), vec![d, d]);
            let wv = add(format!("{p}.attn.wv"), vec![d, d]);
            let wo = add(format!("{p}.attn.wo"), vec![d, d]);
            let mlp_norm = add(format!("{p}.mlp_norm"), vec![d]);
            let router = add(format!("{p}.moe.router"), vec![cfg.n_experts, d]);
            let experts = (0..cfg.n_experts)
                .map(|e| MlpIds {
                    w1: add(format!("{p}.moe.experts.{e}.w1"), vec![c, d]),
                    w2: add(format!("{p}.moe.experts.{e}.w2"), vec![c, d]),
                    w3: add(format!("{p}.moe.experts.{e}.w3"), vec![d, c]),
                })
                .collect();
            let shared = (cs > 0).then(|| MlpIds {
                w1: add(format!("{p}.moe.shared.w1"), vec![cs, d]),
                w2: add(format!("{p}.moe.shared.w2"), vec![cs, d]),
                w3: add(format!("{p}.moe.shared.w3"), vec![d, cs]),
            });
            layers.push(LayerIds { attn_norm, wq, wk, wv, wo, mlp_norm, router, experts, shared });
        }
        let final_norm = add("final_norm".into(), vec![d]);
        let lm_head = add("lm_head".into(), vec![cfg.vocab, d]);
        Self { embed, layers, final_norm, lm_head, specs }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|(n, _)| n == name)
    }
}

/// Ordered parameter tensors matching a [`Layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    /// Seeded initialization. Norm gains start at one; projections feeding the
    /// residual stream are scaled down by `sqrt(2L)`.
    pub fn init(cfg: &ModelConfig, layout: &Layout) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let depth_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let tensors = layout
            .specs
            .iter()
            .map(|(name, shape)| {
                if name.ends_with("norm") {
                    return Tensor::full(shape, 1.0);
                }
                if name == "embed" {
                    return Tensor::randn(shape, 1.0, &mut rng);
                }
                let fan_in = shape[1] as f64;
                let mut std = fan_in.powf(-0.5);
                if name.ends_with(".wo") || name.ends_with(".w3") {
                    std *= depth_scale;
                }
                Tensor::randn(shape, std, &mut rng)
            })
            .collect();
        Self { tensors }
    }

    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if self.tensors.len() != layout.len() {
            bail!(Contract, "{} tensors for a layout of {}", self.tensors.len(), layout.len());
        }
        for (t, (name, shape)) in self.tensors.iter().zip(&layout.specs) {
            if t.shape() != shape.as_slice() {
                bail!(Contract, "{name} has shape {:?}, expected {:?}", t.shape(), shape);
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
