use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{bail, Result};
use crate::ops;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    /// Nucleus mass; 1 disables truncation.
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 0.0, top_p: 1.0, seed: 0 }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Keeps the smallest high-probability prefix reaching `top_p` mass.
fn nucleus(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    kept
}

/// Autoregressively extends `prompt` by `n_new` tokens.
pub fn generate(model: &Model, prompt: &[usize], n_new: usize, cfg: &SamplingConfig) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        bail!(Contract, "generation needs a non-empty prompt");
    }
    if !(cfg.temperature >= 0.0) || !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) {
        bail!(Config, "temperature must be >= 0 and top_p in (0, 1]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let window = model.config.max_seq_len;
    let mut out = prompt.to_vec();
    for _ in 0..n_new {
        let ctx = &out[out.len().saturating_sub(window)..];
        let logits = model.logits(ctx, ctx.len())?;
        let last = logits.row(ctx.len() - 1);
        let next = if cfg.temperature == 0.0 {
            argmax(last)
        } else {
            let mut scaled: Vec<f64> = last.iter().map(|v| v / cfg.temperature).collect();
            ops::softmax_in_place(&mut scaled);
            let kept = nucleus(&scaled, cfg.top_p);
            let dist = WeightedIndex::new(kept.iter().map(|&(_, p)| p))
                .map_err(|e| crate::Error::NonFinite(e.to_string()))?;
            kept[dist.sample(&mut rng)].0
        };
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::tests::tiny;

    #[test]
    fn nucleus_keeps_prefix() {
        let kept = nucleus(&[0.1, 0.6, 0.3], 0.8);
        assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(nucleus(&[0.5, 0.5], 0.1).len(), 1);
    }

    #[test]
    fn greedy_and_seeded_sampling_are_deterministic() {
        let m = Model::new(tiny()).unwrap();
        let g = SamplingConfig::default();
        assert_eq!(generate(&m, &[1, 2], 5, &g).unwrap(), generate(&m, &[1, 2], 5, &g).unwrap());
        let s = SamplingConfig { temperature: 0.8, top_p: 0.9, seed: 7 };
        let a = generate(&m, &[3], 12, &s).unwrap();
        assert_eq!(a, generate(&m, &[3], 12, &s).unwrap());
        assert_eq!(a.len(), 13);
        assert!(a.iter().all(|&t| t < m.config.vocab));
    }
}
