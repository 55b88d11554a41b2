//! Central finite-difference gradient checks and random small configs
//! shared by the unit tests and the acceptance suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ConnectivityMode, Model, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so vanishing gradients are compared absolutely.
const DENOM_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub n_checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.n_checked > 0 && self.max_rel_err <= REL_TOL
    }

    fn observe(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.n_checked += 1;
        if e > self.max_rel_err || !e.is_finite() {
            self.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = format!("{} analytic {analytic:e} numeric {numeric:e}", label());
        }
    }

    fn merge(&mut self, other: GradCheck) {
        self.n_checked += other.n_checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

fn weighted_sum(out: &Tensor, weights: &Tensor) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Checks `d Σ(f(x) ⊙ R) / dx` for every input element, where `R` is a fixed
/// random weighting of the output.
pub fn check_op<F>(name: &str, inputs: &[Tensor], seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::randn(tape.value(out).shape(), 1.0, &mut rng);
    let grads = tape.backward_from(out, &weights)?;

    let mut report = GradCheck::default();
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get_or_zero(*v);
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = weighted_sum(&eval(&xs)?, &weights);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = weighted_sum(&eval(&xs)?, &weights);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.observe(|| format!("{name} input {i}[{j}]"), g.data()[j], numeric);
        }
    }
    Ok(report)
}

/// Next-token cross-entropy of `model` on one batch, through a fresh tape.
fn model_loss(model: &Model, tokens: &[usize], targets: &[usize], seq_len: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| false);
    let fwd = model.forward(&mut tape, &p, tokens, seq_len)?;
    let mask = vec![true; targets.len()];
    let loss = tape.cross_entropy(fwd.logits, targets, &mask)?;
    Ok(tape.value(loss).item())
}

/// Finite-difference check of every parameter of `model` under its modes.
pub fn check_model(model: &Model, tokens: &[usize], targets: &[usize], seq_len: usize) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| true);
    let fwd = model.forward(&mut tape, &p, tokens, seq_len)?;
    let mask = vec![true; targets.len()];
    let loss = tape.cross_entropy(fwd.logits, targets, &mask)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck::default();
    let mut probe = model.clone();
    for (i, (name, _)) in model.layout().specs.iter().enumerate() {
        let g = grads.get_or_zero(p.var(i));
        for j in 0..model.params.tensors[i].len() {
            let orig = model.params.tensors[i].data()[j];
            probe.params.tensors[i].data_mut()[j] = orig + FD_STEP;
            let up = model_loss(&probe, tokens, targets, seq_len)?;
            probe.params.tensors[i].data_mut()[j] = orig - FD_STEP;
            let down = model_loss(&probe, tokens, targets, seq_len)?;
            probe.params.tensors[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.observe(|| format!("{name}[{j}]"), g.data()[j], numeric);
        }
    }
    Ok(report)
}

/// A random model small enough for exhaustive finite differences.
pub fn random_small_config(rng: &mut impl Rng) -> ModelConfig {
    let n_heads = rng.gen_range(1..=2);
    let head_dim = *[2, 4].choose(rng).expect("non-empty");
    let n_experts = rng.gen_range(2..=4);
    ModelConfig {
        n_layers: rng.gen_range(1..=3),
        d_model: n_heads * head_dim,
        n_heads,
        head_dim,
        n_experts,
        top_k: rng.gen_range(1..=n_experts),
        expert_hidden: rng.gen_range(2..=5),
        shared_expert_hidden: rng.gen_range(0..=4),
        vocab: rng.gen_range(3..=9),
        max_seq_len: 6,
        seed: rng.gen(),
    }
}

/// Random tokens and targets: `n_seq` sequences of `seq_len`.
pub fn random_batch(cfg: &ModelConfig, n_seq: usize, seq_len: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let n = n_seq * seq_len;
    let tokens = (0..n).map(|_| rng.gen_range(0..cfg.vocab)).collect();
    let targets = (0..n).map(|_| rng.gen_range(0..cfg.vocab)).collect();
    (tokens, targets)
}

/// Gradient check of every differentiable tape op on 0.1-scale random inputs.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 0.1, &mut rng);
    let (a34, b45, b54, c34) = (r(&[3, 4]), r(&[4, 5]), r(&[5, 4]), r(&[3, 4]));
    let gamma = r(&[4]).reshape(vec![4])?;
    let gamma = Tensor::new(vec![4], gamma.data().iter().map(|g| 1.0 + g).collect())?;
    let logits = r(&[3, 5]);
    let table = r(&[6, 4]);
    let qkv = [r(&[6, 4]), r(&[6, 4]), r(&[6, 4])];
    let expert_bufs = [r(&[2, 4]), r(&[3, 4])];
    let probs = crate::ops::softmax_rows(&r(&[3, 4]))?;
    let mut teacher = crate::ops::softmax_rows(&r(&[3, 5]))?;
    teacher.data_mut()[0..5].copy_from_slice(&[0.0, 0.25, 0.25, 0.5, 0.0]);
    let target = r(&[3, 4]);

    let mut out = Vec::new();
    let mut run = |name: &'static str, xs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| -> Result<()> {
        out.push((name, check_op(name, xs, seed ^ 0x5eed, f)?));
        Ok(())
    };
    run("matmul", &[a34.clone(), b45.clone()], &|t, v| t.matmul(v[0], v[1]))?;
    run("matmul_nt", &[a34.clone(), b54.clone()], &|t, v| t.matmul_nt(v[0], v[1]))?;
    run("add", &[a34.clone(), c34.clone()], &|t, v| t.add(v[0], v[1]))?;
    run("mul", &[a34.clone(), c34.clone()], &|t, v| t.mul(v[0], v[1]))?;
    run("scale", &[a34.clone()], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run("silu", &[a34.clone()], &|t, v| Ok(t.silu(v[0])))?;
    run("rms_norm", &[a34.clone(), gamma], &|t, v| t.rms_norm(v[0], v[1]))?;
    run("softmax_rows", &[logits.clone()], &|t, v| t.softmax_rows(v[0]))?;
    run("embedding", &[table.clone()], &|t, v| t.embedding(v[0], &[1, 5, 1, 0]))?;
    run("gather_rows", &[table], &|t, v| t.gather_rows(v[0], &[2, 2, 4]))?;
    run("rope", &[qkv[0].clone()], &|t, v| t.rope(v[0], 2, 3))?;
    run("causal_attention", &qkv, &|t, v| t.causal_attention(v[0], v[1], v[2], 2, 3))?;
    run("top_k_gates", &[probs.clone()], &|t, v| t.top_k_gates(v[0], &[0, 2, 3, 1, 1, 0], 2))?;
    let slots = [(0, 0), (1, 2), (1, 0), (0, 1), (1, 1), (1, 0)];
    let mut combine_in = vec![crate::ops::softmax_rows(&r(&[3, 2]))?];
    combine_in.extend(expert_bufs);
    run("combine", &combine_in, &|t, v| t.combine(v[0], &[Some(v[1]), Some(v[2])], &slots, 4))?;
    run("cross_entropy", &[logits.clone()], &|t, v| t.cross_entropy(v[0], &[4, 0, 2], &[true, false, true]))?;
    run("kl_rows", &[logits], &|t, v| t.kl_rows(&teacher, v[0], &[true, true, true]))?;
    run("sq_dist", &[a34], &|t, v| t.sq_dist(v[0], &target))?;
    Ok(out)
}

/// Full-model finite-difference check under each connectivity mode.
pub fn check_model_all_modes(cfg: &ModelConfig, seed: u64) -> Result<Vec<(ConnectivityMode, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = scaled_model(cfg.clone())?;
    let seq_len = cfg.max_seq_len.min(4);
    let (tokens, targets) = random_batch(cfg, 2, seq_len, &mut rng);
    ConnectivityMode::ALL
        .iter()
        .map(|&mode| {
            let m = base.with_modes(vec![mode; cfg.n_layers])?;
            Ok((mode, check_model(&m, &tokens, &targets, seq_len)?))
        })
        .collect()
}

/// Fresh model with parameters perturbed away from init symmetries (unit
/// norm gains) so every gradient path is exercised.
fn scaled_model(cfg: ModelConfig) -> Result<Model> {
    let mut m = Model::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 1);
    let layout = m.layout().clone();
    for (t, (name, _)) in m.params.tensors.iter_mut().zip(&layout.specs) {
        if name.ends_with("norm") {
            for g in t.data_mut() {
                *g += rng.gen_range(-0.3..0.3);
            }
        }
    }
    Ok(m)
}

impl GradCheck {
    /// Combined report over several checks.
    pub fn merged(checks: impl IntoIterator<Item = GradCheck>) -> GradCheck {
        let mut all = GradCheck::default();
        for c in checks {
            all.merge(c);
        }
        all
    }
}

/// Outcome of the connectivity checks on one model and batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectivityCheck {
    /// All-regular forward equals the straight-line reference bit for bit.
    pub regular_matches_reference: bool,
    /// All-hybrid: `mlp_in[k] == attn_in[k] + routed_out[k-1]` bitwise, k ≥ 2.
    pub hybrid_identity: bool,
    /// Every mode: `o[k] == ((o[k-1] + attn) + shared) + routed` bitwise.
    pub accumulation_exact: bool,
}

impl ConnectivityCheck {
    pub fn passed(&self) -> bool {
        self.regular_matches_reference && self.hybrid_identity && self.accumulation_exact
    }
}

pub fn check_connectivity(cfg: &ModelConfig, seed: u64) -> Result<ConnectivityCheck> {
    use crate::ops;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(cfg.clone())?;
    let seq_len = rng.gen_range(1..=cfg.max_seq_len);
    let (tokens, _) = random_batch(cfg, rng.gen_range(1..=2), seq_len, &mut rng);

    let reference = crate::model::reference::reference_logits(&model, &tokens, seq_len)?;
    let regular = model.logits(&tokens, seq_len)?;

    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| false);
    let hybrid = vec![ConnectivityMode::Hybrid; cfg.n_layers];
    let fwd = model.forward_with_modes(&mut tape, &p, &tokens, seq_len, &hybrid)?;
    let cache = crate::model::ActivationCache::from_forward(&tape, &fwd);
    let mut hybrid_identity = true;
    for k in 1..cache.layers.len() {
        let expect = ops::add(&cache.layers[k].attn_in, &cache.layers[k - 1].routed_out)?;
        hybrid_identity &= expect.bit_eq(&cache.layers[k].mlp_in);
    }

    let mut accumulation_exact = true;
    for mode in ConnectivityMode::ALL {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |_| false);
        let fwd = model.forward_with_modes(&mut tape, &p, &tokens, seq_len, &vec![mode; cfg.n_layers])?;
        let cache = crate::model::ActivationCache::from_forward(&tape, &fwd);
        let mut prev = &cache.embed;
        for l in &cache.layers {
            let sum = ops::add(&ops::add(&ops::add(prev, &l.attn_out)?, &l.shared_out)?, &l.routed_out)?;
            accumulation_exact &= sum.bit_eq(&l.residual);
            prev = &l.residual;
        }
    }
    Ok(ConnectivityCheck {
        regular_matches_reference: reference.bit_eq(&regular),
        hybrid_identity,
        accumulation_exact,
    })
}

/// Largest deviation of the routed MoE output for `n_ranks ∈ {2,4,8}` from
/// the single-rank result (16 tokens, 8 experts, top-2).
pub fn ep_invariance_error(seed: u64) -> Result<f64> {
    use crate::model::{parallel, router};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d, c, e, k) = (16, 8, 6, 8, 2);
    let a = Tensor::randn(&[t, d], 1.0, &mut rng);
    let w_router = Tensor::randn(&[e, d], 0.5, &mut rng);
    let experts: Vec<parallel::MlpWeights> = (0..e)
        .map(|_| parallel::MlpWeights {
            w1: Tensor::randn(&[c, d], 0.3, &mut rng),
            w2: Tensor::randn(&[c, d], 0.3, &mut rng),
            w3: Tensor::randn(&[d, c], 0.3, &mut rng),
        })
        .collect();
    let route = router::route_tokens(&a, &w_router, k)?;
    let single = parallel::routed_ep(&a, &route, &experts, 1)?;
    let mut worst = 0.0f64;
    for n in [2, 4, 8] {
        worst = worst.max(parallel::routed_ep(&a, &route, &experts, n)?.max_abs_diff(&single));
    }
    Ok(worst)
}

/// Largest deviation of tensor-parallel dense MLPs (2, 3 and 6 shards,
/// recombined by summation) from the unsharded MLP.
pub fn tp_identity_error(seed: u64) -> Result<f64> {
    use crate::model::parallel;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d, c) = (5, 8, 12);
    let a = Tensor::randn(&[t, d], 1.0, &mut rng);
    let w = parallel::MlpWeights {
        w1: Tensor::randn(&[c, d], 0.3, &mut rng),
        w2: Tensor::randn(&[c, d], 0.3, &mut rng),
        w3: Tensor::randn(&[d, c], 0.3, &mut rng),
    };
    let full = crate::ops::swiglu_mlp(&a, &w.w1, &w.w2, &w.w3)?;
    let mut worst = 0.0f64;
    for k in [2, 3, 6] {
        let shards = parallel::tp_shard(&w, k)?;
        worst = worst.max(parallel::tp_mlp(&a, &shards)?.max_abs_diff(&full));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for (name, c) in check_all_ops(3).unwrap() {
            assert!(c.passed(), "{name}: {c:?}");
        }
    }

    #[test]
    fn tiny_model_passes_under_all_modes() {
        let cfg = crate::model::config::tests::tiny();
        for (mode, c) in check_model_all_modes(&cfg, 1).unwrap() {
            assert!(c.passed(), "{mode:?}: {c:?}");
        }
    }

    #[test]
    fn connectivity_on_tiny() {
        let cfg = crate::model::config::tests::tiny();
        assert!(check_connectivity(&cfg, 4).unwrap().passed());
        assert!(ep_invariance_error(1).unwrap() <= 1e-12);
        assert!(tp_identity_error(1).unwrap() <= 1e-12);
    }

    #[test]
    fn relative_error_floor() {
        assert!(rel_err(1.0, 1.001) > REL_TOL);
        assert!(rel_err(1e-12, 0.0) < REL_TOL);
    }
}
