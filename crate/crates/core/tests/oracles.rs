//! Kernels and blocks against independent scalar-loop oracles and frozen
//! values computed offline.

use farskip_core::model::{router, ConnectivityMode, Model, ModelConfig};
use farskip_core::{ops, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn mlp_loop(x: &[f64], w1: &Tensor, w2: &Tensor, w3: &Tensor) -> Vec<f64> {
    let (c, d) = (w1.rows(), w1.cols());
    let mut hidden = vec![0.0; c];
    for (j, h) in hidden.iter_mut().enumerate() {
        let (mut a, mut b) = (0.0, 0.0);
        for i in 0..d {
            a += x[i] * w1.row(j)[i];
            b += x[i] * w2.row(j)[i];
        }
        *h = a * silu(b);
    }
    (0..d).map(|o| (0..c).map(|j| hidden[j] * w3.row(o)[j]).sum()).collect()
}

#[test]
fn silu_frozen_values() {
    assert!((ops::silu_scalar(1.5) - 1.2263617142904655).abs() < 1e-15);
    assert!((ops::silu_scalar(-2.0) - -0.2384058440442351).abs() < 1e-15);
}

#[test]
fn swiglu_matches_scalar_loops() {
    let (t, d, c) = (5, 6, 7);
    let (x, w1, w2, w3) = (rand(&[t, d], 1), rand(&[c, d], 2), rand(&[c, d], 3), rand(&[d, c], 4));
    let got = ops::swiglu_mlp(&x, &w1, &w2, &w3).unwrap();
    for r in 0..t {
        for (a, b) in got.row(r).iter().zip(mlp_loop(x.row(r), &w1, &w2, &w3)) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn cross_entropy_frozen_value() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap());
    let ce = tape.cross_entropy(z, &[2, 0], &[true, false]).unwrap();
    assert!((tape.value(ce).item() - 0.40760596444438013).abs() < 1e-14);
    let both = tape.cross_entropy(z, &[2, 0], &[true, true]).unwrap();
    assert!((tape.value(both).item() - (0.40760596444438013 + 2.40760596444438) / 2.0).abs() < 1e-14);
}

#[test]
fn kl_frozen_value() {
    let mut tape = Tape::new();
    let teacher = Tensor::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
    let z = tape.leaf(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap());
    let kl = tape.kl_rows(&teacher, z, &[true]).unwrap();
    assert!((tape.value(kl).item() - 0.4116582825925836).abs() < 1e-14);
    // identical distributions
    let same = tape.leaf(Tensor::from_rows(&[vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()]]).unwrap());
    let zero = tape.kl_rows(&teacher, same, &[true]).unwrap();
    assert!(tape.value(zero).item().abs() < 1e-15);
}

#[test]
fn single_position_attention_returns_values() {
    let (q, k, v) = (rand(&[1, 8], 5), rand(&[1, 8], 6), rand(&[1, 8], 7));
    let (out, probs) = ops::causal_attention(&q, &k, &v, 2, 1).unwrap();
    assert_eq!(out.data(), v.data());
    assert_eq!(probs, vec![1.0, 1.0]);
}

fn config(shared: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        head_dim: 4,
        n_experts: 4,
        top_k: 2,
        expert_hidden: 6,
        shared_expert_hidden: shared,
        vocab: 11,
        max_seq_len: 8,
        seed: 42,
    }
}

#[test]
fn moe_block_matches_dense_loop() {
    for shared in [0, 5] {
        let model = Model::new(config(shared)).unwrap();
        let x = rand(&[6, 8], 9);
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let (s, r) = model.moe_block(&mut tape, &p, 1, xv).unwrap();
        let ids = &model.layout().layers[1];
        let t = &model.params.tensors;
        let normed = ops::rms_norm(&x, &t[ids.mlp_norm]).unwrap();
        let route = router::route_tokens(&normed, &t[ids.router], 2).unwrap();
        for tok in 0..6 {
            let mut routed = vec![0.0; 8];
            for (&e, &g) in route.token_experts(tok).iter().zip(route.token_gates(tok)) {
                let w = ids.experts[e];
                for (acc, y) in routed.iter_mut().zip(mlp_loop(normed.row(tok), &t[w.w1], &t[w.w2], &t[w.w3])) {
                    *acc += g * y;
                }
            }
            let shared_out = match ids.shared {
                Some(w) => mlp_loop(normed.row(tok), &t[w.w1], &t[w.w2], &t[w.w3]),
                None => vec![0.0; 8],
            };
            for j in 0..8 {
                assert!((tape.value(r).row(tok)[j] - routed[j]).abs() <= 1e-12);
                assert!((tape.value(s).row(tok)[j] - shared_out[j]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn later_tokens_never_change_earlier_logits() {
    let tokens = [3usize, 1, 4, 1, 5, 9, 2, 6];
    for mode in ConnectivityMode::ALL {
        let model = Model::new(config(5)).unwrap().with_modes(vec![mode; 3]).unwrap();
        let base = model.logits(&tokens, 8).unwrap();
        for pos in 1..8 {
            let mut changed = tokens;
            changed[pos] = (changed[pos] + 1) % 11;
            let other = model.logits(&changed, 8).unwrap();
            for row in 0..pos {
                assert_eq!(base.row(row), other.row(row), "{mode:?}: position {pos} leaked into {row}");
            }
            assert_ne!(base.row(pos), other.row(pos));
        }
    }
}

#[test]
fn sequences_in_a_batch_are_independent() {
    let model = Model::new(config(5)).unwrap().with_modes(vec![ConnectivityMode::Hybrid; 3]).unwrap();
    let a = [1usize, 2, 3, 4];
    let b = [5usize, 6, 7, 8];
    let batch = model.logits(&[a, b].concat(), 4).unwrap();
    let alone = model.logits(&b, 4).unwrap();
    for r in 0..4 {
        assert!(batch.row(4 + r).iter().zip(alone.row(r)).all(|(x, y)| (x - y).abs() <= 1e-12));
    }
}
