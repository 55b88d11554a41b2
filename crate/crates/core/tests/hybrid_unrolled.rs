//! Two-layer Hybrid model written out by hand from the connectivity table,
//! using only the sub-block entry points.

use farskip_core::model::{ConnectivityMode, Model, ModelConfig};
use farskip_core::{ops, Tape, Tensor};

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 2,
        n_heads: 1,
        head_dim: 2,
        n_experts: 2,
        top_k: 1,
        expert_hidden: 3,
        shared_expert_hidden: 2,
        vocab: 5,
        max_seq_len: 4,
        seed: 7,
    }
}

#[test]
fn hybrid_forward_matches_hand_unrolled_wiring() {
    let base = Model::new(config()).unwrap();
    let tokens = [4usize, 0, 3, 1];
    for first in [ConnectivityMode::Regular, ConnectivityMode::Hybrid] {
        let model = base.with_modes(vec![first, ConnectivityMode::Hybrid]).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |_| false);
        let layout = model.layout();
        let o0 = tape.embedding(p.var(layout.embed), &tokens).unwrap();

        // layer 1 reads o0 for both sub-blocks when rewired, and o0 + a1 for
        // the MoE when regular
        let a1 = model.attention_block(&mut tape, &p, 0, o0, 4).unwrap();
        let after_a1 = tape.add(o0, a1).unwrap();
        let mlp_in1 = if first == ConnectivityMode::Regular { after_a1 } else { o0 };
        let (s1, r1) = model.moe_block(&mut tape, &p, 0, mlp_in1).unwrap();
        let after_s1 = tape.add(after_a1, s1).unwrap();
        let o1 = tape.add(after_s1, r1).unwrap();

        // layer 2: attention reads o0 + a1 + s1, the MoE reads o1
        let a2 = model.attention_block(&mut tape, &p, 1, after_s1, 4).unwrap();
        let (s2, r2) = model.moe_block(&mut tape, &p, 1, o1).unwrap();
        let after_a2 = tape.add(o1, a2).unwrap();
        let after_s2 = tape.add(after_a2, s2).unwrap();
        let o2 = tape.add(after_s2, r2).unwrap();
        let h = tape.rms_norm(o2, p.var(layout.final_norm)).unwrap();
        let logits = tape.matmul_nt(h, p.var(layout.lm_head)).unwrap();

        let got = model.logits(&tokens, 4).unwrap();
        assert!(got.bit_eq(tape.value(logits)), "{first:?}");

        // the identity the rewiring relies on
        let mlp2 = tape.value(o1);
        let attn2 = tape.value(after_s1);
        let sum = ops::add(attn2, tape.value(r1)).unwrap();
        assert!(sum.bit_eq(mlp2));
        assert!(!Tensor::bit_eq(attn2, mlp2));
    }
}
