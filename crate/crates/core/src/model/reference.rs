//! Straight-line regular transformer built directly from the plain kernels,
//! with a per-token expert loop instead of grouped dispatch.

use super::{router, Model};
use crate::error::Result;
use crate::ops;
use crate::tensor::Tensor;

pub fn reference_logits(model: &Model, tokens: &[usize], seq_len: usize) -> Result<Tensor> {
    let cfg = &model.config;
    let layout = model.layout();
    let p = &model.params.tensors;
    let mut x = ops::gather_rows(&p[layout.embed], tokens)?;
    let n = tokens.len();
    for ids in &layout.layers {
        let h = ops::rms_norm(&x, &p[ids.attn_norm])?;
        let q = ops::rope(&ops::matmul_nt(&h, &p[ids.wq])?, cfg.n_heads, seq_len, false)?;
        let k = ops::rope(&ops::matmul_nt(&h, &p[ids.wk])?, cfg.n_heads, seq_len, false)?;
        let v = ops::matmul_nt(&h, &p[ids.wv])?;
        let (ctx, _) = ops::causal_attention(&q, &k, &v, cfg.n_heads, seq_len)?;
        let x_attn = ops::add(&x, &ops::matmul_nt(&ctx, &p[ids.wo])?)?;

        let m = ops::rms_norm(&x_attn, &p[ids.mlp_norm])?;
        let route = router::route_tokens(&m, &p[ids.router], cfg.top_k)?;
        let shared = match &ids.shared {
            Some(w) => ops::swiglu_mlp(&m, &p[w.w1], &p[w.w2], &p[w.w3])?,
            None => Tensor::zeros(&[n, cfg.d_model]),
        };
        let mut routed = vec![0.0; n * cfg.d_model];
        for t in 0..n {
            let row = ops::gather_rows(&m, &[t])?;
            let out = &mut routed[t * cfg.d_model..(t + 1) * cfg.d_model];
            for (&e, &g) in route.token_experts(t).iter().zip(route.token_gates(t)) {
                let w = &ids.experts[e];
                let y = ops::swiglu_mlp(&row, &p[w.w1], &p[w.w2], &p[w.w3])?;
                for (o, yv) in out.iter_mut().zip(y.data()) {
                    *o += g * yv;
                }
            }
        }
        let routed = Tensor::new(vec![n, cfg.d_model], routed)?;
        x = ops::add(&ops::add(&x_attn, &shared)?, &routed)?;
    }
    let h = ops::rms_norm(&x, &p[layout.final_norm])?;
    ops::matmul_nt(&h, &p[layout.lm_head])
}
