//! The toy MoE transformer and its switchable inter-block connectivity.

pub mod checkpoint;
pub mod config;
pub mod generate;
pub mod parallel;
pub mod params;
pub mod reference;
pub mod router;

use crate::error::{bail, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use config::{ConnectivityMode, MaskSpec, ModelConfig};
pub use params::{Layout, ParamSet};
pub use router::RouterOutput;

use parallel::ExpertPlan;
use params::{LayerIds, MlpIds};

/// Model operations in execution order, as seen by a schedule builder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelOp {
    Embed,
    AttnQkv,
    AttnCore,
    Gate,
    Dispatch,
    RoutedExperts,
    Combine,
    SharedExpert,
    FinalNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpEvent {
    /// 1-based layer index; 0 for embedding and final norm.
    pub layer: usize,
    pub op: ModelOp,
}

/// Tape handles for one layer's sub-block inputs and outputs.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_in: Var,
    pub mlp_in: Var,
    pub attn_out: Var,
    pub shared_out: Var,
    pub routed_out: Var,
    /// `o[k-1] + attn_out`
    pub after_attn: Var,
    /// `o[k-1] + attn_out + shared_out`
    pub after_shared: Var,
    /// `o[k]`
    pub residual: Var,
    pub router: RouterOutput,
}

pub struct Forward {
    pub logits: Var,
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub trace: Vec<OpEvent>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub attn_in: Tensor,
    pub mlp_in: Tensor,
    pub attn_out: Tensor,
    pub shared_out: Tensor,
    pub routed_out: Tensor,
    pub residual: Tensor,
}

/// Per-layer activations of one forward pass; `embed` is `o[0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub embed: Tensor,
    pub layers: Vec<LayerActivations>,
}

impl ActivationCache {
    pub fn from_forward(tape: &Tape, fwd: &Forward) -> Self {
        let v = |x: Var| tape.value(x).clone();
        Self {
            embed: v(fwd.embed),
            layers: fwd
                .layers
                .iter()
                .map(|l| LayerActivations {
                    attn_in: v(l.attn_in),
                    mlp_in: v(l.mlp_in),
                    attn_out: v(l.attn_out),
                    shared_out: v(l.shared_out),
                    routed_out: v(l.routed_out),
                    residual: v(l.residual),
                })
                .collect(),
        }
    }
}

/// Parameters placed on a tape, indexed like [`Layout::specs`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.0[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub modes: Vec<ConnectivityMode>,
    pub params: ParamSet,
    layout: Layout,
}

struct QkvPrep {
    q: Var,
    k: Var,
    v: Var,
}

struct GateOut {
    normed: Var,
    gates: Var,
    router: RouterOutput,
}

impl Model {
    /// Freshly initialized, all layers regular.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = ParamSet::init(&config, &layout);
        let modes = vec![ConnectivityMode::Regular; config.n_layers];
        Ok(Self { config, modes, params, layout })
    }

    pub fn from_parts(
        config: ModelConfig,
        modes: Vec<ConnectivityMode>,
        params: ParamSet,
    ) -> Result<Self> {
        config.validate()?;
        if modes.len() != config.n_layers {
            bail!(Config, "{} modes for {} layers", modes.len(), config.n_layers);
        }
        let layout = Layout::new(&config);
        params.check_layout(&layout)?;
        Ok(Self { config, modes, params, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Same parameters, with the masked layers switched to `target`.
    pub fn convert(&self, mask: &MaskSpec, target: ConnectivityMode) -> Result<Model> {
        let flags = mask.resolve(self.config.n_layers)?;
        let mut out = self.clone();
        for (m, f) in out.modes.iter_mut().zip(flags) {
            if f {
                *m = target;
            }
        }
        Ok(out)
    }

    pub fn with_modes(&self, modes: Vec<ConnectivityMode>) -> Result<Model> {
        Model::from_parts(self.config.clone(), modes, self.params.clone())
    }

    /// Places parameters on the tape; `trainable(i)` picks which receive grads.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(usize) -> bool) -> Bound {
        Bound(
            self.params
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if trainable(i) {
                        tape.leaf(t.clone().with_grad(true))
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    fn check_tokens(&self, tokens: &[usize], seq_len: usize) -> Result<()> {
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            bail!(Contract, "{} tokens do not form sequences of {seq_len}", tokens.len());
        }
        if seq_len > self.config.max_seq_len {
            bail!(Contract, "sequence length {seq_len} exceeds max {}", self.config.max_seq_len);
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            bail!(Index, "token {t} outside vocabulary {}", self.config.vocab);
        }
        Ok(())
    }

    fn attn_prep(&self, tape: &mut Tape, p: &Bound, ids: &LayerIds, x: Var, seq_len: usize) -> Result<QkvPrep> {
        let h = tape.rms_norm(x, p.var(ids.attn_norm))?;
        let q = tape.matmul_nt(h, p.var(ids.wq))?;
        let k = tape.matmul_nt(h, p.var(ids.wk))?;
        let v = tape.matmul_nt(h, p.var(ids.wv))?;
        let q = tape.rope(q, self.config.n_heads, seq_len)?;
        let k = tape.rope(k, self.config.n_heads, seq_len)?;
        Ok(QkvPrep { q, k, v })
    }

    fn attn_core(&self, tape: &mut Tape, p: &Bound, ids: &LayerIds, qkv: QkvPrep, seq_len: usize) -> Result<Var> {
        let ctx = tape.causal_attention(qkv.q, qkv.k, qkv.v, self.config.n_heads, seq_len)?;
        tape.matmul_nt(ctx, p.var(ids.wo))
    }

    /// Causal multi-head attention sub-block (pre-norm included).
    pub fn attention_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: usize,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let ids = &self.layout.layers[layer];
        let qkv = self.attn_prep(tape, p, ids, x, seq_len)?;
        self.attn_core(tape, p, ids, qkv, seq_len)
    }

    fn gate(&self, tape: &mut Tape, p: &Bound, ids: &LayerIds, x: Var) -> Result<GateOut> {
        let normed = tape.rms_norm(x, p.var(ids.mlp_norm))?;
        let logits = tape.matmul_nt(normed, p.var(ids.router))?;
        let probs = tape.softmax_rows(logits)?;
        let router = router::route_from_scores(tape.value(probs).clone(), self.config.top_k)?;
        let gates = tape.top_k_gates(probs, &router.experts, self.config.top_k)?;
        Ok(GateOut { normed, gates, router })
    }

    fn swiglu(tape: &mut Tape, p: &Bound, w: &MlpIds, x: Var) -> Result<Var> {
        let h1 = tape.matmul_nt(x, p.var(w.w1))?;
        let h2 = tape.matmul_nt(x, p.var(w.w2))?;
        let s = tape.silu(h2);
        let hidden = tape.mul(h1, s)?;
        tape.matmul_nt(hidden, p.var(w.w3))
    }

    fn routed(&self, tape: &mut Tape, p: &Bound, ids: &LayerIds, g: &GateOut) -> Result<Var> {
        // single-rank dispatch: one buffer, grouped by expert
        let plan = ExpertPlan::new(&g.router);
        let mut outs = Vec::with_capacity(plan.n_experts);
        for (e, toks) in plan.tokens.iter().enumerate() {
            if toks.is_empty() {
                outs.push(None);
                continue;
            }
            let xe = tape.gather_rows(g.normed, toks)?;
            outs.push(Some(Self::swiglu(tape, p, &ids.experts[e], xe)?));
        }
        tape.combine(g.gates, &outs, &plan.slots, self.config.d_model)
    }

    fn shared(&self, tape: &mut Tape, p: &Bound, ids: &LayerIds, g: &GateOut) -> Result<Var> {
        match &ids.shared {
            Some(w) => Self::swiglu(tape, p, w, g.normed),
            None => {
                let rows = tape.value(g.normed).rows();
                Ok(tape.constant(Tensor::zeros(&[rows, self.config.d_model])))
            }
        }
    }

    /// MoE sub-block; returns `(shared_out, routed_out)` separately.
    pub fn moe_block(&self, tape: &mut Tape, p: &Bound, layer: usize, x: Var) -> Result<(Var, Var)> {
        let ids = &self.layout.layers[layer];
        let g = self.gate(tape, p, ids, x)?;
        let routed = self.routed(tape, p, ids, &g)?;
        let shared = self.shared(tape, p, ids, &g)?;
        Ok((shared, routed))
    }

    /// Forward pass over `tokens.len() / seq_len` sequences with the model's
    /// own per-layer modes.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: &[usize], seq_len: usize) -> Result<Forward> {
        self.forward_with_modes(tape, p, tokens, seq_len, &self.modes)
    }

    pub fn forward_with_modes(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: &[usize],
        seq_len: usize,
        modes: &[ConnectivityMode],
    ) -> Result<Forward> {
        use ConnectivityMode::*;
        if modes.len() != self.config.n_layers {
            bail!(Config, "{} modes for {} layers", modes.len(), self.config.n_layers);
        }
        self.check_tokens(tokens, seq_len)?;
        let mut trace = vec![OpEvent { layer: 0, op: ModelOp::Embed }];
        let embed = tape.embedding(p.var(self.layout.embed), tokens)?;
        let mut layers: Vec<LayerVars> = Vec::with_capacity(self.config.n_layers);
        for (l, (&mode, ids)) in modes.iter().zip(&self.layout.layers).enumerate() {
            let layer = l + 1;
            let mut ev = |op| trace.push(OpEvent { layer, op });
            let prev = layers.last();
            let o_prev = prev.map_or(embed, |x| x.residual);
            let attn_in = match (mode, prev) {
                (Regular, _) | (_, None) => o_prev,
                (Outdated, Some(x)) => x.after_attn,
                (Partial | Hybrid, Some(x)) => x.after_shared,
            };
            let (attn_out, mlp_in, g, after_attn);
            if mode.moe_skips_attention() {
                // MoE input is ready before attention: gate and launch
                // dispatch between the two attention halves.
                mlp_in = o_prev;
                ev(ModelOp::AttnQkv);
                let qkv = self.attn_prep(tape, p, ids, attn_in, seq_len)?;
                ev(ModelOp::Gate);
                g = self.gate(tape, p, ids, mlp_in)?;
                ev(ModelOp::Dispatch);
                ev(ModelOp::AttnCore);
                attn_out = self.attn_core(tape, p, ids, qkv, seq_len)?;
                after_attn = tape.add(o_prev, attn_out)?;
            } else {
                ev(ModelOp::AttnQkv);
                let qkv = self.attn_prep(tape, p, ids, attn_in, seq_len)?;
                ev(ModelOp::AttnCore);
                attn_out = self.attn_core(tape, p, ids, qkv, seq_len)?;
                after_attn = tape.add(o_prev, attn_out)?;
                mlp_in = after_attn;
                ev(ModelOp::Gate);
                g = self.gate(tape, p, ids, mlp_in)?;
                ev(ModelOp::Dispatch);
            }
            ev(ModelOp::RoutedExperts);
            let routed_out = self.routed(tape, p, ids, &g)?;
            ev(ModelOp::Combine);
            ev(ModelOp::SharedExpert);
            let shared_out = self.shared(tape, p, ids, &g)?;
            let after_shared = tape.add(after_attn, shared_out)?;
            let residual = tape.add(after_shared, routed_out)?;
            layers.push(LayerVars {
                attn_in,
                mlp_in,
                attn_out,
                shared_out,
                routed_out,
                after_attn,
                after_shared,
                residual,
                router: g.router,
            });
        }
        trace.push(OpEvent { layer: 0, op: ModelOp::FinalNorm });
        let last = layers.last().map_or(embed, |x| x.residual);
        let h = tape.rms_norm(last, p.var(self.layout.final_norm))?;
        let logits = tape.matmul_nt(h, p.var(self.layout.lm_head))?;
        tape.value(logits).ensure_finite("model forward")?;
        Ok(Forward { logits, embed, layers, trace })
    }

    /// Gradient-free forward over a single sequence.
    pub fn model_forward(
        &self,
        tokens: &[usize],
        modes: &[ConnectivityMode],
    ) -> Result<(Tensor, ActivationCache)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, |_| false);
        let fwd = self.forward_with_modes(&mut tape, &p, tokens, tokens.len(), modes)?;
        let cache = ActivationCache::from_forward(&tape, &fwd);
        Ok((tape.value(fwd.logits).clone(), cache))
    }

    /// Logits for a batch of equal-length sequences, without gradients.
    pub fn logits(&self, tokens: &[usize], seq_len: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, |_| false);
        let fwd = self.forward(&mut tape, &p, tokens, seq_len)?;
        Ok(tape.value(fwd.logits).clone())
    }
}
