//! Reverse-mode autodiff over a linear operation tape.
//!
//! Every value lives in the tape's node arena. An operation is recorded only
//! when at least one input requires a gradient; replaying the records in
//! reverse creation order yields gradients for every reachable node.

use crate::error::{bail, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    seq: u64,
}

/// Where one routed copy of a token lands: `(expert buffer, row)`.
pub type SlotTarget = (usize, usize);

enum Op {
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Silu { a: Var },
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<f64> },
    Softmax { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, index: Vec<usize> },
    Rope { x: Var, n_heads: usize, seq_len: usize },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, seq_len: usize, probs: Vec<f64> },
    TopKGates { probs: Var, selected: Vec<usize>, top_k: usize },
    Combine { gates: Var, experts: Vec<Option<Var>>, slots: Vec<SlotTarget>, top_k: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    Kl { logits: Var, teacher: Tensor, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    SqDist { a: Var, target: Tensor },
}

struct Record {
    op: Op,
    out: Var,
}

/// Operation tape plus value arena.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
    next_seq: u64,
}

/// Gradients for every node reached during a backward replay.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient for `v`, or zeros of the node's shape when none flowed.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn acc(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.nodes.push(Node { value, requires_grad, seq });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let out = self.push(value, rg);
        if rg {
            self.records.push(Record { op: op(), out });
        }
        out
    }

    /// Adds a leaf; it requires a gradient iff the tensor says so.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, rg)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn seq(&self, v: Var) -> u64 {
        self.nodes[v.0].seq
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sequence numbers of recorded operations, in recording order.
    pub fn record_seqs(&self) -> Vec<u64> {
        self.records.iter().map(|r| self.nodes[r.out.0].seq).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(out, &[a, b], || Op::Matmul { a, b }))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push_op(out, &[a, b], || Op::MatmulNt { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push_op(out, &[a, b], || Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push_op(out, &[a, b], || Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = ops::scale(self.value(a), s);
        self.push_op(out, &[a], || Op::Scale { a, s })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = ops::silu(self.value(a));
        self.push_op(out, &[a], || Op::Silu { a })
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let (out, inv_rms) = ops::rms_norm_with_stats(self.value(x), self.value(gamma))?;
        Ok(self.push_op(out, &[x, gamma], || Op::RmsNorm { x, gamma, inv_rms }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        Ok(self.push_op(out, &[x], || Op::Softmax { x }))
    }

    /// Rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::gather_rows(self.value(table), ids)?;
        let ids = ids.to_vec();
        Ok(self.push_op(out, &[table], || Op::Embedding { table, ids }))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let out = ops::gather_rows(self.value(x), index)?;
        let index = index.to_vec();
        Ok(self.push_op(out, &[x], || Op::GatherRows { x, index }))
    }

    pub fn rope(&mut self, x: Var, n_heads: usize, seq_len: usize) -> Result<Var> {
        let out = ops::rope(self.value(x), n_heads, seq_len, false)?;
        Ok(self.push_op(out, &[x], || Op::Rope { x, n_heads, seq_len }))
    }

    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (out, probs) =
            ops::causal_attention(self.value(q), self.value(k), self.value(v), n_heads, seq_len)?;
        Ok(self.push_op(out, &[q, k, v], || Op::Attention { q, k, v, n_heads, seq_len, probs }))
    }

    /// Renormalized gate weights of the selected experts:
    /// `gate[t, j] = p[t, sel[t, j]] / Σ_j' p[t, sel[t, j']]`.
    pub fn top_k_gates(&mut self, probs: Var, selected: &[usize], top_k: usize) -> Result<Var> {
        let p = self.value(probs);
        let (t, e) = p.dims2()?;
        if selected.len() != t * top_k || selected.iter().any(|&s| s >= e) {
            bail!(Contract, "selection does not match {t} tokens x top-{top_k} over {e} experts");
        }
        let mut out = vec![0.0; t * top_k];
        for i in 0..t {
            let row = p.row(i);
            let sel = &selected[i * top_k..(i + 1) * top_k];
            let norm: f64 = sel.iter().map(|&s| row[s]).sum();
            for (j, &s) in sel.iter().enumerate() {
                out[i * top_k + j] = row[s] / norm;
            }
        }
        let out = Tensor::new(vec![t, top_k], out)?;
        let selected = selected.to_vec();
        Ok(self.push_op(out, &[probs], || Op::TopKGates { probs, selected, top_k }))
    }

    /// Gate-weighted sum of expert outputs back into token order.
    /// `slots[t * top_k + j]` names the expert buffer and row holding token
    /// `t`'s `j`-th routed copy; slots are summed in `j` order.
    pub fn combine(
        &mut self,
        gates: Var,
        experts: &[Option<Var>],
        slots: &[SlotTarget],
        width: usize,
    ) -> Result<Var> {
        let g = self.value(gates);
        let (t, top_k) = g.dims2()?;
        if slots.len() != t * top_k {
            bail!(Contract, "combine map has {} slots for {t}x{top_k}", slots.len());
        }
        for &(e, r) in slots {
            let Some(Some(ev)) = experts.get(e) else {
                bail!(Contract, "combine slot names missing expert buffer {e}");
            };
            let (rows, w) = self.value(*ev).dims2()?;
            if r >= rows || w != width {
                bail!(Contract, "combine slot ({e},{r}) outside buffer {rows}x{w}");
            }
        }
        let mut out = vec![0.0; t * width];
        for i in 0..t {
            let orow = &mut out[i * width..(i + 1) * width];
            for j in 0..top_k {
                let (e, r) = slots[i * top_k + j];
                let w = g.data()[i * top_k + j];
                let y = self.nodes[experts[e].expect("checked").0].value.row(r);
                for (o, yv) in orow.iter_mut().zip(y) {
                    *o += w * yv;
                }
            }
        }
        let out = Tensor::new(vec![t, width], out)?;
        let mut inputs = vec![gates];
        inputs.extend(experts.iter().flatten().copied());
        let experts = experts.to_vec();
        let slots = slots.to_vec();
        Ok(self.push_op(out, &inputs, || Op::Combine { gates, experts, slots, top_k }))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let z = self.value(logits);
        let (t, v) = z.dims2()?;
        if targets.len() != t || mask.len() != t {
            bail!(Dimension, "cross_entropy expects {t} targets and mask entries");
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            bail!(Index, "target {bad} outside vocabulary of {v}");
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            bail!(Contract, "no supervised positions");
        }
        let mut probs = z.data().to_vec();
        let mut total = 0.0;
        for i in 0..t {
            let row = &mut probs[i * v..(i + 1) * v];
            if mask[i] {
                total += ops::logsumexp(row) - row[targets[i]];
            }
            ops::softmax_in_place(row);
        }
        let out = Tensor::scalar(total / count as f64);
        let (targets, mask) = (targets.to_vec(), mask.to_vec());
        Ok(self.push_op(out, &[logits], || Op::CrossEntropy { logits, targets, mask, probs, count }))
    }

    /// Mean over unmasked rows of `KL(teacher ‖ softmax(logits))`.
    /// The teacher enters as a constant distribution.
    pub fn kl_rows(&mut self, teacher: &Tensor, logits: Var, mask: &[bool]) -> Result<Var> {
        let z = self.value(logits);
        let (t, v) = z.dims2()?;
        if teacher.shape() != z.shape() || mask.len() != t {
            bail!(Dimension, "teacher {:?} vs student {:?}", teacher.shape(), z.shape());
        }
        for i in 0..t {
            let row = teacher.row(i);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                bail!(Contract, "teacher row {i} is not a distribution (sum {s})");
            }
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            bail!(Contract, "no supervised positions");
        }
        let mut probs = z.data().to_vec();
        let mut total = 0.0;
        for i in 0..t {
            let row = &mut probs[i * v..(i + 1) * v];
            if mask[i] {
                let lse = ops::logsumexp(row);
                for (q, zl) in teacher.row(i).iter().zip(row.iter()) {
                    if *q > 0.0 {
                        total += q * (q.ln() - (zl - lse));
                    }
                }
            }
            ops::softmax_in_place(row);
        }
        let out = Tensor::scalar(total / count as f64);
        let teacher = teacher.clone();
        let mask = mask.to_vec();
        Ok(self.push_op(out, &[logits], || Op::Kl { logits, teacher, mask, probs, count }))
    }

    /// `Σ (a - target)²` against a constant target.
    pub fn sq_dist(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != target.shape() {
            bail!(Dimension, "sq_dist {:?} vs {:?}", av.shape(), target.shape());
        }
        let s = av.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let target = target.clone();
        Ok(self.push_op(Tensor::scalar(s), &[a], || Op::SqDist { a, target }))
    }

    /// Gradients of a scalar `loss` with respect to every contributing node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        self.backward_from(loss, &Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?)
    }

    /// Reverse replay seeded with an explicit upstream gradient for `out`.
    pub fn backward_from(&self, out: Var, upstream: &Tensor) -> Result<Gradients> {
        if upstream.shape() != self.value(out).shape() {
            bail!(Dimension, "upstream gradient shape {:?}", upstream.shape());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(upstream.data().to_vec());
        for rec in self.records.iter().rev() {
            if rec.out.0 > out.0 {
                continue;
            }
            let Some(g) = grads[rec.out.0].take() else { continue };
            self.backprop(rec, &g, &mut grads)?;
            grads[rec.out.0] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, rec: &Record, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out_shape = self.value(rec.out).shape().to_vec();
        let gt = || Tensor::new(out_shape.clone(), g.to_vec()).expect("grad shape");
        match &rec.op {
            Op::Matmul { a, b } => {
                let gc = gt();
                if self.wants(*a) {
                    acc(&mut grads[a.0], ops::matmul_nt(&gc, self.value(*b))?.data());
                }
                if self.wants(*b) {
                    acc(&mut grads[b.0], ops::matmul_tn(self.value(*a), &gc)?.data());
                }
            }
            Op::MatmulNt { a, b } => {
                let gc = gt();
                if self.wants(*a) {
                    acc(&mut grads[a.0], ops::matmul(&gc, self.value(*b))?.data());
                }
                if self.wants(*b) {
                    acc(&mut grads[b.0], ops::matmul_tn(&gc, self.value(*a))?.data());
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    acc(&mut grads[b.0], g);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    acc(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    acc(&mut grads[b.0], &d);
                }
            }
            Op::Scale { a, s } => {
                let d: Vec<f64> = g.iter().map(|x| x * s).collect();
                acc(&mut grads[a.0], &d);
            }
            Op::Silu { a } => {
                let av = self.value(*a).data();
                let d: Vec<f64> =
                    g.iter().zip(av).map(|(x, &z)| x * ops::silu_grad_scalar(z)).collect();
                acc(&mut grads[a.0], &d);
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let (m, d) = xv.dims2()?;
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * d];
                    for i in 0..m {
                        let row = xv.row(i);
                        let r = inv_rms[i];
                        let gy = &g[i * d..(i + 1) * d];
                        let dot: f64 = (0..d).map(|j| gy[j] * gam[j] * row[j]).sum();
                        let c = r * r * r * dot / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = r * gam[j] * gy[j] - c * row[j];
                        }
                    }
                    acc(&mut grads[x.0], &dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for i in 0..m {
                        let row = xv.row(i);
                        for j in 0..d {
                            dg[j] += g[i * d + j] * row[j] * inv_rms[i];
                        }
                    }
                    acc(&mut grads[gamma.0], &dg);
                }
            }
            Op::Softmax { x } => {
                let y = self.value(rec.out);
                let (m, n) = y.dims2()?;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(&mut grads[x.0], &dx);
            }
            Op::Embedding { table, ids } => {
                scatter_rows(grads, *table, ids, g, self.value(*table));
            }
            Op::GatherRows { x, index } => {
                scatter_rows(grads, *x, index, g, self.value(*x));
            }
            Op::Rope { x, n_heads, seq_len } => {
                let back = ops::rope(&gt(), *n_heads, *seq_len, true)?;
                acc(&mut grads[x.0], back.data());
            }
            Op::Attention { q, k, v, n_heads, seq_len, probs } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    *n_heads,
                    *seq_len,
                );
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if self.wants(*var) {
                        acc(&mut grads[var.0], &d);
                    }
                }
            }
            Op::TopKGates { probs, selected, top_k } => {
                let p = self.value(*probs);
                let gates = self.value(rec.out).data();
                let (t, e) = p.dims2()?;
                let mut dp = vec![0.0; t * e];
                for i in 0..t {
                    let sel = &selected[i * top_k..(i + 1) * top_k];
                    let norm: f64 = sel.iter().map(|&s| p.row(i)[s]).sum();
                    let gi = &g[i * top_k..(i + 1) * top_k];
                    let wi = &gates[i * top_k..(i + 1) * top_k];
                    let dot: f64 = gi.iter().zip(wi).map(|(a, b)| a * b).sum();
                    for (j, &s) in sel.iter().enumerate() {
                        dp[i * e + s] += (gi[j] - dot) / norm;
                    }
                }
                acc(&mut grads[probs.0], &dp);
            }
            Op::Combine { gates, experts, slots, top_k } => {
                let gv = self.value(*gates).data();
                let width = self.value(rec.out).cols();
                let t = slots.len() / top_k;
                let mut dgates = vec![0.0; t * top_k];
                let mut dexp: Vec<Option<Vec<f64>>> = experts
                    .iter()
                    .map(|e| e.filter(|v| self.wants(*v)).map(|v| vec![0.0; self.value(v).len()]))
                    .collect();
                for i in 0..t {
                    let go = &g[i * width..(i + 1) * width];
                    for j in 0..*top_k {
                        let (e, r) = slots[i * top_k + j];
                        let ev = experts[e].expect("checked at record time");
                        let y = self.value(ev).row(r);
                        dgates[i * top_k + j] = go.iter().zip(y).map(|(a, b)| a * b).sum();
                        if let Some(buf) = dexp[e].as_mut() {
                            let w = gv[i * top_k + j];
                            for (d, gg) in buf[r * width..(r + 1) * width].iter_mut().zip(go) {
                                *d += w * gg;
                            }
                        }
                    }
                }
                if self.wants(*gates) {
                    acc(&mut grads[gates.0], &dgates);
                }
                for (e, buf) in dexp.into_iter().enumerate() {
                    if let (Some(buf), Some(v)) = (buf, experts[e]) {
                        acc(&mut grads[v.0], &buf);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..v {
                            d[i * v + j] = probs[i * v + j] * scale;
                        }
                        d[i * v + targets[i]] -= scale;
                    }
                }
                acc(&mut grads[logits.0], &d);
            }
            Op::Kl { logits, teacher, mask, probs, count } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let tq = teacher.data();
                let mut d = vec![0.0; probs.len()];
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..v {
                            d[i * v + j] = (probs[i * v + j] - tq[i * v + j]) * scale;
                        }
                    }
                }
                acc(&mut grads[logits.0], &d);
            }
            Op::SqDist { a, target } => {
                let av = self.value(*a).data();
                let d: Vec<f64> =
                    av.iter().zip(target.data()).map(|(x, y)| 2.0 * (x - y) * g[0]).collect();
                acc(&mut grads[a.0], &d);
            }
        }
        Ok(())
    }
}

fn scatter_rows(grads: &mut [Option<Vec<f64>>], dst: Var, index: &[usize], g: &[f64], src: &Tensor) {
    let d = src.cols();
    let mut buf = vec![0.0; src.len()];
    for (r, &i) in index.iter().enumerate() {
        for j in 0..d {
            buf[i * d + j] += g[r * d + j];
        }
    }
    acc(&mut grads[dst.0], &buf);
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    g: &[f64],
    n_heads: usize,
    seq_len: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, d) = (q.rows(), q.cols());
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0.0; m * d];
    let mut dk = vec![0.0; m * d];
    let mut dv = vec![0.0; m * d];
    let mut dp = vec![0.0; seq_len];
    for s in 0..m / seq_len {
        let base = s * seq_len;
        for h in 0..n_heads {
            let off = h * hd;
            for i in 0..seq_len {
                let prow = &probs[((s * n_heads + h) * seq_len + i) * seq_len..][..=i];
                let gi = &g[(base + i) * d + off..][..hd];
                for j in 0..=i {
                    let vj = &vd[(base + j) * d + off..][..hd];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dvj = &mut dv[(base + j) * d + off..][..hd];
                    for (x, gv) in dvj.iter_mut().zip(gi) {
                        *x += prow[j] * gv;
                    }
                }
                let dot: f64 = (0..=i).map(|j| prow[j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (qr, kr) = ((base + i) * d + off, (base + j) * d + off);
                    for c in 0..hd {
                        dq[qr + c] += ds * kd[kr + c];
                        dk[kr + c] += ds * qd[qr + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
