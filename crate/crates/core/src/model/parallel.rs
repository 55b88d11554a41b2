//! Data-movement model of expert-parallel Dispatch/Combine and tensor-parallel
//! MLP sharding. Everything here is functional: no communication happens, but
//! the buffers are exactly what each rank would hold.

use crate::error::{bail, Result};
use crate::model::router::RouterOutput;
use crate::ops;
use crate::tensor::Tensor;

/// Token copies grouped per expert. Within an expert, copies appear in token
/// order (and slot order for a token, although slots of one token always name
/// distinct experts).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertPlan {
    pub n_experts: usize,
    pub top_k: usize,
    /// Source token of every copy, per expert.
    pub tokens: Vec<Vec<usize>>,
    /// `(expert, row within that expert's group)` for each `[token][slot]`.
    pub slots: Vec<(usize, usize)>,
}

impl ExpertPlan {
    pub fn new(router: &RouterOutput) -> Self {
        let e = router.n_experts();
        let mut tokens = vec![Vec::new(); e];
        let mut slots = Vec::with_capacity(router.experts.len());
        for t in 0..router.n_tokens() {
            for &x in router.token_experts(t) {
                slots.push((x, tokens[x].len()));
                tokens[x].push(t);
            }
        }
        Self { n_experts: e, top_k: router.top_k, tokens, slots }
    }
}

/// Copies received by one rank, grouped by its local experts.
#[derive(Clone, Debug, PartialEq)]
pub struct RankBuffer {
    pub rank: usize,
    /// Global expert ids hosted on this rank.
    pub experts: Vec<usize>,
    /// `[start, end)` row range of each hosted expert within `rows`.
    pub segments: Vec<(usize, usize)>,
    pub token_ids: Vec<usize>,
    pub rows: Tensor,
}

/// Where each `[token][slot]` copy went: `(rank, row in that rank's buffer)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingMap {
    pub n_ranks: usize,
    pub n_tokens: usize,
    pub top_k: usize,
    pub slots: Vec<(usize, usize)>,
    pub rank_rows: Vec<usize>,
}

/// Experts are partitioned contiguously: rank `i` hosts experts
/// `[i·E/n, (i+1)·E/n)`.
pub fn dispatch(
    a: &Tensor,
    router: &RouterOutput,
    n_ranks: usize,
) -> Result<(Vec<RankBuffer>, RoutingMap)> {
    let (t, _) = a.dims2()?;
    let e = router.n_experts();
    if n_ranks == 0 || e % n_ranks != 0 {
        bail!(Config, "{e} experts cannot be split evenly over {n_ranks} ranks");
    }
    if router.n_tokens() != t {
        bail!(Contract, "router covers {} tokens, activations {t}", router.n_tokens());
    }
    let plan = ExpertPlan::new(router);
    let per_rank = e / n_ranks;
    let mut buffers = Vec::with_capacity(n_ranks);
    let mut expert_offset = vec![0usize; e];
    for rank in 0..n_ranks {
        let experts: Vec<usize> = (rank * per_rank..(rank + 1) * per_rank).collect();
        let mut segments = Vec::with_capacity(per_rank);
        let mut token_ids = Vec::new();
        for &x in &experts {
            expert_offset[x] = token_ids.len();
            segments.push((token_ids.len(), token_ids.len() + plan.tokens[x].len()));
            token_ids.extend_from_slice(&plan.tokens[x]);
        }
        let rows = ops::gather_rows(a, &token_ids)?;
        buffers.push(RankBuffer { rank, experts, segments, token_ids, rows });
    }
    let slots = plan
        .slots
        .iter()
        .map(|&(x, r)| (x / per_rank, expert_offset[x] + r))
        .collect();
    let rank_rows = buffers.iter().map(|b| b.token_ids.len()).collect();
    Ok((buffers, RoutingMap { n_ranks, n_tokens: t, top_k: router.top_k, slots, rank_rows }))
}

/// Gate-weighted sum of each token's expert outputs, slots summed in order.
pub fn combine(outputs: &[Tensor], map: &RoutingMap, gates: &[f64]) -> Result<Tensor> {
    if outputs.len() != map.n_ranks || gates.len() != map.slots.len() {
        bail!(
            Contract,
            "combine got {} buffers / {} gates for {} ranks / {} slots",
            outputs.len(),
            gates.len(),
            map.n_ranks,
            map.slots.len()
        );
    }
    let width = outputs.first().map_or(0, Tensor::cols);
    for (o, &rows) in outputs.iter().zip(&map.rank_rows) {
        if o.rows() != rows || (rows > 0 && o.cols() != width) {
            bail!(Contract, "rank buffer of {:?} does not match {rows} dispatched rows", o.shape());
        }
    }
    let mut out = vec![0.0; map.n_tokens * width];
    for t in 0..map.n_tokens {
        let orow = &mut out[t * width..(t + 1) * width];
        for j in 0..map.top_k {
            let s = t * map.top_k + j;
            let (rank, row) = map.slots[s];
            for (o, y) in orow.iter_mut().zip(outputs[rank].row(row)) {
                *o += gates[s] * y;
            }
        }
    }
    Tensor::new(vec![map.n_tokens, width], out)
}

/// `(W1, W2, W3)` of one SwiGLU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

/// Runs each hosted expert over its segment of a rank buffer; `experts` is
/// indexed by global expert id.
pub fn run_local_experts(buffer: &RankBuffer, experts: &[MlpWeights]) -> Result<Tensor> {
    let width = buffer.rows.cols();
    let mut out = Vec::with_capacity(buffer.rows.len());
    for (&x, &(start, end)) in buffer.experts.iter().zip(&buffer.segments) {
        if start == end {
            continue;
        }
        let idx: Vec<usize> = (start..end).collect();
        let seg = ops::gather_rows(&buffer.rows, &idx)?;
        let w = experts.get(x).ok_or_else(|| {
            crate::Error::Contract(format!("no weights for expert {x}"))
        })?;
        out.extend_from_slice(ops::swiglu_mlp(&seg, &w.w1, &w.w2, &w.w3)?.data());
    }
    Tensor::new(vec![buffer.token_ids.len(), width], out)
}

/// Column-parallel split of `W1`,`W2` rows and row-parallel split of `W3`
/// columns over `k` ranks.
pub fn tp_shard(w: &MlpWeights, k: usize) -> Result<Vec<MlpWeights>> {
    let (c, _) = w.w1.dims2()?;
    if k == 0 || c % k != 0 {
        bail!(Config, "hidden width {c} not divisible by TP size {k}");
    }
    let part = c / k;
    (0..k)
        .map(|i| {
            let rows: Vec<usize> = (i * part..(i + 1) * part).collect();
            let w3t = ops::transpose(&w.w3)?;
            Ok(MlpWeights {
                w1: ops::gather_rows(&w.w1, &rows)?,
                w2: ops::gather_rows(&w.w2, &rows)?,
                w3: ops::transpose(&ops::gather_rows(&w3t, &rows)?)?,
            })
        })
        .collect()
}

/// Sum of the per-shard partial outputs (the all-reduce).
pub fn tp_mlp(a: &Tensor, shards: &[MlpWeights]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for s in shards {
        let part = ops::swiglu_mlp(a, &s.w1, &s.w2, &s.w3)?;
        acc = Some(match acc {
            None => part,
            Some(x) => ops::add(&x, &part)?,
        });
    }
    acc.ok_or_else(|| crate::Error::Config("no TP shards".into()))
}

/// Routed MoE output computed through an `n_ranks`-way dispatch/combine.
pub fn routed_ep(
    a: &Tensor,
    router: &RouterOutput,
    experts: &[MlpWeights],
    n_ranks: usize,
) -> Result<Tensor> {
    let (buffers, map) = dispatch(a, router, n_ranks)?;
    let outputs = buffers
        .iter()
        .map(|b| run_local_experts(b, experts))
        .collect::<Result<Vec<_>>>()?;
    combine(&outputs, &map, &router.gates)
}

/// Expert weights of one layer, in expert order.
pub fn layer_experts(model: &super::Model, layer: usize) -> Vec<MlpWeights> {
    let p = &model.params.tensors;
    model.layout().layers[layer]
        .experts
        .iter()
        .map(|ids| MlpWeights { w1: p[ids.w1].clone(), w2: p[ids.w2].clone(), w3: p[ids.w3].clone() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::router::route_from_scores;

    #[test]
    fn two_rank_forced_partition() {
        // T=2, E=4, top_k=1: token0 -> expert 0, token1 -> expert 3
        let scores = Tensor::from_rows(&[
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.1, 0.1, 0.1, 0.7],
        ])
        .unwrap();
        let router = route_from_scores(scores, 1).unwrap();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (bufs, map) = dispatch(&a, &router, 2).unwrap();
        assert_eq!(bufs[0].token_ids, vec![0]);
        assert_eq!(bufs[1].token_ids, vec![1]);
        assert_eq!(bufs[1].rows.row(0), &[3.0, 4.0]);
        assert_eq!(map.slots, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn uneven_partition_is_config_error() {
        let router = route_from_scores(Tensor::full(&[1, 6], 1.0 / 6.0), 2).unwrap();
        assert!(dispatch(&Tensor::zeros(&[1, 2]), &router, 4).is_err());
    }

    #[test]
    fn total_copies_is_tokens_times_k() {
        let scores = Tensor::from_rows(&[
            vec![0.4, 0.3, 0.2, 0.1],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.25, 0.25, 0.25, 0.25],
        ])
        .unwrap();
        let router = route_from_scores(scores, 2).unwrap();
        let (bufs, _) = dispatch(&Tensor::zeros(&[3, 5]), &router, 2).unwrap();
        assert_eq!(bufs.iter().map(|b| b.token_ids.len()).sum::<usize>(), 6);
    }

    #[test]
    fn combine_rejects_mismatched_buffers() {
        let router = route_from_scores(Tensor::full(&[2, 2], 0.5), 1).unwrap();
        let (_, map) = dispatch(&Tensor::zeros(&[2, 3]), &router, 1).unwrap();
        assert!(combine(&[Tensor::zeros(&[1, 3])], &map, &router.gates).is_err());
        assert!(combine(&[Tensor::zeros(&[2, 3])], &map, &router.gates).is_ok());
    }
}
