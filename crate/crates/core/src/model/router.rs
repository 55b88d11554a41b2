use crate::error::{bail, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Per-token expert selection.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput {
    pub top_k: usize,
    /// `[token][slot]` expert ids, flattened.
    pub experts: Vec<usize>,
    /// `[token][slot]` renormalized gate weights, flattened.
    pub gates: Vec<f64>,
    /// Full softmax score row per token.
    pub scores: Tensor,
}

impl RouterOutput {
    pub fn n_tokens(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.scores.cols()
    }

    pub fn token_experts(&self, t: usize) -> &[usize] {
        &self.experts[t * self.top_k..(t + 1) * self.top_k]
    }

    pub fn token_gates(&self, t: usize) -> &[f64] {
        &self.gates[t * self.top_k..(t + 1) * self.top_k]
    }
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn select_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Softmax over all expert scores, top-k selection, then renormalization of
/// the selected weights so they sum to one.
pub fn route_tokens(a: &Tensor, w_router: &Tensor, top_k: usize) -> Result<RouterOutput> {
    let e = w_router.rows();
    if top_k == 0 || top_k > e {
        bail!(Config, "top_k {top_k} outside 1..={e}");
    }
    let scores = ops::softmax_rows(&ops::matmul_nt(a, w_router)?)?;
    route_from_scores(scores, top_k)
}

pub fn route_from_scores(scores: Tensor, top_k: usize) -> Result<RouterOutput> {
    let (t, e) = scores.dims2()?;
    if top_k == 0 || top_k > e {
        bail!(Config, "top_k {top_k} outside 1..={e}");
    }
    let mut experts = Vec::with_capacity(t * top_k);
    let mut gates = Vec::with_capacity(t * top_k);
    for i in 0..t {
        let row = scores.row(i);
        let sel = select_top_k(row, top_k);
        let norm: f64 = sel.iter().map(|&s| row[s]).sum();
        gates.extend(sel.iter().map(|&s| row[s] / norm));
        experts.extend(sel);
    }
    Ok(RouterOutput { top_k, experts, gates, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn route_row(row: &[f64], k: usize) -> RouterOutput {
        // one token whose router logits are exactly `row`
        let a = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let w = Tensor::new(vec![row.len(), 1], row.to_vec()).unwrap();
        route_tokens(&a, &w, k).unwrap()
    }

    #[test]
    fn dense_limit_is_full_softmax() {
        let r = route_row(&[0.1, -0.3, 0.7, 0.2], 4);
        let mut by_expert = vec![0.0; 4];
        for (e, g) in r.token_experts(0).iter().zip(r.token_gates(0)) {
            by_expert[*e] = *g;
        }
        for (a, b) in by_expert.iter().zip(r.scores.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_expert_gets_all_weight() {
        let r = route_row(&[10.0, 0.0, 0.0, 0.0], 1);
        assert_eq!(r.experts, vec![0]);
        assert_eq!(r.gates, vec![1.0]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let r = route_row(&[0.5, 0.5, 0.5, 0.5], 2);
        assert_eq!(r.experts, vec![0, 1]);
        assert_eq!(r.gates, vec![0.5, 0.5]);
    }

    #[test]
    fn gates_positive_sum_to_one_and_distinct() {
        let r = route_row(&[0.3, -1.0, 2.0, 0.0, 0.9], 3);
        let s: f64 = r.gates.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(r.gates.iter().all(|&g| g > 0.0));
        let mut ids = r.experts.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 3);
    }
}
