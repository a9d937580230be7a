//! Sampled graph self-attention decoder.
//!
//! The attention graph joins the surviving edges with an equal number of
//! random node pairs drawn from the masked-subgraph nodes (topped up with
//! random extra nodes). Attention is multi-head scaled dot-product,
//! normalized over each node's incident attention edges.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::InteractionGraph;
use crate::mask::MaskPlan;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("active-set ratio must lie in (0, 1], got {0}")]
    Ratio(f64),
    #[error("active-set quota {0} is below 2 nodes")]
    Quota(usize),
    #[error("embedding width {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Directed attention edges plus the bookkeeping of how they were drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGraph {
    pub num_nodes: usize,
    /// Sorted active node set.
    pub active: Vec<usize>,
    /// Sampled unordered pairs `(a, b)` with `a < b`, in draw order.
    pub sampled_pairs: Vec<(usize, usize)>,
    /// Receiving node of each directed attention edge.
    pub dst: Arc<[usize]>,
    /// Sending node of each directed attention edge.
    pub src: Arc<[usize]>,
}

impl AttentionGraph {
    pub fn num_directed_edges(&self) -> usize {
        self.dst.len()
    }

    /// Attention over every edge of `graph` in both directions and no
    /// sampled pairs; used at inference time.
    pub fn over_graph(graph: &InteractionGraph) -> Self {
        Self::assemble(graph, (0..graph.num_nodes()).collect(), Vec::new())
    }

    fn assemble(graph: &InteractionGraph, active: Vec<usize>, sampled_pairs: Vec<(usize, usize)>) -> Self {
        let mut directed: Vec<(usize, usize)> = Vec::with_capacity(2 * (graph.num_edges() + sampled_pairs.len()));
        for &e in graph.edges() {
            let (a, b) = graph.edge_nodes(e);
            directed.push((a, b));
            directed.push((b, a));
        }
        for &(a, b) in &sampled_pairs {
            directed.push((a, b));
            directed.push((b, a));
        }
        directed.sort_unstable();
        directed.dedup();
        let (dst, src): (Vec<usize>, Vec<usize>) = directed.into_iter().unzip();
        Self {
            num_nodes: graph.num_nodes(),
            active,
            sampled_pairs,
            dst: dst.into(),
            src: src.into(),
        }
    }

    /// Whether `m_{v,w} = 1`.
    pub fn has_edge(&self, v: usize, w: usize) -> bool {
        let start = self.dst.partition_point(|&d| d < v);
        let end = self.dst.partition_point(|&d| d <= v);
        self.src[start..end].binary_search(&w).is_ok()
    }
}

/// `ceil(ratio * n)`, tolerant of float noise in the product.
pub fn active_quota(ratio: f64, num_nodes: usize) -> usize {
    ((ratio * num_nodes as f64) - 1e-9).ceil().max(0.0) as usize
}

fn pair_capacity(nodes: usize) -> usize {
    nodes * nodes.saturating_sub(1) / 2
}

/// Draws the attention graph for a mask plan: the active set is the
/// masked-subgraph nodes topped up to `ceil(ratio * n)` with uniformly
/// drawn extras, and `|E'|` distinct non-self pairs are sampled from it.
/// If the active set cannot host `|E'|` distinct pairs it is grown further.
pub fn sample_attention_graph(
    plan: &MaskPlan,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<AttentionGraph, AttentionError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(AttentionError::Ratio(ratio));
    }
    let graph = &plan.surviving;
    let n = graph.num_nodes();
    let quota = active_quota(ratio, n);
    if quota < 2 {
        return Err(AttentionError::Quota(quota));
    }
    let wanted_pairs = graph.num_edges();

    let mut active: Vec<usize> = plan.subgraph_nodes.clone();
    let mut target = quota.max(active.len());
    while pair_capacity(target) < wanted_pairs {
        target += 1;
    }
    if active.len() < target {
        let in_active: HashSet<usize> = active.iter().copied().collect();
        let rest: Vec<usize> = (0..n).filter(|v| !in_active.contains(v)).collect();
        let extra = sample(rng, rest.len(), target - active.len());
        active.extend(extra.into_iter().map(|k| rest[k]));
        active.sort_unstable();
    }

    let a = active.len();
    let sampled_pairs = if wanted_pairs * 2 <= pair_capacity(a) {
        let mut seen = HashSet::with_capacity(wanted_pairs);
        let mut pairs = Vec::with_capacity(wanted_pairs);
        while pairs.len() < wanted_pairs {
            let x = active[rng.random_range(0..a)];
            let y = active[rng.random_range(0..a)];
            if x == y {
                continue;
            }
            let pair = (x.min(y), x.max(y));
            if seen.insert(pair) {
                pairs.push(pair);
            }
        }
        pairs
    } else {
        let mut all: Vec<(usize, usize)> = (0..a)
            .flat_map(|i| (i + 1..a).map(move |j| (i, j)))
            .map(|(i, j)| (active[i], active[j]))
            .collect();
        let (chosen, _) = all.partial_shuffle(rng, wanted_pairs);
        chosen.to_vec()
    };
    Ok(AttentionGraph::assemble(graph, active, sampled_pairs))
}

/// Per-head query/key/value projections, stacked: rows
/// `[h * d/H, (h+1) * d/H)` of each matrix form head `h`'s `(d/H) x d` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl AttentionParams {
    /// Uniform in `±sqrt(6 / (d + d/H))`.
    pub fn init(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, AttentionError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(AttentionError::Heads { dim, heads });
        }
        let bound = (6.0 / (dim + dim / heads) as f64).sqrt();
        Ok(Self {
            heads,
            query: Tensor::uniform(dim, dim, bound, rng),
            key: Tensor::uniform(dim, dim, bound, rng),
            value: Tensor::uniform(dim, dim, bound, rng),
        })
    }
}

/// Projection variables on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub heads: usize,
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// One multi-head attention layer. Nodes without incident attention edges
/// output zeros.
pub fn attention_layer(
    tape: &mut Tape,
    h: Var,
    graph: &AttentionGraph,
    params: AttentionVars,
) -> Result<Var, AttentionError> {
    let [n, d] = tape.shape(h);
    let heads = params.heads;
    if heads == 0 || d % heads != 0 {
        return Err(AttentionError::Heads { dim: d, heads });
    }
    if graph.num_directed_edges() == 0 {
        return Ok(tape.constant(Tensor::zeros(n, d)));
    }
    let q = tape.matmul_t(h, params.query)?;
    let k = tape.matmul_t(h, params.key)?;
    let v = tape.matmul_t(h, params.value)?;
    let q_edge = tape.gather(q, graph.dst.clone())?;
    let k_edge = tape.gather(k, graph.src.clone())?;
    let logits = tape.block_dot_rows(q_edge, k_edge, heads)?;
    let logits = tape.scale(logits, 1.0 / ((d / heads) as f64).sqrt())?;
    let weights = tape.segment_softmax(logits, graph.dst.clone(), n)?;
    let v_edge = tape.gather(v, graph.src.clone())?;
    let messages = tape.block_scale_rows(v_edge, weights, heads)?;
    Ok(tape.segment_sum(messages, graph.dst.clone(), n)?)
}

/// Attention weights `β[e, h]` for each directed edge; used by tests and
/// diagnostics.
pub fn attention_weights(
    tape: &mut Tape,
    h: Var,
    graph: &AttentionGraph,
    params: AttentionVars,
) -> Result<Tensor, AttentionError> {
    let d = tape.shape(h)[1];
    let q = tape.matmul_t(h, params.query)?;
    let k = tape.matmul_t(h, params.key)?;
    let q_edge = tape.gather(q, graph.dst.clone())?;
    let k_edge = tape.gather(k, graph.src.clone())?;
    let logits = tape.block_dot_rows(q_edge, k_edge, params.heads)?;
    let logits = tape.scale(logits, 1.0 / ((d / params.heads) as f64).sqrt())?;
    let weights = tape.segment_softmax(logits, graph.dst.clone(), graph.num_nodes)?;
    Ok(tape.value(weights).clone())
}

/// `ĥ = Σ_l h^l + decoder output`.
pub fn final_embeddings(
    tape: &mut Tape,
    layers: &[Var],
    decoder_out: Option<Var>,
) -> Result<Var, TensorError> {
    let mut parts = layers.iter().copied().chain(decoder_out);
    let first = parts
        .next()
        .ok_or_else(|| TensorError::Invalid("no layers to aggregate".into()))?;
    parts.try_fold(first, |acc, next| tape.add(acc, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::mask_edges;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vars(tape: &mut Tape, p: &AttentionParams) -> AttentionVars {
        AttentionVars {
            heads: p.heads,
            query: tape.param(p.query.clone()),
            key: tape.param(p.key.clone()),
            value: tape.param(p.value.clone()),
        }
    }

    #[test]
    fn single_neighbor_copies_it() {
        let g = InteractionGraph::from_edges(1, 1, [(0, 0)]).unwrap();
        let ag = AttentionGraph::over_graph(&g);
        let p = AttentionParams {
            heads: 1,
            query: Tensor::identity(2),
            key: Tensor::identity(2),
            value: Tensor::identity(2),
        };
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap());
        let pv = vars(&mut tape, &p);
        let out = attention_layer(&mut tape, h, &ag, pv).unwrap();
        assert_eq!(tape.value(out).row(0), &[3.0, -4.0]);
        assert_eq!(tape.value(out).row(1), &[1.0, 2.0]);
    }

    #[test]
    fn isolated_nodes_output_zero() {
        let g = InteractionGraph::from_edges(2, 1, [(0, 0)]).unwrap();
        let ag = AttentionGraph::over_graph(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::init(4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::uniform(3, 4, 1.0, &mut rng));
        let pv = vars(&mut tape, &p);
        let out = attention_layer(&mut tape, h, &ag, pv).unwrap();
        assert!(tape.value(out).row(1).iter().all(|&x| x == 0.0));
        let empty = AttentionGraph::over_graph(&InteractionGraph::empty(2, 1));
        let out = attention_layer(&mut tape, h, &empty, pv).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_ratio_activates_everything() {
        let g = InteractionGraph::from_edges(3, 3, [(0, 0), (1, 1), (2, 2), (0, 1)]).unwrap();
        let plan = mask_edges(&g, &[0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ag = sample_attention_graph(&plan, 1.0, &mut rng).unwrap();
        assert_eq!(ag.active, (0..6).collect::<Vec<_>>());
        assert_eq!(ag.sampled_pairs.len(), plan.surviving.num_edges());
    }

    #[test]
    fn everything_masked_gives_no_pairs() {
        let g = InteractionGraph::from_edges(1, 2, [(0, 0), (0, 1)]).unwrap();
        let plan = mask_edges(&g, &[0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ag = sample_attention_graph(&plan, 1.0, &mut rng).unwrap();
        assert!(ag.sampled_pairs.is_empty());
        assert_eq!(ag.num_directed_edges(), 0);
    }

    #[test]
    fn ratio_validation() {
        let g = InteractionGraph::from_edges(1, 2, [(0, 0)]).unwrap();
        let plan = MaskPlan::unmasked(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_attention_graph(&plan, 0.0, &mut rng), Err(AttentionError::Ratio(_))));
        assert!(matches!(sample_attention_graph(&plan, 1.5, &mut rng), Err(AttentionError::Ratio(_))));
        assert!(matches!(sample_attention_graph(&plan, 0.3, &mut rng), Err(AttentionError::Quota(1))));
        assert_eq!(active_quota(0.2, 10), 2);
        assert_eq!(active_quota(0.21, 10), 3);
    }

    #[test]
    fn final_embedding_sums() {
        let mut tape = Tape::new();
        let e1 = tape.constant(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap());
        let h = final_embeddings(&mut tape, &[e1, e1, e1], Some(e1)).unwrap();
        assert_eq!(tape.value(h).data(), &[4.0, 0.0]);
        let only = final_embeddings(&mut tape, &[e1], None).unwrap();
        assert_eq!(tape.value(only).data(), &[1.0, 0.0]);
        assert!(final_embeddings(&mut tape, &[], None).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::init(6, 4, &mut rng).is_err());
        let p = AttentionParams::init(8, 4, &mut rng).unwrap();
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(p.query.data().iter().all(|x| x.abs() <= bound));
    }
    fn toy_attention_graph(rng: &mut ChaCha8Rng) -> AttentionGraph {
        let g = InteractionGraph::from_edges(3, 3, [(0, 0), (0, 1), (1, 1), (2, 2)]).unwrap();
        let plan = mask_edges(&g, &[2], 1).unwrap();
        sample_attention_graph(&plan, 0.5, rng).unwrap()
    }

    fn naive_attention(h: &Tensor, ag: &AttentionGraph, p: &AttentionParams) -> Tensor {
        let (n, d) = (h.rows(), h.cols());
        let dh = d / p.heads;
        let project = |w: &Tensor, v: usize| -> Vec<f64> {
            (0..d).map(|r| (0..d).map(|c| w.get(r, c) * h.get(v, c)).sum()).collect()
        };
        let mut out = Tensor::zeros(n, d);
        for v in 0..n {
            let nbrs: Vec<usize> = (0..n).filter(|&w| ag.has_edge(v, w)).collect();
            if nbrs.is_empty() {
                continue;
            }
            let q = project(&p.query, v);
            for head in 0..p.heads {
                let block = head * dh..(head + 1) * dh;
                let raw: Vec<f64> = nbrs
                    .iter()
                    .map(|&w| {
                        let k = project(&p.key, w);
                        block.clone().map(|j| q[j] * k[j]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let top = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = raw.iter().map(|x| (x - top).exp()).sum();
                for (&w, r) in nbrs.iter().zip(&raw) {
                    let beta = (r - top).exp() / z;
                    let val = project(&p.value, w);
                    for j in block.clone() {
                        out.row_mut(v)[j] += beta * val[j];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_per_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let ag = toy_attention_graph(&mut rng);
            let p = AttentionParams::init(8, 2, &mut rng).unwrap();
            let h = Tensor::uniform(6, 8, 1.0, &mut rng);
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let pv = vars(&mut tape, &p);
            let out = attention_layer(&mut tape, hv, &ag, pv).unwrap();
            let oracle = naive_attention(&h, &ag, &p);
            assert!(tape.value(out).max_abs_diff(&oracle) < 1e-10);
        }
    }

    #[test]
    fn weights_sum_to_one_per_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ag = toy_attention_graph(&mut rng);
        let p = AttentionParams::init(8, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::uniform(6, 8, 2.0, &mut rng));
        let pv = vars(&mut tape, &p);
        let w = attention_weights(&mut tape, h, &ag, pv).unwrap();
        for head in 0..4 {
            let mut sums = vec![0.0; 6];
            for (e, &v) in ag.dst.iter().enumerate() {
                sums[v] += w.get(e, head);
            }
            for (v, total) in sums.iter().enumerate() {
                if ag.dst.contains(&v) {
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn head_permutation_permutes_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ag = toy_attention_graph(&mut rng);
        let p = AttentionParams::init(4, 2, &mut rng).unwrap();
        let swap = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = [2, 3, 0, 1].iter().map(|&r| t.row(r).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let q = AttentionParams {
            heads: 2,
            query: swap(&p.query),
            key: swap(&p.key),
            value: swap(&p.value),
        };
        let h = Tensor::uniform(6, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let (pa, pb) = (vars(&mut tape, &p), vars(&mut tape, &q));
        let a = attention_layer(&mut tape, hv, &ag, pa).unwrap();
        let b = attention_layer(&mut tape, hv, &ag, pb).unwrap();
        for v in 0..6 {
            let (ra, rb) = (tape.value(a).row(v), tape.value(b).row(v));
            assert_eq!(&ra[..2], &rb[2..]);
            assert_eq!(&ra[2..], &rb[..2]);
        }
    }

    #[test]
    fn ten_node_graph_samples_exact_pair_count() {
        // 5 users x 5 items, 7 surviving edges
        let g = InteractionGraph::from_edges(
            5,
            5,
            [(0, 0), (0, 1), (1, 1), (2, 2), (3, 3), (4, 4), (4, 0), (1, 3), (2, 4)],
        )
        .unwrap();
        let plan = mask_edges(&g, &[2], 1).unwrap();
        assert_eq!(plan.surviving.num_edges(), 7);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ag = sample_attention_graph(&plan, 0.4, &mut rng).unwrap();
            assert_eq!(ag.sampled_pairs.len(), 7);
            assert!(ag.active.len() >= 4);
            for &x in &plan.subgraph_nodes {
                assert!(ag.active.contains(&x));
            }
            let mut seen = HashSet::new();
            for &(a, b) in &ag.sampled_pairs {
                assert!(a < b && ag.active.contains(&a) && ag.active.contains(&b));
                assert!(seen.insert((a, b)));
                assert!(ag.has_edge(a, b) && ag.has_edge(b, a));
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        use crate::tensor::finite_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ag = toy_attention_graph(&mut rng);
        let p = AttentionParams::init(4, 2, &mut rng).unwrap();
        let h = Tensor::uniform(6, 4, 1.0, &mut rng);
        let target = Tensor::uniform(6, 4, 1.0, &mut rng);
        let params = vec![h, p.query, p.key, p.value];
        let report = finite_diff_check(
            &params,
            |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>), AttentionError> {
                let mut tape = Tape::new();
                let vs: Vec<Var> = ps.iter().map(|t| tape.param(t.clone())).collect();
                let av = AttentionVars { heads: 2, query: vs[1], key: vs[2], value: vs[3] };
                let out = attention_layer(&mut tape, vs[0], &ag, av)?;
                let t = tape.constant(target.clone());
                let prod = tape.mul(out, t)?;
                let loss = tape.sum(prod)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).item(), vs.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect()))
            },
            1e-5,
            1000,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
