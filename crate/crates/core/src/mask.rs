//! Learned masking: infomax relatedness between each node and its k-hop
//! subgraph, Gumbel-perturbed top-S centric selection, and removal of every
//! edge inside the selected subgraphs.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::graph::{InteractionGraph, NeighborhoodScanner};
use crate::tensor::{dot, SparseMatrix, Tape, Tensor, TensorError, Var};

/// Floor on embedding norms in cosine denominators.
pub const NORM_FLOOR: f64 = 1e-12;
/// Uniform draws are clamped to `[MU_CLAMP, 1 - MU_CLAMP]` before the
/// double logarithm.
pub const MU_CLAMP: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("mask hop count must be at least 1")]
    Hops,
    #[error("centric node count must be positive")]
    ZeroCentric,
    #[error("cannot select {requested} centric nodes from {available}")]
    TooManyCentric { requested: usize, available: usize },
    #[error("infomax loss needs a non-empty node set")]
    EmptyNodeSet,
    #[error("node {0} out of range")]
    Node(usize),
    #[error("cannot mask {requested} of {available} edges")]
    EdgeCount { requested: usize, available: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Subgraph pooling before the sigmoid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Readout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Readout::Mean),
            "sum" => Ok(Readout::Sum),
            other => Err(format!("unknown readout `{other}` (expected mean|sum)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelatednessScores {
    /// `s_v` in `(0, 1)` per node.
    pub scores: Vec<f64>,
    /// Pooled cosine before the sigmoid.
    pub pooled_cosine: Vec<f64>,
    pub hops: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normalized_rows(ego: &Tensor) -> Tensor {
    let mut out = ego.clone();
    let cols = out.cols();
    if cols > 0 {
        out.data_mut().par_chunks_mut(cols).for_each(|row| {
            let norm = dot(row, row).sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|x| *x /= norm);
        });
    }
    out
}

/// Sorted `N_v^k \ {v}` for every node of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    hops: usize,
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Neighborhoods {
    pub fn new(graph: &InteractionGraph, hops: usize) -> Result<Self, MaskError> {
        if hops == 0 {
            return Err(MaskError::Hops);
        }
        let n = graph.num_nodes();
        let rows: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map_init(
                || NeighborhoodScanner::new(n),
                |scanner, v| {
                    let mut others = scanner.scan(graph, v, hops)[1..].to_vec();
                    others.sort_unstable();
                    others
                },
            )
            .collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut members = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        offsets.push(0);
        for row in rows {
            members.extend(row);
            offsets.push(members.len());
        }
        Ok(Self { hops, offsets, members })
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Neighborhood of `v` without `v` itself.
    pub fn others(&self, v: usize) -> &[usize] {
        &self.members[self.offsets[v]..self.offsets[v + 1]]
    }
}

/// `s_v = sigmoid(pool_{v' ∈ N_v^k \ {v}} cos(h_v, h_v'))` for every node.
/// Nodes whose neighborhood is only themselves get `sigmoid(0) = 0.5`.
pub fn relatedness_scores(
    graph: &InteractionGraph,
    ego: &Tensor,
    hops: usize,
    readout: Readout,
) -> Result<RelatednessScores, MaskError> {
    relatedness_from(&Neighborhoods::new(graph, hops)?, ego, readout)
}

/// [`relatedness_scores`] over precomputed neighborhoods.
pub fn relatedness_from(
    hoods: &Neighborhoods,
    ego: &Tensor,
    readout: Readout,
) -> Result<RelatednessScores, MaskError> {
    let n = hoods.num_nodes();
    if ego.rows() != n {
        return Err(TensorError::Shape {
            op: "relatedness",
            left: ego.shape(),
            right: [n, ego.cols()],
        }
        .into());
    }
    let unit = normalized_rows(ego);
    let d = unit.cols();
    let pooled_cosine: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; d],
            |acc, v| {
                let others = hoods.others(v);
                if others.is_empty() {
                    return 0.0;
                }
                acc.iter_mut().for_each(|x| *x = 0.0);
                for &m in others {
                    acc.iter_mut().zip(unit.row(m)).for_each(|(a, x)| *a += x);
                }
                let total = dot(unit.row(v), acc);
                match readout {
                    Readout::Mean => total / others.len() as f64,
                    Readout::Sum => total,
                }
            },
        )
        .collect();
    Ok(RelatednessScores {
        scores: pooled_cosine.iter().map(|&c| sigmoid(c)).collect(),
        pooled_cosine,
        hops: hoods.hops(),
    })
}

/// Pooling matrix whose row `r` averages (or sums) the neighborhood of
/// `nodes[r]` minus the node itself.
pub fn pooling_matrix(
    hoods: &Neighborhoods,
    nodes: &[usize],
    readout: Readout,
) -> Result<SparseMatrix, MaskError> {
    let mut offsets = Vec::with_capacity(nodes.len() + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    offsets.push(0);
    for &v in nodes {
        if v >= hoods.num_nodes() {
            return Err(MaskError::Node(v));
        }
        let others = hoods.others(v);
        let weight = match readout {
            Readout::Mean => 1.0 / others.len().max(1) as f64,
            Readout::Sum => 1.0,
        };
        values.extend(std::iter::repeat_n(weight, others.len()));
        indices.extend_from_slice(others);
        offsets.push(indices.len());
    }
    Ok(SparseMatrix::from_raw(
        nodes.len(),
        hoods.num_nodes(),
        offsets,
        indices,
        values,
    ))
}

/// Differentiable relatedness scores of `nodes` as an `n x 1` column.
pub fn relatedness_on_tape(
    tape: &mut Tape,
    hoods: &Neighborhoods,
    ego: Var,
    nodes: &[usize],
    readout: Readout,
) -> Result<Var, MaskError> {
    let pool = Arc::new(pooling_matrix(hoods, nodes, readout)?);
    let unit = tape.row_normalize(ego, NORM_FLOOR)?;
    let pooled = tape.spmm(pool, unit)?;
    let own = tape.gather(unit, Arc::from(nodes))?;
    let cosine = tape.dot_rows(own, pooled)?;
    Ok(tape.sigmoid(cosine)?)
}

/// `-Σ_{v ∈ over} s_v`.
pub fn infomax_loss(scores: &RelatednessScores, over: &[usize]) -> Result<f64, MaskError> {
    if over.is_empty() {
        return Err(MaskError::EmptyNodeSet);
    }
    let mut total = 0.0;
    for &v in over {
        total += scores.scores.get(v).ok_or(MaskError::Node(v))?;
    }
    Ok(-total)
}

/// Gumbel(0,1) noise `-ln(-ln μ)` for a uniform draw, after clamping.
pub fn gumbel_noise(mu: f64) -> f64 {
    let mu = mu.clamp(MU_CLAMP, 1.0 - MU_CLAMP);
    -(-mu.ln()).ln()
}

/// `ln s_v + Gumbel noise`, one independent draw per node.
pub fn gumbel_perturb(scores: &RelatednessScores, rng: &mut impl Rng) -> Vec<f64> {
    scores
        .scores
        .iter()
        .map(|&s| perturb_one(s, rng.random::<f64>()))
        .collect()
}

pub fn perturb_one(score: f64, mu: f64) -> f64 {
    score.clamp(f64::MIN_POSITIVE, 1.0).ln() + gumbel_noise(mu)
}

/// The `count` highest-scoring nodes (ties to the smaller id), in rank
/// order. Nodes with `eligible[v] == false` are never picked; if fewer than
/// `count` are eligible, all eligible nodes are returned.
pub fn select_centric(
    perturbed: &[f64],
    count: usize,
    eligible: Option<&[bool]>,
) -> Result<Vec<usize>, MaskError> {
    if count == 0 {
        return Err(MaskError::ZeroCentric);
    }
    if count > perturbed.len() {
        return Err(MaskError::TooManyCentric {
            requested: count,
            available: perturbed.len(),
        });
    }
    let mut candidates: Vec<usize> = (0..perturbed.len())
        .filter(|&v| eligible.is_none_or(|e| e[v]))
        .collect();
    candidates.sort_by(|&a, &b| perturbed[b].total_cmp(&perturbed[a]).then(a.cmp(&b)));
    candidates.truncate(count);
    Ok(candidates)
}

/// Centric nodes, masked edges and the surviving graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub centric: Vec<usize>,
    /// Masked `(user, item)` edges, sorted.
    pub masked_edges: Vec<(usize, usize)>,
    pub surviving: InteractionGraph,
    /// Sorted union of the centric nodes' neighborhoods.
    pub subgraph_nodes: Vec<usize>,
}

impl MaskPlan {
    pub fn unmasked(graph: &InteractionGraph) -> Self {
        Self {
            centric: Vec::new(),
            masked_edges: Vec::new(),
            surviving: graph.clone(),
            subgraph_nodes: Vec::new(),
        }
    }
}

/// Masks every edge whose endpoints both lie in `N_v^k` of some centric
/// `v` (with `v` itself a member).
pub fn mask_edges(
    graph: &InteractionGraph,
    centric: &[usize],
    hops: usize,
) -> Result<MaskPlan, MaskError> {
    if hops == 0 {
        return Err(MaskError::Hops);
    }
    let n = graph.num_nodes();
    let mut scanner = NeighborhoodScanner::new(n);
    let mut in_subgraph = vec![false; n];
    let mut masked = std::collections::BTreeSet::new();
    for &v in centric {
        if v >= n {
            return Err(MaskError::Node(v));
        }
        let members = scanner.scan(graph, v, hops).to_vec();
        for &m in &members {
            in_subgraph[m] = true;
        }
        for &u in members.iter().filter(|&&m| graph.is_user(m)) {
            for &item in graph.user_items(u) {
                if scanner.contains(graph.item_node(item)) {
                    masked.insert((u, item));
                }
            }
        }
    }
    let masked_edges: Vec<(usize, usize)> = masked.into_iter().collect();
    Ok(MaskPlan {
        centric: centric.to_vec(),
        surviving: graph.without_edges(&masked_edges),
        masked_edges,
        subgraph_nodes: (0..n).filter(|&v| in_subgraph[v]).collect(),
    })
}

/// Masks `count` uniformly random edges (the learned-masking ablation).
pub fn random_mask(
    graph: &InteractionGraph,
    count: usize,
    rng: &mut impl Rng,
) -> Result<MaskPlan, MaskError> {
    if count > graph.num_edges() {
        return Err(MaskError::EdgeCount {
            requested: count,
            available: graph.num_edges(),
        });
    }
    let mut picks = sample(rng, graph.num_edges(), count).into_vec();
    picks.sort_unstable();
    let masked_edges: Vec<(usize, usize)> = picks.iter().map(|&k| graph.edges()[k]).collect();
    let mut nodes: Vec<usize> = masked_edges
        .iter()
        .flat_map(|&e| {
            let (a, b) = graph.edge_nodes(e);
            [a, b]
        })
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    Ok(MaskPlan {
        centric: Vec::new(),
        surviving: graph.without_edges(&masked_edges),
        masked_edges,
        subgraph_nodes: nodes,
    })
}

/// TSV audit dump: `node  kind  score  centric`.
pub fn write_audit(
    path: &Path,
    graph: &InteractionGraph,
    scores: &RelatednessScores,
    centric: &[usize],
) -> Result<(), MaskError> {
    let chosen: std::collections::HashSet<usize> = centric.iter().copied().collect();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "node\tkind\tscore\tcentric")?;
    for (v, s) in scores.scores.iter().enumerate() {
        let kind = if graph.is_user(v) { "user" } else { "item" };
        writeln!(out, "{v}\t{kind}\t{s}\t{}", u8::from(chosen.contains(&v)))?;
    }
    out.flush()?;
    Ok(())
}
