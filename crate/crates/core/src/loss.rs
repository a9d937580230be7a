//! Loss terms over the aggregated embeddings. Edge-level terms are
//! mean-reduced.

use std::sync::Arc;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Endpoint node ids of a set of edges, ready for gathering.
#[derive(Debug, Clone)]
pub struct EdgeEndpoints {
    pub left: Arc<[usize]>,
    pub right: Arc<[usize]>,
}

impl EdgeEndpoints {
    /// From `(user, item)` pairs, mapping items into node space.
    pub fn from_user_items(edges: &[(usize, usize)], num_users: usize) -> Self {
        let left: Vec<usize> = edges.iter().map(|&(u, _)| u).collect();
        let right: Vec<usize> = edges.iter().map(|&(_, i)| num_users + i).collect();
        Self {
            left: left.into(),
            right: right.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// `mean_{(v, v')} −ĥ_v·ĥ_v'`; a constant 0 for an empty edge set.
pub fn negative_dot_loss(tape: &mut Tape, h: Var, edges: &EdgeEndpoints) -> Result<Var, TensorError> {
    if edges.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let a = tape.gather(h, edges.left.clone())?;
    let b = tape.gather(h, edges.right.clone())?;
    let dots = tape.dot_rows(a, b)?;
    let m = tape.mean(dots)?;
    tape.scale(m, -1.0)
}

/// Reconstruction of the masked edges.
pub fn recon_loss(tape: &mut Tape, h: Var, masked: &EdgeEndpoints) -> Result<Var, TensorError> {
    negative_dot_loss(tape, h, masked)
}

/// Alignment over the batch's training edges.
pub fn rec_loss(tape: &mut Tape, h: Var, batch: &EdgeEndpoints) -> Result<Var, TensorError> {
    if batch.is_empty() {
        return Err(TensorError::Invalid("empty training batch".into()));
    }
    negative_dot_loss(tape, h, batch)
}

/// Node-id index sets for the uniformity terms.
#[derive(Debug, Clone)]
pub struct UniformitySets {
    pub batch_users: Arc<[usize]>,
    pub batch_items: Arc<[usize]>,
    pub all_users: Arc<[usize]>,
    pub all_items: Arc<[usize]>,
}

impl UniformitySets {
    /// Batch node ids (items already in node space) against every
    /// user and item of a graph with `num_users + num_items` nodes.
    pub fn new(batch_users: Vec<usize>, batch_items: Vec<usize>, num_users: usize, num_items: usize) -> Self {
        Self {
            batch_users: batch_users.into(),
            batch_items: batch_items.into(),
            all_users: (0..num_users).collect::<Vec<_>>().into(),
            all_items: (num_users..num_users + num_items).collect::<Vec<_>>().into(),
        }
    }
}

fn mean_logsumexp(
    tape: &mut Tape,
    h: Var,
    anchors: &Arc<[usize]>,
    against: &Arc<[usize]>,
    temperature: f64,
) -> Result<Var, TensorError> {
    let a = tape.gather(h, anchors.clone())?;
    let b = tape.gather(h, against.clone())?;
    let mut sims = tape.matmul_t(a, b)?;
    if temperature != 1.0 {
        sims = tape.scale(sims, 1.0 / temperature)?;
    }
    let lse = tape.row_logsumexp(sims)?;
    tape.mean(lse)
}

/// `mean_u log Σ_i exp(ĥ_u·ĥ_i/τ) + mean_u log Σ_u' exp(ĥ_u·ĥ_u'/τ) +
/// mean_i log Σ_i' exp(ĥ_i·ĥ_i'/τ)`, anchors from the batch and inner
/// sums over every user or item.
pub fn uniformity_loss(
    tape: &mut Tape,
    h: Var,
    sets: &UniformitySets,
    temperature: f64,
) -> Result<Var, TensorError> {
    if sets.batch_users.is_empty() || sets.batch_items.is_empty() {
        return Err(TensorError::Invalid("uniformity needs batch users and items".into()));
    }
    if !(temperature > 0.0) {
        return Err(TensorError::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    let ui = mean_logsumexp(tape, h, &sets.batch_users, &sets.all_items, temperature)?;
    let uu = mean_logsumexp(tape, h, &sets.batch_users, &sets.all_users, temperature)?;
    let ii = mean_logsumexp(tape, h, &sets.batch_items, &sets.all_items, temperature)?;
    let s = tape.add(ui, uu)?;
    tape.add(s, ii)
}
