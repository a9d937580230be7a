//! Parameter-free graph convolution over the masked graph.
//!
//! Each layer computes `h'_v = α_vv h_v + Σ_{v' ∈ N'_v} α_vv' h_v'` with
//! `α_vv' = 1 / sqrt(|N'_v| |N'_v'|)` and `α_vv = 1 / |N'_v|` (1 for
//! isolated nodes). The last layer also adds the ego embeddings back in.

use std::sync::Arc;

use crate::graph::InteractionGraph;
use crate::tensor::{SparseMatrix, Tape, TensorError, Var};

/// Symmetric propagation matrix for one surviving graph, self coefficients
/// on the diagonal.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    matrix: Arc<SparseMatrix>,
    degrees: Vec<usize>,
}

impl NormalizedAdjacency {
    pub fn new(surviving: &InteractionGraph) -> Self {
        let n = surviving.num_nodes();
        let degrees: Vec<usize> = (0..n).map(|v| surviving.degree(v)).collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(n + 2 * surviving.num_edges());
        let mut values = Vec::with_capacity(indices.capacity());
        offsets.push(0);
        for v in 0..n {
            // users' neighbors are items (larger ids) and vice versa, so
            // emitting in this order keeps each row sorted
            let neighbors = surviving.neighbors(v).map(|w| (w, edge_coefficient(degrees[v], degrees[w])));
            let own = std::iter::once((v, self_coefficient(degrees[v])));
            let row: Vec<(usize, f64)> = if surviving.is_user(v) {
                own.chain(neighbors).collect()
            } else {
                neighbors.chain(own).collect()
            };
            for (c, a) in row {
                indices.push(c);
                values.push(a);
            }
            offsets.push(indices.len());
        }
        Self {
            matrix: Arc::new(SparseMatrix::from_raw(n, n, offsets, indices, values)),
            degrees,
        }
    }

    pub fn matrix(&self) -> &Arc<SparseMatrix> {
        &self.matrix
    }

    pub fn num_nodes(&self) -> usize {
        self.degrees.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.degrees[v]
    }

    pub fn self_coefficient(&self, v: usize) -> f64 {
        self.matrix.get(v, v)
    }

    /// Coefficient of a surviving edge, 0 for non-edges.
    pub fn edge_coefficient(&self, v: usize, w: usize) -> f64 {
        if v == w {
            return 0.0;
        }
        self.matrix.get(v, w)
    }
}

fn edge_coefficient(deg_v: usize, deg_w: usize) -> f64 {
    1.0 / ((deg_v * deg_w) as f64).sqrt()
}

fn self_coefficient(deg: usize) -> f64 {
    if deg == 0 {
        1.0
    } else {
        1.0 / deg as f64
    }
}

/// One propagation step.
pub fn propagate(tape: &mut Tape, h: Var, adj: &NormalizedAdjacency) -> Result<Var, TensorError> {
    let [rows, cols] = tape.shape(h);
    if rows != adj.num_nodes() {
        return Err(TensorError::Shape {
            op: "propagate",
            left: [rows, cols],
            right: [adj.num_nodes(), cols],
        });
    }
    tape.spmm(adj.matrix().clone(), h)
}

/// Runs `layers` propagation steps and returns `[h0, h1, ..., hL]`, with the
/// ego embeddings added to the last layer.
pub fn encode(
    tape: &mut Tape,
    h0: Var,
    adj: &NormalizedAdjacency,
    layers: usize,
) -> Result<Vec<Var>, TensorError> {
    if layers == 0 {
        return Err(TensorError::Invalid("encoder needs at least one layer".into()));
    }
    let mut stack = vec![h0];
    for l in 0..layers {
        let mut next = propagate(tape, stack[l], adj)?;
        if l + 1 == layers {
            next = tape.add(next, h0)?;
        }
        stack.push(next);
    }
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn coefficients_follow_degrees() {
        // user 0 has 4 items; item 0 has only user 0
        let g = InteractionGraph::from_edges(2, 5, [(0, 0), (0, 1), (0, 2), (0, 3), (1, 4)]).unwrap();
        let adj = NormalizedAdjacency::new(&g);
        let item0 = g.item_node(0);
        assert_eq!(adj.edge_coefficient(0, item0), 0.5);
        assert_eq!(adj.edge_coefficient(item0, 0), 0.5);
        assert_eq!(adj.self_coefficient(0), 0.25);
        let (u1, i4) = (1, g.item_node(4));
        assert_eq!(adj.edge_coefficient(u1, i4), 1.0);
        assert_eq!(adj.self_coefficient(u1), 1.0);
        assert_eq!(adj.edge_coefficient(u1, item0), 0.0);
    }

    #[test]
    fn isolated_self_coefficient_is_one() {
        let g = InteractionGraph::from_edges(2, 1, [(0, 0)]).unwrap();
        let adj = NormalizedAdjacency::new(&g);
        assert_eq!(adj.self_coefficient(1), 1.0);
    }

    #[test]
    fn single_edge_propagation() {
        let g = InteractionGraph::from_edges(1, 1, [(0, 0)]).unwrap();
        let adj = NormalizedAdjacency::new(&g);
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![10.0, 20.0]]).unwrap());
        let h1 = propagate(&mut tape, h0, &adj).unwrap();
        assert_eq!(tape.value(h1).data(), &[11.0, 22.0, 11.0, 22.0]);
        let stack = encode(&mut tape, h0, &adj, 2).unwrap();
        // h² = (h¹_u + h¹_i) + h⁰
        assert_eq!(tape.value(stack[2]).row(0), &[23.0, 46.0]);
        assert_eq!(tape.value(stack[2]).row(1), &[32.0, 64.0]);
    }

    #[test]
    fn isolated_node_doubles_with_residual() {
        let g = InteractionGraph::empty(1, 1);
        let adj = NormalizedAdjacency::new(&g);
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::from_rows(&[vec![1.5], vec![-2.0]]).unwrap());
        let stack = encode(&mut tape, h0, &adj, 1).unwrap();
        assert_eq!(tape.value(stack[1]).data(), &[3.0, -4.0]);
        assert!(encode(&mut tape, h0, &adj, 0).is_err());
        let wrong = tape.constant(Tensor::zeros(3, 1));
        assert!(propagate(&mut tape, wrong, &adj).is_err());
    }
}
