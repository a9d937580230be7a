//! Bipartite user–item interaction graph.
//!
//! Users occupy node ids `[0, num_users)` and items occupy
//! `[num_users, num_users + num_items)`. Edges are stored as
//! `(user, item)` pairs with the item in its local `[0, num_items)` range,
//! and both adjacency directions are kept as compressed rows.

use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("edge ({user}, {item}) out of range for {num_users} users x {num_items} items")]
    EdgeOutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },
    #[error("node {node} out of range (graph has {num_nodes} nodes)")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("hop count must be at least 1, got {0}")]
    ZeroHops(usize),
    #[error("noise ratio {0} outside [0, 1]")]
    NoiseRatio(f64),
    #[error("cannot add {requested} noise edges: only {available} free user-item pairs")]
    NoiseCapacity { requested: usize, available: usize },
    #[error("sparsity bounds must be non-empty and strictly ascending")]
    Bounds,
}

/// Undirected bipartite interaction graph with binary edges.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    edges: Vec<(usize, usize)>,
    user_offsets: Vec<usize>,
    user_items: Vec<usize>,
    item_offsets: Vec<usize>,
    item_users: Vec<usize>,
}

impl InteractionGraph {
    /// Builds the graph, collapsing duplicate edges. Edges end up sorted by
    /// `(user, item)`.
    pub fn from_edges(
        num_users: usize,
        num_items: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        let mut edges: Vec<(usize, usize)> = edges.into_iter().collect();
        for &(user, item) in &edges {
            if user >= num_users || item >= num_items {
                return Err(GraphError::EdgeOutOfRange {
                    user,
                    item,
                    num_users,
                    num_items,
                });
            }
        }
        edges.sort_unstable();
        edges.dedup();

        let mut user_offsets = vec![0usize; num_users + 1];
        let mut item_offsets = vec![0usize; num_items + 1];
        for &(u, i) in &edges {
            user_offsets[u + 1] += 1;
            item_offsets[i + 1] += 1;
        }
        for k in 0..num_users {
            user_offsets[k + 1] += user_offsets[k];
        }
        for k in 0..num_items {
            item_offsets[k + 1] += item_offsets[k];
        }
        // edges are sorted by user, so the user rows fill in order
        let user_items: Vec<usize> = edges.iter().map(|&(_, i)| i).collect();
        let mut item_users = vec![0usize; edges.len()];
        let mut cursor = item_offsets.clone();
        for &(u, i) in &edges {
            item_users[cursor[i]] = u;
            cursor[i] += 1;
        }

        Ok(Self {
            num_users,
            num_items,
            edges,
            user_offsets,
            user_items,
            item_offsets,
            item_users,
        })
    }

    pub fn empty(num_users: usize, num_items: usize) -> Self {
        Self::from_edges(num_users, num_items, std::iter::empty()).expect("empty graph is valid")
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// All `(user, item)` edges, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_user(&self, node: usize) -> bool {
        node < self.num_users
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.num_users + item
    }

    /// Items (local ids) of a user, ascending.
    pub fn user_items(&self, user: usize) -> &[usize] {
        &self.user_items[self.user_offsets[user]..self.user_offsets[user + 1]]
    }

    /// Users of an item (local id), ascending.
    pub fn item_users(&self, item: usize) -> &[usize] {
        &self.item_users[self.item_offsets[item]..self.item_offsets[item + 1]]
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_offsets[user + 1] - self.user_offsets[user]
    }

    pub fn item_degree(&self, item: usize) -> usize {
        self.item_offsets[item + 1] - self.item_offsets[item]
    }

    /// Degree of a node in the unified id space.
    pub fn degree(&self, node: usize) -> usize {
        if self.is_user(node) {
            self.user_degree(node)
        } else {
            self.item_degree(node - self.num_users)
        }
    }

    /// Neighbors of a node, as node ids in the unified id space.
    pub fn neighbors(&self, node: usize) -> Neighbors<'_> {
        if self.is_user(node) {
            Neighbors {
                ids: self.user_items(node),
                offset: self.num_users,
            }
        } else {
            Neighbors {
                ids: self.item_users(node - self.num_users),
                offset: 0,
            }
        }
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        user < self.num_users && self.user_items(user).binary_search(&item).is_ok()
    }

    /// Endpoints of an edge in node-id space.
    pub fn edge_nodes(&self, (user, item): (usize, usize)) -> (usize, usize) {
        (user, self.num_users + item)
    }

    fn check_node(&self, node: usize) -> Result<(), GraphError> {
        if node >= self.num_nodes() {
            return Err(GraphError::NodeOutOfRange {
                node,
                num_nodes: self.num_nodes(),
            });
        }
        Ok(())
    }

    /// All nodes within `hops` of `center`, the center included.
    pub fn k_hop_neighborhood(&self, center: usize, hops: usize) -> Result<NodeSet, GraphError> {
        self.check_node(center)?;
        if hops == 0 {
            return Err(GraphError::ZeroHops(hops));
        }
        let mut scanner = NeighborhoodScanner::new(self.num_nodes());
        let mut members = scanner.scan(self, center, hops).to_vec();
        members.sort_unstable();
        Ok(NodeSet {
            members,
            center,
            hops,
        })
    }

    /// Adds `ceil(ratio * |E|)` uniformly random user-item pairs that are not
    /// already edges. Returns the augmented graph and the added pairs in draw
    /// order.
    pub fn inject_noise(
        &self,
        ratio: f64,
        seed: u64,
    ) -> Result<(InteractionGraph, Vec<(usize, usize)>), GraphError> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(GraphError::NoiseRatio(ratio));
        }
        let requested = noise_edge_count(ratio, self.num_edges());
        let available = self.num_users * self.num_items - self.num_edges();
        if requested > available {
            return Err(GraphError::NoiseCapacity {
                requested,
                available,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let added = if requested * 2 <= available {
            let mut taken: HashSet<(usize, usize)> = HashSet::with_capacity(requested);
            let mut added = Vec::with_capacity(requested);
            while added.len() < requested {
                let pair = (
                    rng.random_range(0..self.num_users),
                    rng.random_range(0..self.num_items),
                );
                if !self.has_edge(pair.0, pair.1) && taken.insert(pair) {
                    added.push(pair);
                }
            }
            added
        } else {
            // dense case: enumerate the complement and sample without replacement
            let mut free: Vec<(usize, usize)> = (0..self.num_users)
                .flat_map(|u| (0..self.num_items).map(move |i| (u, i)))
                .filter(|&(u, i)| !self.has_edge(u, i))
                .collect();
            let (chosen, _) = free.partial_shuffle(&mut rng, requested);
            chosen.to_vec()
        };
        let noisy = InteractionGraph::from_edges(
            self.num_users,
            self.num_items,
            self.edges.iter().copied().chain(added.iter().copied()),
        )?;
        Ok((noisy, added))
    }

    /// Removes the given edges, keeping every node.
    pub fn without_edges(&self, removed: &[(usize, usize)]) -> InteractionGraph {
        let removed: HashSet<(usize, usize)> = removed.iter().copied().collect();
        InteractionGraph::from_edges(
            self.num_users,
            self.num_items,
            self.edges.iter().copied().filter(|e| !removed.contains(e)),
        )
        .expect("subgraph of a valid graph")
    }
}

/// Number of noise edges added for a ratio; tolerant of float products
/// like `0.07 * 100 = 7.000000000000001`.
pub fn noise_edge_count(ratio: f64, num_edges: usize) -> usize {
    let raw = ratio * num_edges as f64;
    (raw - 1e-9).ceil().max(0.0) as usize
}

pub struct Neighbors<'a> {
    ids: &'a [usize],
    offset: usize,
}

impl Iterator for Neighbors<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let (first, rest) = self.ids.split_first()?;
        self.ids = rest;
        Some(first + self.offset)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.ids.len(), Some(self.ids.len()))
    }
}

impl ExactSizeIterator for Neighbors<'_> {}

/// Nodes within a hop radius of a center node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSet {
    /// Sorted member ids; always includes `center`.
    pub members: Vec<usize>,
    pub center: usize,
    pub hops: usize,
}

impl NodeSet {
    pub fn contains(&self, node: usize) -> bool {
        self.members.binary_search(&node).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Reusable BFS state for repeated bounded-depth neighborhood queries.
pub struct NeighborhoodScanner {
    stamp: Vec<u32>,
    epoch: u32,
    members: Vec<usize>,
    queue: VecDeque<(usize, usize)>,
}

impl NeighborhoodScanner {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            stamp: vec![0; num_nodes],
            epoch: 0,
            members: Vec::new(),
            queue: VecDeque::new(),
        }
    }

    /// Members of the `hops`-neighborhood of `center` in BFS order, center
    /// first. The slice is valid until the next call.
    pub fn scan(&mut self, graph: &InteractionGraph, center: usize, hops: usize) -> &[usize] {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
        self.members.clear();
        self.queue.clear();
        self.stamp[center] = self.epoch;
        self.members.push(center);
        self.queue.push_back((center, 0));
        while let Some((node, dist)) = self.queue.pop_front() {
            if dist == hops {
                continue;
            }
            for next in graph.neighbors(node) {
                if self.stamp[next] != self.epoch {
                    self.stamp[next] = self.epoch;
                    self.members.push(next);
                    self.queue.push_back((next, dist + 1));
                }
            }
        }
        &self.members
    }

    /// Whether `node` was reached by the most recent scan.
    pub fn contains(&self, node: usize) -> bool {
        self.stamp[node] == self.epoch
    }
}

/// One degree bucket of users.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct SparsityGroup {
    pub lower: usize,
    /// `None` for the overflow group.
    pub upper: Option<usize>,
    pub users: Vec<usize>,
}

impl SparsityGroup {
    pub fn label(&self) -> String {
        match self.upper {
            Some(upper) => format!("[{},{})", self.lower, upper),
            None => format!("[{},inf)", self.lower),
        }
    }
}

/// Buckets users by training degree. `bounds = [0, 5, 10, 15, 20]` yields
/// `[0,5) [5,10) [10,15) [15,20)` plus an overflow group `[20,inf)`.
/// Users below the first bound belong to no group.
pub fn sparsity_groups(
    train: &InteractionGraph,
    bounds: &[usize],
) -> Result<Vec<SparsityGroup>, GraphError> {
    if bounds.is_empty() || bounds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GraphError::Bounds);
    }
    let mut groups: Vec<SparsityGroup> = bounds
        .iter()
        .enumerate()
        .map(|(k, &lower)| SparsityGroup {
            lower,
            upper: bounds.get(k + 1).copied(),
            users: Vec::new(),
        })
        .collect();
    for user in 0..train.num_users() {
        let degree = train.user_degree(user);
        // index of the last bound <= degree
        let slot = bounds.partition_point(|&b| b <= degree);
        if slot > 0 {
            groups[slot - 1].users.push(user);
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph() -> InteractionGraph {
        // u0 - i0 - u1 - i1
        InteractionGraph::from_edges(2, 2, [(0, 0), (1, 0), (1, 1)]).unwrap()
    }

    #[test]
    fn adjacency_is_transposed() {
        let g = InteractionGraph::from_edges(3, 4, [(0, 1), (2, 1), (1, 3), (0, 0), (0, 1)]).unwrap();
        assert_eq!(g.num_edges(), 4);
        for &(u, i) in g.edges() {
            assert!(g.item_users(i).contains(&u));
            assert!(g.user_items(u).contains(&i));
        }
        let total: usize = (0..g.num_nodes()).map(|v| g.degree(v)).sum();
        assert_eq!(total, 2 * g.num_edges());
        assert_eq!(g.neighbors(g.item_node(1)).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        assert!(matches!(
            InteractionGraph::from_edges(1, 1, [(0, 1)]),
            Err(GraphError::EdgeOutOfRange { .. })
        ));
    }

    #[test]
    fn khop_on_path() {
        let g = path_graph();
        let u1 = 0;
        let i1 = g.item_node(0);
        let u2 = 1;
        let set = g.k_hop_neighborhood(u1, 2).unwrap();
        assert_eq!(set.members, vec![u1, u2, i1]);
        assert!(matches!(
            g.k_hop_neighborhood(9, 1),
            Err(GraphError::NodeOutOfRange { .. })
        ));
        assert!(matches!(g.k_hop_neighborhood(0, 0), Err(GraphError::ZeroHops(0))));
    }

    #[test]
    fn khop_isolated_and_star() {
        let g = InteractionGraph::from_edges(2, 3, [(0, 0), (0, 1), (0, 2)]).unwrap();
        assert_eq!(g.k_hop_neighborhood(1, 3).unwrap().members, vec![1]);
        assert_eq!(g.k_hop_neighborhood(0, 1).unwrap().members, vec![0, 2, 3, 4]);
    }

    #[test]
    fn noise_counts_and_superset() {
        let edges: Vec<_> = (0..100).map(|k| (k % 20, k / 20)).collect();
        let g = InteractionGraph::from_edges(20, 30, edges).unwrap();
        assert_eq!(g.num_edges(), 100);
        let (same, added) = g.inject_noise(0.0, 1).unwrap();
        assert_eq!(same, g);
        assert!(added.is_empty());
        let (noisy, added) = g.inject_noise(0.5, 3).unwrap();
        assert_eq!(noisy.num_edges(), 150);
        assert_eq!(added.len(), 50);
        assert!(g.edges().iter().all(|&(u, i)| noisy.has_edge(u, i)));
        assert!(added.iter().all(|&(u, i)| !g.has_edge(u, i)));
        let (_, again) = g.inject_noise(0.5, 3).unwrap();
        assert_eq!(added, again);
    }

    #[test]
    fn noise_dense_path_and_capacity() {
        let g = InteractionGraph::from_edges(2, 2, [(0, 0), (1, 1)]).unwrap();
        let (full, added) = g.inject_noise(1.0, 0).unwrap();
        assert_eq!(added.len(), 2);
        assert_eq!(full.num_edges(), 4);
        let g = InteractionGraph::from_edges(1, 2, [(0, 0)]).unwrap();
        assert!(g.inject_noise(1.0, 0).is_ok());
        let g = InteractionGraph::from_edges(1, 1, [(0, 0)]).unwrap();
        assert!(matches!(
            g.inject_noise(1.0, 0),
            Err(GraphError::NoiseCapacity { .. })
        ));
        assert!(matches!(g.inject_noise(1.5, 0), Err(GraphError::NoiseRatio(_))));
    }

    #[test]
    fn noise_count_rounding() {
        assert_eq!(noise_edge_count(0.07, 100), 7);
        assert_eq!(noise_edge_count(0.071, 100), 8);
        assert_eq!(noise_edge_count(0.0, 100), 0);
    }

    #[test]
    fn sparsity_bucket_assignment() {
        let mut edges = Vec::new();
        for i in 0..7 {
            edges.push((0, i));
        }
        for i in 0..23 {
            edges.push((2, i));
        }
        let g = InteractionGraph::from_edges(3, 30, edges).unwrap();
        let groups = sparsity_groups(&g, &[0, 5, 10, 15, 20]).unwrap();
        assert_eq!(groups.len(), 5);
        assert_eq!(groups[0].users, vec![1]);
        assert_eq!(groups[1].users, vec![0]);
        assert_eq!(groups[1].label(), "[5,10)");
        assert_eq!(groups[4].users, vec![2]);
        assert_eq!(groups[4].label(), "[20,inf)");
        assert!(sparsity_groups(&g, &[0, 5, 5]).is_err());
        assert!(sparsity_groups(&g, &[]).is_err());
    }
}
