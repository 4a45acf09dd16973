//! Directed communication topology.
//!
//! Nodes are 0-based here. Configuration files use 1-based labels, see
//! [`DiGraph::from_one_based`]. The reference plant is not a node: it reaches
//! every agent through the measurement channel instead.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("edge ({from}, {to}) references a node outside 0..{node_count}")]
    IndexOutOfRange {
        from: usize,
        to: usize,
        node_count: usize,
    },
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
}

/// Fixed directed graph. An edge `(j, i)` means agent `i` receives from `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct DiGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    out_degree: Vec<usize>,
}

/// Serialized form: node count plus 1-based edge pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl TryFrom<GraphSpec> for DiGraph {
    type Error = GraphError;
    fn try_from(spec: GraphSpec) -> Result<Self, GraphError> {
        DiGraph::from_one_based(spec.nodes, &spec.edges)
    }
}

impl From<DiGraph> for GraphSpec {
    fn from(g: DiGraph) -> Self {
        GraphSpec {
            nodes: g.node_count,
            edges: g.edges.iter().map(|&(j, i)| (j + 1, i + 1)).collect(),
        }
    }
}

impl DiGraph {
    /// Builds a graph from 0-based `(from, to)` pairs.
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::Empty);
        }
        let mut seen = BTreeSet::new();
        let mut neighbors = vec![Vec::new(); node_count];
        let mut out_degree = vec![0; node_count];
        for &(from, to) in edges {
            if from >= node_count || to >= node_count {
                return Err(GraphError::IndexOutOfRange {
                    from,
                    to,
                    node_count,
                });
            }
            if from == to {
                return Err(GraphError::SelfLoop(from));
            }
            if !seen.insert((from, to)) {
                return Err(GraphError::DuplicateEdge(from, to));
            }
            neighbors[to].push(from);
            out_degree[from] += 1;
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        let edges = seen.into_iter().collect();
        Ok(Self {
            node_count,
            edges,
            neighbors,
            out_degree,
        })
    }

    /// Builds a graph from 1-based `(from, to)` pairs, as written in
    /// configuration files.
    pub fn from_one_based(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut zero = Vec::with_capacity(edges.len());
        for &(j, i) in edges {
            if j == 0 || i == 0 {
                return Err(GraphError::IndexOutOfRange {
                    from: j,
                    to: i,
                    node_count,
                });
            }
            zero.push((j - 1, i - 1));
        }
        Self::new(node_count, &zero)
    }

    /// Ring where agent `i` listens to agent `i - 1` and the first agent
    /// listens to the last.
    pub fn ring(node_count: usize) -> Result<Self, GraphError> {
        if node_count < 2 {
            return Self::new(node_count, &[]);
        }
        let edges: Vec<_> = (0..node_count)
            .map(|i| ((i + node_count - 1) % node_count, i))
            .collect();
        Self::new(node_count, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// In-neighbourhood of `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.out_degree[i]
    }

    /// True iff the underlying undirected graph has a single component.
    pub fn is_weakly_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(j, i) in &self.edges {
            adj[j].push(i);
            adj[i].push(j);
        }
        let mut visited = vec![false; self.node_count];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !visited[w] {
                    visited[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.node_count
    }

    pub fn reversed(&self) -> Self {
        let rev: Vec<_> = self.edges.iter().map(|&(j, i)| (i, j)).collect();
        Self::new(self.node_count, &rev).expect("reversal preserves validity")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_node_ring_degrees() {
        let edges: Vec<_> = (2..=5).map(|i| (i - 1, i)).chain([(5, 1)]).collect();
        let g = DiGraph::from_one_based(5, &edges).unwrap();
        for i in 0..5 {
            assert_eq!(g.in_degree(i), 1);
            assert_eq!(g.out_degree(i), 1);
        }
        assert_eq!(g.neighbors(0), &[4]);
        assert_eq!(g, DiGraph::ring(5).unwrap());
        assert!(g.is_weakly_connected());
    }

    #[test]
    fn singleton() {
        let g = DiGraph::new(1, &[]).unwrap();
        assert_eq!((g.in_degree(0), g.out_degree(0)), (0, 0));
        assert!(g.is_weakly_connected());
    }

    #[test]
    fn degrees_by_enumeration() {
        let g = DiGraph::from_one_based(3, &[(1, 2), (2, 3), (3, 1), (1, 3)]).unwrap();
        let p: Vec<_> = (0..3).map(|i| g.in_degree(i)).collect();
        let q: Vec<_> = (0..3).map(|i| g.out_degree(i)).collect();
        assert_eq!(p, vec![1, 1, 2]);
        assert_eq!(q, vec![2, 1, 1]);
    }

    #[test]
    fn disconnected_graphs() {
        assert!(!DiGraph::new(2, &[]).unwrap().is_weakly_connected());
        assert!(!DiGraph::from_one_based(4, &[(1, 2), (3, 4)])
            .unwrap()
            .is_weakly_connected());
    }

    #[test]
    fn construction_errors() {
        assert_eq!(DiGraph::new(3, &[(1, 1)]), Err(GraphError::SelfLoop(1)));
        assert!(matches!(
            DiGraph::new(3, &[(0, 3)]),
            Err(GraphError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            DiGraph::from_one_based(3, &[(0, 1)]),
            Err(GraphError::IndexOutOfRange { .. })
        ));
        assert_eq!(
            DiGraph::new(3, &[(0, 1), (0, 1)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
        assert_eq!(DiGraph::new(0, &[]), Err(GraphError::Empty));
    }

    #[test]
    fn serde_uses_one_based_labels() {
        let g = DiGraph::ring(3).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, r#"{"nodes":3,"edges":[[1,2],[2,3],[3,1]]}"#);
        let back: DiGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }

    fn arb_graph() -> impl Strategy<Value = DiGraph> {
        (1usize..9).prop_flat_map(|n| {
            proptest::collection::btree_set((0..n, 0..n), 0..(n * n)).prop_map(move |set| {
                let edges: Vec<_> = set.into_iter().filter(|(a, b)| a != b).collect();
                DiGraph::new(n, &edges).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn degree_sums_match_edge_count(g in arb_graph()) {
            let n = g.node_count();
            let p: usize = (0..n).map(|i| g.in_degree(i)).sum();
            let q: usize = (0..n).map(|i| g.out_degree(i)).sum();
            prop_assert_eq!(p, g.edges().len());
            prop_assert_eq!(q, g.edges().len());
        }

        #[test]
        fn weak_connectivity_ignores_direction(g in arb_graph()) {
            prop_assert_eq!(g.is_weakly_connected(), g.reversed().is_weakly_connected());
        }
    }
}
