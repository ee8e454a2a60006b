//! Undirected communication topology between the virtual agents, its
//! Laplacian, and the lifted Laplacian `L ⊗ I_N` used by the consensus
//! update.
//!
//! Node indices are 1-based at the configuration boundary (edge lists in
//! config files) and 0-based everywhere inside the crate.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Built-in topologies plus free-form edge lists. Custom edges are
/// 1-based pairs, as they appear in config files.
#[derive(Debug, Clone, PartialEq)]
pub enum Topology {
    Ring,
    Path,
    Complete,
    Custom(Vec<(usize, usize)>),
}

/// Undirected graph over agents `0..p`, no self-loops, unweighted.
#[derive(Debug, Clone)]
pub struct CommGraph {
    node_count: usize,
    /// Normalized edge set: `(i, j)` with `i < j`, 0-based.
    edges: BTreeSet<(usize, usize)>,
}

impl CommGraph {
    /// Build a graph over `p ≥ 1` nodes.
    pub fn build(topology: &Topology, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidGraph("node count must be at least 1".into()));
        }
        let mut edges = BTreeSet::new();
        match topology {
            Topology::Path => {
                for i in 0..p.saturating_sub(1) {
                    edges.insert((i, i + 1));
                }
            }
            Topology::Ring => {
                for i in 0..p.saturating_sub(1) {
                    edges.insert((i, i + 1));
                }
                if p > 2 {
                    edges.insert((0, p - 1));
                }
            }
            Topology::Complete => {
                for i in 0..p {
                    for j in (i + 1)..p {
                        edges.insert((i, j));
                    }
                }
            }
            Topology::Custom(list) => {
                for &(a, b) in list {
                    if a == 0 || b == 0 || a > p || b > p {
                        return Err(Error::InvalidGraph(format!(
                            "edge ({a}, {b}) out of range 1..={p}"
                        )));
                    }
                    if a == b {
                        return Err(Error::InvalidGraph(format!("self-loop at node {a}")));
                    }
                    let (i, j) = if a < b { (a - 1, b - 1) } else { (b - 1, a - 1) };
                    if !edges.insert((i, j)) {
                        return Err(Error::InvalidGraph(format!("duplicate edge ({a}, {b})")));
                    }
                }
            }
        }
        Ok(CommGraph { node_count: p, edges })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as normalized 0-based pairs `(i, j)`, `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let key = if i < j { (i, j) } else { (j, i) };
        self.edges.contains(&key)
    }

    /// 0-based neighbor list of node `i`, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &(a, b) in &self.edges {
            if a == i {
                out.push(b);
            } else if b == i {
                out.push(a);
            }
        }
        out.sort_unstable();
        out
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == i || b == i).count()
    }

    /// Graph Laplacian: degree on the diagonal, -1 per edge.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let p = self.node_count;
        let mut l = DMatrix::zeros(p, p);
        for &(i, j) in &self.edges {
            l[(i, j)] = -1.0;
            l[(j, i)] = -1.0;
            l[(i, i)] += 1.0;
            l[(j, j)] += 1.0;
        }
        l
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        let p = self.node_count;
        let mut seen = vec![false; p];
        let mut queue = std::collections::VecDeque::new();
        seen[0] = true;
        queue.push_back(0);
        while let Some(v) = queue.pop_front() {
            for w in self.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Kronecker lift `L ⊗ I_N`.
pub fn lifted_laplacian(laplacian: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    laplacian.kronecker(&DMatrix::identity(n, n))
}
