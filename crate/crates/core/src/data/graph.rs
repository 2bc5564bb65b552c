use alloc::collections::BTreeSet;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sparse::Csr;

/// Static follower graph over users `0..num_users`.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialGraph {
    num_users: usize,
    directed: bool,
    edges: Vec<(usize, usize)>,
    adjacency: Arc<Csr>,
}

impl SocialGraph {
    /// Deduplicates edges and drops self-loops (the normalization adds its
    /// own). Undirected edges are stored as `(min, max)`.
    pub fn new(num_users: usize, edges: &[(usize, usize)], directed: bool) -> Result<Self> {
        let mut set = BTreeSet::new();
        for &(u, v) in edges {
            if u >= num_users || v >= num_users {
                return Err(Error::InvalidData(format!(
                    "edge ({u}, {v}) references a user outside 0..{num_users}"
                )));
            }
            if u == v {
                continue;
            }
            set.insert(if directed { (u, v) } else { (u.min(v), u.max(v)) });
        }
        let edges: Vec<_> = set.into_iter().collect();
        let adjacency = Arc::new(normalized_adjacency(num_users, &edges, directed)?);
        Ok(Self {
            num_users,
            directed,
            edges,
            adjacency,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `D^{-1/2} (A + I) D^{-1/2}`; for directed graphs the left factor uses
    /// out-degrees and the right factor in-degrees.
    pub fn normalized_adjacency(&self) -> &Arc<Csr> {
        &self.adjacency
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_users];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_users];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            if !self.directed {
                adj[v].push(u);
            }
        }
        adj
    }
}

fn normalized_adjacency(n: usize, edges: &[(usize, usize)], directed: bool) -> Result<Csr> {
    let mut triplets = Vec::with_capacity(2 * edges.len() + n);
    for i in 0..n {
        triplets.push((i, i, 1.0));
    }
    for &(u, v) in edges {
        triplets.push((u, v, 1.0));
        if !directed {
            triplets.push((v, u, 1.0));
        }
    }
    let mut row_deg = vec![0.0f64; n];
    let mut col_deg = vec![0.0f64; n];
    for &(r, c, w) in &triplets {
        row_deg[r] += w;
        col_deg[c] += w;
    }
    for t in &mut triplets {
        t.2 /= libm::sqrt(row_deg[t.0]) * libm::sqrt(col_deg[t.1]);
    }
    Csr::from_triplets(n, n, &triplets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_edges_collapse() {
        let g = SocialGraph::new(8, &[(3, 7), (3, 7), (7, 3)], false).unwrap();
        assert_eq!(g.edges(), &[(3, 7)]);
    }

    #[test]
    fn isolated_node_has_unit_self_loop() {
        let g = SocialGraph::new(1, &[], false).unwrap();
        assert_eq!(g.normalized_adjacency().get(0, 0), 1.0);
    }

    #[test]
    fn normalized_adjacency_is_symmetric() {
        let g = SocialGraph::new(4, &[(0, 1), (1, 2), (1, 3)], false).unwrap();
        let a = g.normalized_adjacency();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
        // deg(0) = 2, deg(1) = 4 with self-loops.
        assert!((a.get(0, 1) - 1.0 / libm::sqrt(8.0)).abs() < 1e-15);
    }

    #[test]
    fn unknown_endpoint_rejected() {
        assert!(SocialGraph::new(2, &[(0, 2)], false).is_err());
    }
}
