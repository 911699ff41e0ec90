//! User to clustered-item graph: user `u` links cluster `k` iff `u` links at
//! least one item assigned to `k`.

use crate::error::{HgclError, Result};
use crate::graph::{normalize_adjacency, BipartiteGraph, NormalizedAdjacency};
use crate::polar::ClusterAssignment;

#[derive(Clone, Debug)]
pub struct HierarchyGraph {
    /// Users by clusters; cluster ids play the role of item ids.
    pub graph: BipartiteGraph,
    pub adj: NormalizedAdjacency,
}

impl HierarchyGraph {
    pub fn num_users(&self) -> usize {
        self.graph.m
    }

    pub fn num_clusters(&self) -> usize {
        self.graph.n
    }
}

pub fn build_user_cluster_graph(g: &BipartiteGraph, a: &ClusterAssignment) -> Result<HierarchyGraph> {
    if a.num_items() != g.n {
        return Err(HgclError::Dimension(format!(
            "assignment covers {} items, graph has {}",
            a.num_items(),
            g.n
        )));
    }
    let c = a.num_clusters();
    let mut pairs = Vec::new();
    let mut seen = vec![usize::MAX; c];
    for u in 0..g.m {
        for &i in g.items_of(u) {
            let k = a.assign[i];
            if seen[k] != u {
                seen[k] = u;
                pairs.push((u, k));
            }
        }
    }
    let graph = BipartiteGraph::from_pairs(g.m, c, &pairs);
    let adj = normalize_adjacency(&graph);
    Ok(HierarchyGraph { graph, adj })
}
