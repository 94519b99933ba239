use std::collections::VecDeque;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::memory::PrototypeMemory;
use crate::{Error, Result};

/// Norm below which a vector counts as zero for cosine similarity.
pub const ZERO_NORM: f64 = 1e-12;

/// Cosine similarity; zero when either vector has (numerically) zero norm.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_with_norms(a, a.dot(&a).sqrt(), b, b.dot(&b).sqrt()))
}

#[inline]
fn cosine_with_norms(a: ArrayView1<'_, f64>, na: f64, b: ArrayView1<'_, f64>, nb: f64) -> f64 {
    if na < ZERO_NORM || nb < ZERO_NORM {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Rows of a matrix with cached norms, for repeated cosine queries.
pub(crate) struct NormedRows<'a> {
    rows: ArrayView2<'a, f64>,
    norms: Vec<f64>,
}

impl<'a> NormedRows<'a> {
    pub(crate) fn new(rows: ArrayView2<'a, f64>) -> Self {
        let norms = rows.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        Self { rows, norms }
    }

    /// Same value as [`cosine_similarity`] of row `i` and row `j` of `other`.
    pub(crate) fn cosine(&self, i: usize, other: &NormedRows<'_>, j: usize) -> f64 {
        cosine_with_norms(
            self.rows.row(i),
            self.norms[i],
            other.rows.row(j),
            other.norms[j],
        )
    }
}

/// A prototype slot in one domain's uploaded memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrototypeId {
    pub domain: usize,
    pub slot: usize,
}

/// Undirected graph over every uploaded prototype. Nodes are stored in
/// ascending `(domain, slot)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    nodes: Vec<PrototypeId>,
    adjacency: Vec<Vec<usize>>,
}

impl SimilarityGraph {
    /// Graph with `sizes[n]` slots in domain `n` and the given edges between
    /// node indices. Same-domain edges and self loops are rejected.
    pub fn from_edges(sizes: &[usize], edges: &[(usize, usize)]) -> Result<Self> {
        let nodes: Vec<PrototypeId> = sizes
            .iter()
            .enumerate()
            .flat_map(|(domain, &m)| (0..m).map(move |slot| PrototypeId { domain, slot }))
            .collect();
        let mut graph = Self {
            adjacency: vec![Vec::new(); nodes.len()],
            nodes,
        };
        for &(a, b) in edges {
            if a >= graph.nodes.len() || b >= graph.nodes.len() {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) refers to a missing node"
                )));
            }
            if graph.nodes[a].domain == graph.nodes[b].domain {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) joins two prototypes of domain {}",
                    graph.nodes[a].domain
                )));
            }
            graph.add_edge(a, b);
        }
        Ok(graph)
    }

    fn add_edge(&mut self, a: usize, b: usize) {
        if !self.adjacency[a].contains(&b) {
            self.adjacency[a].push(b);
            self.adjacency[b].push(a);
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[PrototypeId] {
        &self.nodes
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].contains(&b)
    }

    /// Each undirected edge once, as `(low, high)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Connects every cross-domain pair whose cosine similarity strictly exceeds
/// `delta`.
pub fn build_graph(memories: &[PrototypeMemory], delta: f64) -> Result<SimilarityGraph> {
    let first = memories
        .first()
        .ok_or_else(|| Error::Empty("no memories to align".into()))?;
    let dim = first.dim();
    if let Some(bad) = memories
        .iter()
        .find(|m| m.dim() != dim || m.size() != first.size())
    {
        return Err(Error::ShapeMismatch(format!(
            "memory of {} x {} does not match {} x {dim}",
            bad.size(),
            bad.dim(),
            first.size()
        )));
    }
    let sizes: Vec<usize> = memories.iter().map(PrototypeMemory::size).collect();
    let mut graph = SimilarityGraph::from_edges(&sizes, &[])?;
    let normed: Vec<NormedRows<'_>> = memories
        .iter()
        .map(|m| NormedRows::new(m.vectors.view()))
        .collect();
    let m = first.size();
    for a in 0..graph.node_count() {
        let (da, sa) = (a / m, a % m);
        for b in ((da + 1) * m)..graph.node_count() {
            let (db, sb) = (b / m, b % m);
            if normed[da].cosine(sa, &normed[db], sb) > delta {
                graph.add_edge(a, b);
            }
        }
    }
    Ok(graph)
}

/// Connected components of a similarity graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSet {
    /// Components with at least two members, in discovery order; members in
    /// BFS visiting order.
    pub clusters: Vec<Vec<PrototypeId>>,
    /// Isolated slots of each domain, ascending.
    pub unclustered: Vec<Vec<usize>>,
}

/// BFS components, seeded from nodes in ascending `(domain, slot)` order.
pub fn connected_components(graph: &SimilarityGraph) -> ClusterSet {
    let domains = graph.nodes.iter().map(|n| n.domain + 1).max().unwrap_or(0);
    let mut unclustered = vec![Vec::new(); domains];
    let mut clusters = Vec::new();
    let mut seen = vec![false; graph.node_count()];
    let mut queue = VecDeque::new();
    for start in 0..graph.node_count() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(v) = queue.pop_front() {
            members.push(graph.nodes[v]);
            let mut next: Vec<usize> = graph.adjacency[v]
                .iter()
                .copied()
                .filter(|&u| !seen[u])
                .collect();
            next.sort_unstable();
            for u in next {
                seen[u] = true;
                queue.push_back(u);
            }
        }
        if members.len() == 1 {
            unclustered[members[0].domain].push(members[0].slot);
        } else {
            clusters.push(members);
        }
    }
    ClusterSet {
        clusters,
        unclustered,
    }
}

/// Elementwise mean of the member prototypes.
pub fn cluster_centroid(
    memories: &[PrototypeMemory],
    cluster: &[PrototypeId],
) -> Result<Array1<f64>> {
    let first = cluster
        .first()
        .ok_or_else(|| Error::Empty("centroid of an empty cluster".into()))?;
    let mut sum = Array1::<f64>::zeros(memories[first.domain].dim());
    for id in cluster {
        sum += &memories[id.domain].vectors.row(id.slot);
    }
    Ok(sum / cluster.len() as f64)
}
