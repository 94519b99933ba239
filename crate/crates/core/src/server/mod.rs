//! Server-side memory update.
//!
//! Uploaded memories are aligned by a cross-domain similarity graph. Its
//! connected components become clusters; the largest ones are pooled into a
//! shared block that every domain receives, and each domain's memory is
//! completed with its own unclustered prototypes ranked by usage and
//! distinctiveness.

pub(crate) mod graph;
mod select;

pub use graph::{
    build_graph, cluster_centroid, connected_components, cosine_similarity, ClusterSet,
    PrototypeId, SimilarityGraph, ZERO_NORM,
};
pub use select::{
    aggregate_average, assemble_global, reusable_slots, score_pool, select_personalized,
    select_shared, shared_capacity, utility_diversity_score, ScoredPrototype, SharedSelection,
};

use serde::{Deserialize, Serialize};

use crate::memory::{sample_rows, PrototypeMemory};
use crate::seed::{stream, Purpose};
use crate::Result;
use select::gather_rows;

/// Server hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Fraction of the memory that may be shared.
    pub gamma: f64,
    /// Edge threshold on cosine similarity.
    pub delta: f64,
    /// Give every slot to the shared block (no personalized quota).
    pub global_only: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            delta: 0.7,
            global_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: usize,
    pub members: Vec<PrototypeId>,
    pub cardinality: usize,
    pub centroid: Vec<f64>,
    /// Shared row index when selected.
    pub shared_row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainComposition {
    pub domain: usize,
    pub personalized: usize,
    /// Personalized rows taken from the domain's own members of shared clusters.
    pub reused: usize,
    pub fresh: usize,
    /// Every pool candidate with its score.
    pub scores: Vec<ScoredPrototype>,
    /// Source slots of the personalized rows, in row order.
    pub personalized_slots: Vec<usize>,
    pub provenance: Vec<String>,
}

/// Inspection record of one server update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundArtifact {
    pub capacity: usize,
    pub k: usize,
    pub edges: usize,
    pub clusters: Vec<ClusterRecord>,
    pub domains: Vec<DomainComposition>,
}

/// New per-domain memories plus the record of how they were built.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentOutcome {
    pub memories: Vec<PrototypeMemory>,
    pub artifact: RoundArtifact,
}

/// One cross-domain update. Fresh rows for deficit fill are drawn from the
/// `(seed, domain, round)` server stream.
pub fn align_memories(
    uploads: &[PrototypeMemory],
    config: &AlignmentConfig,
    seed: u64,
    round: u64,
) -> Result<AlignmentOutcome> {
    let graph = build_graph(uploads, config.delta)?;
    let clusters = connected_components(&graph);
    let m = uploads[0].size();
    let dim = uploads[0].dim();
    let capacity = if config.global_only {
        m
    } else {
        shared_capacity(config.gamma, m)
    };
    let selection = select_shared(uploads, &clusters, capacity)?;
    let k = selection.k();
    let quota = if config.global_only { 0 } else { m - k };

    let mut memories = Vec::with_capacity(uploads.len());
    let mut domains = Vec::with_capacity(uploads.len());
    for (n, upload) in uploads.iter().enumerate() {
        let scores = score_pool(uploads, &selection.pools, n);
        let mut slots: Vec<usize> = select_personalized(&scores, quota)
            .iter()
            .map(|s| s.slot)
            .collect();
        let from_pool = slots.len();
        if from_pool < quota {
            let reuse = reusable_slots(upload, &clusters, &selection, n);
            slots.extend(reuse.into_iter().take(quota - from_pool));
        }
        let fresh_count = m - k - slots.len();
        let mut rng = stream(seed, Purpose::ServerFill, n as u64, round);
        let fresh = sample_rows(fresh_count, dim, &mut rng);
        let personalized = gather_rows(upload, &slots);
        let memory = assemble_global(
            selection.centroids.view(),
            personalized.view(),
            fresh.view(),
            m,
        )?
        .with_domain(upload.domain_id.clone());
        domains.push(DomainComposition {
            domain: n,
            personalized: slots.len(),
            reused: slots.len() - from_pool,
            fresh: fresh_count,
            scores,
            personalized_slots: slots,
            provenance: memory
                .provenance
                .iter()
                .map(|p| p.as_str().to_string())
                .collect(),
        });
        memories.push(memory);
    }

    let mut shared_row = vec![None; clusters.clusters.len()];
    for (row, &c) in selection.selected.iter().enumerate() {
        shared_row[c] = Some(row);
    }
    let records = clusters
        .clusters
        .iter()
        .enumerate()
        .map(|(id, members)| {
            Ok(ClusterRecord {
                id,
                members: members.clone(),
                cardinality: members.len(),
                centroid: cluster_centroid(uploads, members)?.to_vec(),
                shared_row: shared_row[id],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AlignmentOutcome {
        memories,
        artifact: RoundArtifact {
            capacity,
            k,
            edges: graph.edge_count(),
            clusters: records,
            domains,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Provenance;
    use ndarray::{array, Array2};

    fn memory(rows: Array2<f64>, usage: Vec<u64>) -> PrototypeMemory {
        let mut mem = PrototypeMemory::from_vectors(rows, Provenance::Fresh);
        mem.usage = usage;
        mem
    }

    #[test]
    fn single_domain_reorders_own_memory_by_score() {
        let a = memory(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![1, 5, 3]);
        let out =
            align_memories(std::slice::from_ref(&a), &AlignmentConfig::default(), 0, 0).unwrap();
        assert_eq!(out.artifact.k, 0);
        let mem = &out.memories[0];
        assert_eq!(mem.size(), 3);
        assert_eq!(mem.vectors, array![[0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]);
        assert!(mem
            .provenance
            .iter()
            .all(|&p| p == Provenance::Personalized));
        assert!(mem.usage.iter().all(|&u| u == 0));
    }

    #[test]
    fn no_edges_gives_pure_reordering() {
        let a = memory(
            array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
            vec![0, 2],
        );
        let b = memory(
            array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            vec![7, 1],
        );
        let out = align_memories(&[a, b], &AlignmentConfig::default(), 0, 0).unwrap();
        assert_eq!(out.artifact.k, 0);
        assert_eq!(
            out.memories[0].vectors,
            array![[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]
        );
        assert_eq!(
            out.memories[1].vectors,
            array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
        );
    }

    #[test]
    fn identical_uploads_share_rows_and_demote_past_capacity() {
        let p = array![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, -1.0, 0.0]
        ];
        let a = memory(p.clone(), vec![4, 3, 2, 1]);
        let b = memory(p.clone(), vec![1, 1, 1, 1]);
        let out = align_memories(&[a, b], &AlignmentConfig::default(), 0, 0).unwrap();
        // capacity floor(0.95 * 4) = 3 of the 4 two-member clusters
        assert_eq!(out.artifact.k, 3);
        assert_eq!(
            out.memories[0].vectors.slice(ndarray::s![..3, ..]),
            p.slice(ndarray::s![..3, ..])
        );
        assert_eq!(
            out.memories[0].vectors.slice(ndarray::s![..3, ..]),
            out.memories[1].vectors.slice(ndarray::s![..3, ..])
        );
        // the demoted cluster returns slot 3 to both pools
        assert_eq!(out.artifact.domains[0].personalized_slots, vec![3]);
        assert_eq!(out.artifact.domains[0].reused, 0);
        assert_eq!(out.memories[0].vectors, p);
    }

    #[test]
    fn deficit_reuses_own_clustered_rows_by_usage() {
        // a0 and a1 both link to b0, so domain a has nothing left unclustered
        let a = memory(array![[1.0, 0.5], [1.0, -0.5]], vec![1, 5]);
        let b = memory(array![[1.0, 0.0], [0.0, 1.0]], vec![2, 2]);
        let config = AlignmentConfig {
            gamma: 0.5,
            ..Default::default()
        };
        let out = align_memories(&[a, b], &config, 0, 0).unwrap();
        assert_eq!(out.artifact.k, 1);
        assert_eq!(out.artifact.clusters[0].cardinality, 3);
        let da = &out.artifact.domains[0];
        assert_eq!(
            (da.personalized_slots.clone(), da.reused, da.fresh),
            (vec![1], 1, 0)
        );
        assert_eq!(out.memories[0].vectors.row(1), array![1.0, -0.5]);
        assert_eq!(out.artifact.domains[1].personalized_slots, vec![1]);
        assert_eq!(out.artifact.domains[1].reused, 0);
    }

    #[test]
    fn global_only_fills_with_fresh_rows() {
        let a = memory(array![[1.0, 0.0], [0.0, 1.0]], vec![1, 1]);
        let b = memory(array![[1.0, 0.1], [-1.0, 0.0]], vec![1, 1]);
        let config = AlignmentConfig {
            global_only: true,
            ..Default::default()
        };
        let out = align_memories(&[a, b], &config, 3, 1).unwrap();
        assert_eq!(out.artifact.k, 1);
        for (n, mem) in out.memories.iter().enumerate() {
            assert_eq!(mem.provenance, vec![Provenance::Shared, Provenance::Fresh]);
            assert_eq!(out.artifact.domains[n].fresh, 1);
        }
        let again = align_memories(
            &[
                memory(array![[1.0, 0.0], [0.0, 1.0]], vec![1, 1]),
                memory(array![[1.0, 0.1], [-1.0, 0.0]], vec![1, 1]),
            ],
            &config,
            3,
            1,
        )
        .unwrap();
        assert_eq!(out, again);
    }
}
