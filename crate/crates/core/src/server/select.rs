use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::graph::{cluster_centroid, ClusterSet, NormedRows, PrototypeId};
use crate::memory::{PrototypeMemory, Provenance};
use crate::{Error, Result};

/// `floor(gamma * m)`, the most shared slots a round may produce.
pub fn shared_capacity(gamma: f64, m: usize) -> usize {
    (gamma * m as f64).floor() as usize
}

/// The shared block and what happened to every cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSelection {
    /// `K x D` centroids, largest clusters first.
    pub centroids: Array2<f64>,
    /// Indices into `ClusterSet::clusters` in shared-row order.
    pub selected: Vec<usize>,
    /// Clusters beyond the capacity, in discovery order.
    pub demoted: Vec<usize>,
    /// Per domain: isolated slots plus members of demoted clusters, ascending.
    pub pools: Vec<Vec<usize>>,
}

impl SharedSelection {
    pub fn k(&self) -> usize {
        self.selected.len()
    }
}

/// Keeps the `min(|clusters|, capacity)` largest clusters (ties by discovery
/// order) and pools their centroids. Members of the rest go back to their
/// domains' unclustered pools.
pub fn select_shared(
    memories: &[PrototypeMemory],
    clusters: &ClusterSet,
    capacity: usize,
) -> Result<SharedSelection> {
    let mut order: Vec<usize> = (0..clusters.clusters.len()).collect();
    order.sort_by(|&a, &b| {
        clusters.clusters[b]
            .len()
            .cmp(&clusters.clusters[a].len())
            .then(a.cmp(&b))
    });
    let k = order.len().min(capacity);
    let selected = order[..k].to_vec();
    let mut demoted = order[k..].to_vec();
    demoted.sort_unstable();

    let dim = memories.first().map_or(0, PrototypeMemory::dim);
    let mut centroids = Array2::zeros((k, dim));
    for (row, &c) in selected.iter().enumerate() {
        centroids
            .row_mut(row)
            .assign(&cluster_centroid(memories, &clusters.clusters[c])?);
    }

    let mut pools = clusters.unclustered.clone();
    pools.resize(memories.len(), Vec::new());
    for &c in &demoted {
        for id in &clusters.clusters[c] {
            pools[id.domain].push(id.slot);
        }
    }
    for pool in &mut pools {
        pool.sort_unstable();
    }
    Ok(SharedSelection {
        centroids,
        selected,
        demoted,
        pools,
    })
}

/// `freq / max_freq - max_similarity`, where the utility term is 0 when
/// `max_freq` is 0 and the penalty is 0 when there is nothing to compare with.
pub fn utility_diversity_score(freq: u64, max_freq: u64, max_similarity: Option<f64>) -> f64 {
    let utility = if max_freq == 0 {
        0.0
    } else {
        freq as f64 / max_freq as f64
    };
    utility - max_similarity.unwrap_or(0.0)
}

/// One candidate for a personalized slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrototype {
    pub slot: usize,
    pub freq: u64,
    /// Largest cosine similarity to another domain's unclustered prototype.
    pub max_similarity: Option<f64>,
    pub score: f64,
}

/// Scores every slot of `domain`'s pool against the pooled prototypes of all
/// other domains.
pub fn score_pool(
    memories: &[PrototypeMemory],
    pools: &[Vec<usize>],
    domain: usize,
) -> Vec<ScoredPrototype> {
    let own = &memories[domain];
    let pool = &pools[domain];
    let max_freq = pool.iter().map(|&s| own.usage[s]).max().unwrap_or(0);
    let normed: Vec<NormedRows<'_>> = memories
        .iter()
        .map(|m| NormedRows::new(m.vectors.view()))
        .collect();
    pool.iter()
        .map(|&slot| {
            let mut max_similarity: Option<f64> = None;
            for (other, other_pool) in pools.iter().enumerate() {
                if other == domain {
                    continue;
                }
                for &j in other_pool {
                    let cos = normed[domain].cosine(slot, &normed[other], j);
                    max_similarity = Some(max_similarity.map_or(cos, |m: f64| m.max(cos)));
                }
            }
            let freq = own.usage[slot];
            ScoredPrototype {
                slot,
                freq,
                max_similarity,
                score: utility_diversity_score(freq, max_freq, max_similarity),
            }
        })
        .collect()
}

/// The `quota` best candidates by descending score, ties by slot.
pub fn select_personalized(scored: &[ScoredPrototype], quota: usize) -> Vec<ScoredPrototype> {
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.slot.cmp(&b.slot))
    });
    ranked.truncate(quota);
    ranked
}

/// Slots of `domain` that sit in selected clusters, by descending usage then
/// slot: the first source of deficit fill.
pub fn reusable_slots(
    memory: &PrototypeMemory,
    clusters: &ClusterSet,
    selection: &SharedSelection,
    domain: usize,
) -> Vec<usize> {
    let mut slots: Vec<usize> = selection
        .selected
        .iter()
        .flat_map(|&c| clusters.clusters[c].iter())
        .filter(|id: &&PrototypeId| id.domain == domain)
        .map(|id| id.slot)
        .collect();
    slots.sort_by(|&a, &b| memory.usage[b].cmp(&memory.usage[a]).then(a.cmp(&b)));
    slots
}

/// Stacks shared, personalized and fresh rows into a memory of exactly `m`
/// rows with zero usage.
pub fn assemble_global(
    shared: ArrayView2<'_, f64>,
    personalized: ArrayView2<'_, f64>,
    fresh: ArrayView2<'_, f64>,
    m: usize,
) -> Result<PrototypeMemory> {
    let rows = shared.nrows() + personalized.nrows() + fresh.nrows();
    if rows != m {
        return Err(Error::ShapeMismatch(format!(
            "{} shared + {} personalized + {} fresh rows != memory size {m}",
            shared.nrows(),
            personalized.nrows(),
            fresh.nrows()
        )));
    }
    let dim = shared.ncols();
    if personalized.ncols() != dim || fresh.ncols() != dim {
        return Err(Error::ShapeMismatch(
            "row blocks differ in dimension".into(),
        ));
    }
    let vectors = ndarray::concatenate(ndarray::Axis(0), &[shared, personalized, fresh])
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let mut provenance = vec![Provenance::Shared; shared.nrows()];
    provenance.extend(std::iter::repeat_n(
        Provenance::Personalized,
        personalized.nrows(),
    ));
    provenance.extend(std::iter::repeat_n(Provenance::Fresh, fresh.nrows()));
    PrototypeMemory::from_vectors(vectors, Provenance::Fresh).with_provenance(provenance)
}

/// Index-wise mean of the uploaded memories.
pub fn aggregate_average(memories: &[PrototypeMemory]) -> Result<PrototypeMemory> {
    let first = memories
        .first()
        .ok_or_else(|| Error::Empty("no memories to average".into()))?;
    let mut sum = Array2::<f64>::zeros(first.vectors.dim());
    for m in memories {
        if m.vectors.dim() != sum.dim() {
            return Err(Error::ShapeMismatch(format!(
                "memory of {:?} does not match {:?}",
                m.vectors.dim(),
                sum.dim()
            )));
        }
        sum += &m.vectors;
    }
    let mean = sum / memories.len() as f64;
    Ok(PrototypeMemory::from_vectors(mean, Provenance::Shared))
}

pub(crate) fn gather_rows(memory: &PrototypeMemory, slots: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((slots.len(), memory.dim()));
    for (row, &s) in slots.iter().enumerate() {
        out.row_mut(row).assign(&memory.vectors.row(s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::graph::{connected_components, SimilarityGraph};
    use ndarray::array;

    fn memory(rows: Array2<f64>, usage: Vec<u64>) -> PrototypeMemory {
        let mut mem = PrototypeMemory::from_vectors(rows, Provenance::Fresh);
        mem.usage = usage;
        mem
    }

    #[test]
    fn capacity_values() {
        assert_eq!(shared_capacity(0.95, 256), 243);
        assert_eq!(shared_capacity(0.95, 64), 60);
        assert_eq!(shared_capacity(1.0, 64), 64);
    }

    #[test]
    fn score_examples() {
        assert_eq!(utility_diversity_score(10, 10, Some(0.0)), 1.0);
        assert_eq!(utility_diversity_score(0, 10, Some(1.0)), -1.0);
        assert!((utility_diversity_score(5, 10, Some(0.3)) - 0.2).abs() < 1e-15);
        assert_eq!(utility_diversity_score(0, 0, Some(0.4)), -0.4);
        assert_eq!(utility_diversity_score(3, 6, None), 0.5);
    }

    #[test]
    fn score_is_monotone_in_frequency() {
        for f in 0..20u64 {
            assert!(
                utility_diversity_score(f + 1, 20, Some(0.37))
                    >= utility_diversity_score(f, 20, Some(0.37))
            );
        }
    }

    #[test]
    fn personalized_ranking() {
        let scored: Vec<ScoredPrototype> = [0.2, 0.9, 0.5]
            .iter()
            .enumerate()
            .map(|(slot, &score)| ScoredPrototype {
                slot,
                freq: 0,
                max_similarity: None,
                score,
            })
            .collect();
        let picked: Vec<usize> = select_personalized(&scored, 2)
            .iter()
            .map(|s| s.slot)
            .collect();
        assert_eq!(picked, vec![1, 2]);
        assert!(select_personalized(&scored, 0).is_empty());
        let all: Vec<usize> = select_personalized(&scored, 3)
            .iter()
            .map(|s| s.slot)
            .collect();
        assert_eq!(all, vec![1, 2, 0]);
    }

    #[test]
    fn equal_scores_break_by_slot() {
        let scored: Vec<ScoredPrototype> = [3, 1, 2]
            .iter()
            .map(|&slot| ScoredPrototype {
                slot,
                freq: 0,
                max_similarity: None,
                score: 0.5,
            })
            .collect();
        let picked: Vec<usize> = select_personalized(&scored, 3)
            .iter()
            .map(|s| s.slot)
            .collect();
        assert_eq!(picked, vec![1, 2, 3]);
    }

    #[test]
    fn largest_clusters_win_with_discovery_tie_break() {
        // three domains of 3 slots; clusters of sizes 2, 3, 3 in discovery order
        let g = SimilarityGraph::from_edges(&[3, 3, 3], &[(0, 3), (1, 4), (4, 7), (2, 5), (5, 8)])
            .unwrap();
        let c = connected_components(&g);
        assert_eq!(
            c.clusters.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![2, 3, 3]
        );
        let mems: Vec<PrototypeMemory> =
            (0..3).map(|_| memory(Array2::eye(3), vec![0; 3])).collect();
        let sel = select_shared(&mems, &c, 2).unwrap();
        assert_eq!(sel.selected, vec![1, 2]);
        assert_eq!(sel.demoted, vec![0]);
        assert_eq!(sel.pools, vec![vec![0], vec![0], vec![0]]);
        assert_eq!(sel.centroids.nrows(), 2);
    }

    #[test]
    fn pool_scoring_uses_other_domains_only() {
        let a = memory(array![[1.0, 0.0], [1.0, 0.0]], vec![4, 2]);
        let b = memory(array![[0.0, 1.0], [0.6, 0.8]], vec![0, 0]);
        let pools = vec![vec![0, 1], vec![0, 1]];
        let scored = score_pool(&[a, b], &pools, 0);
        assert_eq!(scored[0].max_similarity, Some(0.6));
        assert!((scored[0].score - 0.4).abs() < 1e-12);
        assert!((scored[1].score - (0.5 - 0.6)).abs() < 1e-12);
    }

    #[test]
    fn assembly_checks_sizes() {
        let s = Array2::<f64>::ones((2, 3));
        let p = Array2::<f64>::zeros((1, 3));
        let f = Array2::<f64>::zeros((0, 3));
        let mem = assemble_global(s.view(), p.view(), f.view(), 3).unwrap();
        assert_eq!(
            mem.provenance,
            vec![
                Provenance::Shared,
                Provenance::Shared,
                Provenance::Personalized
            ]
        );
        assert!(mem.usage.iter().all(|&u| u == 0));
        assert!(assemble_global(s.view(), p.view(), f.view(), 4).is_err());
    }

    #[test]
    fn average_examples() {
        let v = array![[1.0, -2.0], [0.5, 3.0]];
        let a = memory(v.clone(), vec![0; 2]);
        let b = memory(-v.clone(), vec![0; 2]);
        assert_eq!(
            aggregate_average(&[a.clone(), a.clone()]).unwrap().vectors,
            v
        );
        assert!(aggregate_average(&[a, b])
            .unwrap()
            .vectors
            .iter()
            .all(|&x| x == 0.0));
        let three: Vec<PrototypeMemory> = [1.0, 2.0, 6.0]
            .iter()
            .map(|&x| memory(array![[x]], vec![0]))
            .collect();
        assert_eq!(aggregate_average(&three).unwrap().vectors[[0, 0]], 3.0);
    }
}
