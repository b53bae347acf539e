//! Partitioning of the road graph into internally connected sub-networks.
//!
//! Two methods are provided. [`hierarchical_partition`] runs agglomerative
//! clustering over per-road feature vectors, restricted so that only
//! adjacent clusters may merge — every cluster it returns induces a
//! connected subgraph. [`spectral_partition`] is the comparison baseline:
//! normalized spectral clustering on an adjacency-masked similarity matrix,
//! with no connectivity guarantee.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::graph::{ClusterSet, RoadGraph};

/// Additive constant inside the similarity denominator, keeping it nonzero
/// for identical series.
pub const SIMILARITY_REGULARIZER: f64 = 0.1;

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 300;
const KMEANS_SEED: u64 = 13;

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("k = {k} is below the feasible minimum of {minimum} clusters")]
    KTooSmall { k: usize, minimum: usize },
    #[error("k = {k} exceeds the {roads} roads available")]
    KTooLarge { k: usize, roads: usize },
    #[error("series lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("road {road_id} has no neighbors, so its similarity row is zero")]
    IsolatedRoad { road_id: String },
    #[error("no feature vector for road {road_id}")]
    MissingFeature { road_id: String },
    #[error("feature table covers road {road_id}, which is not in the graph")]
    UnknownRoad { road_id: String },
    #[error("feature vector for {road_id} has length {found}, expected {expected}")]
    MixedDimensions {
        road_id: String,
        expected: usize,
        found: usize,
    },
    #[error("feature vector for {road_id} contains a non-finite value")]
    NonFiniteFeature { road_id: String },
    #[error("feature vector for {road_id} is empty")]
    EmptyFeature { road_id: String },
    #[error("duplicate feature row for road {road_id}")]
    DuplicateRoad { road_id: String },
}

/// Per-road real vectors of uniform dimension: encoder features, raw daily
/// series, or anything else a distance makes sense over.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(
        rows: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, ClusteringError> {
        let mut dim = None;
        let mut vectors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (road_id, values) in rows {
            if values.is_empty() {
                return Err(ClusteringError::EmptyFeature { road_id });
            }
            let expected = *dim.get_or_insert(values.len());
            if values.len() != expected {
                return Err(ClusteringError::MixedDimensions {
                    road_id,
                    expected,
                    found: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ClusteringError::NonFiniteFeature { road_id });
            }
            if vectors.contains_key(&road_id) {
                return Err(ClusteringError::DuplicateRoad { road_id });
            }
            vectors.insert(road_id, values);
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, road_id: &str) -> Option<&[f64]> {
        self.vectors.get(road_id).map(Vec::as_slice)
    }

    pub fn roads(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    /// Vectors in graph index order; errors unless the table's road set
    /// equals the graph's road set exactly.
    fn aligned(&self, graph: &RoadGraph) -> Result<Vec<&[f64]>, ClusteringError> {
        for road in self.vectors.keys() {
            if graph.index_of(road).is_none() {
                return Err(ClusteringError::UnknownRoad {
                    road_id: road.clone(),
                });
            }
        }
        graph
            .roads()
            .iter()
            .map(|road| {
                self.get(road).ok_or_else(|| ClusteringError::MissingFeature {
                    road_id: road.clone(),
                })
            })
            .collect()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Mean Euclidean distance over all cross pairs of two non-empty clusters.
pub fn linkage_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert!(
        !a.is_empty() && !b.is_empty(),
        "linkage distance needs non-empty clusters"
    );
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += euclidean(x, y);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Similarity between two equal-length speed series: `1/sqrt(d² + 0.1)` when
/// the roads are adjacent, zero otherwise.
pub fn similarity(
    series_p: &[f64],
    series_q: &[f64],
    adjacent: bool,
) -> Result<f64, ClusteringError> {
    if series_p.len() != series_q.len() {
        return Err(ClusteringError::LengthMismatch {
            left: series_p.len(),
            right: series_q.len(),
        });
    }
    if !adjacent {
        return Ok(0.0);
    }
    Ok(1.0 / (squared_distance(series_p, series_q) + SIMILARITY_REGULARIZER).sqrt())
}

/// Symmetric, non-negative, zero-diagonal matrix whose off-diagonal zero
/// pattern equals the graph's non-adjacency pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn build(graph: &RoadGraph, series: &FeatureTable) -> Result<Self, ClusteringError> {
        let rows = series.aligned(graph)?;
        let n = graph.len();
        let mut data = vec![0.0; n * n];
        for (i, j) in graph.edges() {
            let s = similarity(rows[i], rows[j], true)?;
            data[i * n + j] = s;
            data[j * n + i] = s;
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.data[i * self.n..(i + 1) * self.n].iter().sum()
    }
}

/// One agglomerative merge: `cluster_a` and `cluster_b` identify the merged
/// clusters by the smallest road index each contains (`cluster_a <
/// cluster_b`), `size` is the merged cluster's road count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeStep {
    pub cluster_a: usize,
    pub cluster_b: usize,
    pub linkage_distance: f64,
    pub size: usize,
}

/// The merge sequence of one [`hierarchical_partition`] run: exactly
/// `|V| - k` steps, distances recorded as computed (inversions are possible
/// because the adjacency constraint can postpone cheap merges).
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct MergeTrace {
    pub steps: Vec<MergeStep>,
}

/// Agglomerative average-linkage clustering restricted to adjacent merges.
///
/// Starts from singletons and repeatedly merges the adjacent pair of
/// clusters with the smallest mean cross-pair Euclidean distance, stopping
/// at `k` clusters. Ties are broken by the smallest road index of the first
/// cluster, then of the second. Every returned cluster induces exactly one
/// connected component of the graph.
pub fn hierarchical_partition(
    graph: &RoadGraph,
    features: &FeatureTable,
    k: usize,
) -> Result<(ClusterSet, MergeTrace), ClusteringError> {
    let n = graph.len();
    if k > n {
        return Err(ClusteringError::KTooLarge { k, roads: n });
    }
    let minimum = graph.component_count().max(1);
    if k < minimum {
        return Err(ClusteringError::KTooSmall { k, minimum });
    }
    let rows = features.aligned(graph)?;

    let mut cross_sum = vec![0.0f64; n * n];
    cross_sum
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            for (j, out) in row.iter_mut().enumerate().skip(i + 1) {
                *out = euclidean(rows[i], rows[j]);
            }
        });
    for i in 0..n {
        for j in (i + 1)..n {
            cross_sum[j * n + i] = cross_sum[i * n + j];
        }
    }

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut neighbors: Vec<BTreeSet<usize>> = (0..n)
        .map(|i| graph.neighbors(i).iter().copied().collect())
        .collect();
    let mut steps = Vec::with_capacity(n - k);

    let mut clusters = n;
    while clusters > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if !active[a] {
                continue;
            }
            for &b in neighbors[a].range(a + 1..) {
                let linkage = cross_sum[a * n + b] / (size[a] * size[b]) as f64;
                if best.map_or(true, |(d, _, _)| linkage < d) {
                    best = Some((linkage, a, b));
                }
            }
        }
        let (linkage, a, b) =
            best.expect("a graph with more clusters than components has an adjacent pair");

        active[b] = false;
        size[a] += size[b];
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        steps.push(MergeStep {
            cluster_a: a,
            cluster_b: b,
            linkage_distance: linkage,
            size: size[a],
        });

        for c in 0..n {
            if c == a || c == b || !active[c] {
                continue;
            }
            cross_sum[a * n + c] += cross_sum[b * n + c];
            cross_sum[c * n + a] = cross_sum[a * n + c];
        }

        let absorbed = std::mem::take(&mut neighbors[b]);
        neighbors[a].remove(&b);
        for c in absorbed {
            if c == a {
                continue;
            }
            neighbors[c].remove(&b);
            neighbors[c].insert(a);
            neighbors[a].insert(c);
        }
        clusters -= 1;
    }

    let mut labels = vec![0usize; n];
    for (slot, cluster) in members.iter().enumerate() {
        if active[slot] {
            for &road in cluster {
                labels[road] = slot;
            }
        }
    }
    let set = ClusterSet::from_labels(graph.roads(), &labels)
        .expect("every road carries the label of exactly one active cluster");
    Ok((set, MergeTrace { steps }))
}

/// Normalized spectral clustering over the adjacency-masked similarity
/// matrix.
///
/// Builds `L = I - D^(-1/2) W D^(-1/2)`, embeds each road by the
/// eigenvectors of the `k` smallest eigenvalues (row-normalized), and runs
/// seeded k-means on the embedding. Clusters are NOT forced to be connected.
pub fn spectral_partition(
    graph: &RoadGraph,
    series: &FeatureTable,
    k: usize,
) -> Result<ClusterSet, ClusteringError> {
    let n = graph.len();
    if k > n {
        return Err(ClusteringError::KTooLarge { k, roads: n });
    }
    if k < 1 {
        return Err(ClusteringError::KTooSmall { k, minimum: 1 });
    }
    let w = SimilarityMatrix::build(graph, series)?;

    let mut inv_sqrt_degree = vec![0.0f64; n];
    for i in 0..n {
        let d = w.degree(i);
        if d <= 0.0 {
            return Err(ClusteringError::IsolatedRoad {
                road_id: graph.road(i).to_string(),
            });
        }
        inv_sqrt_degree[i] = 1.0 / d.sqrt();
    }

    let laplacian = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            -inv_sqrt_degree[i] * w.get(i, j) * inv_sqrt_degree[j]
        }
    });
    let eigen = SymmetricEigen::new(laplacian);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[a]
            .partial_cmp(&eigen.eigenvalues[b])
            .expect("eigenvalues of a finite symmetric matrix are finite")
    });

    let mut points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            order[..k]
                .iter()
                .map(|&col| eigen.eigenvectors[(i, col)])
                .collect()
        })
        .collect();
    for row in &mut points {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    let (labels, _) = kmeans(&points, k);
    Ok(ClusterSet::from_labels(graph.roads(), &labels)
        .expect("k-means labels cover every road"))
}

/// Lloyd's algorithm with k-means++ seeding, a fixed iteration cap, and a
/// fixed number of restarts; the restart with the smallest inertia wins.
/// Fully deterministic: seeding draws from a fixed per-restart seed, nearest
/// ties go to the lowest center index, and emptied clusters deterministically
/// steal the farthest point from a cluster that can spare one.
fn kmeans(points: &[Vec<f64>], k: usize) -> (Vec<usize>, f64) {
    let n = points.len();
    assert!(k >= 1 && k <= n, "k-means needs 1 <= k <= point count");
    let dim = points[0].len();

    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(KMEANS_SEED.wrapping_add(restart as u64));
        let mut centers = seed_centers(points, k, &mut rng);
        let mut assign = vec![0usize; n];

        for _ in 0..KMEANS_MAX_ITERS {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut nearest = 0;
                let mut nearest_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = squared_distance(p, center);
                    if d < nearest_d {
                        nearest_d = d;
                        nearest = c;
                    }
                }
                if assign[i] != nearest {
                    assign[i] = nearest;
                    changed = true;
                }
            }

            let mut sums = vec![vec![0.0f64; dim]; k];
            let mut counts = vec![0usize; k];
            for (i, p) in points.iter().enumerate() {
                counts[assign[i]] += 1;
                for (s, v) in sums[assign[i]].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    continue;
                }
                let mut steal = None;
                let mut steal_d = -1.0;
                for (i, p) in points.iter().enumerate() {
                    if counts[assign[i]] <= 1 {
                        continue;
                    }
                    let d = squared_distance(p, &centers[assign[i]]);
                    if d > steal_d {
                        steal_d = d;
                        steal = Some(i);
                    }
                }
                let i = steal.expect("with n >= k some cluster holds at least two points");
                let old = assign[i];
                counts[old] -= 1;
                for (s, v) in sums[old].iter_mut().zip(&points[i]) {
                    *s -= v;
                }
                assign[i] = c;
                counts[c] = 1;
                sums[c].copy_from_slice(&points[i]);
                changed = true;
            }
            for c in 0..k {
                for (center, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *center = s / counts[c] as f64;
                }
            }
            if !changed {
                break;
            }
        }

        let inertia: f64 = points
            .iter()
            .enumerate()
            .map(|(i, p)| squared_distance(p, &centers[assign[i]]))
            .sum();
        if best.as_ref().map_or(true, |(d, _)| inertia < *d) {
            best = Some((inertia, assign));
        }
    }

    let (inertia, assign) = best.expect("at least one restart ran");
    (assign, inertia)
}

fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)].clone());
    let mut nearest_d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = nearest_d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in nearest_d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[idx].clone());
        let newest = centers.last().expect("just pushed");
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, newest);
            if d < nearest_d2[i] {
                nearest_d2[i] = d;
            }
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn roads(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i:02}")).collect()
    }

    fn graph_from(n: usize, edges: &[(usize, usize)]) -> RoadGraph {
        let ids = roads(n);
        let edge_ids: Vec<(String, String)> = edges
            .iter()
            .map(|&(a, b)| (ids[a].clone(), ids[b].clone()))
            .collect();
        build_graph(&ids, &edge_ids).unwrap()
    }

    fn table_from(vectors: &[Vec<f64>]) -> FeatureTable {
        FeatureTable::new(
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("r{i:02}"), v.clone())),
        )
        .unwrap()
    }

    fn member_sets(set: &ClusterSet) -> BTreeSet<BTreeSet<String>> {
        set.members()
            .into_iter()
            .map(|m| m.into_iter().collect())
            .collect()
    }

    /// Every partition of `0..n` into exactly `k` parts where each part is
    /// one connected component, enumerated via restricted growth strings.
    fn connected_partitions(graph: &RoadGraph, k: usize) -> Vec<Vec<Vec<usize>>> {
        let n = graph.len();
        let mut out = Vec::new();
        let mut labels = vec![0usize; n];
        fn recurse(
            graph: &RoadGraph,
            k: usize,
            labels: &mut Vec<usize>,
            pos: usize,
            max_used: usize,
            out: &mut Vec<Vec<Vec<usize>>>,
        ) {
            let n = labels.len();
            if pos == n {
                if max_used + 1 != k {
                    return;
                }
                let mut parts = vec![Vec::new(); k];
                for (road, &l) in labels.iter().enumerate() {
                    parts[l].push(road);
                }
                if parts
                    .iter()
                    .all(|p| graph.connected_components(p).len() == 1)
                {
                    out.push(parts);
                }
                return;
            }
            let cap = (max_used + 1).min(k - 1);
            for l in 0..=cap {
                labels[pos] = l;
                recurse(graph, k, labels, pos + 1, max_used.max(l), out);
            }
        }
        recurse(graph, k, &mut labels, 1, 0, &mut out);
        out
    }

    /// Mean Euclidean distance over all within-cluster pairs of the whole
    /// partition; zero when no cluster has two members.
    fn within_cost(parts: &[Vec<usize>], rows: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for p in parts {
            for (i, &a) in p.iter().enumerate() {
                for &b in &p[i + 1..] {
                    total += euclidean(&rows[a], &rows[b]);
                    pairs += 1;
                }
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }

    fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(0.0..100.0)).collect())
            .collect()
    }

    #[test]
    fn path_with_one_outlier_splits_before_the_outlier() {
        let graph = graph_from(3, &[(0, 1), (1, 2)]);
        let features = table_from(&[vec![0.0], vec![0.0], vec![10.0]]);
        let (set, trace) = hierarchical_partition(&graph, &features, 2).unwrap();

        let expected: BTreeSet<BTreeSet<String>> = [
            ["r00".to_string(), "r01".to_string()]
                .into_iter()
                .collect(),
            ["r02".to_string()].into_iter().collect(),
        ]
        .into_iter()
        .collect();
        assert_eq!(member_sets(&set), expected);
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].cluster_a, 0);
        assert_eq!(trace.steps[0].cluster_b, 1);
        assert_eq!(trace.steps[0].linkage_distance, 0.0);
        assert_eq!(trace.steps[0].size, 2);

        let rows = vec![vec![0.0], vec![0.0], vec![10.0]];
        let brute = connected_partitions(&graph, 2)
            .into_iter()
            .min_by(|a, b| {
                within_cost(a, &rows)
                    .partial_cmp(&within_cost(b, &rows))
                    .unwrap()
            })
            .unwrap();
        let brute_sets: BTreeSet<BTreeSet<String>> = brute
            .into_iter()
            .map(|p| p.into_iter().map(|i| format!("r{i:02}")).collect())
            .collect();
        assert_eq!(member_sets(&set), brute_sets);
    }

    #[test]
    fn k_equal_to_road_count_returns_singletons() {
        let graph = graph_from(4, &[(0, 1), (1, 2), (2, 3)]);
        let features = table_from(&random_rows(4, 2, 7));
        let (set, trace) = hierarchical_partition(&graph, &features, 4).unwrap();
        assert_eq!(set.k(), 4);
        assert!(trace.steps.is_empty());
        assert!(set.members().iter().all(|m| m.len() == 1));
    }

    #[test]
    fn k_one_on_a_connected_graph_returns_everything() {
        let graph = graph_from(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let features = table_from(&random_rows(5, 3, 11));
        let (set, trace) = hierarchical_partition(&graph, &features, 1).unwrap();
        assert_eq!(set.k(), 1);
        assert_eq!(set.members()[0].len(), 5);
        assert_eq!(trace.steps.len(), 4);
    }

    #[test]
    fn infeasible_k_is_rejected_in_both_directions() {
        let graph = graph_from(4, &[(0, 1), (2, 3)]);
        let features = table_from(&random_rows(4, 2, 3));
        assert!(matches!(
            hierarchical_partition(&graph, &features, 1),
            Err(ClusteringError::KTooSmall { k: 1, minimum: 2 })
        ));
        assert!(matches!(
            hierarchical_partition(&graph, &features, 5),
            Err(ClusteringError::KTooLarge { k: 5, roads: 4 })
        ));
    }

    #[test]
    fn feature_table_rejects_malformed_rows() {
        assert!(matches!(
            FeatureTable::new([("a".to_string(), vec![])]),
            Err(ClusteringError::EmptyFeature { .. })
        ));
        assert!(matches!(
            FeatureTable::new([
                ("a".to_string(), vec![1.0, 2.0]),
                ("b".to_string(), vec![1.0]),
            ]),
            Err(ClusteringError::MixedDimensions { .. })
        ));
        assert!(matches!(
            FeatureTable::new([("a".to_string(), vec![f64::NAN])]),
            Err(ClusteringError::NonFiniteFeature { .. })
        ));
        assert!(matches!(
            FeatureTable::new([
                ("a".to_string(), vec![1.0]),
                ("a".to_string(), vec![2.0]),
            ]),
            Err(ClusteringError::DuplicateRoad { .. })
        ));
    }

    #[test]
    fn partition_requires_exact_road_coverage() {
        let graph = graph_from(3, &[(0, 1), (1, 2)]);
        let missing = FeatureTable::new([
            ("r00".to_string(), vec![1.0]),
            ("r01".to_string(), vec![2.0]),
        ])
        .unwrap();
        assert!(matches!(
            hierarchical_partition(&graph, &missing, 2),
            Err(ClusteringError::MissingFeature { .. })
        ));
        let extra = FeatureTable::new([
            ("r00".to_string(), vec![1.0]),
            ("r01".to_string(), vec![2.0]),
            ("r02".to_string(), vec![3.0]),
            ("zz".to_string(), vec![4.0]),
        ])
        .unwrap();
        assert!(matches!(
            hierarchical_partition(&graph, &extra, 2),
            Err(ClusteringError::UnknownRoad { .. })
        ));
    }

    #[test]
    fn similarity_matches_hand_computed_values() {
        let series = vec![5.0, 6.0, 7.0];
        let s = similarity(&series, &series, true).unwrap();
        assert!((s - 1.0 / 0.1f64.sqrt()).abs() < 1e-12);
        assert!((s - 3.16227766).abs() < 1e-7);

        let s = similarity(&[0.0, 0.0], &[3.0, 4.0], true).unwrap();
        assert!((s - 1.0 / 25.1f64.sqrt()).abs() < 1e-12);
        assert!((s - 0.19960).abs() < 1e-5);

        assert_eq!(similarity(&[1.0], &[9.0], false).unwrap(), 0.0);
        assert!(matches!(
            similarity(&[1.0], &[1.0, 2.0], true),
            Err(ClusteringError::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn linkage_distance_matches_hand_computed_values() {
        assert_eq!(linkage_distance(&[vec![0.0]], &[vec![3.0]]), 3.0);
        assert_eq!(
            linkage_distance(&[vec![0.0], vec![2.0]], &[vec![4.0]]),
            3.0
        );
        assert_eq!(linkage_distance(&[vec![5.0, 5.0]], &[vec![5.0, 5.0]]), 0.0);
    }

    #[test]
    fn spectral_separates_two_components() {
        let graph = graph_from(4, &[(0, 1), (2, 3)]);
        let features = table_from(&[
            vec![10.0, 10.0],
            vec![10.5, 10.5],
            vec![50.0, 50.0],
            vec![50.5, 50.5],
        ]);
        let set = spectral_partition(&graph, &features, 2).unwrap();
        let expected: BTreeSet<BTreeSet<String>> = [
            ["r00".to_string(), "r01".to_string()]
                .into_iter()
                .collect(),
            ["r02".to_string(), "r03".to_string()]
                .into_iter()
                .collect(),
        ]
        .into_iter()
        .collect();
        assert_eq!(member_sets(&set), expected);
    }

    #[test]
    fn spectral_k_one_returns_a_single_cluster() {
        let graph = graph_from(3, &[(0, 1), (1, 2)]);
        let features = table_from(&random_rows(3, 4, 5));
        let set = spectral_partition(&graph, &features, 1).unwrap();
        assert_eq!(set.k(), 1);
    }

    #[test]
    fn spectral_reports_isolated_roads() {
        let graph = graph_from(3, &[(0, 1)]);
        let features = table_from(&random_rows(3, 2, 9));
        match spectral_partition(&graph, &features, 2) {
            Err(ClusteringError::IsolatedRoad { road_id }) => assert_eq!(road_id, "r02"),
            other => panic!("expected IsolatedRoad, got {other:?}"),
        }
    }

    #[test]
    fn spectral_recovers_planted_blocks_matching_min_cut() {
        let n = 8;
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7)];
        let graph = graph_from(n, &edges);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let base = if i < 4 { 10.0 } else { 50.0 };
                vec![base + i as f64 * 0.01; 4]
            })
            .collect();
        let features = table_from(&rows);

        let w = SimilarityMatrix::build(&graph, &features).unwrap();
        let mut best_cut = f64::INFINITY;
        let mut best_side = 0usize;
        for side in 1..(1usize << (n - 1)) {
            let mask = side << 1;
            let mut cut = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    if ((mask >> i) & 1) != ((mask >> j) & 1) {
                        cut += w.get(i, j);
                    }
                }
            }
            if cut < best_cut {
                best_cut = cut;
                best_side = mask;
            }
        }
        let min_cut_sets: BTreeSet<BTreeSet<String>> = [
            (0..n)
                .filter(|i| (best_side >> i) & 1 == 0)
                .map(|i| format!("r{i:02}"))
                .collect(),
            (0..n)
                .filter(|i| (best_side >> i) & 1 == 1)
                .map(|i| format!("r{i:02}"))
                .collect(),
        ]
        .into_iter()
        .collect();

        let blocks: BTreeSet<BTreeSet<String>> = [
            (0..4).map(|i| format!("r{i:02}")).collect(),
            (4..8).map(|i| format!("r{i:02}")).collect(),
        ]
        .into_iter()
        .collect();
        assert_eq!(min_cut_sets, blocks);

        let set = spectral_partition(&graph, &features, 2).unwrap();
        assert_eq!(member_sets(&set), min_cut_sets);
    }

    #[test]
    fn merge_trace_records_slots_and_sizes() {
        let graph = graph_from(4, &[(0, 1), (1, 2), (2, 3)]);
        let features = table_from(&[vec![0.0], vec![1.0], vec![50.0], vec![51.0]]);
        let (_, trace) = hierarchical_partition(&graph, &features, 2).unwrap();
        assert_eq!(trace.steps.len(), 2);
        for step in &trace.steps {
            assert!(step.cluster_a < step.cluster_b);
            assert!(step.linkage_distance >= 0.0);
        }
        let sets: BTreeSet<(usize, usize)> = trace
            .steps
            .iter()
            .map(|s| (s.cluster_a, s.cluster_b))
            .collect();
        assert_eq!(sets, [(0, 1), (2, 3)].into_iter().collect());
    }

    prop_compose! {
        fn arb_instance()(n in 2usize..=10)(
            n in Just(n),
            edge_bits in proptest::collection::vec(any::<bool>(), n * (n - 1) / 2),
            seed in any::<u64>(),
        ) -> (usize, Vec<(usize, usize)>, u64) {
            let mut edges = Vec::new();
            let mut bit = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    if edge_bits[bit] {
                        edges.push((i, j));
                    }
                    bit += 1;
                }
            }
            (n, edges, seed)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn every_cluster_is_one_connected_component((n, edges, seed) in arb_instance()) {
            let graph = graph_from(n, &edges);
            let features = table_from(&random_rows(n, 3, seed));
            let comps = graph.component_count();
            for k in comps..=n.min(comps + 3) {
                let (set, trace) = hierarchical_partition(&graph, &features, k).unwrap();
                prop_assert_eq!(set.k(), k);
                prop_assert_eq!(trace.steps.len(), n - k);
                for cluster in set.member_indices(&graph).unwrap() {
                    prop_assert_eq!(graph.connected_components(&cluster).len(), 1);
                }
            }
        }

        #[test]
        fn finer_partitions_refine_coarser_ones((n, edges, seed) in arb_instance()) {
            let graph = graph_from(n, &edges);
            let features = table_from(&random_rows(n, 3, seed));
            let comps = graph.component_count();
            for k in (comps + 1)..=n {
                let (fine, _) = hierarchical_partition(&graph, &features, k).unwrap();
                let (coarse, _) = hierarchical_partition(&graph, &features, k - 1).unwrap();
                for cluster in fine.members() {
                    let host = coarse.cluster_of(&cluster[0]).unwrap();
                    for road in &cluster {
                        prop_assert_eq!(coarse.cluster_of(road), Some(host));
                    }
                }
            }
        }

        #[test]
        fn identical_inputs_give_identical_partitions((n, edges, seed) in arb_instance()) {
            let graph = graph_from(n, &edges);
            let features = table_from(&random_rows(n, 3, seed));
            let k = graph.component_count();
            let first = hierarchical_partition(&graph, &features, k).unwrap();
            let second = hierarchical_partition(&graph, &features, k).unwrap();
            prop_assert_eq!(first.0, second.0);
            prop_assert_eq!(first.1, second.1);
        }

        #[test]
        fn road_order_does_not_change_the_clusters((n, edges, seed) in arb_instance()) {
            let ids = roads(n);
            let edge_ids: Vec<(String, String)> = edges
                .iter()
                .map(|&(a, b)| (ids[a].clone(), ids[b].clone()))
                .collect();
            let graph = build_graph(&ids, &edge_ids).unwrap();

            let mut shuffled = ids.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEAD);
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            let permuted = build_graph(&shuffled, &edge_ids).unwrap();

            let rows = random_rows(n, 3, seed);
            let features = table_from(&rows);
            let k = graph.component_count();
            let (a, _) = hierarchical_partition(&graph, &features, k).unwrap();
            let (b, _) = hierarchical_partition(&permuted, &features, k).unwrap();
            prop_assert_eq!(member_sets(&a), member_sets(&b));
        }

        #[test]
        fn similarity_matrix_zero_pattern_equals_non_adjacency((n, edges, seed) in arb_instance()) {
            let graph = graph_from(n, &edges);
            let features = table_from(&random_rows(n, 3, seed));
            let w = SimilarityMatrix::build(&graph, &features).unwrap();
            for i in 0..n {
                prop_assert_eq!(w.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(w.get(i, j), w.get(j, i));
                    prop_assert!(w.get(i, j) >= 0.0);
                    if i != j {
                        prop_assert_eq!(w.get(i, j) > 0.0, graph.adjacent(i, j));
                    }
                }
            }
        }

        #[test]
        fn greedy_cost_stays_near_the_enumerated_optimum((n, edges, seed) in arb_instance()) {
            let graph = graph_from(n, &edges);
            let rows = random_rows(n, 3, seed);
            let features = table_from(&rows);
            let comps = graph.component_count();
            let k = (comps + 1).min(n);
            let (set, _) = hierarchical_partition(&graph, &features, k).unwrap();
            let greedy_cost = within_cost(&set.member_indices(&graph).unwrap(), &rows);
            let optimum = connected_partitions(&graph, k)
                .iter()
                .map(|p| within_cost(p, &rows))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(greedy_cost <= 1.5 * optimum + 1e-9,
                "greedy {greedy_cost} vs optimum {optimum}");
        }
    }
}


