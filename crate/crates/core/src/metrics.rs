//! Partition quality measures over daily speed series.
//!
//! All three measures are built from the same pairwise distance: the
//! element-wise absolute difference between two roads' series, summed over
//! time slots. `intra` averages it inside clusters (lower is better),
//! `inter` averages it across spatially adjacent cluster pairs (higher is
//! better), and `network_intra` is the whole-network reference value.
//! Evaluation always runs on raw speed series, not on encoder features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::FeatureTable;
use crate::graph::{ClusterSet, RoadGraph};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no series for road {road_id}")]
    MissingSeries { road_id: String },
    #[error("no pair of clusters is spatially adjacent")]
    NoAdjacentPairs,
    #[error("network homogeneity needs at least 2 roads, got {roads}")]
    TooFewRoads { roads: usize },
    #[error("reports have different cluster counts: {left} vs {right}")]
    KMismatch { left: usize, right: usize },
    #[error("road {road_id} is not in the graph")]
    UnknownRoad { road_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub intra: f64,
    pub inter: f64,
    pub network_intra: f64,
    pub per_cluster_intra: Vec<f64>,
    pub adjacent_pair_count: usize,
}

/// Relative change of report `a` over report `b`, in percent. Positive
/// numbers mean `a` is better on that axis: intra improves by decreasing,
/// inter improves by increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub k: usize,
    pub intra_improvement_pct: f64,
    pub inter_improvement_pct: f64,
}

fn series_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn cluster_series<'t>(
    members: &[String],
    series: &'t FeatureTable,
) -> Result<Vec<&'t [f64]>, MetricsError> {
    members
        .iter()
        .map(|road| {
            series.get(road).ok_or_else(|| MetricsError::MissingSeries {
                road_id: road.clone(),
            })
        })
        .collect()
}

/// Within-cluster homogeneity: for each cluster the mean over ordered
/// distinct road pairs of the summed absolute speed difference, then the
/// unweighted mean over clusters. Singleton clusters contribute 0 but still
/// count toward the average. Returns (mean, per-cluster values).
pub fn intra(
    partition: &ClusterSet,
    series: &FeatureTable,
) -> Result<(f64, Vec<f64>), MetricsError> {
    let mut per_cluster = Vec::with_capacity(partition.k());
    for members in partition.members() {
        let rows = cluster_series(&members, series)?;
        let m = rows.len();
        if m < 2 {
            per_cluster.push(0.0);
            continue;
        }
        let mut unordered = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                unordered += series_distance(rows[i], rows[j]);
            }
        }
        per_cluster.push(2.0 * unordered / (m * (m - 1)) as f64);
    }
    let mean = per_cluster.iter().sum::<f64>() / partition.k() as f64;
    Ok((mean, per_cluster))
}

/// Between-cluster heterogeneity: the mean, over unordered pairs of
/// spatially adjacent clusters, of the average cross-pair summed absolute
/// speed difference. Returns (mean, adjacent pair count).
pub fn inter(
    partition: &ClusterSet,
    series: &FeatureTable,
    graph: &RoadGraph,
) -> Result<(f64, usize), MetricsError> {
    let members = partition.members();
    let indices = partition
        .member_indices(graph)
        .map_err(|_| MetricsError::UnknownRoad {
            road_id: members
                .iter()
                .flatten()
                .find(|road| graph.index_of(road).is_none())
                .cloned()
                .unwrap_or_default(),
        })?;
    let rows: Vec<Vec<&[f64]>> = members
        .iter()
        .map(|m| cluster_series(m, series))
        .collect::<Result<_, _>>()?;

    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..indices.len() {
        for j in (i + 1)..indices.len() {
            let adjacent = graph
                .clusters_adjacent(&indices[i], &indices[j])
                .expect("partition clusters are disjoint");
            if !adjacent {
                continue;
            }
            let mut cross = 0.0;
            for p in &rows[i] {
                for q in &rows[j] {
                    cross += series_distance(p, q);
                }
            }
            total += cross / (rows[i].len() * rows[j].len()) as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(MetricsError::NoAdjacentPairs);
    }
    Ok((total / pairs as f64, pairs))
}

/// Whole-network homogeneity: mean over ordered distinct road pairs of the
/// summed absolute speed difference.
pub fn network_intra(series: &FeatureTable) -> Result<f64, MetricsError> {
    let rows: Vec<&[f64]> = series
        .roads()
        .map(|road| series.get(road).expect("road listed by the table"))
        .collect();
    let n = rows.len();
    if n < 2 {
        return Err(MetricsError::TooFewRoads { roads: n });
    }
    let mut unordered = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            unordered += series_distance(rows[i], rows[j]);
        }
    }
    Ok(2.0 * unordered / (n * (n - 1)) as f64)
}

/// All measures for one partition over one series table.
pub fn report(
    partition: &ClusterSet,
    series: &FeatureTable,
    graph: &RoadGraph,
) -> Result<MetricsReport, MetricsError> {
    let (intra_mean, per_cluster_intra) = intra(partition, series)?;
    let (inter_mean, adjacent_pair_count) = inter(partition, series, graph)?;
    let network = network_intra(series)?;
    Ok(MetricsReport {
        k: partition.k(),
        intra: intra_mean,
        inter: inter_mean,
        network_intra: network,
        per_cluster_intra,
        adjacent_pair_count,
    })
}

/// Percentage improvement of `a` over `b` on both axes.
pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<ComparisonSummary, MetricsError> {
    if a.k != b.k {
        return Err(MetricsError::KMismatch {
            left: a.k,
            right: b.k,
        });
    }
    let change = |better_low: bool, va: f64, vb: f64| -> f64 {
        if va == vb {
            return 0.0;
        }
        let diff = if better_low { vb - va } else { va - vb };
        diff / vb * 100.0
    };
    Ok(ComparisonSummary {
        k: a.k,
        intra_improvement_pct: change(true, a.intra, b.intra),
        inter_improvement_pct: change(false, a.inter, b.inter),
    })
}
