//! Stage plumbing shared by the CLI and end-to-end tests: partition and
//! report file formats, per-road feature assembly across dates, GAF dump
//! construction, encoder batch extraction, and GeoJSON annotation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clustering::{ClusteringError, FeatureTable};
use crate::gaf::{encode_values, paa_downsample, GafError, GafMatrix};
use crate::graph::{ClusterSet, GraphError};
use crate::ingest::DailySeries;
use crate::metrics::MetricsReport;
use crate::neuralnet::{extract_features, AutoencoderModel, FeatureVector, NeuralNetError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gaf(#[from] GafError),
    #[error(transparent)]
    NeuralNet(#[from] NeuralNetError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no rows to assemble features from")]
    EmptyInput,
    #[error("road {road_id} mixes vector lengths {expected} and {found} across dates")]
    DimensionMismatch {
        road_id: String,
        expected: usize,
        found: usize,
    },
    #[error("unknown method {name:?}; expected ae-hier, spectral, or raw-hier")]
    UnknownMethod { name: String },
    #[error("geometry file unusable: {reason}")]
    Geometry { reason: String },
    #[error("geometry feature references road {road_id}, absent from the partition")]
    UnassignedRoad { road_id: String },
}

/// Partitioning method selector, spelled as in partition files and CLI flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ae-hier")]
    AeHier,
    #[serde(rename = "spectral")]
    Spectral,
    #[serde(rename = "raw-hier")]
    RawHier,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::AeHier, Method::Spectral, Method::RawHier];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AeHier => "ae-hier",
            Method::Spectral => "spectral",
            Method::RawHier => "raw-hier",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PipelineError::UnknownMethod {
                name: s.to_string(),
            })
    }
}

/// On-disk partition: cluster count, method, and road → cluster assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub k: usize,
    pub method: Method,
    pub assignment: BTreeMap<String, usize>,
}

impl PartitionFile {
    pub fn new(method: Method, clusters: &ClusterSet) -> Self {
        PartitionFile {
            k: clusters.k(),
            method,
            assignment: clusters.assignment().clone(),
        }
    }

    /// Rebuilds the cluster set; indices are re-compacted in road-id order,
    /// so only the grouping (not the numbering) is guaranteed stable.
    pub fn to_cluster_set(&self) -> Result<ClusterSet, PipelineError> {
        let roads: Vec<String> = self.assignment.keys().cloned().collect();
        let labels: Vec<usize> = self.assignment.values().copied().collect();
        Ok(ClusterSet::from_labels(&roads, &labels)?)
    }
}

/// A metrics report tagged with the method that produced the partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    #[serde(flatten)]
    pub report: MetricsReport,
}

impl MethodReport {
    pub fn new(method: Method, report: MetricsReport) -> Self {
        MethodReport { method, report }
    }
}

fn mean_rows(
    rows: impl IntoIterator<Item = (String, Vec<f64>)>,
) -> Result<Vec<(String, Vec<f64>)>, PipelineError> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (road, values) in rows {
        match sums.get_mut(&road) {
            None => {
                sums.insert(road, (values, 1));
            }
            Some((sum, count)) => {
                if sum.len() != values.len() {
                    return Err(PipelineError::DimensionMismatch {
                        road_id: road,
                        expected: sum.len(),
                        found: values.len(),
                    });
                }
                for (s, v) in sum.iter_mut().zip(&values) {
                    *s += v;
                }
                *count += 1;
            }
        }
    }
    if sums.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    Ok(sums
        .into_iter()
        .map(|(road, (mut sum, count))| {
            for s in &mut sum {
                *s /= count as f64;
            }
            (road, sum)
        })
        .collect())
}

/// One feature row per road: extracted vectors averaged over that road's
/// dates.
pub fn mean_feature_table(features: &[FeatureVector]) -> Result<FeatureTable, PipelineError> {
    let rows = mean_rows(
        features
            .iter()
            .map(|f| (f.road_id.clone(), f.values.clone())),
    )?;
    Ok(FeatureTable::new(rows)?)
}

/// One feature row per road built from the raw speed series themselves
/// (optionally PAA-reduced), averaged over dates. Feeds the raw-series
/// clustering variant and the spectral baseline.
pub fn mean_series_table(
    series: &[DailySeries],
    paa: Option<usize>,
) -> Result<FeatureTable, PipelineError> {
    let mut rows = Vec::with_capacity(series.len());
    for s in series {
        let values = match paa {
            None => s.values.clone(),
            Some(target) => paa_downsample(&s.values, target)?,
        };
        rows.push((s.road_id.clone(), values));
    }
    let rows = mean_rows(rows)?;
    Ok(FeatureTable::new(rows)?)
}

/// One encoded road-day.
#[derive(Debug, Clone)]
pub struct EncodedGaf {
    pub road_id: String,
    pub date: NaiveDate,
    pub gaf: GafMatrix,
}

/// GAF matrices for every road-day whose road survived encoding, plus the
/// roads dropped because at least one of their days was constant (those
/// cannot be rescaled into an angular field).
#[derive(Debug, Clone)]
pub struct GafDump {
    pub gafs: Vec<EncodedGaf>,
    pub excluded_roads: Vec<String>,
}

/// Encodes every series (after optional PAA) into a GAF. A road with any
/// constant day is excluded entirely — every downstream stage needs the
/// same date coverage for each road it keeps.
pub fn encode_dump(series: &[DailySeries], paa: Option<usize>) -> Result<GafDump, PipelineError> {
    let mut encoded: Vec<(usize, EncodedGaf)> = Vec::with_capacity(series.len());
    let mut excluded: Vec<String> = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let values = match paa {
            None => s.values.clone(),
            Some(target) => paa_downsample(&s.values, target)?,
        };
        match encode_values(&values) {
            Ok(gaf) => encoded.push((
                i,
                EncodedGaf {
                    road_id: s.road_id.clone(),
                    date: s.date,
                    gaf,
                },
            )),
            Err(GafError::ConstantSeries) => excluded.push(s.road_id.clone()),
            Err(other) => return Err(other.into()),
        }
    }
    excluded.sort_unstable();
    excluded.dedup();
    let gafs = encoded
        .into_iter()
        .filter(|(_, e)| excluded.binary_search(&e.road_id).is_err())
        .map(|(_, e)| e)
        .collect();
    Ok(GafDump {
        gafs,
        excluded_roads: excluded,
    })
}

/// Runs the encoder over a whole dump. Items are independent, so the result
/// is identical at any thread count.
pub fn features_from_dump(
    model: &AutoencoderModel,
    gafs: &[EncodedGaf],
) -> Result<Vec<FeatureVector>, PipelineError> {
    gafs.par_iter()
        .map(|e| {
            let values = extract_features(model, &e.gaf)?;
            Ok(FeatureVector {
                road_id: e.road_id.clone(),
                date: e.date,
                values,
            })
        })
        .collect()
}

/// Copies cluster indices onto a GeoJSON FeatureCollection: each feature's
/// `road_id` property is looked up in the partition and a `cluster` property
/// is added. Roads in the partition without a feature are fine; a feature
/// naming an unknown road is not.
pub fn annotate_geojson(geojson: &str, partition: &PartitionFile) -> Result<String, PipelineError> {
    let geometry_error = |reason: &str| PipelineError::Geometry {
        reason: reason.to_string(),
    };
    let mut doc: Value = serde_json::from_str(geojson).map_err(|e| PipelineError::Geometry {
        reason: e.to_string(),
    })?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(geometry_error("expected a FeatureCollection"));
    }
    let features = doc
        .get_mut("features")
        .and_then(Value::as_array_mut)
        .ok_or_else(|| geometry_error("missing features array"))?;
    for feature in features {
        let properties = feature
            .get_mut("properties")
            .and_then(Value::as_object_mut)
            .ok_or_else(|| geometry_error("feature without a properties object"))?;
        let road_id = properties
            .get("road_id")
            .and_then(Value::as_str)
            .ok_or_else(|| geometry_error("feature without a string road_id property"))?
            .to_string();
        let cluster = *partition
            .assignment
            .get(&road_id)
            .ok_or(PipelineError::UnassignedRoad { road_id })?;
        properties.insert("cluster".to_string(), Value::from(cluster));
    }
    Ok(serde_json::to_string_pretty(&doc).expect("annotated document serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::ingest::STANDARD_DAY_LEN;
    use crate::synth;

    fn date(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2018, 9, day).unwrap()
    }

    fn series(road: &str, day: u32, values: Vec<f64>) -> DailySeries {
        DailySeries {
            road_id: road.to_string(),
            date: date(day),
            imputed_mask: vec![false; values.len()],
            values,
        }
    }

    #[test]
    fn method_strings_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{m}\""));
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        assert!(matches!(
            "kmeans".parse::<Method>(),
            Err(PipelineError::UnknownMethod { .. })
        ));
    }

    #[test]
    fn partition_file_round_trips_through_json() {
        let roads: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let clusters = ClusterSet::from_labels(&roads, &[0, 1, 0, 2]).unwrap();
        let file = PartitionFile::new(Method::AeHier, &clusters);
        assert_eq!(file.k, 3);
        let json = serde_json::to_string_pretty(&file).unwrap();
        assert!(json.contains("\"method\": \"ae-hier\""));
        let back: PartitionFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_cluster_set().unwrap(), clusters);
    }

    #[test]
    fn method_report_json_carries_method_and_metric_fields() {
        let roads: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let clusters = ClusterSet::from_labels(&roads, &[0, 1]).unwrap();
        let graph = build_graph(&roads, &[("a".to_string(), "b".to_string())]).unwrap();
        let table = FeatureTable::new([
            ("a".to_string(), vec![1.0, 1.0]),
            ("b".to_string(), vec![3.0, 5.0]),
        ])
        .unwrap();
        let report = crate::metrics::report(&clusters, &table, &graph).unwrap();
        let tagged = MethodReport::new(Method::Spectral, report);
        let json = serde_json::to_string(&tagged).unwrap();
        let value: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["method"], "spectral");
        assert_eq!(value["k"], 2);
        assert_eq!(value["inter"], 6.0);
        let back: MethodReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tagged);
    }

    #[test]
    fn mean_feature_table_averages_across_dates() {
        let features = vec![
            FeatureVector {
                road_id: "a".to_string(),
                date: date(3),
                values: vec![1.0, 3.0],
            },
            FeatureVector {
                road_id: "a".to_string(),
                date: date(4),
                values: vec![3.0, 5.0],
            },
            FeatureVector {
                road_id: "b".to_string(),
                date: date(3),
                values: vec![10.0, 20.0],
            },
        ];
        let table = mean_feature_table(&features).unwrap();
        assert_eq!(table.get("a").unwrap(), &[2.0, 4.0]);
        assert_eq!(table.get("b").unwrap(), &[10.0, 20.0]);
    }

    #[test]
    fn mean_feature_table_rejects_mixed_dimensions_and_empty_input() {
        let features = vec![
            FeatureVector {
                road_id: "a".to_string(),
                date: date(3),
                values: vec![1.0, 3.0],
            },
            FeatureVector {
                road_id: "a".to_string(),
                date: date(4),
                values: vec![3.0],
            },
        ];
        match mean_feature_table(&features) {
            Err(PipelineError::DimensionMismatch {
                road_id,
                expected,
                found,
            }) => {
                assert_eq!(road_id, "a");
                assert_eq!((expected, found), (2, 1));
            }
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
        assert!(matches!(
            mean_feature_table(&[]),
            Err(PipelineError::EmptyInput)
        ));
    }

    #[test]
    fn mean_series_table_applies_paa_blocks() {
        let values: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let rows = vec![series("a", 3, values)];
        let table = mean_series_table(&rows, Some(4)).unwrap();
        assert_eq!(table.get("a").unwrap(), &[0.5, 2.5, 4.5, 6.5]);
        let full = mean_series_table(&rows, None).unwrap();
        assert_eq!(full.dim(), 8);
    }

    #[test]
    fn encode_dump_keeps_all_road_days_when_none_are_constant() {
        let mut rows = Vec::new();
        for road in ["a", "b", "c", "d", "e"] {
            for day in [3, 4] {
                rows.push(series(road, day, vec![1.0, 2.0, 3.0, 4.0]));
            }
        }
        let dump = encode_dump(&rows, None).unwrap();
        assert_eq!(dump.gafs.len(), 10);
        assert!(dump.excluded_roads.is_empty());
        assert_eq!(dump.gafs[0].road_id, "a");
        assert_eq!(dump.gafs[0].gaf.size(), 4);
    }

    #[test]
    fn encode_dump_drops_a_constant_road_entirely() {
        let mut rows = Vec::new();
        for road in ["a", "b", "c", "d", "e"] {
            for day in [3, 4] {
                let values = if road == "c" {
                    vec![7.0; 4]
                } else {
                    vec![1.0, 2.0, 3.0, 4.0]
                };
                rows.push(series(road, day, values));
            }
        }
        let dump = encode_dump(&rows, None).unwrap();
        assert_eq!(dump.gafs.len(), 8);
        assert_eq!(dump.excluded_roads, vec!["c".to_string()]);
        assert!(dump.gafs.iter().all(|e| e.road_id != "c"));
    }

    #[test]
    fn encode_dump_excludes_a_road_constant_on_only_one_day() {
        let rows = vec![
            series("a", 3, vec![7.0; 4]),
            series("a", 4, vec![1.0, 2.0, 3.0, 4.0]),
            series("b", 3, vec![1.0, 2.0, 3.0, 4.0]),
        ];
        let dump = encode_dump(&rows, None).unwrap();
        assert_eq!(dump.excluded_roads, vec!["a".to_string()]);
        assert_eq!(dump.gafs.len(), 1);
        assert_eq!(dump.gafs[0].road_id, "b");
    }

    #[test]
    fn features_from_dump_preserves_order_and_length() {
        let scenario = synth::SynthScenario {
            rows: 2,
            cols: 2,
            region_count: 1,
            region_profiles: vec![synth::RegionProfile {
                base_speed: 40.0,
                morning_dip: 20.0,
                evening_dip: 8.0,
                morning_center: 100.0,
                evening_center: 190.0,
                peak_width: 12.0,
            }],
            noise_sigma: 1.0,
            seed: 7,
            tidal_road: None,
        };
        let out = synth::generate(&scenario).unwrap();
        let dump = encode_dump(&out.series, Some(36)).unwrap();
        assert_eq!(dump.gafs.len(), 4);
        let model = AutoencoderModel::new(36, 11).unwrap();
        let features = features_from_dump(&model, &dump.gafs).unwrap();
        assert_eq!(features.len(), 4);
        for (f, e) in features.iter().zip(&dump.gafs) {
            assert_eq!(f.road_id, e.road_id);
            assert_eq!(f.values.len(), model.feature_len());
            assert!(f.values.iter().all(|v| v.is_finite()));
        }
        let table = mean_feature_table(&features).unwrap();
        assert_eq!(table.dim(), model.feature_len());
        assert_eq!(table.roads().count(), 4);
    }

    #[test]
    fn annotate_geojson_adds_cluster_properties() {
        let roads: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let clusters = ClusterSet::from_labels(&roads, &[0, 1]).unwrap();
        let partition = PartitionFile::new(Method::RawHier, &clusters);
        let doc = r#"{
            "type": "FeatureCollection",
            "features": [
                {"type": "Feature", "properties": {"road_id": "a", "name": "First"},
                 "geometry": {"type": "LineString", "coordinates": [[0, 0], [1, 0]]}},
                {"type": "Feature", "properties": {"road_id": "b"},
                 "geometry": {"type": "LineString", "coordinates": [[1, 0], [1, 1]]}}
            ]
        }"#;
        let annotated = annotate_geojson(doc, &partition).unwrap();
        let value: Value = serde_json::from_str(&annotated).unwrap();
        assert_eq!(value["features"][0]["properties"]["cluster"], 0);
        assert_eq!(value["features"][0]["properties"]["name"], "First");
        assert_eq!(value["features"][1]["properties"]["cluster"], 1);
    }

    #[test]
    fn annotate_geojson_rejects_malformed_documents() {
        let roads: Vec<String> = ["a"].iter().map(|s| s.to_string()).collect();
        let clusters = ClusterSet::from_labels(&roads, &[0]).unwrap();
        let partition = PartitionFile::new(Method::AeHier, &clusters);
        assert!(matches!(
            annotate_geojson("not json", &partition),
            Err(PipelineError::Geometry { .. })
        ));
        assert!(matches!(
            annotate_geojson(r#"{"type": "Feature"}"#, &partition),
            Err(PipelineError::Geometry { .. })
        ));
        let missing_id = r#"{"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {}, "geometry": null}
        ]}"#;
        assert!(matches!(
            annotate_geojson(missing_id, &partition),
            Err(PipelineError::Geometry { .. })
        ));
        let unknown = r#"{"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {"road_id": "zz"}, "geometry": null}
        ]}"#;
        match annotate_geojson(unknown, &partition) {
            Err(PipelineError::UnassignedRoad { road_id }) => assert_eq!(road_id, "zz"),
            other => panic!("expected UnassignedRoad, got {other:?}"),
        }
    }

    #[test]
    fn dump_paa_then_encode_matches_manual_composition() {
        let rows = vec![series("a", 3, (0..STANDARD_DAY_LEN).map(|i| (i % 31) as f64).collect())];
        let dump = encode_dump(&rows, Some(72)).unwrap();
        let manual = encode_values(&paa_downsample(&rows[0].values, 72).unwrap()).unwrap();
        assert_eq!(dump.gafs[0].gaf.as_slice(), manual.as_slice());
    }
}
