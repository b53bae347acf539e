//! Fixed artifact filenames plus the readers and writers behind each stage.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use netpart_core::gaf::GafMatrix;
use netpart_core::ingest::{DailySeries, SpeedRecord};
use netpart_core::metrics::ComparisonSummary;
use netpart_core::neuralnet::FeatureVector;
use netpart_core::pipeline::{EncodedGaf, Method, MethodReport, PartitionFile};

use crate::CliError;

pub const SERIES_FILE: &str = "series.csv";
pub const NETWORK_FILE: &str = "network.json";
pub const GAF_DIR: &str = "gaf";
pub const EXCLUSIONS_FILE: &str = "exclusions.txt";
pub const MODEL_FILE: &str = "model.npae";
pub const LOSS_FILE: &str = "loss.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const RECORDS_FILE: &str = "records.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const COMPARISON_FILE: &str = "comparison.csv";

pub fn partition_filename(method: Method, k: usize) -> String {
    format!("partition_{method}_k{k}.json")
}

pub fn geojson_filename(method: Method, k: usize) -> String {
    format!("partition_{method}_k{k}.geojson")
}

pub fn report_filename(method: Method, k: usize) -> String {
    format!("report_{method}_k{k}.json")
}

fn path_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| path_error(path, e))
}

pub fn read_binary(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| path_error(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| path_error(path, e))
}

pub fn write_binary(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| path_error(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| path_error(path, e))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    write_text(path, &format!("{text}\n"))
}

/// Edge list CSV: header `road_a,road_b`, one undirected edge per row.
pub fn parse_edges(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut rows = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        if idx == 0 {
            continue;
        }
        let row = raw_line.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let mut fields = row.split(',');
        let (a, b) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => {
                return Err(path_error(
                    path,
                    format!("line {}: expected 2 columns", idx + 1),
                ))
            }
        };
        if a.is_empty() || b.is_empty() {
            return Err(path_error(path, format!("line {}: empty road id", idx + 1)));
        }
        rows.push((a.to_string(), b.to_string()));
    }
    Ok(rows)
}

pub fn write_edges(edges: &[(String, String)]) -> String {
    let mut out = String::from("road_a,road_b\n");
    for (a, b) in edges {
        out.push_str(&format!("{a},{b}\n"));
    }
    out
}

pub fn parse_date_filter(s: &str) -> Result<Option<NaiveDate>, CliError> {
    if s == "all" {
        return Ok(None);
    }
    NaiveDate::parse_from_str(s, "%Y%m%d")
        .map(Some)
        .map_err(|_| CliError::Input(format!("bad --date {s:?}; expected YYYYMMDD or \"all\"")))
}

/// Parses "K" or "A..B" (both ends inclusive) into the k values to sweep.
pub fn parse_k_selector(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Input(format!("bad --k {s:?}; expected \"K\" or \"A..B\""));
    match s.split_once("..") {
        None => {
            let k: usize = s.trim().parse().map_err(|_| bad())?;
            Ok((k, k))
        }
        Some((a, b)) => {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(CliError::Input(format!("empty --k range {s:?}")));
            }
            Ok((a, b))
        }
    }
}

pub fn parse_method(s: &str) -> Result<Method, CliError> {
    s.parse::<Method>().map_err(|e| CliError::Input(e.to_string()))
}

/// Road ids become file names, so they must stay within a portable alphabet.
pub fn check_filename_safe(road: &str) -> Result<(), CliError> {
    let ok = !road.is_empty()
        && road
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "road id {road:?} cannot name a file; use ASCII letters, digits, '_', '-', '.'"
        )))
    }
}

pub fn gaf_filename(road: &str, date: NaiveDate) -> String {
    format!("{road}_{}.gaf", date.format("%Y%m%d"))
}

fn parse_gaf_filename(name: &str) -> Option<(String, NaiveDate)> {
    let stem = name.strip_suffix(".gaf")?;
    if stem.len() < 10 {
        return None;
    }
    let (road, tail) = stem.split_at(stem.len() - 9);
    let digits = tail.strip_prefix('_')?;
    let date = NaiveDate::parse_from_str(digits, "%Y%m%d").ok()?;
    if road.is_empty() {
        return None;
    }
    Some((road.to_string(), date))
}

/// Loads every GAF in the dump directory in filename order, optionally
/// keeping only one date.
pub fn load_gaf_dir(dir: &Path, date: Option<NaiveDate>) -> Result<Vec<EncodedGaf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| path_error(dir, e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| path_error(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy().into_owned();
        if name.ends_with(".gaf") {
            names.push(name);
        }
    }
    names.sort_unstable();
    let mut gafs = Vec::with_capacity(names.len());
    for name in names {
        let file = dir.join(&name);
        let (road_id, file_date) = parse_gaf_filename(&name)
            .ok_or_else(|| path_error(&file, "expected <road>_<YYYYMMDD>.gaf"))?;
        if let Some(d) = date {
            if file_date != d {
                continue;
            }
        }
        let bytes = read_binary(&file)?;
        let gaf = GafMatrix::from_bytes(&bytes).map_err(|e| path_error(&file, e))?;
        gafs.push(EncodedGaf {
            road_id,
            date: file_date,
            gaf,
        });
    }
    if gafs.is_empty() {
        return Err(path_error(dir, "no matching GAF files; run encode first"));
    }
    Ok(gafs)
}

/// Feature dump CSV: header `road_id,date,f0..f{n-1}`, one row per road-day.
pub fn write_features_csv(features: &[FeatureVector]) -> String {
    let dim = features.first().map_or(0, |f| f.values.len());
    let mut out = String::from("road_id,date");
    for i in 0..dim {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for f in features {
        out.push_str(&format!("{},{}", f.road_id, f.date.format("%Y%m%d")));
        for v in &f.values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_features_csv(text: &str, path: &Path) -> Result<Vec<FeatureVector>, CliError> {
    let mut rows = Vec::new();
    let mut dim = None;
    for (idx, raw_line) in text.lines().enumerate() {
        if idx == 0 {
            continue;
        }
        let row = raw_line.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() < 3 {
            return Err(path_error(
                path,
                format!("line {}: expected road_id,date,features", idx + 1),
            ));
        }
        let found = fields.len() - 2;
        if *dim.get_or_insert(found) != found {
            return Err(path_error(
                path,
                format!("line {}: inconsistent feature count", idx + 1),
            ));
        }
        let date = NaiveDate::parse_from_str(fields[1].trim(), "%Y%m%d")
            .map_err(|_| path_error(path, format!("line {}: bad date", idx + 1)))?;
        let values: Vec<f64> = fields[2..]
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| path_error(path, format!("line {}: bad feature value", idx + 1)))?;
        rows.push(FeatureVector {
            road_id: fields[0].trim().to_string(),
            date,
            values,
        });
    }
    if rows.is_empty() {
        return Err(path_error(path, "no feature rows; run features first"));
    }
    Ok(rows)
}

/// Expands daily series into the record CSV row set (all slots observed).
pub fn records_from_series(series: &[DailySeries], sample_vehicles: u32) -> Vec<SpeedRecord> {
    let mut records = Vec::with_capacity(series.iter().map(|s| s.values.len()).sum());
    for s in series {
        for (period, &speed) in s.values.iter().enumerate() {
            records.push(SpeedRecord {
                date: s.date,
                period: period as u32,
                road_id: s.road_id.clone(),
                speed,
                sample_vehicles,
            });
        }
    }
    records
}

/// Imputed-series dump: one row per slot with the fill flag preserved.
pub fn write_series_csv(series: &[DailySeries]) -> String {
    let mut out = String::from("road_id,date,period,speed,imputed\n");
    for s in series {
        for (period, (&speed, &imputed)) in s.values.iter().zip(&s.imputed_mask).enumerate() {
            out.push_str(&format!(
                "{},{},{period},{speed},{}\n",
                s.road_id,
                s.date.format("%Y%m%d"),
                u8::from(imputed)
            ));
        }
    }
    out
}

fn files_with(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| path_error(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| path_error(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with(prefix) && name.ends_with(suffix) {
            names.push(name);
        }
    }
    names.sort_unstable();
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

pub fn load_partitions(dir: &Path) -> Result<Vec<PartitionFile>, CliError> {
    let mut partitions = Vec::new();
    for path in files_with(dir, "partition_", ".json")? {
        let text = read_text(&path)?;
        let partition: PartitionFile =
            serde_json::from_str(&text).map_err(|e| path_error(&path, e))?;
        partitions.push(partition);
    }
    Ok(partitions)
}

pub fn load_reports(dir: &Path) -> Result<Vec<MethodReport>, CliError> {
    let mut reports = Vec::new();
    for path in files_with(dir, "report_", ".json")? {
        let text = read_text(&path)?;
        let report: MethodReport =
            serde_json::from_str(&text).map_err(|e| path_error(&path, e))?;
        reports.push(report);
    }
    Ok(reports)
}

fn method_rank(method: Method) -> usize {
    Method::ALL
        .iter()
        .position(|&m| m == method)
        .expect("method listed")
}

/// Pairs reports sharing a k (methods in fixed rank order) and tabulates the
/// first method's relative improvement over the second.
pub fn comparison_csv(reports: &[MethodReport]) -> (String, usize) {
    let mut by_key: std::collections::BTreeMap<(usize, usize), &MethodReport> =
        std::collections::BTreeMap::new();
    for r in reports {
        by_key.insert((r.report.k, method_rank(r.method)), r);
    }
    let ks: Vec<usize> = {
        let mut ks: Vec<usize> = by_key.keys().map(|&(k, _)| k).collect();
        ks.dedup();
        ks
    };
    let mut out = String::from("method_a,method_b,k,intra_improvement_pct,inter_improvement_pct\n");
    let mut pairs = 0;
    for k in ks {
        for i in 0..Method::ALL.len() {
            for j in (i + 1)..Method::ALL.len() {
                let (Some(a), Some(b)) = (by_key.get(&(k, i)), by_key.get(&(k, j))) else {
                    continue;
                };
                let summary: ComparisonSummary =
                    netpart_core::metrics::compare(&a.report, &b.report)
                        .expect("reports share k by construction");
                out.push_str(&format!(
                    "{},{},{k},{},{}\n",
                    a.method, b.method, summary.intra_improvement_pct, summary.inter_improvement_pct
                ));
                pairs += 1;
            }
        }
    }
    (out, pairs)
}
