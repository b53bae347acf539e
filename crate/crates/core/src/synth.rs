//! Synthetic road grids with planted partitions and tidal speed patterns.
//!
//! Roads form a rows×cols grid with 4-neighbor adjacency, carved into
//! near-equal rectangular regions. Each region has a daily speed template —
//! a base speed with Gaussian-shaped dips at a morning and an evening peak —
//! and each road draws its series from its region's template plus seeded
//! Gaussian noise. The planted region assignment is returned as ground
//! truth, scored against recovered partitions via [`adjusted_rand_index`].

use chrono::NaiveDate;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_graph, ClusterSet, RoadGraph};
use crate::ingest::{DailySeries, STANDARD_DAY_LEN};

const ROAD_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Every generated series is stamped with this date; the generator models a
/// single day.
pub fn synth_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 9, 3).expect("valid fixed date")
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {reason}")]
    InvalidScenario { reason: String },
    #[error("partitions cover different road sets (first difference: {road_id})")]
    UniverseMismatch { road_id: String },
}

fn invalid(reason: impl Into<String>) -> SynthError {
    SynthError::InvalidScenario {
        reason: reason.into(),
    }
}

/// Daily speed template: `base` km/h with Gaussian dips of the given depths
/// centered on the morning and evening peaks (slot units, 288 slots/day).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProfile {
    pub base_speed: f64,
    pub morning_dip: f64,
    pub evening_dip: f64,
    pub morning_center: f64,
    pub evening_center: f64,
    pub peak_width: f64,
}

impl RegionProfile {
    /// The tidal counterpart: morning and evening dip depths exchanged, so
    /// the opposite direction peaks at the opposite rush hour.
    pub fn mirrored(&self) -> RegionProfile {
        RegionProfile {
            morning_dip: self.evening_dip,
            evening_dip: self.morning_dip,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScenario {
    pub rows: usize,
    pub cols: usize,
    pub region_count: usize,
    pub region_profiles: Vec<RegionProfile>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Grid coordinate (row, col) of a road that receives its region's
    /// mirrored template, forming a tidal pair with a same-region neighbor.
    #[serde(default)]
    pub tidal_road: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub graph: RoadGraph,
    /// One series per road, in graph index order.
    pub series: Vec<DailySeries>,
    pub truth: ClusterSet,
    /// (normal-template partner, mirrored road); present when the scenario
    /// plants a tidal road.
    pub tidal_pair: Option<(String, String)>,
}

pub fn road_id(row: usize, col: usize) -> String {
    format!("r{row:03}c{col:03}")
}

/// Template speed at one slot, clamped to ≥ 1 km/h.
pub fn template_speed(profile: &RegionProfile, slot: usize) -> f64 {
    raw_template(profile, slot).max(1.0)
}

fn raw_template(profile: &RegionProfile, slot: usize) -> f64 {
    let t = slot as f64;
    let dip = |center: f64| {
        let d = t - center;
        (-d * d / (2.0 * profile.peak_width * profile.peak_width)).exp()
    };
    profile.base_speed
        - profile.morning_dip * dip(profile.morning_center)
        - profile.evening_dip * dip(profile.evening_center)
}

fn series_for_road(
    road: String,
    profile: &RegionProfile,
    sigma: f64,
    sub_seed: u64,
) -> DailySeries {
    let values: Vec<f64> = if sigma == 0.0 {
        (0..STANDARD_DAY_LEN)
            .map(|slot| template_speed(profile, slot))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        let noise = Normal::new(0.0, sigma).expect("sigma validated finite and positive");
        (0..STANDARD_DAY_LEN)
            .map(|slot| (raw_template(profile, slot) + noise.sample(&mut rng)).max(1.0))
            .collect()
    };
    DailySeries {
        road_id: road,
        date: synth_date(),
        values,
        imputed_mask: vec![false; STANDARD_DAY_LEN],
    }
}

/// Split `total` into `bands` contiguous near-equal intervals; the first
/// `total % bands` bands are one longer.
fn band_of(position: usize, total: usize, bands: usize) -> usize {
    let long = total % bands;
    let short_len = total / bands;
    let long_span = long * (short_len + 1);
    if position < long_span {
        position / (short_len + 1)
    } else {
        long + (position - long_span) / short_len
    }
}

/// Factor `region_count` into band_rows × band_cols fitting the grid, taking
/// the most nearly square feasible pair (smaller first factor on ties).
fn region_layout(
    rows: usize,
    cols: usize,
    region_count: usize,
) -> Result<(usize, usize), SynthError> {
    let mut best: Option<(usize, usize)> = None;
    for a in 1..=region_count {
        if region_count % a != 0 {
            continue;
        }
        let b = region_count / a;
        if a > rows || b > cols {
            continue;
        }
        if best.map_or(true, |(ba, bb)| {
            a.abs_diff(b) < ba.abs_diff(bb)
        }) {
            best = Some((a, b));
        }
    }
    best.ok_or_else(|| {
        invalid(format!(
            "cannot split a {rows}x{cols} grid into {region_count} rectangular regions"
        ))
    })
}

fn validate(scenario: &SynthScenario) -> Result<(), SynthError> {
    if scenario.rows == 0 || scenario.cols == 0 {
        return Err(invalid("grid dimensions must be positive"));
    }
    if scenario.region_count == 0 {
        return Err(invalid("region_count must be positive"));
    }
    if scenario.region_count > scenario.rows * scenario.cols {
        return Err(invalid(format!(
            "region_count {} exceeds the {} grid roads",
            scenario.region_count,
            scenario.rows * scenario.cols
        )));
    }
    if scenario.region_profiles.len() != scenario.region_count {
        return Err(invalid(format!(
            "{} region profiles for {} regions",
            scenario.region_profiles.len(),
            scenario.region_count
        )));
    }
    if !scenario.noise_sigma.is_finite() || scenario.noise_sigma < 0.0 {
        return Err(invalid("noise_sigma must be finite and non-negative"));
    }
    for (i, p) in scenario.region_profiles.iter().enumerate() {
        let fields = [
            p.base_speed,
            p.morning_dip,
            p.evening_dip,
            p.morning_center,
            p.evening_center,
            p.peak_width,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("profile {i} has a non-finite field")));
        }
        if p.peak_width <= 0.0 {
            return Err(invalid(format!("profile {i} needs a positive peak_width")));
        }
    }
    if let Some((r, c)) = scenario.tidal_road {
        if r >= scenario.rows || c >= scenario.cols {
            return Err(invalid(format!(
                "tidal road ({r},{c}) is outside the {}x{} grid",
                scenario.rows, scenario.cols
            )));
        }
    }
    Ok(())
}

/// Builds the grid graph, one daily series per road, and the planted
/// ground-truth partition. Deterministic per seed; per-road noise streams
/// are derived sub-seeds, so any subset of roads is reproducible.
pub fn generate(scenario: &SynthScenario) -> Result<SynthOutput, SynthError> {
    validate(scenario)?;
    let (band_rows, band_cols) = region_layout(scenario.rows, scenario.cols, scenario.region_count)?;

    let rows = scenario.rows;
    let cols = scenario.cols;
    let mut roads = Vec::with_capacity(rows * cols);
    let mut labels = Vec::with_capacity(rows * cols);
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            roads.push(road_id(r, c));
            labels.push(band_of(r, rows, band_rows) * band_cols + band_of(c, cols, band_cols));
            if r + 1 < rows {
                edges.push((road_id(r, c), road_id(r + 1, c)));
            }
            if c + 1 < cols {
                edges.push((road_id(r, c), road_id(r, c + 1)));
            }
        }
    }
    let graph = build_graph(&roads, &edges).expect("grid construction is well-formed");
    let truth = ClusterSet::from_labels(&roads, &labels).expect("every region is non-empty");

    let tidal_index = scenario.tidal_road.map(|(r, c)| r * cols + c);
    let series: Vec<DailySeries> = roads
        .iter()
        .enumerate()
        .map(|(i, road)| {
            let profile = &scenario.region_profiles[labels[i]];
            let mirrored;
            let profile = if Some(i) == tidal_index {
                mirrored = profile.mirrored();
                &mirrored
            } else {
                profile
            };
            let sub_seed = scenario.seed ^ (i as u64).wrapping_mul(ROAD_SEED_STRIDE);
            series_for_road(road.clone(), profile, scenario.noise_sigma, sub_seed)
        })
        .collect();

    let tidal_pair = match tidal_index {
        None => None,
        Some(i) => {
            let partner = graph
                .neighbors(i)
                .iter()
                .copied()
                .find(|&j| labels[j] == labels[i])
                .ok_or_else(|| {
                    invalid("tidal road has no same-region neighbor to pair with")
                })?;
            Some((roads[partner].clone(), roads[i].clone()))
        }
    };

    Ok(SynthOutput {
        graph,
        series,
        truth,
        tidal_pair,
    })
}

/// Two adjacent roads with mirrored templates — the tidal pattern in
/// isolation. Both use the scenario's first region profile (one as-is, one
/// mirrored) and the scenario's noise.
pub fn tidal_pair(scenario: &SynthScenario) -> Result<(DailySeries, DailySeries), SynthError> {
    validate(scenario)?;
    let profile = &scenario.region_profiles[0];
    let forward = series_for_road(
        "tidal_a".to_string(),
        profile,
        scenario.noise_sigma,
        scenario.seed ^ ROAD_SEED_STRIDE,
    );
    let reverse = series_for_road(
        "tidal_b".to_string(),
        &profile.mirrored(),
        scenario.noise_sigma,
        scenario.seed ^ 2u64.wrapping_mul(ROAD_SEED_STRIDE),
    );
    Ok((forward, reverse))
}

/// Adjusted Rand index between two partitions of the same road set, from
/// the standard contingency-table formula; 1 when the (degenerate)
/// denominator vanishes, since the partitions are then identical.
pub fn adjusted_rand_index(found: &ClusterSet, truth: &ClusterSet) -> Result<f64, SynthError> {
    let mut left = found.assignment().keys();
    let mut right = truth.assignment().keys();
    loop {
        match (left.next(), right.next()) {
            (None, None) => break,
            (Some(a), Some(b)) if a == b => continue,
            (a, b) => {
                let road_id = match (a, b) {
                    (Some(x), Some(y)) => x.min(y).clone(),
                    (x, y) => x.or(y).cloned().unwrap_or_default(),
                };
                return Err(SynthError::UniverseMismatch { road_id });
            }
        }
    }

    let mut table = vec![vec![0u64; truth.k()]; found.k()];
    for (road, &f) in found.assignment() {
        let t = truth.cluster_of(road).expect("universes verified equal");
        table[f][t] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let n: u64 = found.assignment().len() as u64;

    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let row_sum: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let col_sum: f64 = (0..truth.k())
        .map(|t| choose2(table.iter().map(|r| r[t]).sum()))
        .sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = row_sum * col_sum / total;
    let max = (row_sum + col_sum) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
