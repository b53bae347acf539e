//! Gramian Angular Field encoding of daily speed series.
//!
//! A speed series is rescaled into [−1, 1], reinterpreted as angles on the
//! unit circle, and expanded into the symmetric matrix of pairwise angular
//! cosine sums. The matrix preserves the series (its diagonal is an invertible
//! image of the rescaled values) while exposing the temporal correlation
//! between every pair of intervals, which is what the convolutional encoder
//! consumes.

use thiserror::Error;

use crate::ingest::DailySeries;

#[derive(Debug, Error, PartialEq)]
pub enum GafError {
    #[error("constant series: rescaling needs max > min")]
    ConstantSeries,
    #[error("series length {len} too short; need at least 2")]
    TooShort { len: usize },
    #[error("target length {target} does not divide series length {len}")]
    NotDivisible { len: usize, target: usize },
}

/// A speed series rescaled into [−1, 1] by its own min/max.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    pub values: Vec<f64>,
    /// km/h bounds the rescale was computed from.
    pub source_min: f64,
    pub source_max: f64,
}

/// A normalized series in polar form: angle carries the value, radius the
/// slot's position in time.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarSeries {
    /// φ_i = arccos(ṽ_i), in [0, π].
    pub angles: Vec<f64>,
    /// r_i = t_i / N with t_i the 1-based slot index; strictly increasing.
    pub radii: Vec<f64>,
    pub span_constant: f64,
}

/// The Gramian Angular Field of one series: entry (i, j) is cos(φ_i + φ_j).
#[derive(Debug, Clone, PartialEq)]
pub struct GafMatrix {
    data: Vec<f64>,
    n: usize,
}

impl GafMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Row-major entries, length n·n.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Builds a matrix from row-major entries. Panics unless `data` is a
    /// square n·n layout.
    pub fn from_rows(data: Vec<f64>, n: usize) -> Self {
        assert_eq!(data.len(), n * n, "entry count must be n*n");
        GafMatrix { data, n }
    }

    /// Serializes to the binary dump format: magic `GAF1`, u32 side length,
    /// then n·n little-endian f64 entries row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 8);
        out.extend_from_slice(b"GAF1");
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary dump format written by [`GafMatrix::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 8 {
            return Err("truncated header".to_string());
        }
        if &bytes[0..4] != b"GAF1" {
            return Err("bad magic; expected GAF1".to_string());
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8 + n * n * 8;
        if bytes.len() != expected {
            return Err(format!(
                "expected {expected} bytes for side {n}, found {}",
                bytes.len()
            ));
        }
        let data = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(GafMatrix { data, n })
    }
}

/// Rescales a series into [−1, 1]: ṽ_i = ((v_i − max) + (v_i − min)) / (max − min).
/// The minimum maps to −1 and the maximum to +1.
pub fn normalize_series(values: &[f64]) -> Result<NormalizedSeries, GafError> {
    if values.len() < 2 {
        return Err(GafError::TooShort { len: values.len() });
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(GafError::ConstantSeries);
    }
    let scale = max - min;
    let rescaled = values
        .iter()
        .map(|&v| ((v - max) + (v - min)) / scale)
        .collect();
    Ok(NormalizedSeries {
        values: rescaled,
        source_min: min,
        source_max: max,
    })
}

/// Maps a normalized series onto the unit half-circle: angle φ_i = arccos(ṽ_i)
/// encodes the value, radius r_i = t_i / N the 1-based time slot. The radius
/// matters only for plotting; the field itself is a function of the angles.
pub fn to_polar(norm: &NormalizedSeries, span_constant: f64) -> PolarSeries {
    let angles = norm.values.iter().map(|&v| v.clamp(-1.0, 1.0).acos()).collect();
    let radii = (1..=norm.values.len())
        .map(|t| t as f64 / span_constant)
        .collect();
    PolarSeries {
        angles,
        radii,
        span_constant,
    }
}

/// Expands a polar series into its Gramian matrix of pairwise cosine sums:
/// data[i][j] = cos(φ_i + φ_j) = ṽ_i·ṽ_j − √(1−ṽ_i²)·√(1−ṽ_j²).
///
/// The lower triangle mirrors the upper so symmetry holds exactly; 1−ṽ² is
/// floored at 0 to absorb negative rounding dust at ṽ = ±1, and each entry
/// is clamped to the cosine range so rounding never leaks past ±1.
pub fn gaf_from_polar(polar: &PolarSeries) -> GafMatrix {
    let v: Vec<f64> = polar.angles.iter().map(|&a| a.cos()).collect();
    gaf_from_normalized(&v)
}

fn gaf_from_normalized(v: &[f64]) -> GafMatrix {
    let n = v.len();
    let s: Vec<f64> = v.iter().map(|&x| (1.0 - x * x).max(0.0).sqrt()).collect();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g = (v[i] * v[j] - s[i] * s[j]).clamp(-1.0, 1.0);
            data[i * n + j] = g;
            data[j * n + i] = g;
        }
    }
    GafMatrix { data, n }
}

/// Encodes one road-day: normalize, lift to polar coordinates, expand into
/// the field matrix. A 288-slot day yields a 288×288 matrix.
pub fn encode_road_day(series: &DailySeries) -> Result<GafMatrix, GafError> {
    encode_values(&series.values)
}

/// Encodes a bare value vector; see [`encode_road_day`].
pub fn encode_values(values: &[f64]) -> Result<GafMatrix, GafError> {
    let norm = normalize_series(values)?;
    Ok(gaf_from_normalized(&norm.values))
}

/// Piecewise-aggregate downsampling: each output slot is the mean of
/// `len / target_length` consecutive inputs. `target_length` must divide the
/// series length.
pub fn paa_downsample(values: &[f64], target_length: usize) -> Result<Vec<f64>, GafError> {
    let len = values.len();
    if target_length == 0 || len % target_length != 0 {
        return Err(GafError::NotDivisible {
            len,
            target: target_length,
        });
    }
    let window = len / target_length;
    Ok(values
        .chunks_exact(window)
        .map(|chunk| chunk.iter().sum::<f64>() / window as f64)
        .collect())
}
