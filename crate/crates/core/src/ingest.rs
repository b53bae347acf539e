//! Parsing of raw speed records and assembly of gap-free daily series.
//!
//! Raw floating-car records arrive as CSV rows `date,period,road_id,speed,
//! sample_vehicles` with one row per (road, date, period). [`assemble_series`]
//! collects the rows of one road-day into a fixed-length vector, marks the
//! periods that were never observed, and fills them with [`impute_missing`]
//! (linear interpolation between the nearest observed neighbors, nearest-value
//! fill at the edges). The deterministic fill replaces the Bayesian tensor
//! imputation used on the original dataset so that every downstream stage is
//! reproducible from the raw file alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use thiserror::Error;

/// Number of 5-minute intervals in a standard day.
pub const STANDARD_DAY_LEN: usize = 288;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: period {period} outside 0..{day_len}")]
    PeriodOutOfRange {
        line: usize,
        period: i64,
        day_len: usize,
    },
    #[error("duplicate period {period} for road {road_id} on {date}")]
    DuplicatePeriod {
        road_id: String,
        date: NaiveDate,
        period: u32,
    },
    #[error("no observations for road {road_id} on {date}")]
    AllMissing { road_id: String, date: NaiveDate },
}

/// One raw observation: the average speed of a road over one 5-minute period.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRecord {
    pub date: NaiveDate,
    /// 0-based interval index within the day.
    pub period: u32,
    pub road_id: String,
    /// Average speed in km/h.
    pub speed: f64,
    /// Number of floating cars behind the average.
    pub sample_vehicles: u32,
}

/// One road's complete daily speed vector, with a mask of filled slots.
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    pub road_id: String,
    pub date: NaiveDate,
    pub values: Vec<f64>,
    /// `true` where the value was imputed rather than observed.
    pub imputed_mask: Vec<bool>,
}

impl DailySeries {
    pub fn day_len(&self) -> usize {
        self.values.len()
    }

    pub fn observed_count(&self) -> usize {
        self.imputed_mask.iter().filter(|&&m| !m).count()
    }
}

/// Parses the record CSV format: header line
/// `date,period,road_id,speed,sample_vehicles`, then one record per row.
/// `period_base` is the base of the period column in the file (0 or 1);
/// periods are stored 0-based regardless.
pub fn parse_records(
    text: &str,
    day_len: usize,
    period_base: u8,
) -> Result<Vec<SpeedRecord>, IngestError> {
    let mut records = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if line == 1 {
            // Header row; the format requires it.
            continue;
        }
        let row = raw_line.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 5 {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("expected 5 columns, found {}", fields.len()),
            });
        }
        let date = NaiveDate::parse_from_str(fields[0].trim(), "%Y%m%d").map_err(|_| {
            IngestError::MalformedRow {
                line,
                reason: format!("bad date {:?}", fields[0]),
            }
        })?;
        let raw_period: i64 =
            fields[1]
                .trim()
                .parse()
                .map_err(|_| IngestError::MalformedRow {
                    line,
                    reason: format!("bad period {:?}", fields[1]),
                })?;
        let period = raw_period - i64::from(period_base);
        if period < 0 || period >= day_len as i64 {
            return Err(IngestError::PeriodOutOfRange {
                line,
                period: raw_period,
                day_len,
            });
        }
        let road_id = fields[2].trim().to_string();
        if road_id.is_empty() {
            return Err(IngestError::MalformedRow {
                line,
                reason: "empty road_id".to_string(),
            });
        }
        let speed: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| IngestError::MalformedRow {
                line,
                reason: format!("bad speed {:?}", fields[3]),
            })?;
        if !speed.is_finite() || speed < 0.0 {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("speed {speed} must be finite and >= 0"),
            });
        }
        let sample_vehicles: u32 =
            fields[4]
                .trim()
                .parse()
                .map_err(|_| IngestError::MalformedRow {
                    line,
                    reason: format!("bad sample_vehicles {:?}", fields[4]),
                })?;
        records.push(SpeedRecord {
            date,
            period: period as u32,
            road_id,
            speed,
            sample_vehicles,
        });
    }
    Ok(records)
}

/// Serializes records back into the CSV format accepted by [`parse_records`]
/// (0-based periods). Round-trips exactly.
pub fn write_records(records: &[SpeedRecord]) -> String {
    let mut out = String::from("date,period,road_id,speed,sample_vehicles\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.date.format("%Y%m%d"),
            r.period,
            r.road_id,
            r.speed,
            r.sample_vehicles
        )
        .expect("write to string");
    }
    out
}

/// Builds the complete daily series of one road on one date. Slots without an
/// observation are filled by [`impute_missing`] and flagged in the mask.
pub fn assemble_series(
    records: &[SpeedRecord],
    road_id: &str,
    date: NaiveDate,
    day_len: usize,
) -> Result<DailySeries, IngestError> {
    let mut slots: Vec<Option<f64>> = vec![None; day_len];
    for r in records {
        if r.road_id != road_id || r.date != date {
            continue;
        }
        let p = r.period as usize;
        if slots[p].is_some() {
            return Err(IngestError::DuplicatePeriod {
                road_id: road_id.to_string(),
                date,
                period: r.period,
            });
        }
        slots[p] = Some(r.speed);
    }
    if slots.iter().all(Option::is_none) {
        return Err(IngestError::AllMissing {
            road_id: road_id.to_string(),
            date,
        });
    }
    let imputed_mask: Vec<bool> = slots.iter().map(Option::is_none).collect();
    let values = impute_missing(&slots);
    Ok(DailySeries {
        road_id: road_id.to_string(),
        date,
        values,
        imputed_mask,
    })
}

/// Assembles one series per (road, date) pair present in `records`, ordered
/// by road id then date.
pub fn assemble_all(
    records: &[SpeedRecord],
    day_len: usize,
) -> Result<Vec<DailySeries>, IngestError> {
    let mut groups: BTreeMap<(String, NaiveDate), Vec<&SpeedRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.road_id.clone(), r.date))
            .or_default()
            .push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((road_id, date), group) in groups {
        let mut slots: Vec<Option<f64>> = vec![None; day_len];
        for r in group {
            let p = r.period as usize;
            if slots[p].is_some() {
                return Err(IngestError::DuplicatePeriod {
                    road_id,
                    date,
                    period: r.period,
                });
            }
            slots[p] = Some(r.speed);
        }
        let imputed_mask: Vec<bool> = slots.iter().map(Option::is_none).collect();
        let values = impute_missing(&slots);
        out.push(DailySeries {
            road_id,
            date,
            values,
            imputed_mask,
        });
    }
    Ok(out)
}

/// Fills gaps in a value vector: interior gaps by linear interpolation between
/// the nearest observed neighbors, leading/trailing gaps with the nearest
/// observed value. Observed values pass through untouched.
///
/// Panics if no value is observed; callers guard with
/// [`IngestError::AllMissing`].
pub fn impute_missing(values: &[Option<f64>]) -> Vec<f64> {
    let observed: Vec<usize> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|_| i))
        .collect();
    assert!(
        !observed.is_empty(),
        "impute_missing requires at least one observed value"
    );

    let mut out = vec![0.0; values.len()];
    let first = observed[0];
    let last = *observed.last().unwrap();
    for i in 0..values.len() {
        out[i] = match values[i] {
            Some(v) => v,
            None if i < first => values[first].unwrap(),
            None if i > last => values[last].unwrap(),
            None => {
                // Interior gap: interpolate between the bracketing observations.
                let left = *observed.iter().rev().find(|&&j| j < i).unwrap();
                let right = *observed.iter().find(|&&j| j > i).unwrap();
                let vl = values[left].unwrap();
                let vr = values[right].unwrap();
                let t = (i - left) as f64 / (right - left) as f64;
                vl + t * (vr - vl)
            }
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y%m%d").unwrap()
    }

    #[test]
    fn parses_table_example_row() {
        let text = "date,period,road_id,speed,sample_vehicles\n20190909,1,3,25.14,20\n";
        let records = parse_records(text, STANDARD_DAY_LEN, 0).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.date, date("20190909"));
        assert_eq!(r.period, 1);
        assert_eq!(r.road_id, "3");
        assert_eq!(r.speed, 25.14);
        assert_eq!(r.sample_vehicles, 20);
    }

    #[test]
    fn empty_data_section_yields_empty_list() {
        let text = "date,period,road_id,speed,sample_vehicles\n";
        assert!(parse_records(text, STANDARD_DAY_LEN, 0).unwrap().is_empty());
    }

    #[test]
    fn period_288_is_out_of_range() {
        let text = "date,period,road_id,speed,sample_vehicles\n20190909,288,3,25.14,20\n";
        match parse_records(text, STANDARD_DAY_LEN, 0) {
            Err(IngestError::PeriodOutOfRange { line, period, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(period, 288);
            }
            other => panic!("expected PeriodOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn period_base_one_shifts_down() {
        let text = "date,period,road_id,speed,sample_vehicles\n20190909,1,3,25.14,20\n";
        let records = parse_records(text, STANDARD_DAY_LEN, 1).unwrap();
        assert_eq!(records[0].period, 0);
        // Raw 0 is invalid under base 1.
        let text = "date,period,road_id,speed,sample_vehicles\n20190909,0,3,25.14,20\n";
        assert!(matches!(
            parse_records(text, STANDARD_DAY_LEN, 1),
            Err(IngestError::PeriodOutOfRange { .. })
        ));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = "date,period,road_id,speed,sample_vehicles\n20190909,1,3,25.14,20\n20190909,2,3,fast,20\n";
        match parse_records(text, STANDARD_DAY_LEN, 0) {
            Err(IngestError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
        let text = "date,period,road_id,speed,sample_vehicles\n20190909,1,3\n";
        assert!(matches!(
            parse_records(text, STANDARD_DAY_LEN, 0),
            Err(IngestError::MalformedRow { line: 2, .. })
        ));
        let text = "date,period,road_id,speed,sample_vehicles\n20190909,1,3,-4.0,20\n";
        assert!(matches!(
            parse_records(text, STANDARD_DAY_LEN, 0),
            Err(IngestError::MalformedRow { line: 2, .. })
        ));
    }

    fn record(road: &str, d: &str, period: u32, speed: f64) -> SpeedRecord {
        SpeedRecord {
            date: date(d),
            period,
            road_id: road.to_string(),
            speed,
            sample_vehicles: 1,
        }
    }

    #[test]
    fn complete_day_has_all_false_mask() {
        let records: Vec<SpeedRecord> =
            (0..4).map(|p| record("a", "20210621", p, 30.0 + p as f64)).collect();
        let s = assemble_series(&records, "a", date("20210621"), 4).unwrap();
        assert_eq!(s.values, vec![30.0, 31.0, 32.0, 33.0]);
        assert!(s.imputed_mask.iter().all(|&m| !m));
    }

    #[test]
    fn gap_detection_in_toy_day() {
        let records = vec![
            record("a", "20210621", 0, 10.0),
            record("a", "20210621", 2, 20.0),
        ];
        let s = assemble_series(&records, "a", date("20210621"), 3).unwrap();
        assert_eq!(s.imputed_mask, vec![false, true, false]);
        assert_eq!(s.values, vec![10.0, 15.0, 20.0]);
    }

    #[test]
    fn zero_observations_is_all_missing() {
        let records = vec![record("b", "20210621", 0, 10.0)];
        assert!(matches!(
            assemble_series(&records, "a", date("20210621"), 3),
            Err(IngestError::AllMissing { .. })
        ));
    }

    #[test]
    fn duplicate_period_is_an_error() {
        let records = vec![
            record("a", "20210621", 1, 10.0),
            record("a", "20210621", 1, 11.0),
        ];
        assert!(matches!(
            assemble_series(&records, "a", date("20210621"), 3),
            Err(IngestError::DuplicatePeriod { period: 1, .. })
        ));
    }

    #[test]
    fn impute_linear_midpoint() {
        assert_eq!(impute_missing(&[Some(5.0), None, Some(9.0)]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn impute_nearest_at_edges() {
        assert_eq!(
            impute_missing(&[None, Some(4.0), Some(4.0)]),
            vec![4.0, 4.0, 4.0]
        );
    }

    #[test]
    fn impute_two_point_line() {
        // 10 + i * (40 - 10) / 3 at i = 1, 2.
        assert_eq!(
            impute_missing(&[Some(10.0), None, None, Some(40.0)]),
            vec![10.0, 20.0, 30.0, 40.0]
        );
    }

    #[test]
    fn assemble_all_groups_by_road_and_date() {
        let records = vec![
            record("b", "20210621", 0, 1.0),
            record("a", "20210622", 0, 2.0),
            record("a", "20210621", 0, 3.0),
            record("a", "20210621", 1, 4.0),
        ];
        let all = assemble_all(&records, 2).unwrap();
        let keys: Vec<(String, NaiveDate)> =
            all.iter().map(|s| (s.road_id.clone(), s.date)).collect();
        assert_eq!(
            keys,
            vec![
                ("a".to_string(), date("20210621")),
                ("a".to_string(), date("20210622")),
                ("b".to_string(), date("20210621")),
            ]
        );
    }

    proptest! {
        #[test]
        fn imputation_is_idempotent(values in proptest::collection::vec(
            proptest::option::of(0.0f64..120.0), 1..40)
        ) {
            prop_assume!(values.iter().any(Option::is_some));
            let once = impute_missing(&values);
            let wrapped: Vec<Option<f64>> = once.iter().copied().map(Some).collect();
            let twice = impute_missing(&wrapped);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn imputed_values_stay_in_observed_hull(values in proptest::collection::vec(
            proptest::option::of(0.0f64..120.0), 1..40)
        ) {
            prop_assume!(values.iter().any(Option::is_some));
            let observed: Vec<f64> = values.iter().filter_map(|v| *v).collect();
            let lo = observed.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in impute_missing(&values) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn records_round_trip(rows in proptest::collection::vec(
            (0u32..288, 0u32..5000, 0.0f64..150.0, 0u32..100), 0..50)
        ) {
            let records: Vec<SpeedRecord> = rows
                .iter()
                .map(|&(period, road, speed, vehicles)| SpeedRecord {
                    date: NaiveDate::from_ymd_opt(2021, 6, 21).unwrap(),
                    period,
                    road_id: format!("r{road}"),
                    speed,
                    sample_vehicles: vehicles,
                })
                .collect();
            let text = write_records(&records);
            let parsed = parse_records(&text, STANDARD_DAY_LEN, 0).unwrap();
            prop_assert_eq!(records, parsed);
        }
    }
}
