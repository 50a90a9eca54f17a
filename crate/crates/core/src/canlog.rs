//! CSV telemetry logs: parsing, validation and zero-order-hold synchronization.
//!
//! The log format is a fixed-header CSV:
//!
//! ```text
//! timestamp,speed,steering_angle,steering_torque,lka_engaged,lane_center_offset
//! 0.0,25.0,-3.2,0.1,1,0.12
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_HEADER: &str =
    "timestamp,speed,steering_angle,steering_torque,lka_engaged,lane_center_offset";

const FIELD_NAMES: [&str; 6] = [
    "timestamp",
    "speed",
    "steering_angle",
    "steering_torque",
    "lka_engaged",
    "lane_center_offset",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CanLogError {
    #[error("malformed header: expected `{LOG_HEADER}`")]
    MalformedHeader,
    #[error("timestamp at row {row} does not strictly increase")]
    NonMonotonicTimestamp { row: usize },
    #[error("field `{field}` out of range at row {row}")]
    FieldOutOfRange { row: usize, field: &'static str },
    #[error("row {row} is malformed: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("log contains no data rows")]
    EmptyLog,
    #[error("query time {0} outside the series time range")]
    OutOfRange(f64),
}

/// One synchronized telemetry sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    /// Seconds since the start of the drive.
    pub timestamp: f64,
    /// Vehicle speed in m/s.
    pub speed: f64,
    /// Steering wheel angle in degrees.
    pub steering_angle: f64,
    /// Normalized steering torque in `[-1, 1]`.
    pub steering_torque: f64,
    pub lka_engaged: bool,
    /// Signed lateral offset from the lane center in meters, positive to the right.
    pub lane_center_offset: f64,
}

impl TelemetryRecord {
    /// Checks the per-record invariants, naming the first violated field.
    pub fn validate(&self) -> Result<(), &'static str> {
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err("timestamp");
        }
        if !self.speed.is_finite() || self.speed < 0.0 {
            return Err("speed");
        }
        if !self.steering_angle.is_finite() {
            return Err("steering_angle");
        }
        if !self.steering_torque.is_finite() || !(-1.0..=1.0).contains(&self.steering_torque) {
            return Err("steering_torque");
        }
        if !self.lane_center_offset.is_finite() {
            return Err("lane_center_offset");
        }
        Ok(())
    }
}

/// A validated, strictly time-ordered telemetry log for one drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySeries {
    records: Vec<TelemetryRecord>,
    source_id: String,
}

impl TelemetrySeries {
    /// Builds a series from records, enforcing the same rules as [`parse_log`].
    pub fn new(
        source_id: impl Into<String>,
        records: Vec<TelemetryRecord>,
    ) -> Result<Self, CanLogError> {
        if records.is_empty() {
            return Err(CanLogError::EmptyLog);
        }
        for (i, rec) in records.iter().enumerate() {
            let row = i + 1;
            rec.validate()
                .map_err(|field| CanLogError::FieldOutOfRange { row, field })?;
            if i > 0 && rec.timestamp <= records[i - 1].timestamp {
                return Err(CanLogError::NonMonotonicTimestamp { row });
            }
        }
        Ok(Self {
            records,
            source_id: source_id.into(),
        })
    }

    pub fn records(&self) -> &[TelemetryRecord] {
        &self.records
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.records[0].timestamp
    }

    pub fn end_time(&self) -> f64 {
        self.records[self.records.len() - 1].timestamp
    }

    /// Zero-order hold: the record with the greatest timestamp `<= t`.
    pub fn sample_at(&self, t: f64) -> Result<&TelemetryRecord, CanLogError> {
        if !t.is_finite() || t < self.start_time() || t > self.end_time() {
            return Err(CanLogError::OutOfRange(t));
        }
        let idx = self.records.partition_point(|r| r.timestamp <= t);
        Ok(&self.records[idx - 1])
    }

    /// Renders the series back to the CSV log format.
    ///
    /// Numbers use the shortest representation that parses back to the same
    /// value, always with a decimal point, so canonical fixtures round-trip
    /// byte-for-byte.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:?},{:?},{:?},{:?},{},{:?}",
                r.timestamp,
                r.speed,
                r.steering_angle,
                r.steering_torque,
                u8::from(r.lka_engaged),
                r.lane_center_offset
            );
        }
        out
    }
}

/// Parses a CSV telemetry log.
pub fn parse_log(bytes: &[u8], source_id: impl Into<String>) -> Result<TelemetrySeries, CanLogError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut rows = reader.records();
    match rows.next() {
        Some(Ok(h)) if h.iter().eq(FIELD_NAMES) => {}
        _ => return Err(CanLogError::MalformedHeader),
    }

    let mut records: Vec<TelemetryRecord> = Vec::new();
    for (i, row_result) in rows.enumerate() {
        let row = i + 1;
        let cols = row_result.map_err(|e| CanLogError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        let record = parse_row(&cols, row)?;
        if records.last().is_some_and(|prev| record.timestamp <= prev.timestamp) {
            return Err(CanLogError::NonMonotonicTimestamp { row });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(CanLogError::EmptyLog);
    }
    Ok(TelemetrySeries {
        records,
        source_id: source_id.into(),
    })
}

fn parse_row(cols: &csv::StringRecord, row: usize) -> Result<TelemetryRecord, CanLogError> {
    if cols.len() != FIELD_NAMES.len() {
        return Err(CanLogError::MalformedRow {
            row,
            reason: format!("expected {} columns, found {}", FIELD_NAMES.len(), cols.len()),
        });
    }
    let num = |idx: usize| -> Result<f64, CanLogError> {
        cols[idx].trim().parse::<f64>().map_err(|_| CanLogError::MalformedRow {
            row,
            reason: format!("`{}` is not a number in field {}", &cols[idx], FIELD_NAMES[idx]),
        })
    };
    let lka_engaged = match cols[4].trim() {
        "0" => false,
        "1" => true,
        _ => {
            return Err(CanLogError::FieldOutOfRange {
                row,
                field: "lka_engaged",
            })
        }
    };
    let record = TelemetryRecord {
        timestamp: num(0)?,
        speed: num(1)?,
        steering_angle: num(2)?,
        steering_torque: num(3)?,
        lka_engaged,
        lane_center_offset: num(5)?,
    };
    record
        .validate()
        .map_err(|field| CanLogError::FieldOutOfRange { row, field })?;
    Ok(record)
}

/// One-line text rendering of a record, used as the CAN text input.
pub fn snapshot_text(record: &TelemetryRecord) -> String {
    format!(
        "speed={};steer_deg={};torque={};lka={};offset_m={}",
        fixed(record.speed, 1),
        fixed(record.steering_angle, 1),
        fixed(record.steering_torque, 2),
        u8::from(record.lka_engaged),
        fixed(record.lane_center_offset, 2),
    )
}

// Fixed-precision rendering without a negative zero.
fn fixed(value: f64, decimals: usize) -> String {
    let s = format!("{value:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(rows: &[&str]) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    fn rec(t: f64) -> TelemetryRecord {
        TelemetryRecord {
            timestamp: t,
            speed: 10.0,
            steering_angle: 0.0,
            steering_torque: 0.0,
            lka_engaged: true,
            lane_center_offset: 0.0,
        }
    }

    #[test]
    fn header_only_is_empty() {
        assert_eq!(parse_log(log(&[]).as_bytes(), "d"), Err(CanLogError::EmptyLog));
    }

    #[test]
    fn duplicate_timestamp_rejected_at_row_three() {
        let text = log(&["0.0,1.0,0.0,0.0,1,0.0", "0.1,1.0,0.0,0.0,1,0.0", "0.1,1.0,0.0,0.0,1,0.0"]);
        assert_eq!(
            parse_log(text.as_bytes(), "d"),
            Err(CanLogError::NonMonotonicTimestamp { row: 3 })
        );
    }

    #[test]
    fn bad_header_and_ranges() {
        assert_eq!(
            parse_log(b"time,speed\n0.0,1.0\n", "d"),
            Err(CanLogError::MalformedHeader)
        );
        let text = log(&["0.0,-1.0,0.0,0.0,1,0.0"]);
        assert_eq!(
            parse_log(text.as_bytes(), "d"),
            Err(CanLogError::FieldOutOfRange { row: 1, field: "speed" })
        );
        let text = log(&["0.0,1.0,0.0,1.5,1,0.0"]);
        assert_eq!(
            parse_log(text.as_bytes(), "d"),
            Err(CanLogError::FieldOutOfRange { row: 1, field: "steering_torque" })
        );
        let text = log(&["0.0,1.0,0.0,0.5,2,0.0"]);
        assert_eq!(
            parse_log(text.as_bytes(), "d"),
            Err(CanLogError::FieldOutOfRange { row: 1, field: "lka_engaged" })
        );
        let text = log(&["0.0,1.0,0.0,0.5,1"]);
        assert!(matches!(
            parse_log(text.as_bytes(), "d"),
            Err(CanLogError::MalformedRow { row: 1, .. })
        ));
    }

    #[test]
    fn zero_order_hold() {
        let s = TelemetrySeries::new("d", vec![rec(0.0), rec(0.5), rec(1.0)]).unwrap();
        assert_eq!(s.sample_at(0.7).unwrap().timestamp, 0.5);
        assert_eq!(s.sample_at(0.5).unwrap().timestamp, 0.5);
        assert_eq!(s.sample_at(0.0).unwrap().timestamp, 0.0);
        assert_eq!(s.sample_at(1.0).unwrap().timestamp, 1.0);
        assert_eq!(s.sample_at(1.2), Err(CanLogError::OutOfRange(1.2)));
        assert!(s.sample_at(-0.1).is_err());
    }

    #[test]
    fn snapshot_template() {
        let r = TelemetryRecord {
            timestamp: 3.0,
            speed: 25.0,
            steering_angle: -3.2,
            steering_torque: 0.10,
            lka_engaged: true,
            lane_center_offset: 0.12,
        };
        assert_eq!(
            snapshot_text(&r),
            "speed=25.0;steer_deg=-3.2;torque=0.10;lka=1;offset_m=0.12"
        );
        assert_eq!(snapshot_text(&r), snapshot_text(&r));

        let zero = TelemetryRecord {
            timestamp: 0.0,
            speed: 0.0,
            steering_angle: 0.0,
            steering_torque: 0.0,
            lka_engaged: false,
            lane_center_offset: 0.0,
        };
        assert_eq!(
            snapshot_text(&zero),
            "speed=0.0;steer_deg=0.0;torque=0.00;lka=0;offset_m=0.00"
        );
    }

    #[test]
    fn negative_zero_renders_unsigned() {
        let mut r = rec(0.0);
        r.steering_angle = -0.04;
        r.lane_center_offset = -0.001;
        assert_eq!(
            snapshot_text(&r),
            "speed=10.0;steer_deg=0.0;torque=0.00;lka=1;offset_m=0.00"
        );
    }

    #[test]
    fn crlf_and_trailing_blank_lines_tolerated() {
        let text = format!("{LOG_HEADER}\r\n0.0,1.0,0.0,0.0,1,0.0\r\n\n");
        assert_eq!(parse_log(text.as_bytes(), "d").unwrap().len(), 1);
    }
}
