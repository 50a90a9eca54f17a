//! Failure localization and frame-sampled temporal windows around each event.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canlog::TelemetrySeries;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WindowError {
    #[error("invalid window config: {0}")]
    InvalidConfig(String),
    #[error("window [{start}, {end}] exceeds series range [{series_start}, {series_end}]")]
    InsufficientContext {
        start: f64,
        end: f64,
        series_start: f64,
        series_end: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Seconds of context before the event.
    pub pre_seconds: f64,
    /// Seconds of context after the event.
    pub post_seconds: f64,
    pub frame_interval: f64,
    /// Lane-centering deviation (meters) above which an engaged LKA is failing.
    pub deviation_threshold: f64,
    /// 1-based index of the event frame inside the window.
    pub event_frame_index: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            pre_seconds: 3.5,
            post_seconds: 2.5,
            frame_interval: 0.5,
            deviation_threshold: 0.40,
            event_frame_index: 8,
        }
    }
}

impl WindowConfig {
    /// A symmetric 3 s / 3 s window, which places the event on frame 7.
    pub fn centered() -> Self {
        Self {
            pre_seconds: 3.0,
            post_seconds: 3.0,
            event_frame_index: 7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), WindowError> {
        let bad = |m: &str| Err(WindowError::InvalidConfig(m.to_string()));
        if !(self.pre_seconds > 0.0 && self.post_seconds > 0.0 && self.frame_interval > 0.0) {
            return bad("pre_seconds, post_seconds and frame_interval must be positive");
        }
        if !(self.deviation_threshold >= 0.0) {
            return bad("deviation_threshold must be non-negative");
        }
        let steps = (self.pre_seconds + self.post_seconds) / self.frame_interval;
        if (steps - steps.round()).abs() > 1e-9 {
            return bad("(pre_seconds + post_seconds) / frame_interval must be an integer");
        }
        let pre_steps = self.pre_seconds / self.frame_interval;
        if (pre_steps - pre_steps.round()).abs() > 1e-9
            || self.event_frame_index != pre_steps.round() as usize + 1
        {
            return bad("event_frame_index must equal pre_seconds / frame_interval + 1");
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        ((self.pre_seconds + self.post_seconds) / self.frame_interval).round() as usize + 1
    }

    pub fn span(&self) -> f64 {
        self.pre_seconds + self.post_seconds
    }

    /// Frame times for a window anchored on `t`; the anchor itself is
    /// reproduced exactly at `event_frame_index`.
    pub fn frame_grid(&self, t: f64) -> Vec<f64> {
        let anchor = (self.event_frame_index - 1) as f64;
        (0..self.frame_count())
            .map(|k| t + (k as f64 - anchor) * self.frame_interval)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Disengagement,
    DeviationExceeded,
    /// Synthetic anchor of a normal-driving window.
    Normal,
}

impl EventKind {
    pub fn is_failure(self) -> bool {
        !matches!(self, EventKind::Normal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub timestamp: f64,
    pub kind: EventKind,
    pub peak_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventWindow {
    pub event: FailureEvent,
    pub frame_times: Vec<f64>,
    pub source_id: String,
    pub event_frame_index: usize,
}

impl EventWindow {
    /// Stable identifier: `<source_id>@<event time in ms>`.
    pub fn window_id(&self) -> String {
        format!("{}@{}", self.source_id, time_key(self.event.timestamp))
    }

    pub fn start(&self) -> f64 {
        self.frame_times[0]
    }

    pub fn end(&self) -> f64 {
        self.frame_times[self.frame_times.len() - 1]
    }
}

/// Millisecond key used for frame lookup and identifiers.
pub fn time_key(t: f64) -> i64 {
    (t * 1000.0).round() as i64
}

/// Finds disengagements and engaged runs of excessive lane-centering deviation.
pub fn detect_events(series: &TelemetrySeries, cfg: &WindowConfig) -> Vec<FailureEvent> {
    let records = series.records();
    let mut events = Vec::new();

    for pair in records.windows(2) {
        if pair[0].lka_engaged && !pair[1].lka_engaged {
            events.push(FailureEvent {
                timestamp: pair[1].timestamp,
                kind: EventKind::Disengagement,
                peak_offset: pair[1].lane_center_offset,
            });
        }
    }

    let mut run: Option<FailureEvent> = None;
    for r in records {
        let deviating = r.lka_engaged && r.lane_center_offset.abs() > cfg.deviation_threshold;
        match (&mut run, deviating) {
            (None, true) => {
                run = Some(FailureEvent {
                    timestamp: r.timestamp,
                    kind: EventKind::DeviationExceeded,
                    peak_offset: r.lane_center_offset,
                })
            }
            (Some(ev), true) => {
                if r.lane_center_offset.abs() > ev.peak_offset.abs() {
                    ev.peak_offset = r.lane_center_offset;
                }
            }
            (Some(_), false) => events.extend(run.take()),
            (None, false) => {}
        }
    }
    events.extend(run);

    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    events
}

/// Expands an event into its frame-sampled window.
pub fn extract_window(
    series: &TelemetrySeries,
    event: &FailureEvent,
    cfg: &WindowConfig,
) -> Result<EventWindow, WindowError> {
    cfg.validate()?;
    let frame_times = cfg.frame_grid(event.timestamp);
    let start = frame_times[0];
    let end = frame_times[frame_times.len() - 1];
    if start < series.start_time() - TIME_EPS || end > series.end_time() + TIME_EPS {
        return Err(WindowError::InsufficientContext {
            start,
            end,
            series_start: series.start_time(),
            series_end: series.end_time(),
        });
    }
    Ok(EventWindow {
        event: *event,
        frame_times,
        source_id: series.source_id().to_string(),
        event_frame_index: cfg.event_frame_index,
    })
}

/// Samples normal-driving windows far from every failure event.
///
/// Candidate anchors are record timestamps whose window stays inside the
/// series and keeps at least one full window span of clearance from each
/// event. Candidates are shuffled with `seed` and accepted greedily when they
/// do not overlap an already accepted window. The result is sorted by time.
pub fn sample_normal_windows(
    series: &TelemetrySeries,
    events: &[FailureEvent],
    cfg: &WindowConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<EventWindow>, WindowError> {
    cfg.validate()?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let span = cfg.span();
    let clearance = span;

    let mut candidates: Vec<f64> = series
        .records()
        .iter()
        .map(|r| r.timestamp)
        .filter(|&t| {
            let (lo, hi) = (t - cfg.pre_seconds, t + cfg.post_seconds);
            lo >= series.start_time() - TIME_EPS
                && hi <= series.end_time() + TIME_EPS
                && events
                    .iter()
                    .all(|e| lo >= e.timestamp + clearance - TIME_EPS || hi <= e.timestamp - clearance + TIME_EPS)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let mut chosen: Vec<f64> = Vec::with_capacity(count);
    for t in candidates {
        if chosen.len() == count {
            break;
        }
        // Two anchors overlap iff they are closer than one span.
        if chosen.iter().all(|&c| (c - t).abs() > span + TIME_EPS) {
            chosen.push(t);
        }
    }
    chosen.sort_by(f64::total_cmp);

    chosen
        .into_iter()
        .map(|t| {
            let (lo, hi) = (t - cfg.pre_seconds - TIME_EPS, t + cfg.post_seconds + TIME_EPS);
            let peak_offset = series
                .records()
                .iter()
                .filter(|r| r.timestamp >= lo && r.timestamp <= hi)
                .map(|r| r.lane_center_offset)
                .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let event = FailureEvent {
                timestamp: t,
                kind: EventKind::Normal,
                peak_offset,
            };
            extract_window(series, &event, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canlog::TelemetryRecord;
    use proptest::prelude::*;

    fn series_from(engaged: &[bool], offsets: &[f64], dt: f64) -> TelemetrySeries {
        let records = engaged
            .iter()
            .zip(offsets)
            .enumerate()
            .map(|(i, (&e, &o))| TelemetryRecord {
                timestamp: i as f64 * dt,
                speed: 20.0,
                steering_angle: 0.0,
                steering_torque: 0.0,
                lka_engaged: e,
                lane_center_offset: o,
            })
            .collect();
        TelemetrySeries::new("drive", records).unwrap()
    }

    fn quiet(n: usize, dt: f64) -> TelemetrySeries {
        series_from(&vec![true; n], &vec![0.0; n], dt)
    }

    #[test]
    fn disengagement_at_first_false_record() {
        let s = series_from(&[true, true, true, false, false], &[0.0; 5], 0.1);
        let ev = detect_events(&s, &WindowConfig::default());
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, EventKind::Disengagement);
        assert!((ev[0].timestamp - 0.3).abs() < 1e-12);
    }

    #[test]
    fn deviation_run_start_and_peak() {
        let s = series_from(&[true; 4], &[0.1, 0.5, 0.6, 0.2], 0.1);
        let ev = detect_events(&s, &WindowConfig::default());
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, EventKind::DeviationExceeded);
        assert!((ev[0].timestamp - 0.1).abs() < 1e-12);
        assert_eq!(ev[0].peak_offset, 0.6);
    }

    #[test]
    fn deviation_ignored_while_disengaged() {
        let s = series_from(&[false; 4], &[0.1, 0.9, -0.9, 0.2], 0.1);
        assert!(detect_events(&s, &WindowConfig::default()).is_empty());
    }

    #[test]
    fn quiet_series_has_no_events() {
        let s = series_from(&[true; 4], &[0.1, -0.4, 0.39, 0.0], 0.1);
        assert!(detect_events(&s, &WindowConfig::default()).is_empty());
    }

    #[test]
    fn default_window_grid() {
        let s = quiet(2001, 0.1);
        let ev = FailureEvent {
            timestamp: 100.0,
            kind: EventKind::Disengagement,
            peak_offset: 0.0,
        };
        let w = extract_window(&s, &ev, &WindowConfig::default()).unwrap();
        let expected: Vec<f64> = (0..13).map(|k| 96.5 + 0.5 * k as f64).collect();
        assert_eq!(w.frame_times, expected);
        assert_eq!(w.frame_times[7], 100.0);
    }

    #[test]
    fn short_window_grid() {
        let s = quiet(300, 0.1);
        let cfg = WindowConfig {
            pre_seconds: 1.0,
            post_seconds: 1.0,
            event_frame_index: 3,
            ..WindowConfig::default()
        };
        let ev = FailureEvent {
            timestamp: 10.0,
            kind: EventKind::Disengagement,
            peak_offset: 0.0,
        };
        let w = extract_window(&s, &ev, &cfg).unwrap();
        assert_eq!(w.frame_times, vec![9.0, 9.5, 10.0, 10.5, 11.0]);
    }

    #[test]
    fn early_event_lacks_context() {
        let s = quiet(300, 0.1);
        let ev = FailureEvent {
            timestamp: 2.0,
            kind: EventKind::Disengagement,
            peak_offset: 0.0,
        };
        assert!(matches!(
            extract_window(&s, &ev, &WindowConfig::default()),
            Err(WindowError::InsufficientContext { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(WindowConfig::default().validate().is_ok());
        assert!(WindowConfig::centered().validate().is_ok());
        let d = WindowConfig::default;
        for c in [
            WindowConfig { event_frame_index: 7, ..d() },
            WindowConfig { frame_interval: 0.4, ..d() },
            WindowConfig { pre_seconds: 0.0, ..d() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn centered_window_puts_event_on_frame_seven() {
        let s = quiet(300, 0.1);
        let ev = FailureEvent {
            timestamp: 10.0,
            kind: EventKind::Disengagement,
            peak_offset: 0.0,
        };
        let w = extract_window(&s, &ev, &WindowConfig::centered()).unwrap();
        assert_eq!(w.frame_times.len(), 13);
        assert_eq!(w.frame_times[6], 10.0);
    }

    #[test]
    fn normal_windows_deterministic() {
        let s = quiet(601, 0.1);
        let cfg = WindowConfig::default();
        let a = sample_normal_windows(&s, &[], &cfg, 3, 7).unwrap();
        let b = sample_normal_windows(&s, &[], &cfg, 3, 7).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        for w in &a {
            assert_eq!(w.event.kind, EventKind::Normal);
            assert_eq!(w.frame_times.len(), 13);
        }
        for pair in a.windows(2) {
            assert!(pair[1].start() > pair[0].end());
        }
    }

    #[test]
    fn normal_windows_edge_cases() {
        let cfg = WindowConfig::default();
        let s = quiet(601, 0.1);
        assert!(sample_normal_windows(&s, &[], &cfg, 0, 1).unwrap().is_empty());
        // 5 s of data cannot hold a 6 s window.
        let short = quiet(51, 0.1);
        assert!(sample_normal_windows(&short, &[], &cfg, 3, 1).unwrap().is_empty());
    }

    #[test]
    fn normal_windows_keep_clear_of_events() {
        let s = quiet(601, 0.1);
        let cfg = WindowConfig::default();
        let events = [FailureEvent {
            timestamp: 30.0,
            kind: EventKind::Disengagement,
            peak_offset: 0.0,
        }];
        let ws = sample_normal_windows(&s, &events, &cfg, 10, 3).unwrap();
        assert!(!ws.is_empty());
        for w in ws {
            assert!(w.end() <= 30.0 - 3.5 || w.start() >= 30.0 + 2.5);
            assert!(w.end() <= 24.0 + 1e-9 || w.start() >= 36.0 - 1e-9);
        }
    }

    fn arb_series() -> impl Strategy<Value = TelemetrySeries> {
        prop::collection::vec((any::<bool>(), -1.0f64..1.0, 1u32..5), 2..200).prop_map(|rows| {
            let mut t = 0.0;
            let records = rows
                .into_iter()
                .map(|(e, o, dt)| {
                    t += dt as f64 * 0.1;
                    TelemetryRecord {
                        timestamp: t,
                        speed: 15.0,
                        steering_angle: 0.0,
                        steering_torque: 0.0,
                        lka_engaged: e,
                        lane_center_offset: o,
                    }
                })
                .collect();
            TelemetrySeries::new("p", records).unwrap()
        })
    }

    proptest! {
        #[test]
        fn windows_uphold_invariants(s in arb_series(), seed in 0u64..1000) {
            let cfg = WindowConfig::default();
            let events = detect_events(&s, &cfg);
            let mut windows: Vec<EventWindow> = events
                .iter()
                .filter_map(|e| extract_window(&s, e, &cfg).ok())
                .collect();
            let failures = windows.len();
            windows.extend(sample_normal_windows(&s, &events, &cfg, 4, seed).unwrap());
            for w in &windows {
                prop_assert_eq!(w.frame_times.len(), 13);
                prop_assert!((w.end() - w.start() - 6.0).abs() < 1e-9);
                for p in w.frame_times.windows(2) {
                    prop_assert!((p[1] - p[0] - 0.5).abs() < 1e-9);
                }
                prop_assert_eq!(w.frame_times[7], w.event.timestamp);
                if w.event.kind == EventKind::DeviationExceeded {
                    prop_assert!(w.event.peak_offset.abs() > cfg.deviation_threshold);
                }
            }
            for n in &windows[failures..] {
                for f in &windows[..failures] {
                    prop_assert!(n.end() < f.start() || n.start() > f.end());
                }
            }
        }

        #[test]
        fn detection_idempotent_and_sorted(s in arb_series()) {
            let cfg = WindowConfig::default();
            let a = detect_events(&s, &cfg);
            prop_assert_eq!(&a, &detect_events(&s, &cfg));
            for p in a.windows(2) {
                prop_assert!(p[0].timestamp <= p[1].timestamp);
            }
        }

        #[test]
        fn concatenation_is_union(a in arb_series(), b in arb_series()) {
            let cfg = WindowConfig::default();
            // Quiet engaged records on both sides of the seam: no transition there.
            let quiet_rec = |t: f64| TelemetryRecord {
                timestamp: t, speed: 15.0, steering_angle: 0.0, steering_torque: 0.0,
                lka_engaged: true, lane_center_offset: 0.0,
            };
            let mut ra = vec![quiet_rec(0.0)];
            ra.extend(a.records().iter().map(|r| TelemetryRecord { timestamp: r.timestamp + 0.1, ..*r }));
            let a_end = ra.last().unwrap().timestamp + 0.1;
            ra.push(quiet_rec(a_end));
            let mut rb = vec![quiet_rec(a_end + 0.1)];
            rb.extend(b.records().iter().map(|r| TelemetryRecord { timestamp: r.timestamp + a_end + 0.2, ..*r }));
            rb.push(quiet_rec(rb.last().unwrap().timestamp + 0.1));

            let sa = TelemetrySeries::new("p", ra.clone()).unwrap();
            let sb = TelemetrySeries::new("p", rb.clone()).unwrap();
            ra.extend(rb);
            let joined = TelemetrySeries::new("p", ra).unwrap();
            let mut union = detect_events(&sa, &cfg);
            union.extend(detect_events(&sb, &cfg));
            prop_assert_eq!(detect_events(&joined, &cfg), union);
        }
    }
}
