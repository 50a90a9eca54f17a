//! Event mining over `fixtures/drive_a.csv`, a 60 s, 10 Hz drive with:
//!
//! - an engaged deviation of 0.45 m over 1.0..=1.3 s (too early for a full window),
//! - an engaged deviation over 8.0..=8.6 s peaking at 0.55 m at 8.3 s,
//! - LKA off over 20.0..=21.5 s, with a 0.6 m offset while off (not a deviation),
//! - sub-threshold offsets of -0.35 m at 40.0 s and exactly 0.40 m at 45.0 s.

use lkaguard::canlog::parse_log;
use lkaguard::windowing::{
    detect_events, extract_window, sample_normal_windows, EventKind, WindowConfig, WindowError,
};

const FIXTURE: &str = include_str!("fixtures/drive_a.csv");

fn grid(start: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| start + 0.5 * k as f64).collect()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
}

#[test]
fn fixture_round_trips_through_csv() {
    let series = parse_log(FIXTURE.as_bytes(), "drive_a").unwrap();
    assert_eq!(series.len(), 601);
    assert_eq!(series.end_time(), 60.0);
    assert_eq!(series.to_csv(), FIXTURE);
}

#[test]
fn fixture_events_match_hand_labels() {
    let series = parse_log(FIXTURE.as_bytes(), "drive_a").unwrap();
    let cfg = WindowConfig::default();
    let events = detect_events(&series, &cfg);
    let got: Vec<_> = events.iter().map(|e| (e.timestamp, e.kind, e.peak_offset)).collect();
    assert_eq!(
        got,
        [
            (1.0, EventKind::DeviationExceeded, 0.45),
            (8.0, EventKind::DeviationExceeded, 0.55),
            (20.0, EventKind::Disengagement, 0.1),
        ]
    );
}

#[test]
fn fixture_windows_match_hand_grids() {
    let series = parse_log(FIXTURE.as_bytes(), "drive_a").unwrap();
    let cfg = WindowConfig::default();
    let events = detect_events(&series, &cfg);

    assert!(matches!(
        extract_window(&series, &events[0], &cfg),
        Err(WindowError::InsufficientContext { start, end, .. }) if start == -2.5 && end == 3.5
    ));

    let w = extract_window(&series, &events[1], &cfg).unwrap();
    assert!(close(&w.frame_times, &grid(4.5, 13)));
    assert_eq!(w.frame_times[w.event_frame_index - 1], 8.0);
    assert_eq!(w.window_id(), "drive_a@8000");

    let w = extract_window(&series, &events[2], &cfg).unwrap();
    assert!(close(&w.frame_times, &grid(16.5, 13)));
    assert_eq!(w.frame_times[7], 20.0);
}

#[test]
fn fixture_normal_windows_stay_in_the_quiet_stretch() {
    let series = parse_log(FIXTURE.as_bytes(), "drive_a").unwrap();
    let cfg = WindowConfig::default();
    let events = detect_events(&series, &cfg);
    for seed in 0..20 {
        let normals = sample_normal_windows(&series, &events, &cfg, 2, seed).unwrap();
        assert_eq!(normals.len(), 2);
        for w in &normals {
            assert_eq!(w.event.kind, EventKind::Normal);
            assert!((29.5..=57.5).contains(&w.event.timestamp), "{}", w.event.timestamp);
            assert_eq!(w.frame_times.len(), 13);
        }
        assert!(normals[1].event.timestamp - normals[0].event.timestamp > 6.0);
    }
}
