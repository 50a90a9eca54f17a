#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lkaguard::canlog::parse_log;
use lkaguard_harness::config::HarnessConfig;
use lkaguard_harness::pipeline::{build_dataset, BuildOptions, BuildSummary};
use lkaguard_harness::synthetic::render_frames_for;

pub fn fixture_csv() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/drive_a.csv")
}

/// Renders a frame and mask pair for every telemetry record of the fixture.
pub fn render_fixture_frames(dir: &Path) -> PathBuf {
    let frames = dir.join("frames");
    let series = parse_log(&std::fs::read(fixture_csv()).unwrap(), "drive_a").unwrap();
    render_frames_for(&series, &frames, 64, 5).unwrap();
    frames
}

pub fn build_options(frames: &Path, out: &Path, apply_annotations: bool, seed: u64) -> BuildOptions {
    BuildOptions {
        telemetry: vec![fixture_csv()],
        frames: frames.to_path_buf(),
        out: out.to_path_buf(),
        apply_annotations,
        val_fraction: 0.5,
        seed,
    }
}

pub fn build_fixture(frames: &Path, out: &Path, apply_annotations: bool, seed: u64) -> BuildSummary {
    build_dataset(&build_options(frames, out, apply_annotations, seed), &HarnessConfig::default()).unwrap()
}
