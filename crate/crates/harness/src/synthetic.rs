//! Synthetic road scenes standing in for real drive recordings.
//!
//! A scene is a straight-ahead view of two lane lines. Three factors can
//! break lane keeping: faded paint (whole dash segments disappear),
//! occlusion (a contiguous band of rows hides both lines) and curvature
//! (lines bend sideways with the square of the distance ahead). The label
//! rule is
//!
//! ```text
//! Yes  iff  lane_fade > 0.6  or  occlusion > 0.5  or  |lane_curvature| > 0.01
//! ```
//!
//! Masks are drawn without noise, so they always carry the factors. The RGB
//! frame draws the same paint with contrast `(1 - rain_noise)^6` under
//! Gaussian sensor noise of standard deviation `2 + 10 * rain_noise`; from
//! `rain_noise = 0.7` on the paint is about a tenth of a gray level and sits
//! far below the noise floor.
//!
//! Default sampling: each scene is a failure with probability
//! `failure_fraction`. Normal scenes draw fade from U(0, 0.3), occlusion from
//! U(0, 0.2) and |curvature| from U(0, 0.0015). A failure scene picks one
//! factor uniformly and redraws it from U(0.75, 1) (fade), U(0.65, 0.9)
//! (occlusion) or U(0.015, 0.03) (|curvature|). Curvature signs are fair
//! coin flips; rain is U(rain_min, rain_max).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use lkaguard::canlog::{snapshot_text, TelemetryRecord, TelemetrySeries};
use lkaguard::dataset::{self, frame_sample_id, AlertSample, DatasetError, FrameIndex, Label, Split};
use lkaguard::media::{self, MaskPair, MediaError};
use lkaguard::windowing::time_key;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SOURCE_ID: &str = "syn";
/// Horizontal lane positions as fractions of the image width.
const LANE_X: [f64; 2] = [0.3125, 0.6875];
const SEGMENTS: usize = 8;
/// Lateral shift at the top row per unit curvature, in image widths.
const CURVE_GAIN: f64 = 12.5;
const ROAD: [f64; 3] = [92.0, 92.0, 96.0];
const PAINT: f64 = 140.0;
const SHADE: f64 = 50.0;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub image_size: usize,
    /// 1/m; positive bends to the right.
    pub lane_curvature: f64,
    pub lane_fade: f64,
    pub occlusion: f64,
    pub rain_noise: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.lane_fade) && unit(self.occlusion) && unit(self.rain_noise)) {
            return Err(SyntheticError::InvalidSpec("fade, occlusion and rain must lie in [0, 1]".into()));
        }
        if !self.lane_curvature.is_finite() {
            return Err(SyntheticError::InvalidSpec("curvature must be finite".into()));
        }
        if self.image_size < SEGMENTS * 2 || !self.image_size.is_multiple_of(SEGMENTS) {
            return Err(SyntheticError::InvalidSpec(format!(
                "image_size must be a multiple of {SEGMENTS} and at least {}",
                SEGMENTS * 2
            )));
        }
        Ok(())
    }

    pub fn is_failure(&self) -> bool {
        self.lane_fade > 0.6 || self.occlusion > 0.5 || self.lane_curvature.abs() > 0.01
    }

    /// Ground-truth label and explanation.
    pub fn label(&self) -> (Label, String) {
        let mut reasons = Vec::new();
        match (self.lane_fade > 0.6, self.occlusion > 0.5) {
            (true, true) => reasons.push("The lane line ahead is faded and occluded.".to_string()),
            (true, false) => reasons.push("The lane line ahead is faded.".to_string()),
            (false, true) => reasons.push("The lane line ahead is occluded.".to_string()),
            (false, false) => {}
        }
        if self.lane_curvature.abs() > 0.01 {
            let side = if self.lane_curvature > 0.0 { "right" } else { "left" };
            reasons.push(format!("There is a sharp curve to the {side} ahead."));
        }
        if reasons.is_empty() {
            (Label::No, String::new())
        } else {
            (Label::Yes, reasons.join(" "))
        }
    }
}

/// One rendered frame with its masks.
pub struct RenderedScene {
    pub image: RgbImage,
    pub masks: MaskPair,
}

pub fn render(spec: &SyntheticSceneSpec) -> Result<RenderedScene, SyntheticError> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut segments: Vec<usize> = (0..SEGMENTS).collect();
    segments.shuffle(&mut rng);
    let dropped = &segments[..(spec.lane_fade * SEGMENTS as f64).round() as usize];
    let band = (spec.occlusion * s as f64).round() as usize;
    let band_start = rng.gen_range(0..=s - band);
    let occluded = |y: usize| y >= band_start && y < band_start + band;
    let seg_rows = s / SEGMENTS;

    let contrast = (1.0 - spec.rain_noise).powi(6);
    let noise = Normal::new(0.0, 2.0 + 10.0 * spec.rain_noise).expect("finite sigma");

    let mut paint = vec![0.0f64; s * s];
    let mut binary = GrayImage::new(s as u32, s as u32);
    let mut instance = GrayImage::new(s as u32, s as u32);
    for y in 0..s {
        let d = (s - 1 - y) as f64 / (s - 1) as f64;
        let shift = spec.lane_curvature * CURVE_GAIN * s as f64 * d * d;
        let visible = !dropped.contains(&(y / seg_rows)) && !occluded(y);
        if !visible {
            continue;
        }
        for (lane, frac) in LANE_X.iter().enumerate() {
            let x0 = (frac * s as f64 + shift).round() as i64;
            for x in [x0, x0 + 1] {
                if (0..s as i64).contains(&x) {
                    let x = x as usize;
                    paint[y * s + x] = 1.0 - 0.5 * spec.lane_fade;
                    binary.put_pixel(x as u32, y as u32, Luma([255]));
                    instance.put_pixel(x as u32, y as u32, Luma([lane as u8 + 1]));
                }
            }
        }
    }

    let mut image = RgbImage::new(s as u32, s as u32);
    for y in 0..s {
        let shade = if occluded(y) { -SHADE } else { 0.0 };
        for x in 0..s {
            let signal = contrast * (PAINT * paint[y * s + x] + shade);
            let px = ROAD.map(|base| (base + signal + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8);
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(RenderedScene {
        image,
        masks: MaskPair::new(binary, instance)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    pub image_size: usize,
    pub failure_fraction: f64,
    pub rain_min: f64,
    pub rain_max: f64,
    pub val_fraction: f64,
    /// Seconds between consecutive scenes on the synthetic drive.
    pub scene_period: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 200,
            image_size: 64,
            failure_fraction: 0.5,
            rain_min: 0.0,
            rain_max: 1.0,
            val_fraction: 0.2,
            scene_period: 10.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::InvalidConfig(m.into()));
        if self.count == 0 {
            return bad("count must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.failure_fraction) {
            return bad("failure_fraction must lie in [0, 1]");
        }
        if !(0.0 <= self.rain_min && self.rain_min <= self.rain_max && self.rain_max <= 1.0) {
            return bad("need 0 <= rain_min <= rain_max <= 1");
        }
        if !(self.scene_period >= 1.0) {
            return bad("scene_period must be >= 1 s");
        }
        Ok(())
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        self.scene_period * i as f64 + self.scene_period / 2.0
    }
}

/// Draws `cfg.count` scene specs from the documented distributions.
pub fn sample_specs(cfg: &SyntheticConfig, seed: u64) -> Vec<SyntheticSceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.count)
        .map(|_| {
            let failure = rng.gen_bool(cfg.failure_fraction);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mut spec = SyntheticSceneSpec {
                image_size: cfg.image_size,
                lane_curvature: sign * rng.gen_range(0.0..0.0015),
                lane_fade: rng.gen_range(0.0..0.3),
                occlusion: rng.gen_range(0.0..0.2),
                rain_noise: if cfg.rain_max > cfg.rain_min {
                    rng.gen_range(cfg.rain_min..=cfg.rain_max)
                } else {
                    cfg.rain_min
                },
                seed: rng.gen(),
            };
            if failure {
                match rng.gen_range(0..3) {
                    0 => spec.lane_fade = rng.gen_range(0.75..1.0),
                    1 => spec.occlusion = rng.gen_range(0.65..0.9),
                    _ => spec.lane_curvature = sign * rng.gen_range(0.015..0.03),
                }
            }
            spec
        })
        .collect()
}

/// A label-independent 10 Hz cruise trace covering `[0, duration]`.
///
/// The controller state is held for `hold` seconds at a time and drawn from
/// a handful of coarse settings, so snapshot texts repeat across scenes.
pub fn synthetic_telemetry(source_id: &str, duration: f64, hold: f64, seed: u64) -> TelemetrySeries {
    const SPEEDS: [f64; 3] = [22.0, 25.0, 28.0];
    const STEER: [f64; 3] = [-1.0, 0.0, 1.0];
    const OFFSETS: [f64; 3] = [-0.1, 0.0, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration * 10.0).round() as usize + 1;
    let per_hold = ((hold * 10.0).round() as usize).max(1);
    let mut state = (0.0, 0.0, 0.0);
    let records = (0..n)
        .map(|i| {
            if i % per_hold == 0 {
                state = (
                    *SPEEDS.choose(&mut rng).expect("non-empty"),
                    *STEER.choose(&mut rng).expect("non-empty"),
                    *OFFSETS.choose(&mut rng).expect("non-empty"),
                );
            }
            TelemetryRecord {
                timestamp: (i as f64) / 10.0,
                speed: state.0,
                steering_angle: state.1,
                steering_torque: 0.0,
                lka_engaged: true,
                lane_center_offset: state.2,
            }
        })
        .collect();
    TelemetrySeries::new(source_id, records).expect("generated records are valid")
}

/// One generated scene as recorded in `scenes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub sample_id: String,
    pub frame_time: f64,
    pub spec: SyntheticSceneSpec,
    pub label: Label,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub scenes: usize,
    pub yes: usize,
    pub no: usize,
    pub train: usize,
    pub val: usize,
}

fn write_frame(root: &Path, source_id: &str, time: f64, scene: &RenderedScene) -> Result<[PathBuf; 3], SyntheticError> {
    let stem = Path::new("media").join(FrameIndex::frame_stem(source_id, time));
    fs::create_dir_all(root.join(&stem).parent().expect("stem has a parent"))?;
    let path = |suffix: &str| PathBuf::from(format!("{}.{suffix}", stem.display()));
    let refs = [path("rgb.ppm"), path("bin.pgm"), path("ins.pgm")];
    media::save_rgb(&scene.image, &root.join(&refs[0]))?;
    media::save_gray(&scene.masks.binary, &root.join(&refs[1]))?;
    media::save_gray(&scene.masks.instance, &root.join(&refs[2]))?;
    Ok(refs)
}

/// Writes a complete labeled dataset under `out`:
///
/// ```text
/// telemetry/syn.csv        10 Hz drive covering every scene
/// media/syn/<ms>.*.p?m     frame, binary mask, instance mask per scene
/// scenes.jsonl             scene specs with labels and explanations
/// dataset.jsonl            AlertSample records with their split
/// ```
pub fn gen_synthetic(out: &Path, cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticSummary, SyntheticError> {
    cfg.validate()?;
    let specs = sample_specs(cfg, seed);
    let duration = cfg.scene_period * cfg.count as f64;
    let series = synthetic_telemetry(SOURCE_ID, duration, cfg.scene_period, seed ^ 0x5eed);
    fs::create_dir_all(out.join("telemetry"))?;
    fs::write(out.join("telemetry").join(format!("{SOURCE_ID}.csv")), series.to_csv())?;

    let mut samples = Vec::with_capacity(specs.len());
    let mut scenes = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let t = cfg.frame_time(i);
        let [image_ref, binary_mask_ref, instance_mask_ref] = write_frame(out, SOURCE_ID, t, &render(spec)?)?;
        let (label, explanation) = spec.label();
        let sample_id = frame_sample_id(&format!("{SOURCE_ID}@{}", time_key(t)), 1);
        let record = series.sample_at(t).expect("scene inside the drive");
        scenes.push(SceneRecord {
            sample_id: sample_id.clone(),
            frame_time: t,
            spec: spec.clone(),
            label,
            explanation: explanation.clone(),
        });
        samples.push(AlertSample {
            sample_id,
            source_id: SOURCE_ID.to_string(),
            frame_time: t,
            image_ref,
            binary_mask_ref,
            instance_mask_ref,
            can_text: snapshot_text(record),
            label,
            explanation,
            split: Split::Train,
        });
    }
    dataset::validate(&samples)?;
    let (train, val) = dataset::split(&samples, cfg.val_fraction, seed)?;
    let mut all: Vec<AlertSample> = train.iter().chain(val.iter()).cloned().collect();
    all.sort_by(|a, b| a.frame_time.total_cmp(&b.frame_time));
    dataset::write_jsonl(&out.join("scenes.jsonl"), &scenes)?;
    dataset::write_jsonl(&out.join("dataset.jsonl"), &all)?;

    let yes = samples.iter().filter(|s| s.label == Label::Yes).count();
    Ok(SyntheticSummary {
        scenes: samples.len(),
        yes,
        no: samples.len() - yes,
        train: train.len(),
        val: val.len(),
    })
}

/// Renders benign frames for every record of `series` into
/// `<dir>/<source_id>/<ms>.*`, the layout `build-dataset --frames` reads.
pub fn render_frames_for(
    series: &TelemetrySeries,
    dir: &Path,
    image_size: usize,
    seed: u64,
) -> Result<usize, SyntheticError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(dir.join(series.source_id()))?;
    for r in series.records() {
        let spec = SyntheticSceneSpec {
            image_size,
            lane_curvature: rng.gen_range(-0.0015..0.0015),
            lane_fade: rng.gen_range(0.0..0.3),
            occlusion: rng.gen_range(0.0..0.2),
            rain_noise: rng.gen_range(0.0..0.5),
            seed: rng.gen(),
        };
        let scene = render(&spec)?;
        let stem = dir.join(FrameIndex::frame_stem(series.source_id(), r.timestamp));
        let path = |suffix: &str| PathBuf::from(format!("{}.{suffix}", stem.display()));
        media::save_rgb(&scene.image, &path("rgb.ppm"))?;
        media::save_gray(&scene.masks.binary, &path("bin.pgm"))?;
        media::save_gray(&scene.masks.instance, &path("ins.pgm"))?;
    }
    Ok(series.len())
}
