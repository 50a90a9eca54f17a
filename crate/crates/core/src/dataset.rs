//! Alert dataset assembly, human annotations, splits and explanation statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canlog::{snapshot_text, TelemetrySeries};
use crate::media::{self, MaskPair, MediaError};
use crate::windowing::{time_key, EventWindow};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no frame for source `{source_id}` at t={time}")]
    MissingFrame { source_id: String, time: f64 },
    #[error("missing mask pair for frame {0}")]
    MissingMask(String),
    #[error("no telemetry for source `{source_id}` at t={time}")]
    TelemetryOutOfRange { source_id: String, time: f64 },
    #[error("annotation references unknown sample `{0}`")]
    UnknownSampleId(String),
    #[error("split would leave class {0:?} empty on one side")]
    DegenerateSplit(Label),
    #[error("val_fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),
    #[error("sample `{0}` is labeled Yes but has no explanation")]
    MissingExplanation(String),
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One training / evaluation record. File refs are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertSample {
    pub sample_id: String,
    pub source_id: String,
    pub frame_time: f64,
    pub image_ref: PathBuf,
    pub binary_mask_ref: PathBuf,
    pub instance_mask_ref: PathBuf,
    pub can_text: String,
    pub label: Label,
    pub explanation: String,
    pub split: Split,
}

impl AlertSample {
    /// Window part of the sample id (`<window>/fNN`); single-frame samples
    /// are their own window.
    pub fn window_id(&self) -> &str {
        window_id_of(&self.sample_id)
    }

    /// The decoder target: `Yes. <explanation>` or `No.`.
    pub fn target_text(&self) -> String {
        target_text(self.label, &self.explanation)
    }
}

pub fn target_text(label: Label, explanation: &str) -> String {
    match label {
        Label::Yes if explanation.is_empty() => "Yes.".to_string(),
        Label::Yes => format!("Yes. {explanation}"),
        Label::No => "No.".to_string(),
    }
}

pub fn window_id_of(sample_id: &str) -> &str {
    sample_id.rsplit_once("/f").map_or(sample_id, |(w, _)| w)
}

pub fn frame_sample_id(window_id: &str, frame_index: usize) -> String {
    format!("{window_id}/f{frame_index:02}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub keep: bool,
    pub label: Label,
    #[serde(default)]
    pub explanation: String,
    #[serde(default)]
    pub annotator: String,
    pub annotated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRefs {
    pub binary: PathBuf,
    pub instance: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRefs {
    pub image: PathBuf,
    pub masks: Option<MaskRefs>,
}

/// Maps `(source_id, frame time)` to frame files, keyed at millisecond resolution.
///
/// On disk: `<root>/<source_id>/<ms>.rgb.ppm` with sibling `<ms>.bin.pgm` and
/// `<ms>.ins.pgm` masks. Stored paths are relative to `root`.
#[derive(Debug, Clone, Default)]
pub struct FrameIndex {
    entries: HashMap<(String, i64), FrameRefs>,
}

impl FrameIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frame_stem(source_id: &str, time: f64) -> PathBuf {
        Path::new(source_id).join(time_key(time).to_string())
    }

    pub fn insert(&mut self, source_id: &str, time: f64, refs: FrameRefs) {
        self.entries.insert((source_id.to_string(), time_key(time)), refs);
    }

    pub fn get(&self, source_id: &str, time: f64) -> Option<&FrameRefs> {
        self.entries.get(&(source_id.to_string(), time_key(time)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indexes every `*.rgb.ppm` under `root/<source_id>/`.
    pub fn scan(root: &Path) -> Result<Self, DatasetError> {
        let mut index = Self::new();
        for source in fs::read_dir(root)? {
            let source = source?;
            if !source.file_type()?.is_dir() {
                continue;
            }
            let source_id = source.file_name().to_string_lossy().into_owned();
            for file in fs::read_dir(source.path())? {
                let name = file?.file_name().to_string_lossy().into_owned();
                let Some(ms) = name.strip_suffix(".rgb.ppm").and_then(|s| s.parse::<i64>().ok()) else {
                    continue;
                };
                let rel = |suffix: &str| Path::new(&source_id).join(format!("{ms}.{suffix}"));
                let bin = rel("bin.pgm");
                let ins = rel("ins.pgm");
                let masks = (root.join(&bin).is_file() && root.join(&ins).is_file()).then_some(MaskRefs {
                    binary: bin,
                    instance: ins,
                });
                index.entries.insert(
                    (source_id.clone(), ms),
                    FrameRefs {
                        image: rel("rgb.ppm"),
                        masks,
                    },
                );
            }
        }
        Ok(index)
    }
}

/// Turns windows into per-frame samples. Failure windows default to `Yes`,
/// normal windows to `No`; explanations stay empty until annotated.
pub fn assemble(
    windows: &[EventWindow],
    frames: &FrameIndex,
    series_index: &HashMap<String, TelemetrySeries>,
) -> Result<Vec<AlertSample>, DatasetError> {
    let mut samples = Vec::new();
    for w in windows {
        let series = series_index.get(&w.source_id);
        let label = if w.event.kind.is_failure() { Label::Yes } else { Label::No };
        let window_id = w.window_id();
        for (k, &t) in w.frame_times.iter().enumerate() {
            let refs = frames.get(&w.source_id, t).ok_or_else(|| DatasetError::MissingFrame {
                source_id: w.source_id.clone(),
                time: t,
            })?;
            let masks = refs
                .masks
                .as_ref()
                .ok_or_else(|| DatasetError::MissingMask(refs.image.display().to_string()))?;
            let record = series
                .and_then(|s| s.sample_at(t).ok())
                .ok_or_else(|| DatasetError::TelemetryOutOfRange {
                    source_id: w.source_id.clone(),
                    time: t,
                })?;
            samples.push(AlertSample {
                sample_id: frame_sample_id(&window_id, k + 1),
                source_id: w.source_id.clone(),
                frame_time: t,
                image_ref: refs.image.clone(),
                binary_mask_ref: masks.binary.clone(),
                instance_mask_ref: masks.instance.clone(),
                can_text: snapshot_text(record),
                label,
                explanation: String::new(),
                split: Split::Train,
            });
        }
    }
    Ok(samples)
}

/// Applies screening decisions (last write wins by `annotated_at`, ties by
/// input order). Discarded samples are dropped, as are `Yes` samples that
/// still lack an explanation after annotation.
pub fn apply_annotations(
    samples: &[AlertSample],
    annotations: &[AnnotationRecord],
) -> Result<Vec<AlertSample>, DatasetError> {
    let known: HashSet<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
    let mut latest: HashMap<&str, &AnnotationRecord> = HashMap::new();
    for a in annotations {
        if !known.contains(a.sample_id.as_str()) {
            return Err(DatasetError::UnknownSampleId(a.sample_id.clone()));
        }
        match latest.get(a.sample_id.as_str()) {
            Some(prev) if prev.annotated_at > a.annotated_at => {}
            _ => {
                latest.insert(&a.sample_id, a);
            }
        }
    }

    Ok(samples
        .iter()
        .filter_map(|s| {
            let mut s = s.clone();
            if let Some(a) = latest.get(s.sample_id.as_str()) {
                if !a.keep {
                    return None;
                }
                s.label = a.label;
                s.explanation = match a.label {
                    Label::Yes => a.explanation.trim().to_string(),
                    Label::No => String::new(),
                };
            }
            (s.label == Label::No || !s.explanation.is_empty()).then_some(s)
        })
        .collect())
}

/// Stratified, window-atomic, seeded train/val split.
///
/// Windows are grouped by [`AlertSample::window_id`] and assigned the label
/// of their majority. Within each label the windows are shuffled and taken
/// into validation while they fit under `round(val_fraction * n_label)`.
pub fn split(
    samples: &[AlertSample],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<AlertSample>, Vec<AlertSample>), DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::BadFraction(val_fraction));
    }

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.window_id()).or_default().push(i);
    }
    let mut by_label: BTreeMap<Label, Vec<&Vec<usize>>> = BTreeMap::new();
    for members in groups.values() {
        let yes = members.iter().filter(|&&i| samples[i].label == Label::Yes).count();
        let label = if 2 * yes >= members.len() { Label::Yes } else { Label::No };
        by_label.entry(label).or_default().push(members);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = vec![false; samples.len()];
    for label in [Label::Yes, Label::No] {
        let Some(mut windows) = by_label.remove(&label) else {
            return Err(DatasetError::DegenerateSplit(label));
        };
        let total: usize = windows.iter().map(|w| w.len()).sum();
        let target = (val_fraction * total as f64).round() as usize;
        windows.shuffle(&mut rng);
        let mut taken = 0;
        let mut val_windows = 0;
        for w in &windows {
            if taken + w.len() <= target {
                taken += w.len();
                val_windows += 1;
                for &i in w.iter() {
                    in_val[i] = true;
                }
            }
        }
        if val_windows == 0 || val_windows == windows.len() {
            return Err(DatasetError::DegenerateSplit(label));
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (s, v) in samples.iter().zip(in_val) {
        let mut s = s.clone();
        if v {
            s.split = Split::Val;
            val.push(s);
        } else {
            s.split = Split::Train;
            train.push(s);
        }
    }
    Ok((train, val))
}

/// Fixed English function-word list removed by [`term_frequencies`].
pub const STOP_WORDS: [&str; 30] = [
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "it", "its", "this", "that",
    "there", "which", "to", "of", "in", "on", "at", "by", "for", "with", "from", "and", "or",
    "as", "may", "will", "so",
];

/// Term counts over explanations of `Yes` samples.
pub fn term_frequencies(samples: &[AlertSample]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in samples.iter().filter(|s| s.label == Label::Yes) {
        let lower = s.explanation.to_lowercase();
        for term in lower
            .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '’'))
            .map(|t| t.trim_matches(|c| c == '\'' || c == '’'))
            .filter(|t| !t.is_empty() && !STOP_WORDS.contains(t))
        {
            *counts.entry(term.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Checks id uniqueness and the Yes ⇒ explanation invariant.
pub fn validate(samples: &[AlertSample]) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.sample_id.as_str()) {
            return Err(DatasetError::DuplicateSampleId(s.sample_id.clone()));
        }
        if s.label == Label::Yes && s.explanation.trim().is_empty() {
            return Err(DatasetError::MissingExplanation(s.sample_id.clone()));
        }
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|source| DatasetError::Json {
            path: path.display().to_string(),
            line: 0,
            source,
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|source| DatasetError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(items)
}

/// A sample with its media loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: AlertSample,
    pub image: RgbImage,
    pub masks: MaskPair,
}

impl LoadedSample {
    pub fn load(root: &Path, sample: &AlertSample) -> Result<Self, DatasetError> {
        Ok(Self {
            image: media::load_rgb(&root.join(&sample.image_ref))?,
            masks: MaskPair::load(
                &root.join(&sample.binary_mask_ref),
                &root.join(&sample.instance_mask_ref),
            )?,
            sample: sample.clone(),
        })
    }
}
