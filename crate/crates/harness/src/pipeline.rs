//! Command implementations shared by the CLI and the tests.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lkaguard::canlog::{parse_log, CanLogError, TelemetrySeries};
use lkaguard::checkpoint::{CheckpointError, ModelBundle};
use lkaguard::dataset::{
    self, AlertSample, AnnotationRecord, DatasetError, FrameIndex, LoadedSample, Split,
};
use lkaguard::metrics::{
    self, classify_metrics, ClassMetrics, ConfusionCounts, EvalOptions, EvalReport, Inversion, MetricsError,
    PublishedRow, Reference,
};
use lkaguard::text::{Vocab, VocabError};
use lkaguard::trainer::{self, TrainError, TrainExample, TrainLogEntry, Validation};
use lkaguard::windowing::{self, EventWindow, WindowError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, HarnessConfig};
use crate::synthetic::SyntheticError;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const BASE_SAMPLES_FILE: &str = "samples.base.jsonl";
pub const WINDOWS_FILE: &str = "windows.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MEDIA_DIR: &str = "media";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    CanLog(#[from] CanLogError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("split `{0}` has no samples")]
    EmptySplit(String),
    #[error("{0}")]
    BadArgument(String),
}

impl PipelineError {
    /// Name of the innermost error variant, e.g. `DegenerateSplit`.
    pub fn name(&self) -> String {
        let inner = match self {
            Self::Config(e) => format!("{e:?}"),
            Self::CanLog(e) => format!("{e:?}"),
            Self::Window(e) => format!("{e:?}"),
            Self::Dataset(e) => format!("{e:?}"),
            Self::Synthetic(e) => format!("{e:?}"),
            Self::Train(e) => format!("{e:?}"),
            Self::Metrics(e) => format!("{e:?}"),
            Self::Checkpoint(e) => format!("{e:?}"),
            Self::Vocab(e) => format!("{e:?}"),
            Self::Io { .. } => "Io".into(),
            Self::EmptySplit(_) => "EmptySplit".into(),
            Self::BadArgument(_) => "BadArgument".into(),
        };
        inner
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .next()
            .unwrap_or_default()
            .to_string()
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

// ---------------------------------------------------------------- dataset build

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub telemetry: Vec<PathBuf>,
    pub frames: PathBuf,
    pub out: PathBuf,
    pub apply_annotations: bool,
    pub val_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEvent {
    pub source_id: String,
    pub timestamp: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub events: usize,
    pub failure_windows: usize,
    pub normal_windows: usize,
    pub skipped: Vec<SkippedEvent>,
    pub base_samples: usize,
    pub annotations_applied: usize,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
}

fn source_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "drive".to_string())
}

/// Mines windows from telemetry, copies their frames into `<out>/media`,
/// writes `windows.jsonl` and `samples.base.jsonl`, then writes the split
/// `dataset.jsonl`. With `apply_annotations`, `<out>/annotations.jsonl` is
/// applied before splitting; the log itself is never modified.
pub fn build_dataset(opts: &BuildOptions, cfg: &HarnessConfig) -> Result<BuildSummary, PipelineError> {
    if opts.telemetry.is_empty() {
        return Err(PipelineError::BadArgument("at least one telemetry log is required".into()));
    }
    let wcfg = &cfg.window;
    wcfg.validate()?;

    let mut series_index: HashMap<String, TelemetrySeries> = HashMap::new();
    let mut windows: Vec<EventWindow> = Vec::new();
    let mut skipped = Vec::new();
    let (mut n_events, mut n_failure, mut n_normal) = (0, 0, 0);
    for path in &opts.telemetry {
        let source_id = source_id_of(path);
        let bytes = fs::read(path).map_err(io_err(path))?;
        let series = parse_log(&bytes, source_id.clone())?;
        let events = windowing::detect_events(&series, wcfg);
        n_events += events.len();
        let mut failures = 0;
        for e in &events {
            match windowing::extract_window(&series, e, wcfg) {
                Ok(w) => {
                    windows.push(w);
                    failures += 1;
                }
                Err(err @ WindowError::InsufficientContext { .. }) => skipped.push(SkippedEvent {
                    source_id: source_id.clone(),
                    timestamp: e.timestamp,
                    reason: err.to_string(),
                }),
                Err(err) => return Err(err.into()),
            }
        }
        let count = (cfg.data.normal_per_failure * failures as f64).round() as usize;
        let normals = windowing::sample_normal_windows(&series, &events, wcfg, count, opts.seed)?;
        n_failure += failures;
        n_normal += normals.len();
        windows.extend(normals);
        series_index.insert(source_id, series);
    }

    let frames = FrameIndex::scan(&opts.frames).map_err(|e| match e {
        DatasetError::Io(source) => PipelineError::Io {
            path: opts.frames.clone(),
            source,
        },
        other => other.into(),
    })?;
    let mut samples = dataset::assemble(&windows, &frames, &series_index)?;

    let mut copied = BTreeSet::new();
    for s in &mut samples {
        for r in [&mut s.image_ref, &mut s.binary_mask_ref, &mut s.instance_mask_ref] {
            let dest = Path::new(MEDIA_DIR).join(&*r);
            if copied.insert(dest.clone()) {
                let target = opts.out.join(&dest);
                fs::create_dir_all(target.parent().expect("media path has a parent"))
                    .map_err(io_err(&target))?;
                let src = opts.frames.join(&*r);
                fs::copy(&src, &target).map_err(io_err(&src))?;
            }
            *r = dest;
        }
    }
    dataset::write_jsonl(&opts.out.join(WINDOWS_FILE), &windows)?;
    dataset::write_jsonl(&opts.out.join(BASE_SAMPLES_FILE), &samples)?;
    let base_samples = samples.len();

    let mut annotations_applied = 0;
    if opts.apply_annotations {
        let log = opts.out.join(ANNOTATIONS_FILE);
        let annotations: Vec<AnnotationRecord> = if log.exists() { dataset::read_jsonl(&log)? } else { Vec::new() };
        annotations_applied = annotations.len();
        samples = dataset::apply_annotations(&samples, &annotations)?;
    }

    let (train, val) = dataset::split(&samples, opts.val_fraction, opts.seed)?;
    let in_val: BTreeSet<&str> = val.iter().map(|s| s.sample_id.as_str()).collect();
    for s in &mut samples {
        s.split = if in_val.contains(s.sample_id.as_str()) { Split::Val } else { Split::Train };
    }
    dataset::write_jsonl(&opts.out.join(DATASET_FILE), &samples)?;

    Ok(BuildSummary {
        events: n_events,
        failure_windows: n_failure,
        normal_windows: n_normal,
        skipped,
        base_samples,
        annotations_applied,
        samples: samples.len(),
        train: train.len(),
        val: val.len(),
    })
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSel {
    Train,
    Val,
    All,
}

impl SplitSel {
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "all" => Ok(Self::All),
            other => Err(PipelineError::BadArgument(format!(
                "unknown split `{other}` (expected train, val or all)"
            ))),
        }
    }

    fn keeps(self, s: &AlertSample) -> bool {
        match self {
            Self::Train => s.split == Split::Train,
            Self::Val => s.split == Split::Val,
            Self::All => true,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::All => "all",
        }
    }
}

pub fn read_dataset(data_dir: &Path) -> Result<Vec<AlertSample>, PipelineError> {
    let path = data_dir.join(DATASET_FILE);
    if !path.is_file() {
        return Err(PipelineError::Io {
            path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
        });
    }
    Ok(dataset::read_jsonl(&path)?)
}

pub fn load_split(data_dir: &Path, split: SplitSel) -> Result<Vec<LoadedSample>, PipelineError> {
    let loaded = read_dataset(data_dir)?
        .iter()
        .filter(|s| split.keeps(s))
        .map(|s| LoadedSample::load(data_dir, s))
        .collect::<Result<Vec<_>, _>>()?;
    if loaded.is_empty() {
        return Err(PipelineError::EmptySplit(split.name().into()));
    }
    Ok(loaded)
}

/// Vocabulary over the CAN snapshots and targets of the given samples.
pub fn build_vocab(samples: &[LoadedSample]) -> Vocab {
    let targets: Vec<String> = samples.iter().map(|s| s.sample.target_text()).collect();
    Vocab::build(
        samples
            .iter()
            .map(|s| s.sample.can_text.as_str())
            .chain(targets.iter().map(String::as_str))
            .chain(["Yes.", "No."]),
    )
}

pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab")
}

pub fn load_bundle(checkpoint: &Path) -> Result<ModelBundle, PipelineError> {
    let vpath = vocab_path(checkpoint);
    let text = fs::read_to_string(&vpath).map_err(io_err(&vpath))?;
    Ok(ModelBundle::load(checkpoint, Vocab::parse(&text)?)?)
}

fn encode_all(bundle: &ModelBundle, samples: &[LoadedSample]) -> Result<Vec<lkaguard::encoder::FusedRepresentation>, PipelineError> {
    samples
        .iter()
        .map(|s| {
            bundle
                .encoder
                .encode(&bundle.vocab, &s.image, &s.masks, &s.sample.can_text, bundle.guided)
                .map_err(|e| PipelineError::Checkpoint(e.into()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub train_samples: usize,
    pub val_samples: usize,
    pub vocab_size: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub wall_seconds: f64,
    pub log: Vec<TrainLogEntry>,
}

/// Trains adapters on the train split of `data_dir` and writes
/// `model.ckpt`, `model.vocab` and `train_log.jsonl` into `out`.
pub fn train_model(data_dir: &Path, out: &Path, cfg: &HarnessConfig) -> Result<TrainSummary, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let all = read_dataset(data_dir)?;
    let load = |keep: Split| -> Result<Vec<LoadedSample>, PipelineError> {
        Ok(all
            .iter()
            .filter(|s| s.split == keep)
            .map(|s| LoadedSample::load(data_dir, s))
            .collect::<Result<Vec<_>, _>>()?)
    };
    let train_set = load(Split::Train)?;
    let val_set = load(Split::Val)?;
    if train_set.is_empty() {
        return Err(PipelineError::EmptySplit("train".into()));
    }

    let vocab = build_vocab(&train_set);
    let guided = cfg.train.guided;
    let mut bundle = ModelBundle::new(
        vocab.clone(),
        cfg.encoder_config(vocab.len(), guided),
        cfg.encoder.seed,
        cfg.decoder_config(vocab.len()),
        cfg.decoder.seed,
    )?;
    bundle.max_gen_len = cfg.train.max_gen_len;

    let examples: Vec<TrainExample> = encode_all(&bundle, &train_set)?
        .into_iter()
        .zip(&train_set)
        .map(|(x, s)| TrainExample::new(x, &vocab, &s.sample.target_text()))
        .collect();
    let val_inputs = encode_all(&bundle, &val_set)?;
    let val_refs: Vec<Reference> = val_set.iter().map(|s| Reference::from(&s.sample)).collect();
    let validation = Validation {
        inputs: &val_inputs,
        references: &val_refs,
        vocab: &vocab,
    };
    let val_opt = (!val_inputs.is_empty()).then_some(&validation);
    let outcome = trainer::train(&bundle.decoder, &examples, val_opt, &cfg.train)?;
    bundle.adapters = outcome.adapters;

    fs::create_dir_all(out).map_err(io_err(out))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    bundle.save(&ckpt)?;
    write_text(&vocab_path(&ckpt), &vocab.to_file_string())?;
    dataset::write_jsonl(&out.join(TRAIN_LOG_FILE), &outcome.log)?;

    Ok(TrainSummary {
        checkpoint: ckpt,
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        vocab_size: vocab.len(),
        steps: outcome.losses.len(),
        final_loss: outcome.losses.last().copied(),
        wall_seconds: start.elapsed().as_secs_f64(),
        log: outcome.log,
    })
}

// ---------------------------------------------------------------- evaluation

/// Evaluates a checkpoint on one split of a dataset. With `merged`, the
/// adapters are folded into the base weights first.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data_dir: &Path,
    split: SplitSel,
    merged: bool,
    cfg: &HarnessConfig,
) -> Result<EvalReport, PipelineError> {
    let mut bundle = load_bundle(checkpoint)?;
    if merged {
        bundle = bundle.merged()?;
    }
    let samples = load_split(data_dir, split)?;
    let refs: Vec<Reference> = samples.iter().map(|s| Reference::from(&s.sample)).collect();
    let opts = EvalOptions {
        rouge_mode: cfg.eval.rouge_mode,
        parallel: true,
    };
    Ok(metrics::evaluate_with(&bundle, &samples, &refs, opts)?)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), PipelineError> {
    write_text(path, &(report.to_json() + "\n"))
}

pub fn read_report(path: &Path) -> Result<EvalReport, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::BadArgument(format!("{}: {e}", path.display())))
}

/// Markdown results table over named reports.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = metrics::table_header();
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&metrics::table_row(name, r));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub guided: bool,
    pub report: EvalReport,
    pub log: Vec<TrainLogEntry>,
    /// Best validation accuracy seen in the log.
    pub peak_val_accuracy: f64,
    /// First logged step with validation accuracy >= 90.
    pub first_step_at_90: Option<usize>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub guided: AblationArm,
    pub unguided: AblationArm,
}

impl AblationSummary {
    pub fn table(&self) -> String {
        render_table(&[
            ("Guided".to_string(), self.guided.report.clone()),
            ("Unguided".to_string(), self.unguided.report.clone()),
        ])
    }
}

/// Trains and evaluates the same configuration with and without the mask
/// streams. Writes `guided/`, `unguided/`, `ablation.json` and `ablation.md`.
pub fn ablate(data_dir: &Path, out: &Path, cfg: &HarnessConfig) -> Result<AblationSummary, PipelineError> {
    let arm = |guided: bool| -> Result<AblationArm, PipelineError> {
        let mut c = cfg.clone();
        c.train.guided = guided;
        let dir = out.join(if guided { "guided" } else { "unguided" });
        let summary = train_model(data_dir, &dir, &c)?;
        let report = evaluate_checkpoint(&summary.checkpoint, data_dir, SplitSel::Val, false, &c)?;
        write_report(&dir.join("report.json"), &report)?;
        let accs = summary.log.iter().filter_map(|e| e.val.as_ref().map(|v| (e.step, v.accuracy)));
        let peak = accs.clone().map(|(_, a)| a).fold(report.accuracy, f64::max);
        let first = accs.clone().find(|&(_, a)| a >= 90.0).map(|(s, _)| s);
        Ok(AblationArm {
            guided,
            report,
            log: summary.log,
            peak_val_accuracy: peak,
            first_step_at_90: first,
            train_seconds: summary.wall_seconds,
        })
    };
    let summary = AblationSummary {
        guided: arm(true)?,
        unguided: arm(false)?,
    };
    write_text(
        &out.join("ablation.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    write_text(&out.join("ablation.md"), &summary.table())?;
    Ok(summary)
}

// ---------------------------------------------------------------- table inversion

/// Classification columns of the published results table, evaluated on 456
/// Yes and 544 No samples.
pub const PUBLISHED_ROWS: [(&str, PublishedRow); 6] = [
    ("2B-origin", PublishedRow { accuracy: 52.80, precision: 45.96, recall: 19.96, f1: 27.83 }),
    ("2B-final", PublishedRow { accuracy: 62.70, precision: 71.81, recall: 29.61, f1: 42.17 }),
    ("3B-origin", PublishedRow { accuracy: 55.50, precision: 66.67, recall: 4.82, f1: 9.00 }),
    ("3B-final", PublishedRow { accuracy: 68.90, precision: 76.56, recall: 45.83, f1: 57.34 }),
    ("7B-origin", PublishedRow { accuracy: 47.60, precision: 43.44, recall: 49.34, f1: 46.20 }),
    ("7B-final", PublishedRow { accuracy: 69.80, precision: 78.02, recall: 46.71, f1: 58.63 }),
];
pub const PUBLISHED_N_POS: u64 = 456;
pub const PUBLISHED_N_NEG: u64 = 544;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedRow {
    pub model: String,
    pub published: PublishedRow,
    pub inversion: Inversion,
    /// Metrics recomputed from the first returned matrix.
    pub recomputed: Option<ClassMetrics>,
    /// TP/FP/TN/FN shares of the first returned matrix, in percent.
    pub shares: Option<[f64; 4]>,
    pub seconds: f64,
}

pub fn invert_rows(rows: &[(String, PublishedRow)], n_pos: u64, n_neg: u64) -> Vec<InvertedRow> {
    rows.iter()
        .map(|(model, row)| {
            let start = Instant::now();
            let inversion = metrics::invert_report(row, n_pos, n_neg);
            let first: Option<&ConfusionCounts> = inversion.matrices.first();
            InvertedRow {
                model: model.clone(),
                published: *row,
                recomputed: first.map(classify_metrics),
                shares: first.map(ConfusionCounts::shares),
                inversion,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

pub fn render_inversion(rows: &[InvertedRow]) -> String {
    let mut out = String::from(
        "| Model | TP | FP | TN | FN | Accuracy | Precision | Recall | F1 | TP% | FN% | Exact |\n|---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        match (r.inversion.matrices.first(), &r.recomputed, &r.shares) {
            (Some(c), Some(m), Some(s)) => out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.1} | {:.1} | {} |\n",
                r.model, c.tp, c.fp, c.tn, c.fn_, m.accuracy, m.precision, m.recall, m.f1, s[0], s[3], r.inversion.exact
            )),
            _ => out.push_str(&format!("| {} | - | - | - | - | - | - | - | - | - | - | false |\n", r.model)),
        }
    }
    out
}

/// Parses `accuracy,precision,recall,f1`.
pub fn parse_published_row(text: &str) -> Result<PublishedRow, PipelineError> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::BadArgument(format!("bad row `{text}`: {e}")))?;
    match vals[..] {
        [accuracy, precision, recall, f1] => Ok(PublishedRow {
            accuracy,
            precision,
            recall,
            f1,
        }),
        _ => Err(PipelineError::BadArgument(format!(
            "row `{text}` needs four values: accuracy,precision,recall,f1"
        ))),
    }
}
