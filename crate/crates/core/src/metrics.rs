//! Alert classification metrics, BLEU-4 / ROUGE text metrics, end-to-end
//! evaluation and inversion of published metric rows into confusion matrices.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{target_text, AlertSample, Label};
use crate::decoder::{self, AdapterSet, Alert, DecoderParams};
use crate::encoder::FusedRepresentation;
use crate::text::Vocab;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("{inputs} inputs but {references} references")]
    LengthMismatch { inputs: usize, references: usize },
    #[error("model failed: {0}")]
    Model(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Malformed generations, already counted as predicted No.
    pub malformed_as_no: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self {
            tp,
            fp,
            tn,
            fn_,
            malformed_as_no: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tallies one prediction; Malformed is treated as No.
    pub fn record(&mut self, truth: Label, predicted: Alert) {
        if predicted == Alert::Malformed {
            self.malformed_as_no += 1;
        }
        match (truth, predicted == Alert::Yes) {
            (Label::Yes, true) => self.tp += 1,
            (Label::Yes, false) => self.fn_ += 1,
            (Label::No, true) => self.fp += 1,
            (Label::No, false) => self.tn += 1,
        }
    }

    /// Percentage of all samples in each cell, ordered (tp, fp, tn, fn).
    pub fn shares(&self) -> [f64; 4] {
        let n = self.total().max(1) as f64;
        [self.tp, self.fp, self.tn, self.fn_].map(|c| 100.0 * c as f64 / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1 as percentages; an empty denominator
/// yields 0.
pub fn classify_metrics(c: &ConfusionCounts) -> ClassMetrics {
    ClassMetrics {
        accuracy: pct(c.tp + c.tn, c.total()),
        precision: pct(c.tp, c.tp + c.fp),
        recall: pct(c.tp, c.tp + c.fn_),
        f1: pct(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

/// Lowercases, turns every non-alphanumeric character into a separator and
/// splits on whitespace.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches plus candidate and reference n-gram totals.
fn ngram_overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, cand.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// Sentence-level BLEU-4 with add-one smoothing on the 2..4-gram precisions.
pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    let cand = metric_tokens(candidate);
    let refr = metric_tokens(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, total, _) = ngram_overlap(&cand, &refr, n);
        let p = if n == 1 {
            if m == 0 {
                return 0.0;
            }
            m as f64 / total as f64
        } else {
            (m as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    100.0 * bp * (log_sum / 4.0).exp()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeMode {
    #[default]
    Recall,
    FMeasure,
}

fn rouge_score(matches: usize, cand_total: usize, ref_total: usize, mode: RougeMode) -> f64 {
    let recall = if ref_total == 0 { 0.0 } else { matches as f64 / ref_total as f64 };
    let score = match mode {
        RougeMode::Recall => recall,
        RougeMode::FMeasure => {
            let precision = if cand_total == 0 { 0.0 } else { matches as f64 / cand_total as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        }
    };
    100.0 * score
}

/// ROUGE-N recall over clipped n-gram matches.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    rouge_n_with(candidate, reference, n, RougeMode::Recall)
}

pub fn rouge_n_with(candidate: &str, reference: &str, n: usize, mode: RougeMode) -> f64 {
    assert!(n >= 1, "ROUGE-N needs n >= 1");
    let (m, c, r) = ngram_overlap(&metric_tokens(candidate), &metric_tokens(reference), n);
    rouge_score(m, c, r, mode)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L recall: LCS length over reference length.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_with(candidate, reference, RougeMode::Recall)
}

pub fn rouge_l_with(candidate: &str, reference: &str, mode: RougeMode) -> f64 {
    let (c, r) = (metric_tokens(candidate), metric_tokens(reference));
    rouge_score(lcs_len(&c, &r), c.len(), r.len(), mode)
}

/// Anything that turns an input into an alert string.
pub trait AlertModel: Sync {
    type Input: Sync;
    fn respond(&self, input: &Self::Input) -> Result<String, MetricsError>;
}

/// Decoder plus adapters over pre-encoded inputs.
pub struct DecoderModel<'a> {
    pub params: &'a DecoderParams,
    pub adapters: &'a AdapterSet,
    pub vocab: &'a Vocab,
    pub max_len: usize,
}

impl AlertModel for DecoderModel<'_> {
    type Input = FusedRepresentation;

    fn respond(&self, x: &FusedRepresentation) -> Result<String, MetricsError> {
        decoder::generate(self.params, self.adapters, x, self.vocab, self.max_len)
            .map(|g| g.text)
            .map_err(|e| MetricsError::Model(e.to_string()))
    }
}

/// Ground truth for one evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub label: Label,
    pub explanation: String,
}

impl Reference {
    pub fn text(&self) -> String {
        target_text(self.label, &self.explanation)
    }
}

impl From<&AlertSample> for Reference {
    fn from(s: &AlertSample) -> Self {
        Self {
            label: s.label,
            explanation: s.explanation.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub rouge_mode: RougeMode,
    pub sps: f64,
    pub wall_seconds: f64,
    pub n_samples: usize,
    /// Samples contributing to the text metrics.
    pub n_text_samples: usize,
}

impl EvalReport {
    /// The report with the wall-clock fields zeroed, for reproducibility
    /// comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            sps: 0.0,
            wall_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub rouge_mode: RougeMode,
    /// Generate samples on the rayon pool.
    pub parallel: bool,
}

pub fn evaluate<M: AlertModel>(
    model: &M,
    inputs: &[M::Input],
    references: &[Reference],
) -> Result<EvalReport, MetricsError> {
    evaluate_with(
        model,
        inputs,
        references,
        EvalOptions {
            rouge_mode: RougeMode::Recall,
            parallel: true,
        },
    )
}

/// Generates an answer per input and scores it. Text metrics cover the
/// samples whose reference is Yes with a non-empty explanation and compare
/// the full generated string to the full reference string.
pub fn evaluate_with<M: AlertModel>(
    model: &M,
    inputs: &[M::Input],
    references: &[Reference],
    opts: EvalOptions,
) -> Result<EvalReport, MetricsError> {
    if inputs.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            inputs: inputs.len(),
            references: references.len(),
        });
    }
    if inputs.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let start = Instant::now();
    let outputs: Vec<String> = if opts.parallel {
        inputs.par_iter().map(|x| model.respond(x)).collect::<Result<_, _>>()?
    } else {
        inputs.iter().map(|x| model.respond(x)).collect::<Result<_, _>>()?
    };

    let mut counts = ConfusionCounts::default();
    let mut text_sums = [0.0; 4];
    let mut n_text = 0;
    for (out, r) in outputs.iter().zip(references) {
        let (alert, _) = decoder::extract_alert(out);
        counts.record(r.label, alert);
        if r.label == Label::Yes && !r.explanation.is_empty() {
            let reference = r.text();
            text_sums[0] += bleu4(out, &reference);
            text_sums[1] += rouge_n_with(out, &reference, 1, opts.rouge_mode);
            text_sums[2] += rouge_n_with(out, &reference, 2, opts.rouge_mode);
            text_sums[3] += rouge_l_with(out, &reference, opts.rouge_mode);
            n_text += 1;
        }
    }
    let wall_seconds = start.elapsed().as_secs_f64();

    let text = text_sums.map(|s| if n_text == 0 { 0.0 } else { s / n_text as f64 });
    let m = classify_metrics(&counts);
    Ok(EvalReport {
        counts,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        bleu4: text[0],
        rouge1: text[1],
        rouge2: text[2],
        rouge_l: text[3],
        rouge_mode: opts.rouge_mode,
        sps: samples_per_second(inputs.len(), wall_seconds),
        wall_seconds,
        n_samples: inputs.len(),
        n_text_samples: n_text,
    })
}

/// Throughput over one validation pass.
pub fn samples_per_second(n_samples: usize, wall_seconds: f64) -> f64 {
    n_samples as f64 / wall_seconds.max(f64::MIN_POSITIVE)
}

pub const TABLE_COLUMNS: [&str; 10] = [
    "Model", "Accuracy", "Precision", "Recall", "F1", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L", "SPS",
];

pub fn table_header() -> String {
    format!("| {} |\n|{}", TABLE_COLUMNS.join(" | "), "---|".repeat(TABLE_COLUMNS.len()))
}

pub fn table_row(model: &str, r: &EvalReport) -> String {
    format!(
        "| {model} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
        r.accuracy, r.precision, r.recall, r.f1, r.bleu4, r.rouge1, r.rouge2, r.rouge_l, r.sps
    )
}

/// Classification columns of a published results row, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishedRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub matrices: Vec<ConfusionCounts>,
    /// Every returned matrix rounds to all four published values.
    pub exact: bool,
    /// Largest absolute metric deviation of the returned matrices, in points.
    pub max_deviation: f64,
}

/// Rounds half-up to two decimals.
pub fn round_half_up_2(v: f64) -> f64 {
    (v * 100.0 + 0.5).floor() / 100.0
}

/// Whether `100·num/den` rounds half-up to `hundredths / 100`, decided in
/// exact integer arithmetic: `(2P−1)·den ≤ 20000·num < (2P+1)·den`.
fn rounds_to(num: u64, den: u64, hundredths: i64) -> bool {
    if den == 0 {
        return hundredths == 0;
    }
    let (num, den) = (i128::from(num), i128::from(den));
    let p = i128::from(hundredths);
    (2 * p - 1) * den <= 20000 * num && 20000 * num < (2 * p + 1) * den
}

/// Finds every integer confusion matrix over `n_pos` positives and `n_neg`
/// negatives whose metrics round to the published row; when none exists,
/// returns the matrices minimizing the largest absolute deviation.
pub fn invert_report(row: &PublishedRow, n_pos: u64, n_neg: u64) -> Inversion {
    let target = [row.accuracy, row.precision, row.recall, row.f1];
    let hundredths = target.map(|v| (v * 100.0).round() as i64);
    let mut exact = Vec::new();
    let mut best = Vec::new();
    let mut best_dev = f64::INFINITY;
    for tp in 0..=n_pos {
        for fp in 0..=n_neg {
            let c = ConfusionCounts::new(tp, fp, n_neg - fp, n_pos - tp);
            let fractions = [
                (tp + c.tn, n_pos + n_neg),
                (tp, tp + fp),
                (tp, n_pos),
                (2 * tp, 2 * tp + fp + c.fn_),
            ];
            if fractions.iter().zip(hundredths).all(|(&(a, b), h)| rounds_to(a, b, h)) {
                exact.push(c);
            }
            let m = classify_metrics(&c);
            let dev = [m.accuracy, m.precision, m.recall, m.f1]
                .iter()
                .zip(target)
                .map(|(v, t)| (v - t).abs())
                .fold(0.0, f64::max);
            if dev < best_dev - 1e-12 {
                best_dev = dev;
                best.clear();
                best.push(c);
            } else if (dev - best_dev).abs() <= 1e-12 {
                best.push(c);
            }
        }
    }
    if exact.is_empty() {
        Inversion {
            matrices: best,
            exact: false,
            max_deviation: best_dev,
        }
    } else {
        let max_deviation = exact
            .iter()
            .map(|c| {
                let m = classify_metrics(c);
                [m.accuracy, m.precision, m.recall, m.f1]
                    .iter()
                    .zip(target)
                    .map(|(v, t)| (v - t).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        Inversion {
            matrices: exact,
            exact: true,
            max_deviation,
        }
    }
}
