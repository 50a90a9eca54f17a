//! Autoregressive text decoder with cross-attention over the fused
//! representation, LoRA adapters on its projections, greedy generation and
//! post-training adapter merging.

mod lora;
pub mod model;
mod params;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::FusedRepresentation;
use crate::text::{Vocab, BOS_ID, EOS_ID};

pub use lora::{merge_adapters, merge_unchecked, AdapterSet, LoraAdapter, LoraConfig};
pub use params::{parse_weight_name, weight_name, DecoderConfig, DecoderParams, LayerParams, TensorRef, WeightId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no weight named `{0}`")]
    TargetNotFound(String),
    #[error("parameters already contain merged adapters")]
    AlreadyMerged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Alert {
    Yes,
    No,
    Malformed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// Generated ids after BOS, including a terminating EOS when produced.
    pub token_ids: Vec<u32>,
    pub text: String,
    pub alert: Alert,
    pub explanation: String,
}

/// Validates shapes, the leading BOS, length and token range.
pub(crate) fn check_inputs(
    params: &DecoderParams,
    adapters: &AdapterSet,
    x: &FusedRepresentation,
    ids: &[u32],
) -> Result<(), DecoderError> {
    let cfg = &params.config;
    if x.tokens.ncols() != cfg.d_model || x.tokens.nrows() == 0 {
        return Err(DecoderError::ShapeMismatch(format!(
            "fused representation is {:?}, decoder width {}",
            x.tokens.dim(),
            cfg.d_model
        )));
    }
    if ids.first() != Some(&BOS_ID) {
        return Err(DecoderError::ShapeMismatch("target ids must start with BOS".into()));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(DecoderError::ShapeMismatch(format!(
            "sequence length {} exceeds {}",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(DecoderError::ShapeMismatch(format!("token id {bad} outside vocabulary")));
    }
    adapters.check_against(params)
}

/// Per-position log-probabilities over the vocabulary; row `i` predicts
/// the token following `target_ids[..=i]`.
pub fn forward(
    params: &DecoderParams,
    adapters: &AdapterSet,
    x: &FusedRepresentation,
    target_ids: &[u32],
) -> Result<Array2<f64>, DecoderError> {
    check_inputs(params, adapters, x, target_ids)?;
    let mem = model::CrossMemory::new(params, adapters, &x.tokens);
    let tape = model::run(params, adapters, &mem, target_ids);
    Ok(model::log_softmax_rows(&model::logits(params, &tape.hidden)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// Keep decoding past EOS; used for fixed-cost latency measurements.
    pub ignore_eos: bool,
}

impl GenerateOptions {
    pub fn new(max_len: usize) -> Self {
        Self {
            max_len,
            ignore_eos: false,
        }
    }
}

/// Greedy decoding from BOS; ties go to the lowest token id.
pub fn generate(
    params: &DecoderParams,
    adapters: &AdapterSet,
    x: &FusedRepresentation,
    vocab: &Vocab,
    max_len: usize,
) -> Result<GenerationOutput, DecoderError> {
    generate_with(params, adapters, x, vocab, GenerateOptions::new(max_len))
}

pub fn generate_with(
    params: &DecoderParams,
    adapters: &AdapterSet,
    x: &FusedRepresentation,
    vocab: &Vocab,
    opts: GenerateOptions,
) -> Result<GenerationOutput, DecoderError> {
    check_inputs(params, adapters, x, &[BOS_ID])?;
    let mem = model::CrossMemory::new(params, adapters, &x.tokens);
    let mut seq = vec![BOS_ID];
    let budget = opts.max_len.max(2).min(params.config.max_seq_len - 1);
    for _ in 0..budget {
        let tape = model::run(params, adapters, &mem, &seq);
        let last = tape.hidden.index_axis(Axis(0), seq.len() - 1);
        let logits = params.token_emb.dot(&last) + &params.output_bias;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        seq.push(best as u32);
        if best as u32 == EOS_ID && !opts.ignore_eos {
            break;
        }
    }
    let token_ids = seq[1..].to_vec();
    let text = vocab.decode(&token_ids);
    let (alert, explanation) = extract_alert(&text);
    Ok(GenerationOutput {
        token_ids,
        text,
        alert,
        explanation,
    })
}

/// Parses a `Yes. <explanation>` / `No.` answer (case-insensitive).
pub fn extract_alert(text: &str) -> (Alert, String) {
    let t = text.trim_start();
    let starts_with = |word: &str| -> Option<&str> {
        let head = t.get(..word.len())?;
        if !head.eq_ignore_ascii_case(word) {
            return None;
        }
        let rest = &t[word.len()..];
        match rest.chars().next() {
            None => Some(rest),
            Some(c) if c == '.' || c.is_whitespace() => Some(rest),
            _ => None,
        }
    };
    let tail = |rest: &str| {
        let r = rest.trim_start();
        let r = r.strip_prefix('.').unwrap_or(r);
        r.trim().to_string()
    };
    if let Some(rest) = starts_with("yes") {
        (Alert::Yes, tail(rest))
    } else if starts_with("no").is_some() {
        (Alert::No, String::new())
    } else {
        (Alert::Malformed, String::new())
    }
}
