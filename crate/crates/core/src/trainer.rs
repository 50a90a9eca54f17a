//! Adapter training: token-level negative log-likelihood, analytic
//! gradients with a finite-difference check, and an Adam loop that touches
//! nothing but the LoRA matrices.

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::model::{self, CrossMemory, LoraGrad};
use crate::decoder::{check_inputs, AdapterSet, DecoderError, DecoderParams, LoraConfig};
use crate::encoder::FusedRepresentation;
use crate::metrics::{self, DecoderModel, EvalOptions, MetricsError, Reference, RougeMode};
use crate::text::{Vocab, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("loss became non-finite at step {step}")]
    DivergedLoss { step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("target sequence must start with BOS and hold at least one more token")]
    BadTarget,
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validate every this many steps; 0 disables periodic validation.
    pub eval_every: usize,
    pub seed: u64,
    pub guided: bool,
    /// Exclude PAD targets from the loss.
    pub label_pad_masking: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Generation budget used by validation.
    pub max_gen_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            max_steps: 1000,
            eval_every: 0,
            seed: 0,
            guided: true,
            label_pad_masking: true,
            lora_rank: 4,
            lora_alpha: 8.0,
            max_gen_len: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.lora_rank == 0 || !(self.lora_alpha > 0.0) {
            return bad("lora_rank and lora_alpha must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.max_gen_len < 2 {
            return bad("max_gen_len must be >= 2");
        }
        Ok(())
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            ..LoraConfig::default()
        }
    }
}

/// One encoded input with its target ids (`BOS … EOS`, optionally PAD-padded).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub x: FusedRepresentation,
    pub target_ids: Vec<u32>,
}

impl TrainExample {
    pub fn new(x: FusedRepresentation, vocab: &Vocab, target_text: &str) -> Self {
        Self {
            x,
            target_ids: vocab.encode_target(target_text),
        }
    }
}

/// Summed NLL, counted target positions and per-adapter gradients of the sum.
struct SampleGrad {
    nll: f64,
    count: usize,
    grads: Vec<LoraGrad>,
}

fn sample_pass(
    params: &DecoderParams,
    adapters: &AdapterSet,
    ex: &TrainExample,
    mask_pad: bool,
    want_grad: bool,
) -> Result<SampleGrad, TrainError> {
    let ids = &ex.target_ids;
    if ids.len() < 2 || ids[0] != BOS_ID {
        return Err(TrainError::BadTarget);
    }
    let inputs = &ids[..ids.len() - 1];
    let targets = &ids[1..];
    check_inputs(params, adapters, &ex.x, inputs)?;
    let mem = CrossMemory::new(params, adapters, &ex.x.tokens);
    let tape = model::run(params, adapters, &mem, inputs);
    let log_probs = model::log_softmax_rows(&model::logits(params, &tape.hidden));
    let mut nll = 0.0;
    let mut count = 0;
    let mut dlogits = Array2::zeros(log_probs.raw_dim());
    for (i, &t) in targets.iter().enumerate() {
        if mask_pad && t == PAD_ID {
            continue;
        }
        nll -= log_probs[[i, t as usize]];
        count += 1;
        if want_grad {
            let mut row = dlogits.row_mut(i);
            Zip::from(&mut row).and(log_probs.row(i)).for_each(|g, &lp| *g = lp.exp());
            row[t as usize] -= 1.0;
        }
    }
    let grads = if want_grad {
        let d_hidden = dlogits.dot(&params.token_emb);
        model::backward(params, adapters, &ex.x.tokens, &mem, &tape, d_hidden)
    } else {
        Vec::new()
    };
    Ok(SampleGrad { nll, count, grads })
}

fn batch_pass(
    params: &DecoderParams,
    adapters: &AdapterSet,
    batch: &[TrainExample],
    mask_pad: bool,
    want_grad: bool,
) -> Result<(f64, Vec<LoraGrad>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    adapters.check_against(params)?;
    let parts: Vec<SampleGrad> = batch
        .par_iter()
        .map(|ex| sample_pass(params, adapters, ex, mask_pad, want_grad))
        .collect::<Result<_, _>>()?;
    // Reduce in batch order so the result does not depend on scheduling.
    let mut nll = 0.0;
    let mut count = 0;
    let mut grads = model::zero_grads(adapters);
    for p in &parts {
        nll += p.nll;
        count += p.count;
        if want_grad {
            for (g, pg) in grads.iter_mut().zip(&p.grads) {
                g.add_assign(pg);
            }
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let inv = 1.0 / count as f64;
    for g in &mut grads {
        g.scale(inv);
    }
    Ok((nll * inv, grads))
}

/// Mean negative log-likelihood per non-PAD target token, in nats.
pub fn loss(params: &DecoderParams, adapters: &AdapterSet, batch: &[TrainExample]) -> Result<f64, TrainError> {
    batch_pass(params, adapters, batch, true, false).map(|(l, _)| l)
}

/// Mean NLL and its gradient with respect to every adapter matrix.
pub fn loss_and_grad(
    params: &DecoderParams,
    adapters: &AdapterSet,
    batch: &[TrainExample],
    mask_pad: bool,
) -> Result<(f64, Vec<LoraGrad>), TrainError> {
    batch_pass(params, adapters, batch, mask_pad, true)
}

/// One scalar inside an adapter: `(adapter index, is_b, row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterEntry {
    pub adapter: usize,
    pub in_b: bool,
    pub row: usize,
    pub col: usize,
}

impl AdapterEntry {
    fn get_mut<'a>(&self, adapters: &'a mut AdapterSet) -> &'a mut f64 {
        let ad = &mut adapters.adapters[self.adapter];
        let m = if self.in_b { &mut ad.b } else { &mut ad.a };
        &mut m[[self.row, self.col]]
    }

    pub fn grad(&self, grads: &[LoraGrad]) -> f64 {
        let g = &grads[self.adapter];
        let m = if self.in_b { &g.b } else { &g.a };
        m[[self.row, self.col]]
    }
}

/// Uniformly chosen adapter entries, sampled with replacement.
pub fn sample_entries(adapters: &AdapterSet, count: usize, seed: u64) -> Vec<AdapterEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let adapter = rng.gen_range(0..adapters.len());
            let ad = &adapters.adapters[adapter];
            let in_b = rng.gen_bool(0.5);
            let m = if in_b { &ad.b } else { &ad.a };
            AdapterEntry {
                adapter,
                in_b,
                row: rng.gen_range(0..m.nrows()),
                col: rng.gen_range(0..m.ncols()),
            }
        })
        .collect()
}

/// Largest relative error between `grads` and central differences of the
/// loss at the given entries: `|g − n| / max(|g|, |n|, 1e-8)`.
pub fn compare_gradients(
    params: &DecoderParams,
    adapters: &AdapterSet,
    batch: &[TrainExample],
    grads: &[LoraGrad],
    entries: &[AdapterEntry],
    eps: f64,
) -> Result<f64, TrainError> {
    let mut worst: f64 = 0.0;
    let mut probe = adapters.clone();
    for e in entries {
        let orig = *e.get_mut(&mut probe);
        *e.get_mut(&mut probe) = orig + eps;
        let up = loss(params, &probe, batch)?;
        *e.get_mut(&mut probe) = orig - eps;
        let down = loss(params, &probe, batch)?;
        *e.get_mut(&mut probe) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = e.grad(grads);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Checks analytic adapter gradients against finite differences on 24
/// random entries and returns the largest relative error.
pub fn grad_check(
    params: &DecoderParams,
    adapters: &AdapterSet,
    batch: &[TrainExample],
    eps: f64,
) -> Result<f64, TrainError> {
    let (_, grads) = loss_and_grad(params, adapters, batch, true)?;
    let entries = sample_entries(adapters, 24, 0x6c6b61);
    compare_gradients(params, adapters, batch, &grads, &entries, eps)
}

/// Validation metrics recorded alongside the training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValSnapshot {
    pub accuracy: f64,
    pub f1: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub sps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    /// Mean training loss since the previous entry, nats per token.
    pub mean_nll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<ValSnapshot>,
}

/// Held-out data for periodic validation.
pub struct Validation<'a> {
    pub inputs: &'a [FusedRepresentation],
    pub references: &'a [Reference],
    pub vocab: &'a Vocab,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: AdapterSet,
    pub log: Vec<TrainLogEntry>,
    /// Training loss at every step.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<LoraGrad>,
    v: Vec<LoraGrad>,
    t: i32,
}

impl Adam {
    fn new(adapters: &AdapterSet) -> Self {
        Self {
            m: model::zero_grads(adapters),
            v: model::zero_grads(adapters),
            t: 0,
        }
    }

    fn step(&mut self, adapters: &mut AdapterSet, grads: &[LoraGrad], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let states = self.m.iter_mut().zip(self.v.iter_mut());
        for ((ad, g), (m, v)) in adapters.adapters.iter_mut().zip(grads).zip(states) {
            let pairs = [
                (&mut ad.a, &g.a, &mut m.a, &mut v.a),
                (&mut ad.b, &g.b, &mut m.b, &mut v.b),
            ];
            for (p, g, m, v) in pairs {
                Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
                });
            }
        }
    }
}

fn validate_snapshot(
    params: &DecoderParams,
    adapters: &AdapterSet,
    val: &Validation,
    cfg: &TrainConfig,
) -> Result<ValSnapshot, TrainError> {
    let model = DecoderModel {
        params,
        adapters,
        vocab: val.vocab,
        max_len: cfg.max_gen_len,
    };
    let opts = EvalOptions {
        rouge_mode: RougeMode::Recall,
        parallel: true,
    };
    let r = metrics::evaluate_with(&model, val.inputs, val.references, opts)?;
    Ok(ValSnapshot {
        accuracy: r.accuracy,
        f1: r.f1,
        bleu4: r.bleu4,
        rouge1: r.rouge1,
        rouge2: r.rouge2,
        rouge_l: r.rouge_l,
        sps: r.sps,
    })
}

/// Optimizes fresh adapters on `data` with Adam. The base decoder is only
/// borrowed, so frozen weights cannot change. Batches are drawn from a
/// per-epoch shuffle seeded by `cfg.seed`, which makes runs reproducible.
pub fn train(
    params: &DecoderParams,
    data: &[TrainExample],
    val: Option<&Validation>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if val.is_some_and(|v| v.inputs.is_empty()) && cfg.eval_every > 0 {
        return Err(TrainError::InvalidConfig("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adapters = AdapterSet::init(params, &cfg.lora(), rng.gen());
    let mut adam = Adam::new(&adapters);
    let batch_size = cfg.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut log = Vec::new();
    let mut since_log = 0.0;
    let mut since_count = 0;
    let mut batch = Vec::with_capacity(batch_size);

    for step in 1..=cfg.max_steps {
        batch.clear();
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let (l, grads) = loss_and_grad(params, &adapters, &batch, cfg.label_pad_masking)?;
        if !l.is_finite() {
            return Err(TrainError::DivergedLoss { step });
        }
        adam.step(&mut adapters, &grads, cfg);
        losses.push(l);
        since_log += l;
        since_count += 1;

        let eval_due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if eval_due || step == cfg.max_steps {
            let snapshot = match val {
                Some(v) if !v.inputs.is_empty() => Some(validate_snapshot(params, &adapters, v, cfg)?),
                _ => None,
            };
            log.push(TrainLogEntry {
                step,
                mean_nll: since_log / since_count as f64,
                val: snapshot,
            });
            since_log = 0.0;
            since_count = 0;
        }
    }
    Ok(TrainOutcome { adapters, log, losses })
}

/// Greedy-decodes and reports whether the output equals `target_ids`
/// (which start with BOS and end with EOS).
pub fn reproduces(
    params: &DecoderParams,
    adapters: &AdapterSet,
    ex: &TrainExample,
    vocab: &Vocab,
) -> Result<bool, TrainError> {
    let out = crate::decoder::generate(params, adapters, &ex.x, vocab, ex.target_ids.len())?;
    let expected: Vec<u32> = ex.target_ids[1..].iter().copied().filter(|&t| t != PAD_ID).collect();
    Ok(out.token_ids == expected && expected.last() == Some(&EOS_ID))
}

/// Moving average with the given window, one value per full window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
