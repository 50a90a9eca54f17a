//! Model bundle (frozen encoder, base decoder, adapters, vocabulary) and its
//! checkpoint file.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "LKACKPT1"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header (see `Header`)
//! then                 tensor payload: for each header tensor entry, in
//!                      order, product(shape) f64 values, row-major
//! ```
//!
//! The header records the encoder config and seed (the frozen encoder is
//! regenerated from them), the decoder config, the SHA-256 of the vocabulary
//! file, the merged flag, generation settings, one `{target, alpha}` entry per
//! adapter and the `{name, shape}` table of the payload. Base decoder tensors
//! are named `decoder.*`; adapter matrices `lora.<target>.A` / `lora.<target>.B`.
//! The vocabulary itself is stored next to the checkpoint and its hash is
//! verified on load.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LoadedSample;
use crate::decoder::{self, AdapterSet, DecoderConfig, DecoderError, DecoderParams};
use crate::encoder::{EncoderConfig, EncoderError, FrozenEncoder};
use crate::metrics::{AlertModel, MetricsError};
use crate::text::Vocab;

pub const MAGIC: &[u8; 8] = b"LKACKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint payload is truncated")]
    Truncated,
    #[error("vocabulary hash {got} does not match checkpoint ({expected})")]
    VocabMismatch { expected: String, got: String },
    #[error("malformed tensor entry `{0}`")]
    BadTensor(String),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterEntry {
    target: String,
    alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    encoder_config: EncoderConfig,
    encoder_seed: u64,
    decoder_config: DecoderConfig,
    vocab_hash: String,
    merged: bool,
    guided: bool,
    max_gen_len: usize,
    adapters: Vec<AdapterEntry>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to turn a loaded sample into an alert.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder_seed: u64,
    pub encoder: FrozenEncoder,
    pub decoder: DecoderParams,
    pub adapters: AdapterSet,
    pub vocab: Vocab,
    pub guided: bool,
    pub max_gen_len: usize,
}

impl ModelBundle {
    /// Base model with no adapters.
    pub fn new(
        vocab: Vocab,
        encoder_config: EncoderConfig,
        encoder_seed: u64,
        decoder_config: DecoderConfig,
        decoder_seed: u64,
    ) -> Result<Self, CheckpointError> {
        Ok(Self {
            encoder_seed,
            guided: encoder_config.guided,
            encoder: FrozenEncoder::init_frozen(encoder_config, encoder_seed)?,
            decoder: DecoderParams::init(decoder_config, decoder_seed)?,
            adapters: AdapterSet::empty(),
            vocab,
            max_gen_len: 32,
        })
    }

    /// The same model with adapters folded into the decoder weights.
    pub fn merged(&self) -> Result<Self, CheckpointError> {
        Ok(Self {
            decoder: decoder::merge_adapters(&self.decoder, &self.adapters)?,
            adapters: AdapterSet::empty(),
            ..self.clone()
        })
    }

    pub fn respond_to(&self, s: &LoadedSample) -> Result<decoder::GenerationOutput, CheckpointError> {
        let x = self
            .encoder
            .encode(&self.vocab, &s.image, &s.masks, &s.sample.can_text, self.guided)?;
        Ok(decoder::generate(&self.decoder, &self.adapters, &x, &self.vocab, self.max_gen_len)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        for (name, t) in self.decoder.tensors() {
            tensors.push(TensorEntry { name, shape: t.shape() });
            payload.extend(t.values());
        }
        let mut push_matrix = |name: String, m: &Array2<f64>| {
            tensors.push(TensorEntry {
                name,
                shape: m.shape().to_vec(),
            });
            payload.extend(m.iter());
        };
        for ad in &self.adapters.adapters {
            push_matrix(format!("lora.{}.A", ad.target_name()), &ad.a);
            push_matrix(format!("lora.{}.B", ad.target_name()), &ad.b);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            encoder_config: self.encoder.config.clone(),
            encoder_seed: self.encoder_seed,
            decoder_config: self.decoder.config.clone(),
            vocab_hash: self.vocab.hash(),
            merged: self.decoder.merged,
            guided: self.guided,
            max_gen_len: self.max_gen_len,
            adapters: self
                .adapters
                .adapters
                .iter()
                .map(|a| AdapterEntry {
                    target: a.target_name(),
                    alpha: a.alpha,
                })
                .collect(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], vocab: Vocab) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| CheckpointError::Truncated)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| CheckpointError::Truncated)?;
        if r.len() < len {
            return Err(CheckpointError::Truncated);
        }
        let (head, mut data) = r.split_at(len);
        let header: Header = serde_json::from_slice(head)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(header.format_version));
        }
        if vocab.hash() != header.vocab_hash {
            return Err(CheckpointError::VocabMismatch {
                expected: header.vocab_hash,
                got: vocab.hash(),
            });
        }

        let mut decoder = DecoderParams::init(header.decoder_config.clone(), 0)?;
        decoder.merged = header.merged;
        let mut a_mats: Vec<Option<Array2<f64>>> = vec![None; header.adapters.len()];
        let mut b_mats: Vec<Option<Array2<f64>>> = vec![None; header.adapters.len()];
        for entry in &header.tensors {
            let count: usize = entry.shape.iter().product();
            if data.len() < count * 8 {
                return Err(CheckpointError::Truncated);
            }
            let (chunk, rest) = data.split_at(count * 8);
            data = rest;
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if let Some(lora) = entry.name.strip_prefix("lora.") {
                let bad = || CheckpointError::BadTensor(entry.name.clone());
                let (target, which) = lora.rsplit_once('.').ok_or_else(bad)?;
                let idx = header.adapters.iter().position(|a| a.target == target).ok_or_else(bad)?;
                let [rows, cols] = entry.shape[..] else {
                    return Err(bad());
                };
                let m = Array2::from_shape_vec((rows, cols), values).map_err(|_| bad())?;
                match which {
                    "A" => a_mats[idx] = Some(m),
                    "B" => b_mats[idx] = Some(m),
                    _ => return Err(bad()),
                }
            } else {
                decoder.set_tensor(&entry.name, &entry.shape, &values)?;
            }
        }
        if !data.is_empty() {
            return Err(CheckpointError::BadTensor("trailing payload bytes".into()));
        }

        let mut adapters = AdapterSet::empty();
        for ((entry, a), b) in header.adapters.iter().zip(a_mats).zip(b_mats) {
            let missing = || CheckpointError::BadTensor(format!("lora.{}", entry.target));
            let ad = AdapterSet::adapter_for(&entry.target, a.ok_or_else(missing)?, b.ok_or_else(missing)?, entry.alpha)?;
            adapters.adapters.push(ad);
        }
        adapters.check_against(&decoder)?;

        Ok(Self {
            encoder_seed: header.encoder_seed,
            encoder: FrozenEncoder::init_frozen(header.encoder_config, header.encoder_seed)?,
            decoder,
            adapters,
            vocab,
            guided: header.guided,
            max_gen_len: header.max_gen_len,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: Vocab) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?, vocab)
    }
}

impl AlertModel for ModelBundle {
    type Input = LoadedSample;

    fn respond(&self, input: &LoadedSample) -> Result<String, MetricsError> {
        self.respond_to(input)
            .map(|g| g.text)
            .map_err(|e| MetricsError::Model(e.to_string()))
    }
}
