use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DecoderError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl DecoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn_hidden: 128,
            max_seq_len: 64,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(DecoderError::ShapeMismatch(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_hidden == 0 || self.max_seq_len < 2 || self.vocab_size < 5 {
            return Err(DecoderError::ShapeMismatch("degenerate decoder config".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Projection matrices a LoRA adapter may target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightId {
    SelfQ,
    SelfK,
    SelfV,
    SelfO,
    CrossQ,
    CrossK,
    CrossV,
    CrossO,
    FfnUp,
    FfnDown,
}

impl WeightId {
    pub const ALL: [WeightId; 10] = [
        WeightId::SelfQ,
        WeightId::SelfK,
        WeightId::SelfV,
        WeightId::SelfO,
        WeightId::CrossQ,
        WeightId::CrossK,
        WeightId::CrossV,
        WeightId::CrossO,
        WeightId::FfnUp,
        WeightId::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightId::SelfQ => "self_attn.q_proj",
            WeightId::SelfK => "self_attn.k_proj",
            WeightId::SelfV => "self_attn.v_proj",
            WeightId::SelfO => "self_attn.o_proj",
            WeightId::CrossQ => "cross_attn.q_proj",
            WeightId::CrossK => "cross_attn.k_proj",
            WeightId::CrossV => "cross_attn.v_proj",
            WeightId::CrossO => "cross_attn.o_proj",
            WeightId::FfnUp => "ffn.up_proj",
            WeightId::FfnDown => "ffn.down_proj",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.name() == name)
    }
}

/// Formats `layers.<l>.<weight>`.
pub fn weight_name(layer: usize, weight: WeightId) -> String {
    format!("layers.{layer}.{}", weight.name())
}

/// Inverse of [`weight_name`].
pub fn parse_weight_name(name: &str) -> Option<(usize, WeightId)> {
    let rest = name.strip_prefix("layers.")?;
    let (layer, weight) = rest.split_once('.')?;
    Some((layer.parse().ok()?, WeightId::from_name(weight)?))
}

/// Pre-norm decoder block. Projection matrices are `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub self_q: Array2<f64>,
    pub self_k: Array2<f64>,
    pub self_v: Array2<f64>,
    pub self_o: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub cross_q: Array2<f64>,
    pub cross_k: Array2<f64>,
    pub cross_v: Array2<f64>,
    pub cross_o: Array2<f64>,
    pub ln3_gain: Array1<f64>,
    pub ln3_bias: Array1<f64>,
    pub ffn_up: Array2<f64>,
    pub ffn_up_bias: Array1<f64>,
    pub ffn_down: Array2<f64>,
    pub ffn_down_bias: Array1<f64>,
}

impl LayerParams {
    pub fn weight(&self, id: WeightId) -> &Array2<f64> {
        match id {
            WeightId::SelfQ => &self.self_q,
            WeightId::SelfK => &self.self_k,
            WeightId::SelfV => &self.self_v,
            WeightId::SelfO => &self.self_o,
            WeightId::CrossQ => &self.cross_q,
            WeightId::CrossK => &self.cross_k,
            WeightId::CrossV => &self.cross_v,
            WeightId::CrossO => &self.cross_o,
            WeightId::FfnUp => &self.ffn_up,
            WeightId::FfnDown => &self.ffn_down,
        }
    }

    pub fn weight_mut(&mut self, id: WeightId) -> &mut Array2<f64> {
        match id {
            WeightId::SelfQ => &mut self.self_q,
            WeightId::SelfK => &mut self.self_k,
            WeightId::SelfV => &mut self.self_v,
            WeightId::SelfO => &mut self.self_o,
            WeightId::CrossQ => &mut self.cross_q,
            WeightId::CrossK => &mut self.cross_k,
            WeightId::CrossV => &mut self.cross_v,
            WeightId::CrossO => &mut self.cross_o,
            WeightId::FfnUp => &mut self.ffn_up,
            WeightId::FfnDown => &mut self.ffn_down,
        }
    }

    fn vectors(&self) -> [(&'static str, &Array1<f64>); 8] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ln3.gain", &self.ln3_gain),
            ("ln3.bias", &self.ln3_bias),
            ("ffn.up_bias", &self.ffn_up_bias),
            ("ffn.down_bias", &self.ffn_down_bias),
        ]
    }

    fn vectors_mut(&mut self) -> [(&'static str, &mut Array1<f64>); 8] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("ln3.gain", &mut self.ln3_gain),
            ("ln3.bias", &mut self.ln3_bias),
            ("ffn.up_bias", &mut self.ffn_up_bias),
            ("ffn.down_bias", &mut self.ffn_down_bias),
        ]
    }
}

/// Frozen base decoder weights. The token embedding doubles as the output
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub output_bias: Array1<f64>,
    /// Set once adapters have been folded into the weights.
    pub merged: bool,
}

/// A named tensor view in either rank.
pub enum TensorRef<'a> {
    Matrix(&'a Array2<f64>),
    Vector(&'a Array1<f64>),
}

impl TensorRef<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Matrix(m) => m.shape().to_vec(),
            TensorRef::Vector(v) => v.shape().to_vec(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            TensorRef::Matrix(m) => m.iter().copied().collect(),
            TensorRef::Vector(v) => v.to_vec(),
        }
    }
}

const EMBED_BOUND: f64 = 0.05;

impl DecoderParams {
    /// Random base weights: projections `uniform(±1/sqrt(fan_in))`, embeddings
    /// `uniform(±0.05)`, unit layer-norm gains, zero biases.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self, DecoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let h = config.ffn_hidden;
        let mut mat = |rows: usize, cols: usize, bound: f64| {
            Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
        };
        let proj = 1.0 / (d as f64).sqrt();
        let token_emb = mat(config.vocab_size, d, EMBED_BOUND);
        let pos_emb = mat(config.max_seq_len, d, EMBED_BOUND);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                self_q: mat(d, d, proj),
                self_k: mat(d, d, proj),
                self_v: mat(d, d, proj),
                self_o: mat(d, d, proj),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                cross_q: mat(d, d, proj),
                cross_k: mat(d, d, proj),
                cross_v: mat(d, d, proj),
                cross_o: mat(d, d, proj),
                ln3_gain: Array1::ones(d),
                ln3_bias: Array1::zeros(d),
                ffn_up: mat(h, d, proj),
                ffn_up_bias: Array1::zeros(h),
                ffn_down: mat(d, h, 1.0 / (h as f64).sqrt()),
                ffn_down_bias: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            output_bias: Array1::zeros(config.vocab_size),
            config,
            token_emb,
            pos_emb,
            layers,
            merged: false,
        })
    }

    pub fn weight(&self, layer: usize, id: WeightId) -> Option<&Array2<f64>> {
        self.layers.get(layer).map(|l| l.weight(id))
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = vec![
            ("decoder.token_emb".to_string(), TensorRef::Matrix(&self.token_emb)),
            ("decoder.pos_emb".to_string(), TensorRef::Matrix(&self.pos_emb)),
            ("decoder.output_bias".to_string(), TensorRef::Vector(&self.output_bias)),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for id in WeightId::ALL {
                out.push((format!("decoder.{}", weight_name(l, id)), TensorRef::Matrix(layer.weight(id))));
            }
            for (name, v) in layer.vectors() {
                out.push((format!("decoder.layers.{l}.{name}"), TensorRef::Vector(v)));
            }
        }
        out
    }

    /// Overwrites the tensor called `name` with `values`, checking the shape.
    pub fn set_tensor(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<(), DecoderError> {
        let mismatch = || DecoderError::ShapeMismatch(format!("tensor {name} has wrong shape {shape:?}"));
        let fill2 = |m: &mut Array2<f64>| -> Result<(), DecoderError> {
            if m.shape() != shape {
                return Err(mismatch());
            }
            m.iter_mut().zip(values).for_each(|(d, s)| *d = *s);
            Ok(())
        };
        let fill1 = |v: &mut Array1<f64>| -> Result<(), DecoderError> {
            if v.shape() != shape {
                return Err(mismatch());
            }
            v.iter_mut().zip(values).for_each(|(d, s)| *d = *s);
            Ok(())
        };
        let Some(rest) = name.strip_prefix("decoder.") else {
            return Err(DecoderError::TargetNotFound(name.to_string()));
        };
        match rest {
            "token_emb" => return fill2(&mut self.token_emb),
            "pos_emb" => return fill2(&mut self.pos_emb),
            "output_bias" => return fill1(&mut self.output_bias),
            _ => {}
        }
        if let Some((l, id)) = parse_weight_name(rest) {
            let layer = self
                .layers
                .get_mut(l)
                .ok_or_else(|| DecoderError::TargetNotFound(name.to_string()))?;
            return fill2(layer.weight_mut(id));
        }
        if let Some((l, vname)) = rest
            .strip_prefix("layers.")
            .and_then(|r| r.split_once('.'))
            .and_then(|(l, v)| Some((l.parse::<usize>().ok()?, v)))
        {
            if let Some(layer) = self.layers.get_mut(l) {
                for (n, v) in layer.vectors_mut() {
                    if n == vname {
                        return fill1(v);
                    }
                }
            }
        }
        Err(DecoderError::TargetNotFound(name.to_string()))
    }

    /// SHA-256 over every tensor name, shape and little-endian value.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.tensors() {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.values() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
