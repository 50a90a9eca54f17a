//! Frozen multimodal encoder: image and mask patches plus CAN text tokens
//! embedded into one fused token sequence.
//!
//! Every parameter is drawn once from a seeded `uniform(-0.1, 0.1)` and never
//! updated. Each stream carries its own position table so that appending the
//! mask streams leaves image and CAN tokens bit-identical.

use image::{GrayImage, RgbImage};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::media::MaskPair;
use crate::text::{Vocab, PAD_ID};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("image is {got:?}, expected {expected}x{expected}")]
    BadImageShape { got: (u32, u32), expected: usize },
    #[error("mask is {got:?}, expected {expected}x{expected}")]
    BadMaskShape { got: (u32, u32), expected: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_can_tokens: usize,
    /// Default input composition: with mask streams (`true`) or without.
    pub guided: bool,
    /// Largest instance id; instance masks are divided by it.
    pub instance_max: u8,
    pub position_embeddings: bool,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            d_model: 64,
            vocab_size,
            max_can_tokens: 24,
            guided: true,
            instance_max: 2,
            position_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.into()));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.d_model == 0 || self.vocab_size < 4 || self.instance_max == 0 {
            return bad("d_model, vocab_size and instance_max must be positive");
        }
        Ok(())
    }

    pub fn patches_per_stream(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn token_count(&self, guided: bool) -> usize {
        let streams = if guided { 3 } else { 1 };
        streams * self.patches_per_stream() + self.max_can_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Image = 0,
    BinaryMask = 1,
    InstanceMask = 2,
    Can = 3,
}

/// The fused latent token sequence `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    /// `n_tokens x d_model`.
    pub tokens: Array2<f64>,
    pub provenance: Vec<Provenance>,
}

impl FusedRepresentation {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoderParams {
    /// `(patch² · 3) x d_model`.
    pub image_proj: Array2<f64>,
    /// `patch² x d_model`, shared by both mask streams.
    pub mask_proj: Array2<f64>,
    /// One row per [`Provenance`].
    pub tag_emb: Array2<f64>,
    /// Position table for patch streams.
    pub patch_pos: Array2<f64>,
    /// Position table for CAN text tokens.
    pub text_pos: Array2<f64>,
    pub token_emb: Array2<f64>,
}

impl FrozenEncoderParams {
    /// Every parameter matrix, in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &Array2<f64>); 6] {
        [
            ("encoder.image_proj", &self.image_proj),
            ("encoder.mask_proj", &self.mask_proj),
            ("encoder.tag_emb", &self.tag_emb),
            ("encoder.patch_pos", &self.patch_pos),
            ("encoder.text_pos", &self.text_pos),
            ("encoder.token_emb", &self.token_emb),
        ]
    }

    /// SHA-256 over every tensor name, shape and value.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.tensors() {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    pub config: EncoderConfig,
    pub params: FrozenEncoderParams,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

impl FrozenEncoder {
    pub fn init_frozen(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p2 = config.patch_size * config.patch_size;
        let d = config.d_model;
        let params = FrozenEncoderParams {
            image_proj: uniform(&mut rng, p2 * 3, d, 0.1),
            mask_proj: uniform(&mut rng, p2, d, 0.1),
            tag_emb: uniform(&mut rng, 4, d, 0.1),
            patch_pos: uniform(&mut rng, config.patches_per_stream(), d, 0.1),
            text_pos: uniform(&mut rng, config.max_can_tokens, d, 0.1),
            token_emb: uniform(&mut rng, config.vocab_size, d, 0.1),
        };
        Ok(Self { config, params })
    }

    /// Encodes one input set: image patches, then (when guided) binary and
    /// instance mask patches, then `max_can_tokens` CAN text embeddings.
    pub fn encode(
        &self,
        vocab: &Vocab,
        image: &RgbImage,
        masks: &MaskPair,
        can_text: &str,
        guided: bool,
    ) -> Result<FusedRepresentation, EncoderError> {
        let cfg = &self.config;
        let n = cfg.image_size as u32;
        if image.dimensions() != (n, n) {
            return Err(EncoderError::BadImageShape {
                got: image.dimensions(),
                expected: cfg.image_size,
            });
        }
        for m in [&masks.binary, &masks.instance] {
            if guided && m.dimensions() != (n, n) {
                return Err(EncoderError::BadMaskShape {
                    got: m.dimensions(),
                    expected: cfg.image_size,
                });
            }
        }

        let total = cfg.token_count(guided);
        let mut tokens = Array2::<f64>::zeros((total, cfg.d_model));
        let mut provenance = Vec::with_capacity(total);

        let image_patches = self.patchify_rgb(image);
        self.project_stream(&image_patches, &self.params.image_proj, Provenance::Image, &mut tokens, &mut provenance);
        if guided {
            let bin = self.patchify_gray(&masks.binary, 255.0);
            self.project_stream(&bin, &self.params.mask_proj, Provenance::BinaryMask, &mut tokens, &mut provenance);
            let ins = self.patchify_gray(&masks.instance, f64::from(cfg.instance_max));
            self.project_stream(&ins, &self.params.mask_proj, Provenance::InstanceMask, &mut tokens, &mut provenance);
        }

        let mut ids = vocab.encode(can_text);
        ids.resize(cfg.max_can_tokens, PAD_ID);
        for (k, &id) in ids.iter().enumerate() {
            let row = provenance.len();
            let mut t = tokens.row_mut(row);
            let id = (id as usize).min(cfg.vocab_size - 1);
            t += &self.params.token_emb.row(id);
            t += &self.params.tag_emb.row(Provenance::Can as usize);
            if cfg.position_embeddings {
                t += &self.params.text_pos.row(k);
            }
            provenance.push(Provenance::Can);
        }

        Ok(FusedRepresentation { tokens, provenance })
    }

    fn project_stream(
        &self,
        patches: &Array2<f64>,
        proj: &Array2<f64>,
        tag: Provenance,
        tokens: &mut Array2<f64>,
        provenance: &mut Vec<Provenance>,
    ) {
        let start = provenance.len();
        let projected = patches.dot(proj);
        let tag_row: ArrayView1<f64> = self.params.tag_emb.row(tag as usize);
        for (k, row) in projected.axis_iter(Axis(0)).enumerate() {
            let mut t = tokens.row_mut(start + k);
            t.assign(&row);
            t += &tag_row;
            if self.config.position_embeddings {
                t += &self.params.patch_pos.row(k);
            }
            provenance.push(tag);
        }
    }

    // Raster-ordered patches, each flattened row-major with interleaved channels.
    fn patchify_rgb(&self, image: &RgbImage) -> Array2<f64> {
        let p = self.config.patch_size;
        let side = self.config.image_size / p;
        let mut out = Array2::zeros((side * side, p * p * 3));
        for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (py, px) = (k / side, k % side);
            let mut j = 0;
            for y in 0..p {
                for x in 0..p {
                    let px_val = image.get_pixel((px * p + x) as u32, (py * p + y) as u32);
                    for c in 0..3 {
                        row[j] = f64::from(px_val[c]) / 255.0;
                        j += 1;
                    }
                }
            }
        }
        out
    }

    fn patchify_gray(&self, mask: &GrayImage, scale: f64) -> Array2<f64> {
        let p = self.config.patch_size;
        let side = self.config.image_size / p;
        let mut out = Array2::zeros((side * side, p * p));
        for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (py, px) = (k / side, k % side);
            for y in 0..p {
                for x in 0..p {
                    let v = mask.get_pixel((px * p + x) as u32, (py * p + y) as u32)[0];
                    row[y * p + x] = (f64::from(v) / scale).min(1.0);
                }
            }
        }
        out
    }
}

/// Mean token vector, handy for diagnostics.
pub fn mean_token(x: &FusedRepresentation) -> Array1<f64> {
    x.tokens.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.tokens.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};

    fn inputs(size: u32) -> (RgbImage, MaskPair) {
        let img = RgbImage::from_fn(size, size, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, 90]));
        let bin = GrayImage::from_fn(size, size, |x, _| Luma([if x % 7 == 0 { 255 } else { 0 }]));
        let ins = GrayImage::from_fn(size, size, |x, _| Luma([if x % 7 == 0 { 1 + (x > 30) as u8 } else { 0 }]));
        (img, MaskPair::new(bin, ins).unwrap())
    }

    fn vocab() -> Vocab {
        Vocab::build(["speed=25.0;steer_deg=-3.2;torque=0.10;lka=1;offset_m=0.12"])
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = EncoderConfig::new(50);
        let a = FrozenEncoder::init_frozen(cfg.clone(), 1).unwrap();
        let b = FrozenEncoder::init_frozen(cfg.clone(), 1).unwrap();
        let c = FrozenEncoder::init_frozen(cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params.image_proj, c.params.image_proj);
        assert_eq!(a.params.image_proj.dim(), (16 * 16 * 3, 64));
        assert!(a.params.image_proj.iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn token_counts() {
        let v = vocab();
        let enc = FrozenEncoder::init_frozen(EncoderConfig::new(v.len()), 3).unwrap();
        let (img, masks) = inputs(64);
        let text = "speed=25.0;steer_deg=-3.2;torque=0.10;lka=1;offset_m=0.12";
        let g = enc.encode(&v, &img, &masks, text, true).unwrap();
        assert_eq!(g.len(), 72);
        assert!(g.tokens.iter().all(|x| x.is_finite()));
        let u = enc.encode(&v, &img, &masks, text, false).unwrap();
        assert_eq!(u.len(), 40);
        assert!(!u.provenance.contains(&Provenance::BinaryMask));
        for tag in [Provenance::Image, Provenance::BinaryMask, Provenance::InstanceMask, Provenance::Can] {
            assert!(g.provenance.contains(&tag));
        }
    }

    #[test]
    fn guided_and_unguided_agree_on_shared_tokens() {
        let v = vocab();
        let enc = FrozenEncoder::init_frozen(EncoderConfig::new(v.len()), 3).unwrap();
        let (img, masks) = inputs(64);
        let g = enc.encode(&v, &img, &masks, "speed=1.0", true).unwrap();
        let u = enc.encode(&v, &img, &masks, "speed=1.0", false).unwrap();
        assert_eq!(g.tokens.slice(ndarray::s![0..16, ..]), u.tokens.slice(ndarray::s![0..16, ..]));
        assert_eq!(g.tokens.slice(ndarray::s![48.., ..]), u.tokens.slice(ndarray::s![16.., ..]));
    }

    #[test]
    fn black_inputs_depend_only_on_structure() {
        let v = vocab();
        let enc = FrozenEncoder::init_frozen(EncoderConfig::new(v.len()), 9).unwrap();
        let img = RgbImage::new(64, 64);
        let masks = MaskPair::new(GrayImage::new(64, 64), GrayImage::new(64, 64)).unwrap();
        let text = "speed=0.0;steer_deg=0.0;torque=0.00;lka=0;offset_m=0.00";
        let a = enc.encode(&v, &img, &masks, text, true).unwrap();
        let b = enc.encode(&v, &img, &masks, text, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tokens.row(0), a.tokens.row(1));
        let expected = &enc.params.tag_emb.row(0) + &enc.params.patch_pos.row(5);
        assert_eq!(a.tokens.row(5), expected);
    }

    #[test]
    fn shape_errors() {
        let v = vocab();
        let enc = FrozenEncoder::init_frozen(EncoderConfig::new(v.len()), 3).unwrap();
        let (img, masks) = inputs(64);
        let (small, small_masks) = inputs(32);
        assert!(matches!(
            enc.encode(&v, &small, &masks, "", true),
            Err(EncoderError::BadImageShape { .. })
        ));
        assert!(matches!(
            enc.encode(&v, &img, &small_masks, "", true),
            Err(EncoderError::BadMaskShape { .. })
        ));
        // Masks are not consulted when unguided.
        assert!(enc.encode(&v, &img, &small_masks, "", false).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::new(10);
        c.patch_size = 10;
        assert!(FrozenEncoder::init_frozen(c, 0).is_err());
    }

    #[test]
    fn token_count_formula() {
        for (size, patch) in [(64, 16), (32, 8), (48, 16), (16, 16)] {
            let mut c = EncoderConfig::new(10);
            c.image_size = size;
            c.patch_size = patch;
            c.max_can_tokens = 5;
            let side = size / patch;
            assert_eq!(c.token_count(true), 3 * side * side + 5);
            assert_eq!(c.token_count(false), side * side + 5);
        }
    }
}
