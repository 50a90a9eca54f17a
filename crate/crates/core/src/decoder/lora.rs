//! Low-rank adapters: `W + (alpha / r) · B · A` on a named projection.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{parse_weight_name, weight_name, DecoderParams, WeightId};
use super::DecoderError;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer: usize,
    pub weight: WeightId,
    /// `r x d_in`.
    pub a: Array2<f64>,
    /// `d_out x r`.
    pub b: Array2<f64>,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn target_name(&self) -> String {
        weight_name(self.layer, self.weight)
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(alpha / r) · B · A`, shaped like the target weight.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scaling()
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<WeightId>,
    /// `A` is drawn from `uniform(-a_init, a_init)`; `B` starts at zero.
    pub a_init: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: vec![WeightId::SelfQ, WeightId::SelfV, WeightId::CrossQ, WeightId::CrossV],
            a_init: 0.01,
        }
    }
}

/// The trainable adapter set, kept in a fixed (layer, target) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterSet {
    pub adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Fresh adapters on every configured target of every layer.
    pub fn init(params: &DecoderParams, cfg: &LoraConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = Vec::new();
        for layer in 0..params.layers.len() {
            for &weight in &cfg.targets {
                let w = params.layers[layer].weight(weight);
                let (d_out, d_in) = w.dim();
                let a = Array2::from_shape_simple_fn((cfg.rank, d_in), || {
                    rng.gen_range(-cfg.a_init..cfg.a_init)
                });
                adapters.push(LoraAdapter {
                    layer,
                    weight,
                    a,
                    b: Array2::zeros((d_out, cfg.rank)),
                    alpha: cfg.alpha,
                });
            }
        }
        Self { adapters }
    }

    /// Builds one adapter from a target name such as `layers.0.cross_attn.q_proj`.
    pub fn adapter_for(
        target: &str,
        a: Array2<f64>,
        b: Array2<f64>,
        alpha: f64,
    ) -> Result<LoraAdapter, DecoderError> {
        let (layer, weight) =
            parse_weight_name(target).ok_or_else(|| DecoderError::TargetNotFound(target.to_string()))?;
        if a.nrows() != b.ncols() || a.nrows() == 0 {
            return Err(DecoderError::ShapeMismatch(format!(
                "adapter {target}: A is {:?}, B is {:?}",
                a.dim(),
                b.dim()
            )));
        }
        Ok(LoraAdapter { layer, weight, a, b, alpha })
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn get(&self, layer: usize, weight: WeightId) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.layer == layer && a.weight == weight)
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::parameter_count).sum()
    }

    /// Checks every adapter against the decoder it will be applied to.
    pub fn check_against(&self, params: &DecoderParams) -> Result<(), DecoderError> {
        for ad in &self.adapters {
            let w = params
                .weight(ad.layer, ad.weight)
                .ok_or_else(|| DecoderError::TargetNotFound(ad.target_name()))?;
            let (d_out, d_in) = w.dim();
            if ad.a.ncols() != d_in || ad.b.nrows() != d_out || ad.a.nrows() != ad.b.ncols() {
                return Err(DecoderError::ShapeMismatch(format!(
                    "adapter {} does not fit {:?}",
                    ad.target_name(),
                    w.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Folds adapters into the base weights. Refuses params that already carry
/// merged adapters.
pub fn merge_adapters(params: &DecoderParams, adapters: &AdapterSet) -> Result<DecoderParams, DecoderError> {
    if params.merged {
        return Err(DecoderError::AlreadyMerged);
    }
    let mut out = merge_unchecked(params, adapters)?;
    out.merged = true;
    Ok(out)
}

/// `W += ΔW` for every adapter, without the merged-flag guard.
pub fn merge_unchecked(params: &DecoderParams, adapters: &AdapterSet) -> Result<DecoderParams, DecoderError> {
    adapters.check_against(params)?;
    let mut out = params.clone();
    for ad in &adapters.adapters {
        let w = out.layers[ad.layer].weight_mut(ad.weight);
        *w += &ad.delta();
    }
    Ok(out)
}
