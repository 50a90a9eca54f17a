//! Forward pass and hand-derived backward pass of the adapted decoder.
//!
//! Row-vector convention throughout: activations are `n x d`, a projection
//! `W` (`d_out x d_in`) maps `x` to `x · Wᵀ`, and an adapter adds
//! `s · (x · Aᵀ) · Bᵀ` with `s = alpha / r`.

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::lora::{AdapterSet, LoraAdapter};
use super::params::{DecoderParams, LayerParams, WeightId};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Gradient of a summed loss with respect to one adapter's `A` and `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraGrad {
    pub fn zeros_like(ad: &LoraAdapter) -> Self {
        Self {
            a: Array2::zeros(ad.a.raw_dim()),
            b: Array2::zeros(ad.b.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &LoraGrad) {
        self.a += &other.a;
        self.b += &other.b;
    }

    pub fn scale(&mut self, k: f64) {
        self.a *= k;
        self.b *= k;
    }
}

pub fn zero_grads(adapters: &AdapterSet) -> Vec<LoraGrad> {
    adapters.adapters.iter().map(LoraGrad::zeros_like).collect()
}

/// Per-layer adapter lookup resolved once per call.
struct Slots<'a> {
    by_layer: Vec<[Option<(usize, &'a LoraAdapter)>; 10]>,
}

impl<'a> Slots<'a> {
    fn new(layers: usize, adapters: &'a AdapterSet) -> Self {
        let mut by_layer = vec![[None; 10]; layers];
        for (i, ad) in adapters.adapters.iter().enumerate() {
            if ad.layer < layers {
                by_layer[ad.layer][ad.weight as usize] = Some((i, ad));
            }
        }
        Self { by_layer }
    }

    fn get(&self, layer: usize, w: WeightId) -> Option<(usize, &'a LoraAdapter)> {
        self.by_layer[layer][w as usize]
    }

    fn adapter(&self, layer: usize, w: WeightId) -> Option<&'a LoraAdapter> {
        self.get(layer, w).map(|(_, a)| a)
    }
}

/// Projection output and the adapter intermediate `x · Aᵀ`.
struct Proj {
    y: Array2<f64>,
    u: Option<Array2<f64>>,
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, lora: Option<&LoraAdapter>) -> Proj {
    let mut y = x.dot(&w.t());
    let u = lora.map(|ad| {
        let u = x.dot(&ad.a.t());
        y.scaled_add(ad.scaling(), &u.dot(&ad.b.t()));
        u
    });
    Proj { y, u }
}

/// Accumulates adapter gradients and optionally returns `dL/dx`.
fn linear_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    proj: &Proj,
    w: &Array2<f64>,
    lora: Option<(usize, &LoraAdapter)>,
    grads: &mut [LoraGrad],
    need_dx: bool,
) -> Option<Array2<f64>> {
    let mut dx = need_dx.then(|| dy.dot(w));
    if let Some((idx, ad)) = lora {
        let s = ad.scaling();
        let u = proj.u.as_ref().expect("adapter intermediate recorded");
        let dyb = dy.dot(&ad.b);
        grads[idx].b.scaled_add(s, &dy.t().dot(u));
        grads[idx].a.scaled_add(s, &dyb.t().dot(x));
        if let Some(dx) = dx.as_mut() {
            dx.scaled_add(s, &dyb.dot(&ad.a));
        }
    }
    dx
}

struct Norm {
    y: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> Norm {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row *= *is;
    }
    let y = &xhat * gain + bias;
    Norm { y, xhat, inv_std }
}

fn layer_norm_backward(dy: &Array2<f64>, norm: &Norm, gain: &Array1<f64>) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xh), &is) in dx
        .axis_iter_mut(Axis(0))
        .zip(norm.xhat.axis_iter(Axis(0)))
        .zip(norm.inv_std.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.iter().zip(xh.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
        Zip::from(&mut row).and(&xh).for_each(|g, &x| *g = is * (*g - mean_g - x * mean_gx));
    }
    dx
}

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}

/// Multi-head scaled dot-product attention; returns output and per-head probabilities.
fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize, causal: bool) -> (Array2<f64>, Vec<Array2<f64>>) {
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), q.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if causal {
            for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
                row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
            }
        }
        softmax_rows(&mut p);
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (out, probs)
}

fn attention_backward(
    dout: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = probs.len();
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout_h = dout.slice(cols);
        let dp = dout_h.dot(&v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let mut ds = &dp * p;
        for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
            let total = row.sum();
            Zip::from(&mut row).and(&prow).for_each(|d, &pp| *d -= pp * total);
        }
        dq.slice_mut(cols).assign(&(ds.dot(&k.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&q.slice(cols)) * scale));
    }
    (dq, dk, dv)
}

/// Cross-attention keys and values over the fused representation, per layer.
pub struct CrossMemory {
    layers: Vec<(Proj, Proj)>,
}

impl CrossMemory {
    pub fn new(params: &DecoderParams, adapters: &AdapterSet, x: &Array2<f64>) -> Self {
        let slots = Slots::new(params.layers.len(), adapters);
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(l, lp)| {
                (
                    linear(x, &lp.cross_k, slots.adapter(l, WeightId::CrossK)),
                    linear(x, &lp.cross_v, slots.adapter(l, WeightId::CrossV)),
                )
            })
            .collect();
        Self { layers }
    }
}

struct LayerTape {
    input: Array2<f64>,
    ln1: Norm,
    sq: Proj,
    sk: Proj,
    sv: Proj,
    s_probs: Vec<Array2<f64>>,
    s_ctx: Array2<f64>,
    so: Proj,
    ln2: Norm,
    cq: Proj,
    c_probs: Vec<Array2<f64>>,
    c_ctx: Array2<f64>,
    co: Proj,
    mid2: Array2<f64>,
    ln3: Norm,
    up: Proj,
    act: Array2<f64>,
    down: Proj,
}

/// Activations recorded by [`run`] for the backward pass.
pub struct Tape {
    layers: Vec<LayerTape>,
    /// Final residual stream, `n x d`.
    pub hidden: Array2<f64>,
}

fn layer_forward(lp: &LayerParams, l: usize, slots: &Slots, mem: &(Proj, Proj), h: Array2<f64>, heads: usize) -> LayerTape {
    let ln1 = layer_norm(&h, &lp.ln1_gain, &lp.ln1_bias);
    let sq = linear(&ln1.y, &lp.self_q, slots.adapter(l, WeightId::SelfQ));
    let sk = linear(&ln1.y, &lp.self_k, slots.adapter(l, WeightId::SelfK));
    let sv = linear(&ln1.y, &lp.self_v, slots.adapter(l, WeightId::SelfV));
    let (s_ctx, s_probs) = attention(&sq.y, &sk.y, &sv.y, heads, true);
    let so = linear(&s_ctx, &lp.self_o, slots.adapter(l, WeightId::SelfO));
    let mid1 = &h + &so.y;

    let ln2 = layer_norm(&mid1, &lp.ln2_gain, &lp.ln2_bias);
    let cq = linear(&ln2.y, &lp.cross_q, slots.adapter(l, WeightId::CrossQ));
    let (c_ctx, c_probs) = attention(&cq.y, &mem.0.y, &mem.1.y, heads, false);
    let co = linear(&c_ctx, &lp.cross_o, slots.adapter(l, WeightId::CrossO));
    let mid2 = &mid1 + &co.y;

    let ln3 = layer_norm(&mid2, &lp.ln3_gain, &lp.ln3_bias);
    let mut up = linear(&ln3.y, &lp.ffn_up, slots.adapter(l, WeightId::FfnUp));
    up.y += &lp.ffn_up_bias;
    let act = up.y.mapv(gelu);
    let mut down = linear(&act, &lp.ffn_down, slots.adapter(l, WeightId::FfnDown));
    down.y += &lp.ffn_down_bias;

    LayerTape {
        input: h,
        ln1,
        sq,
        sk,
        sv,
        s_probs,
        s_ctx,
        so,
        ln2,
        cq,
        c_probs,
        c_ctx,
        co,
        mid2,
        ln3,
        up,
        act,
        down,
    }
}

/// Runs the decoder over `ids`, recording activations.
pub fn run(params: &DecoderParams, adapters: &AdapterSet, mem: &CrossMemory, ids: &[u32]) -> Tape {
    let slots = Slots::new(params.layers.len(), adapters);
    let d = params.config.d_model;
    let mut h = Array2::zeros((ids.len(), d));
    for (i, (&id, mut row)) in ids.iter().zip(h.axis_iter_mut(Axis(0))).enumerate() {
        row.assign(&params.token_emb.row(id as usize));
        row += &params.pos_emb.row(i);
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, lp) in params.layers.iter().enumerate() {
        let tape = layer_forward(lp, l, &slots, &mem.layers[l], h, params.config.heads);
        h = &tape.mid2 + &tape.down.y;
        layers.push(tape);
    }
    Tape { layers, hidden: h }
}

/// Vocabulary logits for every row of `hidden` (tied output projection).
pub fn logits(params: &DecoderParams, hidden: &Array2<f64>) -> Array2<f64> {
    hidden.dot(&params.token_emb.t()) + &params.output_bias
}

/// Back-propagates `d_hidden` (gradient at the final residual stream) to the
/// adapters. Returns gradients in adapter order.
pub fn backward(
    params: &DecoderParams,
    adapters: &AdapterSet,
    x: &Array2<f64>,
    mem: &CrossMemory,
    tape: &Tape,
    d_hidden: Array2<f64>,
) -> Vec<LoraGrad> {
    let slots = Slots::new(params.layers.len(), adapters);
    let mut grads = zero_grads(adapters);
    let mut dh = d_hidden;

    for l in (0..params.layers.len()).rev() {
        let lp = &params.layers[l];
        let t = &tape.layers[l];
        let (mk, mv) = &mem.layers[l];

        // Feed-forward block.
        let dact = linear_backward(&dh, &t.act, &t.down, &lp.ffn_down, slots.get(l, WeightId::FfnDown), &mut grads, true)
            .expect("dx requested");
        let dz = Zip::from(&dact).and(&t.up.y).map_collect(|&g, &z| g * gelu_grad(z));
        let dln3 = linear_backward(&dz, &t.ln3.y, &t.up, &lp.ffn_up, slots.get(l, WeightId::FfnUp), &mut grads, true)
            .expect("dx requested");
        let mut dmid2 = dh;
        dmid2 += &layer_norm_backward(&dln3, &t.ln3, &lp.ln3_gain);

        // Cross-attention block; keys and values come from the frozen X.
        let dctx = linear_backward(&dmid2, &t.c_ctx, &t.co, &lp.cross_o, slots.get(l, WeightId::CrossO), &mut grads, true)
            .expect("dx requested");
        let (dq, dk, dv) = attention_backward(&dctx, &t.cq.y, &mk.y, &mv.y, &t.c_probs);
        linear_backward(&dk, x, mk, &lp.cross_k, slots.get(l, WeightId::CrossK), &mut grads, false);
        linear_backward(&dv, x, mv, &lp.cross_v, slots.get(l, WeightId::CrossV), &mut grads, false);
        let dln2 = linear_backward(&dq, &t.ln2.y, &t.cq, &lp.cross_q, slots.get(l, WeightId::CrossQ), &mut grads, true)
            .expect("dx requested");
        let mut dmid1 = dmid2;
        dmid1 += &layer_norm_backward(&dln2, &t.ln2, &lp.ln2_gain);

        // Causal self-attention block.
        let dctx = linear_backward(&dmid1, &t.s_ctx, &t.so, &lp.self_o, slots.get(l, WeightId::SelfO), &mut grads, true)
            .expect("dx requested");
        let (dq, dk, dv) = attention_backward(&dctx, &t.sq.y, &t.sk.y, &t.sv.y, &t.s_probs);
        let need_dx = l > 0;
        let mut dln1 = Array2::zeros(t.ln1.y.raw_dim());
        for (dy, proj, w, id) in [
            (&dq, &t.sq, &lp.self_q, WeightId::SelfQ),
            (&dk, &t.sk, &lp.self_k, WeightId::SelfK),
            (&dv, &t.sv, &lp.self_v, WeightId::SelfV),
        ] {
            if let Some(dx) = linear_backward(dy, &t.ln1.y, proj, w, slots.get(l, id), &mut grads, need_dx) {
                dln1 += &dx;
            }
        }
        let mut dinput = dmid1;
        if need_dx {
            dinput += &layer_norm_backward(&dln1, &t.ln1, &lp.ln1_gain);
        }
        debug_assert_eq!(dinput.dim(), t.input.dim());
        dh = dinput;
    }
    grads
}
