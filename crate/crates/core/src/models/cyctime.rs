//! Transformer encoder fed with observed values, mask bits and fixed cyclic
//! time encodings.

use rand::Rng;

use super::{maybe_dropout, Dropout, ModelConfig, ModelInput};
use crate::autodiff::{Tape, Var};
use crate::domain::CLASSES;
use crate::nn::ParamStore;
use crate::time_encoding::CyclicFeatures;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    norm1_gain: usize,
    norm1_bias: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    norm2_gain: usize,
    norm2_bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycTimeLayout {
    dim: usize,
    heads: usize,
    w_in: usize,
    b_in: usize,
    layers: Vec<EncoderLayer>,
    dec_w: usize,
    dec_b: usize,
    cls_w: usize,
    cls_b: usize,
}

impl CycTimeLayout {
    pub(super) fn init(config: &ModelConfig, features: usize, p: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = config.hidden_dim;
        let input = 2 * features + CyclicFeatures::WIDTH;
        let w_in = p.add_weight("input.w", input, d, rng);
        let b_in = p.add_zeros("input.b", 1, d);
        let layers = (0..config.num_layers)
            .map(|l| {
                let n = |s: &str| format!("layer{l}.{s}");
                EncoderLayer {
                    wq: p.add_weight(&n("wq"), d, d, rng),
                    bq: p.add_zeros(&n("bq"), 1, d),
                    wk: p.add_weight(&n("wk"), d, d, rng),
                    bk: p.add_zeros(&n("bk"), 1, d),
                    wv: p.add_weight(&n("wv"), d, d, rng),
                    bv: p.add_zeros(&n("bv"), 1, d),
                    wo: p.add_weight(&n("wo"), d, d, rng),
                    bo: p.add_zeros(&n("bo"), 1, d),
                    norm1_gain: p.add_ones(&n("norm1.gain"), 1, d),
                    norm1_bias: p.add_zeros(&n("norm1.bias"), 1, d),
                    ff1_w: p.add_weight(&n("ff1.w"), d, 2 * d, rng),
                    ff1_b: p.add_zeros(&n("ff1.b"), 1, 2 * d),
                    ff2_w: p.add_weight(&n("ff2.w"), 2 * d, d, rng),
                    ff2_b: p.add_zeros(&n("ff2.b"), 1, d),
                    norm2_gain: p.add_ones(&n("norm2.gain"), 1, d),
                    norm2_bias: p.add_zeros(&n("norm2.bias"), 1, d),
                }
            })
            .collect();
        Self {
            dim: d,
            heads: config.num_heads,
            w_in,
            b_in,
            layers,
            dec_w: p.add_weight("decoder.w", d, input, rng),
            dec_b: p.add_zeros("decoder.b", 1, input),
            cls_w: p.add_weight("classifier.w", input, CLASSES, rng),
            cls_b: p.add_zeros("classifier.b", 1, CLASSES),
        }
    }

    pub(super) fn forward(&self, tape: &mut Tape, p: &[Var], input: &ModelInput, mut drop: Option<Dropout>) -> Var {
        let x = tape.constant(input.x.clone());
        let bits = tape.constant(input.mask.mapv(|m| if m { 1.0 } else { 0.0 }));
        let cyc = tape.constant(input.cyclic.clone());
        let raw = tape.concat_cols(&[x, bits, cyc]);
        let mut h = tape.affine(raw, p[self.w_in], p[self.b_in]);
        for layer in &self.layers {
            let att = self.attention(tape, p, layer, h);
            let att = maybe_dropout(tape, &mut drop, att);
            let res = tape.add(h, att);
            h = layer_norm(tape, res, p[layer.norm1_gain], p[layer.norm1_bias]);
            let ff = tape.affine(h, p[layer.ff1_w], p[layer.ff1_b]);
            let ff = tape.tanh(ff);
            let ff = tape.affine(ff, p[layer.ff2_w], p[layer.ff2_b]);
            let ff = maybe_dropout(tape, &mut drop, ff);
            let res = tape.add(h, ff);
            h = layer_norm(tape, res, p[layer.norm2_gain], p[layer.norm2_bias]);
        }
        let dec = tape.affine(h, p[self.dec_w], p[self.dec_b]);
        let dec = tape.tanh(dec);
        tape.affine(dec, p[self.cls_w], p[self.cls_b])
    }

    fn attention(&self, tape: &mut Tape, p: &[Var], layer: &EncoderLayer, h: Var) -> Var {
        let q = tape.affine(h, p[layer.wq], p[layer.bq]);
        let k = tape.affine(h, p[layer.wk], p[layer.bk]);
        let v = tape.affine(h, p[layer.wv], p[layer.bv]);
        let dk = self.dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|i| {
                let (a, b) = (i * dk, (i + 1) * dk);
                let qh = tape.slice_cols(q, a, b);
                let kh = tape.slice_cols(k, a, b);
                let vh = tape.slice_cols(v, a, b);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, scale);
                let w = tape.softmax_rows(scores);
                tape.matmul(w, vh)
            })
            .collect();
        let cat = tape.concat_cols(&heads);
        tape.affine(cat, p[layer.wo], p[layer.bo])
    }
}

fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.row_norm(x, LAYER_NORM_EPS);
    let n = tape.mul_row(n, gain);
    tape.add_row(n, bias)
}

