//! Multi-time attention: learned time embeddings query the irregularly
//! observed values at fixed reference times.

use ndarray::Array2;
use rand::Rng;

use super::{maybe_dropout, Dropout, ModelConfig, ModelInput};
use crate::autodiff::{masked_attention_weights, Tape, Var};
use crate::domain::{CLASSES, STEPS};
use crate::nn::ParamStore;
use crate::time_encoding::TimeEmbeddingParams;

#[derive(Clone, Debug, PartialEq)]
pub struct MtanLayout {
    heads: usize,
    embed: usize,
    refs: usize,
    phi_w: usize,
    phi_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    hid_w: usize,
    hid_b: usize,
    cls_w: usize,
    cls_b: usize,
}

/// Attention internals for one day.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub reference_times: Vec<f64>,
    pub observation_times: Vec<f64>,
    /// Per head, R × (T·F): column `f·T + t` is the weight of feature `f`
    /// observed at step `t`. Each feature block of a row sums to 1, or is
    /// all zero for a feature observed nowhere.
    pub weights: Vec<Array2<f64>>,
    /// Hidden representation at each reference time, R × H, before pooling.
    pub values: Array2<f64>,
}

impl AttentionOutput {
    /// Block of `weights[head]` belonging to `feature`, R × T.
    pub fn feature_block(&self, head: usize, feature: usize) -> Array2<f64> {
        let t = self.observation_times.len();
        self.weights[head]
            .slice(ndarray::s![.., feature * t..(feature + 1) * t])
            .to_owned()
    }
}

/// Attend each column of `values` (T × F) with `scores` (R × T), admitting
/// only observed rows of that column.
pub fn attend_values(scores: &Array2<f64>, values: &Array2<f64>, mask: &Array2<bool>) -> Array2<f64> {
    let weights = masked_attention_weights(scores, mask);
    let mut out = Array2::zeros((scores.nrows(), values.ncols()));
    for (f, w) in weights.iter().enumerate() {
        for r in 0..scores.nrows() {
            let mut acc = 0.0;
            for t in 0..values.nrows() {
                if mask[[t, f]] {
                    acc += w[[r, t]] * values[[t, f]];
                }
            }
            out[[r, f]] = acc;
        }
    }
    out
}

pub fn reference_times(count: usize) -> Array2<f64> {
    Array2::from_shape_fn((count, 1), |(k, _)| {
        if count == 1 {
            0.0
        } else {
            k as f64 / (count - 1) as f64
        }
    })
}

impl MtanLayout {
    pub(super) fn init(config: &ModelConfig, features: usize, p: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let e = config.time_embed_dim;
        let hk = config.num_heads * e;
        let phi = TimeEmbeddingParams::init(e, rng);
        let phi_w = p.add("time_embed.w", Array2::from_shape_vec((1, e), phi.weights).expect("1 × e"));
        let phi_b = p.add("time_embed.b", Array2::from_shape_vec((1, e), phi.biases).expect("1 × e"));
        let concat = config.num_heads * features + e;
        Self {
            heads: config.num_heads,
            embed: e,
            refs: config.ref_points,
            phi_w,
            phi_b,
            wq: p.add_weight("attn.wq", e, hk, rng),
            bq: p.add_zeros("attn.bq", 1, hk),
            wk: p.add_weight("attn.wk", e, hk, rng),
            bk: p.add_zeros("attn.bk", 1, hk),
            hid_w: p.add_weight("hidden.w", concat, config.hidden_dim, rng),
            hid_b: p.add_zeros("hidden.b", 1, config.hidden_dim),
            cls_w: p.add_weight("classifier.w", config.hidden_dim, CLASSES, rng),
            cls_b: p.add_zeros("classifier.b", 1, CLASSES),
        }
    }

    fn embed(&self, tape: &mut Tape, p: &[Var], times: Array2<f64>) -> Var {
        let t = tape.constant(times);
        let z = tape.matmul(t, p[self.phi_w]);
        let z = tape.add_row(z, p[self.phi_b]);
        let linear = tape.slice_cols(z, 0, 1);
        let periodic = tape.slice_cols(z, 1, self.embed);
        let periodic = tape.sin(periodic);
        tape.concat_cols(&[linear, periodic])
    }

    /// Per-head scaled scores, each R × T.
    fn scores(&self, tape: &mut Tape, p: &[Var], input: &ModelInput) -> (Var, Vec<Var>) {
        let phi_ref = self.embed(tape, p, reference_times(self.refs));
        let phi_obs = self.embed(tape, p, input.positions.clone());
        let q = tape.affine(phi_ref, p[self.wq], p[self.bq]);
        let k = tape.affine(phi_obs, p[self.wk], p[self.bk]);
        let e = self.embed;
        let scale = 1.0 / (e as f64).sqrt();
        let scores = (0..self.heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * e, (h + 1) * e);
                let kh = tape.slice_cols(k, h * e, (h + 1) * e);
                let s = tape.matmul_t(qh, kh);
                tape.scale(s, scale)
            })
            .collect();
        (phi_ref, scores)
    }

    /// Hidden state at every reference time, R × H, and the per-head scores.
    fn hidden(&self, tape: &mut Tape, p: &[Var], input: &ModelInput) -> (Var, Vec<Var>) {
        let (phi_ref, scores) = self.scores(tape, p, input);
        let values = tape.constant(input.x.clone());
        let mut parts: Vec<Var> = scores
            .iter()
            .map(|&s| tape.masked_attend(s, values, &input.mask))
            .collect();
        parts.push(phi_ref);
        let cat = tape.concat_cols(&parts);
        let hidden = tape.affine(cat, p[self.hid_w], p[self.hid_b]);
        (tape.tanh(hidden), scores)
    }

    pub(super) fn forward(&self, tape: &mut Tape, p: &[Var], input: &ModelInput, mut drop: Option<Dropout>) -> Var {
        let (hidden, _) = self.hidden(tape, p, input);
        let hidden = maybe_dropout(tape, &mut drop, hidden);
        let pooled = tape.mean_pool_rows(hidden, self.refs / STEPS);
        tape.affine(pooled, p[self.cls_w], p[self.cls_b])
    }

    pub(super) fn inspect(&self, params: &ParamStore, input: &ModelInput) -> AttentionOutput {
        let mut tape = Tape::new(params);
        let p = tape.bind_params();
        let (hidden, scores) = self.hidden(&mut tape, &p, input);
        let weights = scores
            .iter()
            .map(|&s| {
                let blocks = masked_attention_weights(tape.value(s), &input.mask);
                let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
                ndarray::concatenate(ndarray::Axis(1), &views).expect("equal row counts")
            })
            .collect();
        let values = tape.value(hidden).clone();
        AttentionOutput {
            reference_times: reference_times(self.refs).column(0).to_vec(),
            observation_times: input.positions.column(0).to_vec(),
            weights,
            values,
        }
    }
}
