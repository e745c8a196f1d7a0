//! The three sequence classifiers: an interpolating GRU baseline, a
//! transformer with fixed cyclic time encodings, and a multi-time attention
//! network with a learned time embedding.
//!
//! Every model maps one [`DayWindow`] to eight [`ClassDistribution`]s.

mod cyctime;
mod mtan;
mod rnn;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::domain::{ClassDistribution, DayWindow, CLASSES, FEATURE_NAMES, STEPS};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::time_encoding::{cyclic_features, CyclicFeatures};

pub use cyctime::CycTimeLayout;
pub use mtan::{attend_values, reference_times, AttentionOutput, MtanLayout};
pub use rnn::{linear_interpolate, RnnLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rnn,
    Mtan,
    Cyctime,
}

impl ModelKind {
    /// Report column order.
    pub const ALL: [ModelKind; 3] = [ModelKind::Rnn, ModelKind::Mtan, ModelKind::Cyctime];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Mtan => "mtan",
            ModelKind::Cyctime => "cyctime",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            ModelKind::Rnn => "RNN",
            ModelKind::Mtan => "mTAN",
            ModelKind::Cyctime => "CycTime",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}` (expected rnn, mtan or cyctime)")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RnnCell {
    Gru,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// mTAN only.
    pub ref_points: usize,
    /// mTAN only.
    pub time_embed_dim: usize,
    pub dropout: f64,
    pub class_count: usize,
    pub rnn_cell: RnnCell,
}

impl ModelConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        Self {
            kind,
            hidden_dim: 64,
            num_heads: 2,
            num_layers: if kind == ModelKind::Cyctime { 2 } else { 1 },
            ref_points: 32,
            time_embed_dim: 16,
            dropout: 0.1,
            class_count: CLASSES,
            rnn_cell: RnnCell::Gru,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("model config: {m}")));
        if self.class_count != CLASSES {
            return fail("class_count must be 5");
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail("hidden_dim must be a positive multiple of num_heads");
        }
        if self.ref_points == 0 || self.ref_points % STEPS != 0 {
            return fail("ref_points must be a positive multiple of 8");
        }
        if self.time_embed_dim < 2 {
            return fail("time_embed_dim must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.kind == ModelKind::Cyctime && self.num_layers == 0 {
            return fail("cyctime needs at least one encoder layer");
        }
        Ok(())
    }
}

/// Per-feature z-score statistics from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Statistics over observed entries only; constant features get unit scale.
    pub fn fit(days: &[DayWindow]) -> Result<Self> {
        let f = days
            .first()
            .map(DayWindow::feature_count)
            .ok_or_else(|| Error::Empty("no days to fit normalization on".into()))?;
        let mut n = vec![0usize; f];
        let mut sum = vec![0.0; f];
        for day in days {
            for (row, mask) in day.features.iter().zip(&day.feature_mask) {
                for k in 0..f {
                    if mask[k] {
                        n[k] += 1;
                        sum[k] += row[k];
                    }
                }
            }
        }
        let mean: Vec<f64> = (0..f).map(|k| if n[k] > 0 { sum[k] / n[k] as f64 } else { 0.0 }).collect();
        let mut sq = vec![0.0; f];
        for day in days {
            for (row, mask) in day.features.iter().zip(&day.feature_mask) {
                for k in 0..f {
                    if mask[k] {
                        sq[k] += (row[k] - mean[k]).powi(2);
                    }
                }
            }
        }
        let std = (0..f)
            .map(|k| {
                let s = if n[k] > 0 { (sq[k] / n[k] as f64).sqrt() } else { 0.0 };
                if s > 1e-9 { s } else { 1.0 }
            })
            .collect();
        let feature_names = if f == FEATURE_NAMES.len() {
            FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..f).map(|k| format!("f{k}")).collect()
        };
        Ok(Self {
            feature_names,
            mean,
            std,
        })
    }

    pub fn identity(features: usize) -> Self {
        Self {
            feature_names: (0..features).map(|k| format!("f{k}")).collect(),
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }
}

/// Model-ready view of a day.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// 8 × F standardized features; exactly 0 where masked.
    pub x: Array2<f64>,
    pub mask: Array2<bool>,
    /// 8 × 6 cyclic encodings of each window start.
    pub cyclic: Array2<f64>,
    /// Position of each window midpoint within the day, in `[0, 1)`.
    pub positions: Array2<f64>,
}

impl ModelInput {
    pub fn new(day: &DayWindow, norm: &Normalizer) -> Result<Self> {
        let f = norm.features();
        if day.feature_count() != f {
            return Err(Error::Incompatible(format!(
                "day {} has {} features, model expects {f}",
                day.date,
                day.feature_count()
            )));
        }
        let mut x = Array2::zeros((STEPS, f));
        let mut mask = Array2::from_elem((STEPS, f), false);
        for s in 0..STEPS {
            for k in 0..f {
                if day.feature_mask[s][k] {
                    mask[[s, k]] = true;
                    x[[s, k]] = (day.features[s][k] - norm.mean[k]) / norm.std[k];
                }
            }
        }
        let mut cyclic = Array2::zeros((STEPS, CyclicFeatures::WIDTH));
        for (s, ts) in day.step_times.iter().enumerate() {
            for (c, v) in cyclic_features(ts).to_array().into_iter().enumerate() {
                cyclic[[s, c]] = v;
            }
        }
        let positions = Array2::from_shape_vec((STEPS, 1), day.step_positions().to_vec())
            .expect("eight positions");
        Ok(Self {
            x,
            mask,
            cyclic,
            positions,
        })
    }
}

/// Parameter layout of the active architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    Rnn(RnnLayout),
    CycTime(CycTimeLayout),
    Mtan(MtanLayout),
}

/// A model: configuration, parameters and their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub features: usize,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, features: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layout = match config.kind {
            ModelKind::Rnn => Layout::Rnn(RnnLayout::init(&config, features, &mut params, rng)),
            ModelKind::Cyctime => {
                Layout::CycTime(CycTimeLayout::init(&config, features, &mut params, rng))
            }
            ModelKind::Mtan => Layout::Mtan(MtanLayout::init(&config, features, &mut params, rng)),
        };
        Ok(Self {
            config,
            features,
            params,
            layout,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Record the forward pass on `tape`, returning 8 × 5 logits. Dropout is
    /// active only when an RNG is supplied.
    pub fn logits(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let p = tape.bind_params();
        let drop = dropout.map(|rng| Dropout {
            rate: self.config.dropout,
            rng,
        });
        match &self.layout {
            Layout::Rnn(l) => l.forward(tape, &p, input, drop),
            Layout::CycTime(l) => l.forward(tape, &p, input, drop),
            Layout::Mtan(l) => l.forward(tape, &p, input, drop),
        }
    }

    /// The RNN baseline interpolates its inputs and so needs every feature
    /// observed at least once in the day; callers drop days that fail.
    pub fn check_input(&self, input: &ModelInput) -> Result<()> {
        if let Layout::Rnn(_) = self.layout {
            linear_interpolate(&input.x, &input.mask)?;
        }
        Ok(())
    }

    pub fn predict_input(&self, input: &ModelInput) -> Vec<ClassDistribution> {
        let mut tape = Tape::new(&self.params);
        let logits = self.logits(&mut tape, input, None);
        tape.value(logits)
            .rows()
            .into_iter()
            .map(|r| ClassDistribution::from_logits(&r.to_vec()))
            .collect()
    }

    pub fn predict(&self, day: &DayWindow, norm: &Normalizer) -> Result<Vec<ClassDistribution>> {
        let input = ModelInput::new(day, norm)?;
        self.check_input(&input)?;
        Ok(self.predict_input(&input))
    }

    /// Summed cross-entropy over observed steps and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        input: &ModelInput,
        labels: &[usize],
        label_mask: &[bool],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> (f64, Vec<Array2<f64>>) {
        let mut tape = Tape::new(&self.params);
        let logits = self.logits(&mut tape, input, dropout);
        let loss = tape.cross_entropy_sum(logits, labels, label_mask);
        (tape.scalar(loss), tape.backward(loss))
    }

    /// Summed cross-entropy over observed steps, without gradients.
    pub fn loss(&self, input: &ModelInput, labels: &[usize], label_mask: &[bool]) -> f64 {
        let mut tape = Tape::new(&self.params);
        let logits = self.logits(&mut tape, input, None);
        let loss = tape.cross_entropy_sum(logits, labels, label_mask);
        tape.scalar(loss)
    }

    /// Attention internals (mTAN only).
    pub fn attention(&self, input: &ModelInput) -> Option<AttentionOutput> {
        match &self.layout {
            Layout::Mtan(l) => Some(l.inspect(&self.params, input)),
            _ => None,
        }
    }
}

pub(crate) struct Dropout<'r> {
    rate: f64,
    rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub(crate) fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.rate == 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let dim = tape.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(dim, || {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_const(x, mask)
    }
}

pub(crate) fn maybe_dropout(tape: &mut Tape, drop: &mut Option<Dropout>, x: Var) -> Var {
    match drop {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

pub fn forward_rnn(model: &Model, day: &DayWindow, norm: &Normalizer) -> Result<Vec<ClassDistribution>> {
    expect_kind(model, ModelKind::Rnn)?;
    model.predict(day, norm)
}

pub fn forward_cyctime(model: &Model, day: &DayWindow, norm: &Normalizer) -> Result<Vec<ClassDistribution>> {
    expect_kind(model, ModelKind::Cyctime)?;
    model.predict(day, norm)
}

pub fn forward_mtan(model: &Model, day: &DayWindow, norm: &Normalizer) -> Result<Vec<ClassDistribution>> {
    expect_kind(model, ModelKind::Mtan)?;
    model.predict(day, norm)
}

fn expect_kind(model: &Model, kind: ModelKind) -> Result<()> {
    if model.kind() != kind {
        return Err(Error::Incompatible(format!("expected a {kind} model, got {}", model.kind())));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ingestion::AggregationConfig;
    use rand::SeedableRng;

    pub(crate) fn random_day(rng: &mut ChaCha8Rng, features: usize, missing: f64) -> DayWindow {
        let date = chrono::NaiveDate::from_ymd_opt(2023, 1, 1).unwrap()
            + chrono::TimeDelta::days(rng.random_range(0..365));
        let cfg = AggregationConfig::default();
        let mut feature_mask = vec![vec![true; features]; STEPS];
        let mut feats = vec![vec![0.0; features]; STEPS];
        for s in 0..STEPS {
            for k in 0..features {
                feats[s][k] = rng.random_range(-2.0..2.0);
                feature_mask[s][k] = rng.random::<f64>() >= missing;
            }
        }
        for k in 0..features {
            if (0..STEPS).all(|s| !feature_mask[s][k]) {
                feature_mask[rng.random_range(0..STEPS)][k] = true;
            }
        }
        let label_mask = (0..STEPS).map(|_| rng.random::<f64>() > 0.2).collect();
        DayWindow::new(
            date,
            cfg.step_times(date, 120),
            feats,
            feature_mask,
            (0..STEPS).map(|_| rng.random_range(0.0..3.0)).collect(),
            label_mask,
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        for kind in ModelKind::ALL {
            assert!(ModelConfig::default_for(kind).validate().is_ok());
        }
        let mut c = ModelConfig::default_for(ModelKind::Mtan);
        c.ref_points = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default_for(ModelKind::Mtan);
        c.hidden_dim = 63;
        assert!(c.validate().is_err());
        assert_eq!("MTAN".parse::<ModelKind>().unwrap(), ModelKind::Mtan);
        assert!("lstm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn outputs_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in ModelKind::ALL {
            let model = Model::new(ModelConfig::default_for(kind), 7, &mut rng).unwrap();
            let day = random_day(&mut rng, 7, 0.3);
            let out = model.predict(&day, &Normalizer::identity(7)).unwrap();
            assert_eq!(out.len(), STEPS);
            for d in out {
                assert!(ClassDistribution::new(d.probs).is_ok());
            }
        }
    }

    #[test]
    fn zero_parameters_give_uniform_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for kind in ModelKind::ALL {
            let mut model = Model::new(ModelConfig::default_for(kind), 7, &mut rng).unwrap();
            for id in 0..model.params.len() {
                model.params.value_mut(id).fill(0.0);
            }
            let day = random_day(&mut rng, 7, 0.0);
            for d in model.predict(&day, &Normalizer::identity(7)).unwrap() {
                for p in d.probs {
                    assert!((p - 0.2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mask_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in ModelKind::ALL {
            let model = Model::new(ModelConfig::default_for(kind), 7, &mut rng).unwrap();
            for _ in 0..5 {
                let day = random_day(&mut rng, 7, 0.4);
                let mut poked = day.clone();
                for s in 0..STEPS {
                    for k in 0..7 {
                        if !poked.feature_mask[s][k] {
                            poked.features[s][k] = rng.random_range(-1e3..1e3);
                        }
                    }
                }
                let norm = Normalizer::identity(7);
                assert_eq!(model.predict(&day, &norm).unwrap(), model.predict(&poked, &norm).unwrap());
            }
        }
    }

    #[test]
    fn rnn_rejects_unobserved_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut day = random_day(&mut rng, 7, 0.0);
        for s in 0..STEPS {
            day.feature_mask[s][4] = false;
        }
        let norm = Normalizer::identity(7);
        let rnn = Model::new(ModelConfig::default_for(ModelKind::Rnn), 7, &mut rng).unwrap();
        assert!(matches!(forward_rnn(&rnn, &day, &norm), Err(Error::EmptySeries)));
        let mtan = Model::new(ModelConfig::default_for(ModelKind::Mtan), 7, &mut rng).unwrap();
        assert!(forward_mtan(&mtan, &day, &norm).is_ok());
    }

    #[test]
    fn cyctime_fully_masked_feature_ignores_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = Model::new(ModelConfig::default_for(ModelKind::Cyctime), 7, &mut rng).unwrap();
        let mut day = random_day(&mut rng, 7, 0.0);
        for s in 0..STEPS {
            day.feature_mask[s][2] = false;
            day.features[s][2] = 0.0;
        }
        let mut other = day.clone();
        for s in 0..STEPS {
            other.features[s][2] = 1234.5 * s as f64;
        }
        let norm = Normalizer::identity(7);
        assert_eq!(model.predict(&day, &norm).unwrap(), model.predict(&other, &norm).unwrap());
    }

    #[test]
    fn cyctime_hour_features_repeat_daily() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let day = random_day(&mut rng, 7, 0.0);
        let mut shifted = day.clone();
        for ts in &mut shifted.step_times {
            *ts = ts.plus_seconds(86_400);
        }
        let norm = Normalizer::identity(7);
        let a = ModelInput::new(&day, &norm).unwrap();
        let b = ModelInput::new(&shifted, &norm).unwrap();
        for s in 0..STEPS {
            assert_eq!(a.cyclic[[s, 0]], b.cyclic[[s, 0]]);
            assert_eq!(a.cyclic[[s, 1]], b.cyclic[[s, 1]]);
        }
    }

    #[test]
    fn rnn_is_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = Model::new(ModelConfig::default_for(ModelKind::Rnn), 7, &mut rng).unwrap();
        let day = random_day(&mut rng, 7, 0.0);
        let mut swapped = day.clone();
        swapped.features.swap(1, 5);
        swapped.feature_mask.swap(1, 5);
        let norm = Normalizer::identity(7);
        let a = forward_rnn(&model, &day, &norm).unwrap();
        let b = forward_rnn(&model, &swapped, &norm).unwrap();
        assert_ne!(a, b);
        assert!(forward_mtan(&model, &day, &norm).is_err());
    }

    #[test]
    fn normalizer_uses_observed_entries_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut day = random_day(&mut rng, 2, 0.0);
        for s in 0..STEPS {
            day.features[s] = vec![s as f64, 5.0];
        }
        day.feature_mask[7][0] = false;
        day.features[7][0] = 0.0;
        let norm = Normalizer::fit(&[day]).unwrap();
        assert!((norm.mean[0] - 3.0).abs() < 1e-12);
        assert_eq!(norm.std[1], 1.0);
        assert_eq!(norm.mean[1], 5.0);
    }
}
