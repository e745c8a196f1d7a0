//! Masked cross-entropy, the optimisation loop, multi-seed runs and
//! checkpoints.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ClassDistribution, SchemeName, ThresholdScheme};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig, ModelInput, Normalizer};
use crate::nn::{Adam, Tensor};
use crate::quantization::LabeledDay;

/// Mean negative log-likelihood of the true class over observed steps, and
/// the number of observed steps. No observed step gives `(0, 0)`.
pub fn masked_cross_entropy(preds: &[ClassDistribution], labels: &[usize], label_mask: &[bool]) -> (f64, usize) {
    let mut total = 0.0;
    let mut n = 0;
    for ((p, &l), &m) in preds.iter().zip(labels).zip(label_mask) {
        if m {
            total -= p.probs[l].ln();
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (total / n as f64, n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Days per optimiser step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheme: SchemeName,
    pub patience: usize,
    /// Trailing fraction of training days held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5, 6],
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            scheme: SchemeName::MaxMargins,
            patience: 20,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub raw: Vec<f64>,
    /// First-epoch loss; 0 for an empty curve.
    pub normalizer: f64,
}

impl LossCurve {
    pub fn new(raw: Vec<f64>) -> Self {
        let normalizer = raw.first().copied().unwrap_or(0.0);
        Self { raw, normalizer }
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.raw.iter().map(|v| v / self.normalizer).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,raw_loss,normalized_loss\n");
        for (i, (r, n)) in self.raw.iter().zip(self.normalized()).enumerate() {
            out.push_str(&format!("{},{r},{n}\n", i + 1));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub features: usize,
    pub normalizer: Normalizer,
    pub scheme: ThresholdScheme,
    pub seed: u64,
    pub epochs_run: usize,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, normalizer: &Normalizer, scheme: &ThresholdScheme, seed: u64) -> Self {
        Self {
            model: model.config.clone(),
            features: model.features,
            normalizer: normalizer.clone(),
            scheme: scheme.clone(),
            seed,
            epochs_run: 0,
            best_epoch: 0,
            tensors: model.params.to_tensors(),
        }
    }

    pub fn restore(&self) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut model = Model::new(self.model.clone(), self.features, &mut rng)?;
        model.params.load_tensors(&self.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json("checkpoint", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: LossCurve,
}

struct Example {
    input: ModelInput,
    labels: Vec<usize>,
    mask: Vec<bool>,
    observed: usize,
}

fn examples(model: &Model, days: &[LabeledDay], norm: &Normalizer) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(days.len());
    let mut dropped = 0;
    for day in days {
        let input = ModelInput::new(&day.window, norm)?;
        let observed = day.window.label_mask.iter().filter(|&&m| m).count();
        if observed == 0 {
            continue;
        }
        if model.check_input(&input).is_err() {
            dropped += 1;
            continue;
        }
        out.push(Example {
            input,
            labels: day.labels.clone(),
            mask: day.window.label_mask.clone(),
            observed,
        });
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} day(s) with an unobserved feature", model.kind());
    }
    Ok(out)
}

fn mean_loss(model: &Model, set: &[Example]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for ex in set {
        total += model.loss(&ex.input, &ex.labels, &ex.mask);
        n += ex.observed;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Train one model from `seed`. The last `validation_fraction` of the days
/// (in the given order) drive early stopping; the best-validation parameters
/// are kept.
pub fn train_model(
    model_config: &ModelConfig,
    train_days: &[LabeledDay],
    config: &TrainConfig,
    scheme: &ThresholdScheme,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_days.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    let windows: Vec<_> = train_days.iter().map(|d| d.window.clone()).collect();
    let norm = Normalizer::fit(&windows)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(model_config.clone(), norm.features(), &mut init_rng)?;

    let n_val = (train_days.len() as f64 * config.validation_fraction).floor() as usize;
    let n_val = if train_days.len() - n_val == 0 { 0 } else { n_val };
    let (fit_days, val_days) = train_days.split_at(train_days.len() - n_val);
    let train_set = examples(&model, fit_days, &norm)?;
    let val_set = examples(&model, val_days, &norm)?;
    if train_set.is_empty() && config.epochs > 0 {
        return Err(Error::Empty("no training day has an observed label".into()));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed_0001));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed_0002));
    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut raw = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_obs = 0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Array2<f64>> = model.params.zeros_like();
            let mut batch_obs = 0;
            for &i in batch {
                let ex = &train_set[i];
                let (loss, g) = model.loss_and_grads(&ex.input, &ex.labels, &ex.mask, Some(&mut dropout_rng));
                epoch_loss += loss;
                batch_obs += ex.observed;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    *acc += &gi;
                }
            }
            epoch_obs += batch_obs;
            let scale = 1.0 / batch_obs as f64;
            for g in &mut grads {
                g.mapv_inplace(|v| v * scale);
            }
            opt.step(&mut model.params, &grads);
        }
        let loss = epoch_loss / epoch_obs as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        raw.push(loss);
        log::debug!("{} seed {seed} epoch {epoch}: loss {loss:.5}", model.kind());

        if val_set.is_empty() {
            best = (loss, epoch, model.params.clone());
            continue;
        }
        let val = mean_loss(&model, &val_set);
        if val < best.0 {
            best = (val, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("{} seed {seed}: early stop at epoch {epoch} (best {})", model.kind(), best.1);
                break;
            }
        }
    }

    let epochs_run = raw.len();
    let best_epoch = if epochs_run == 0 { 0 } else { best.1 };
    if epochs_run > 0 {
        model.params = best.2;
    }
    let mut checkpoint = Checkpoint::from_model(&model, &norm, scheme, seed);
    checkpoint.epochs_run = epochs_run;
    checkpoint.best_epoch = best_epoch;
    Ok(TrainOutcome {
        checkpoint,
        curve: LossCurve::new(raw),
    })
}

#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub result: Result<TrainOutcome>,
}

/// One run per configured seed, spread over `jobs` worker threads. Results
/// come back in seed order whatever the thread count.
pub fn train_all_seeds(
    model_config: &ModelConfig,
    train_days: &[LabeledDay],
    config: &TrainConfig,
    scheme: &ThresholdScheme,
    jobs: usize,
) -> Result<Vec<SeedRun>> {
    config.validate()?;
    let jobs = jobs.max(1).min(config.seeds.len());
    let run = |seed: u64| SeedRun {
        seed,
        result: train_model(model_config, train_days, config, scheme, seed),
    };
    if jobs == 1 {
        return Ok(config.seeds.iter().map(|&s| run(s)).collect());
    }
    let mut slots: Vec<Option<SeedRun>> = config.seeds.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let run = &run;
                let seeds = &config.seeds;
                scope.spawn(move || {
                    (w..seeds.len())
                        .step_by(jobs)
                        .map(|i| (i, run(seeds[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("training worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    Ok(slots.into_iter().map(|s| s.expect("every seed ran")).collect())
}
