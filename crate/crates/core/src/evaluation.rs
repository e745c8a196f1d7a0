//! Precision/recall/F-score, seed aggregation, likelihood margins,
//! class-distance and time-of-day error analyses.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{local_hour, ClassDistribution, Timestamp, CLASSES};
use crate::error::{Error, Result};
use crate::models::{Model, ModelInput, ModelKind, Normalizer};
use crate::quantization::LabeledDay;

/// Early daylight period, local hours.
pub const EARLY_BIN: (f64, f64) = (7.0, 10.0);
/// Main heat-producing period, local hours.
pub const MAIN_BIN: (f64, f64) = (10.0, 19.0);

/// One prediction at an observed test step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub date: NaiveDate,
    pub step: usize,
    pub start: Timestamp,
    pub truth: usize,
    pub dist: ClassDistribution,
}

impl PredictionRecord {
    pub fn predicted(&self) -> usize {
        self.dist.argmax()
    }

    pub fn correct(&self) -> bool {
        self.predicted() == self.truth
    }
}

/// Predictions over a set of days, plus the days the model could not take.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub records: Vec<PredictionRecord>,
    pub dropped_days: Vec<NaiveDate>,
}

/// Predict every observed step of `days`. Days the model rejects (the RNN
/// baseline on a feature unobserved all day) are listed, not predicted.
pub fn predict_days(model: &Model, norm: &Normalizer, days: &[LabeledDay]) -> Result<Predictions> {
    let mut out = Vec::new();
    let mut dropped_days = Vec::new();
    for day in days {
        let w = &day.window;
        if !w.label_mask.iter().any(|&m| m) {
            continue;
        }
        let input = ModelInput::new(w, norm)?;
        if model.check_input(&input).is_err() {
            dropped_days.push(w.date);
            continue;
        }
        let dists = model.predict_input(&input);
        for (step, label) in day.observed_labels() {
            out.push(PredictionRecord {
                date: w.date,
                step,
                start: w.step_times[step],
                truth: label,
                dist: dists[step],
            });
        }
    }
    Ok(Predictions {
        records: out,
        dropped_days,
    })
}

/// Rows are truth, columns prediction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CLASSES]; CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = Self::default();
        for (t, p) in pairs {
            cm.counts[t][p] += 1;
        }
        cm
    }

    pub fn from_records(records: &[PredictionRecord]) -> Self {
        Self::from_pairs(records.iter().map(|r| (r.truth, r.predicted())))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfMetrics {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f: f64,
    /// Classes absent from the truth, left out of the macro average.
    pub excluded_classes: Vec<usize>,
}

pub const METRIC_NAMES: [&str; 9] = [
    "micro_precision",
    "micro_recall",
    "micro_f",
    "macro_precision",
    "macro_recall",
    "macro_f",
    "weighted_precision",
    "weighted_recall",
    "weighted_f",
];

impl PrfMetrics {
    pub fn values(&self) -> [f64; 9] {
        [
            self.micro_precision,
            self.micro_recall,
            self.micro_f,
            self.macro_precision,
            self.macro_recall,
            self.macro_f,
            self.weighted_precision,
            self.weighted_recall,
            self.weighted_f,
        ]
    }
}

fn f_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// One-vs-rest per-class scores under micro, macro and support-weighted
/// averaging. A class never predicted has precision 0.
pub fn compute_prf(cm: &ConfusionMatrix) -> Result<PrfMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix has no observations".into()));
    }
    let n = total as f64;
    let tp_sum: u64 = (0..CLASSES).map(|c| cm.counts[c][c]).sum();
    // In single-label classification every false positive is someone's false
    // negative, so the micro scores all reduce to accuracy.
    let micro = tp_sum as f64 / n;
    let mut macro_acc = (0.0, 0.0, 0.0);
    let mut weighted = (0.0, 0.0, 0.0);
    let mut counted = 0;
    let mut excluded = Vec::new();
    for c in 0..CLASSES {
        let support = cm.support(c);
        if support == 0 {
            excluded.push(c);
            continue;
        }
        let tp = cm.counts[c][c] as f64;
        let predicted = cm.predicted(c);
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = tp / support as f64;
        let f = f_score(p, r);
        counted += 1;
        macro_acc.0 += p;
        macro_acc.1 += r;
        macro_acc.2 += f;
        let w = support as f64 / n;
        weighted.0 += w * p;
        weighted.1 += w * r;
        weighted.2 += w * f;
    }
    let k = counted as f64;
    Ok(PrfMetrics {
        micro_precision: micro,
        micro_recall: micro,
        micro_f: micro,
        macro_precision: macro_acc.0 / k,
        macro_recall: macro_acc.1 / k,
        macro_f: macro_acc.2 / k,
        weighted_precision: weighted.0,
        weighted_recall: weighted.1,
        weighted_f: weighted.2,
        excluded_classes: excluded,
    })
}

/// Largest minus second-largest probability.
pub fn margin(dist: &ClassDistribution) -> f64 {
    let mut sorted = dist.probs;
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[0] - sorted[1]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub margin: f64,
    pub correct: bool,
}

impl From<&PredictionRecord> for MarginRecord {
    fn from(r: &PredictionRecord) -> Self {
        Self {
            margin: margin(&r.dist),
            correct: r.correct(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginBucket {
    pub lower_bound: f64,
    pub count: usize,
    /// `None` when no record reaches the bound.
    pub correct_pct: Option<f64>,
    pub wrong_pct: Option<f64>,
}

pub const DEFAULT_MARGIN_EDGES: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Accuracy over the records whose margin is at least each lower bound.
pub fn margin_buckets(records: &[MarginRecord], edges: &[f64]) -> Result<Vec<MarginBucket>> {
    if records.is_empty() {
        return Err(Error::Empty("no margin records".into()));
    }
    Ok(edges
        .iter()
        .map(|&bound| {
            let subset: Vec<_> = records.iter().filter(|r| r.margin >= bound).collect();
            let count = subset.len();
            let (correct_pct, wrong_pct) = if count == 0 {
                (None, None)
            } else {
                let ok = subset.iter().filter(|r| r.correct).count() as f64;
                let pct = 100.0 * ok / count as f64;
                (Some(pct), Some(100.0 - pct))
            };
            MarginBucket {
                lower_bound: bound,
                count,
                correct_pct,
                wrong_pct,
            }
        })
        .collect())
}

/// Percentage of predictions at most `N` bands from the truth, `N = 0..=4`.
/// No predictions gives all zeros.
pub fn class_distance_cdf(truth: &[usize], predictions: &[usize]) -> [f64; CLASSES] {
    let mut hist = [0usize; CLASSES];
    for (&t, &p) in truth.iter().zip(predictions) {
        hist[t.abs_diff(p)] += 1;
    }
    let n = truth.len().min(predictions.len());
    let mut out = [0.0; CLASSES];
    if n == 0 {
        return out;
    }
    let mut acc = 0;
    for d in 0..CLASSES {
        acc += hist[d];
        out[d] = 100.0 * acc as f64 / n as f64;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeOfDaySplit {
    pub early_pct: f64,
    pub main_pct: f64,
    pub errors: usize,
    /// Set when there were no errors to split.
    pub zero_denominator: bool,
}

fn overlaps(start: f64, len: f64, bin: (f64, f64)) -> bool {
    [-24.0, 0.0, 24.0]
        .iter()
        .any(|shift| start + shift < bin.1 && start + shift + len > bin.0)
}

/// Which bin an error window starting at `start` falls in: early if it
/// overlaps 07–10, main if it overlaps 10–19 but not 07–10.
pub fn time_of_day_bin(start: &Timestamp) -> Option<TimeBin> {
    let h = local_hour(start);
    let len = crate::domain::STEP_SECONDS as f64 / 3600.0;
    if overlaps(h, len, EARLY_BIN) {
        Some(TimeBin::Early)
    } else if overlaps(h, len, MAIN_BIN) {
        Some(TimeBin::Main)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeBin {
    Early,
    Main,
}

/// Share of all errors in each bin; the remainder falls outside both.
pub fn time_of_day_errors(error_starts: &[Timestamp]) -> TimeOfDaySplit {
    let errors = error_starts.len();
    if errors == 0 {
        return TimeOfDaySplit {
            early_pct: 0.0,
            main_pct: 0.0,
            errors,
            zero_denominator: true,
        };
    }
    let bins: Vec<_> = error_starts.iter().map(time_of_day_bin).collect();
    let pct = |b: TimeBin| 100.0 * bins.iter().filter(|&&x| x == Some(b)).count() as f64 / errors as f64;
    TimeOfDaySplit {
        early_pct: pct(TimeBin::Early),
        main_pct: pct(TimeBin::Main),
        errors,
        zero_denominator: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate_seeds(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("no seed values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt() })
}

/// Everything computed for one seed of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub seed: u64,
    pub confusion: ConfusionMatrix,
    pub metrics: PrfMetrics,
    pub class_distance_cdf: [f64; CLASSES],
    pub time_of_day: TimeOfDaySplit,
    pub margins: Vec<MarginRecord>,
    pub evaluated_steps: usize,
    pub dropped_days: Vec<NaiveDate>,
}

pub fn evaluate_predictions(seed: u64, predictions: &Predictions) -> Result<SeedEvaluation> {
    let mut eval = evaluate_records(seed, &predictions.records)?;
    eval.dropped_days = predictions.dropped_days.clone();
    Ok(eval)
}

pub fn evaluate_records(seed: u64, records: &[PredictionRecord]) -> Result<SeedEvaluation> {
    let confusion = ConfusionMatrix::from_records(records);
    let metrics = compute_prf(&confusion)?;
    let truth: Vec<usize> = records.iter().map(|r| r.truth).collect();
    let preds: Vec<usize> = records.iter().map(PredictionRecord::predicted).collect();
    let error_starts: Vec<Timestamp> = records.iter().filter(|r| !r.correct()).map(|r| r.start).collect();
    Ok(SeedEvaluation {
        seed,
        confusion,
        metrics,
        class_distance_cdf: class_distance_cdf(&truth, &preds),
        time_of_day: time_of_day_errors(&error_starts),
        margins: records.iter().map(MarginRecord::from).collect(),
        evaluated_steps: records.len(),
        dropped_days: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: ModelKind,
    pub seeds: Vec<u64>,
    /// Mean ± std of each PRF metric, keyed by name.
    pub metrics: BTreeMap<String, MeanStd>,
    /// Margin buckets over the records of all seeds pooled.
    pub margin_buckets: Vec<MarginBucket>,
    pub class_distance_cdf: Vec<MeanStd>,
    pub early_error_pct: MeanStd,
    pub main_error_pct: MeanStd,
    pub excluded_classes: Vec<Vec<usize>>,
    pub per_seed: Vec<SeedEvaluation>,
}

impl ModelReport {
    pub fn metric(&self, name: &str) -> MeanStd {
        self.metrics[name]
    }
}

pub fn aggregate_model(model: ModelKind, seeds: Vec<SeedEvaluation>, edges: &[f64]) -> Result<ModelReport> {
    if seeds.is_empty() {
        return Err(Error::Empty(format!("no evaluated seeds for {model}")));
    }
    let mut metrics = BTreeMap::new();
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        let vals: Vec<f64> = seeds.iter().map(|s| s.metrics.values()[i]).collect();
        metrics.insert(name.to_string(), aggregate_seeds(&vals)?);
    }
    let pooled: Vec<MarginRecord> = seeds.iter().flat_map(|s| s.margins.iter().copied()).collect();
    let class_distance_cdf = (0..CLASSES)
        .map(|d| aggregate_seeds(&seeds.iter().map(|s| s.class_distance_cdf[d]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let early: Vec<f64> = seeds.iter().map(|s| s.time_of_day.early_pct).collect();
    let main: Vec<f64> = seeds.iter().map(|s| s.time_of_day.main_pct).collect();
    Ok(ModelReport {
        model,
        seeds: seeds.iter().map(|s| s.seed).collect(),
        metrics,
        margin_buckets: margin_buckets(&pooled, edges)?,
        class_distance_cdf,
        early_error_pct: aggregate_seeds(&early)?,
        main_error_pct: aggregate_seeds(&main)?,
        excluded_classes: seeds.iter().map(|s| s.metrics.excluded_classes.clone()).collect(),
        per_seed: seeds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scheme: crate::domain::ThresholdScheme,
    pub test_steps: usize,
    pub models: Vec<ModelReport>,
    pub notes: Vec<String>,
}

impl EvaluationReport {
    pub fn new(scheme: crate::domain::ThresholdScheme, test_steps: usize, mut models: Vec<ModelReport>) -> Self {
        models.sort_by_key(|m| ModelKind::ALL.iter().position(|k| *k == m.model));
        Self {
            scheme,
            test_steps,
            models,
            notes: vec![
                "macro averages skip classes with zero support".into(),
                "seed spread is the population standard deviation".into(),
                "time-of-day percentages are shares of all errors; the remainder lies outside both bins".into(),
            ],
        }
    }

    pub fn model(&self, kind: ModelKind) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDateTime;
    use proptest::prelude::*;

    fn cm(truth: &[usize], pred: &[usize]) -> ConfusionMatrix {
        ConfusionMatrix::from_pairs(truth.iter().copied().zip(pred.iter().copied()))
    }

    #[test]
    fn prf_examples() {
        let m = compute_prf(&cm(&[0, 1, 2, 1], &[0, 2, 2, 1])).unwrap();
        assert_eq!((m.micro_precision, m.micro_recall, m.micro_f), (0.75, 0.75, 0.75));
        let m = compute_prf(&cm(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4])).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
        assert!(compute_prf(&ConfusionMatrix::default()).is_err());
    }

    /// Hand-rolled one-vs-rest scores for the two-class example.
    #[test]
    fn macro_matches_hand_computed_oracle() {
        let m = compute_prf(&cm(&[0, 0, 1, 1], &[0, 0, 0, 1])).unwrap();
        let (p0, r0): (f64, f64) = (2.0 / 3.0, 1.0);
        let (p1, r1): (f64, f64) = (1.0, 0.5);
        let f0 = 2.0 * p0 * r0 / (p0 + r0);
        let f1 = 2.0 * p1 * r1 / (p1 + r1);
        assert!((f0 - 0.8).abs() < 1e-12 && (f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.macro_precision - (p0 + p1) / 2.0).abs() < 1e-12);
        assert!((m.macro_recall - (r0 + r1) / 2.0).abs() < 1e-12);
        assert!((m.macro_f - 0.733_333_333_333_333_3).abs() < 1e-12);
        assert_eq!(m.excluded_classes, vec![2, 3, 4]);
    }

    #[test]
    fn margin_examples() {
        let d = ClassDistribution::new([0.5, 0.3, 0.1, 0.05, 0.05]).unwrap();
        assert!((margin(&d) - 0.2).abs() < 1e-12);
        assert_eq!(margin(&ClassDistribution::one_hot(3)), 1.0);
        assert_eq!(margin(&ClassDistribution::uniform()), 0.0);
    }

    #[test]
    fn bucket_examples() {
        let recs = [
            MarginRecord { margin: 0.1, correct: false },
            MarginRecord { margin: 0.9, correct: true },
        ];
        let b = margin_buckets(&recs, &[0.0, 0.5, 0.95]).unwrap();
        assert_eq!(b[0].correct_pct, Some(50.0));
        assert_eq!(b[1].correct_pct, Some(100.0));
        assert_eq!(b[2].count, 0);
        assert_eq!(b[2].correct_pct, None);
        assert!(margin_buckets(&[], &[0.0]).is_err());
        let all = [MarginRecord { margin: 0.3, correct: true }; 4];
        for b in margin_buckets(&all, &DEFAULT_MARGIN_EDGES).unwrap() {
            assert!(b.correct_pct.is_none() || b.correct_pct == Some(100.0));
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(class_distance_cdf(&[1], &[4]), [0.0, 0.0, 0.0, 100.0, 100.0]);
        assert_eq!(class_distance_cdf(&[0, 1, 2], &[0, 1, 2]), [100.0; 5]);
        assert_eq!(class_distance_cdf(&[0, 0], &[1, 3]), [0.0, 50.0, 50.0, 100.0, 100.0]);
    }

    fn at(hour: u32) -> Timestamp {
        let naive = NaiveDateTime::parse_from_str(&format!("2023-06-01T{hour:02}:00:00"), "%Y-%m-%dT%H:%M:%S").unwrap();
        Timestamp::from_local(naive, 120)
    }

    #[test]
    fn time_of_day_examples() {
        assert_eq!(time_of_day_bin(&at(7)), Some(TimeBin::Early));
        assert_eq!(time_of_day_bin(&at(22)), None);
        assert_eq!(time_of_day_bin(&at(4)), None);
        assert_eq!(time_of_day_bin(&at(10)), Some(TimeBin::Main));
        assert_eq!(time_of_day_bin(&at(16)), Some(TimeBin::Main));
        assert_eq!(time_of_day_bin(&at(19)), None);
        assert_eq!(time_of_day_bin(&at(8)), Some(TimeBin::Early));
        let split = time_of_day_errors(&[at(7), at(13), at(22), at(1)]);
        assert_eq!((split.early_pct, split.main_pct), (25.0, 25.0));
        let none = time_of_day_errors(&[]);
        assert!(none.zero_denominator && none.early_pct == 0.0 && none.main_pct == 0.0);
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_seeds(&[0.8, 0.8]).unwrap(), MeanStd { mean: 0.8, std: 0.0 });
        assert_eq!(aggregate_seeds(&[0.42]).unwrap(), MeanStd { mean: 0.42, std: 0.0 });
        let m = aggregate_seeds(&[0.7, 0.9]).unwrap();
        assert!((m.mean - 0.8).abs() < 1e-12 && (m.std - 0.1).abs() < 1e-12);
        assert!(aggregate_seeds(&[]).is_err());
    }

    fn pairs() -> impl Strategy<Value = Vec<(usize, usize)>> {
        proptest::collection::vec((0usize..CLASSES, 0usize..CLASSES), 1..200)
    }

    proptest! {
        #[test]
        fn micro_identities(p in pairs()) {
            let m = compute_prf(&ConfusionMatrix::from_pairs(p)).unwrap();
            prop_assert_eq!(m.micro_precision, m.micro_recall);
            prop_assert_eq!(m.micro_recall, m.micro_f);
            prop_assert!((m.weighted_recall - m.micro_recall).abs() < 1e-12);
        }

        #[test]
        fn distance_cdf_is_monotone(p in pairs()) {
            let (t, q): (Vec<_>, Vec<_>) = p.into_iter().unzip();
            let cdf = class_distance_cdf(&t, &q);
            prop_assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((cdf[4] - 100.0).abs() < 1e-12);
        }

        #[test]
        fn bucket_counts_never_grow(recs in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..100)) {
            let recs: Vec<_> = recs.into_iter().map(|(margin, correct)| MarginRecord { margin, correct }).collect();
            let b = margin_buckets(&recs, &DEFAULT_MARGIN_EDGES).unwrap();
            prop_assert_eq!(b[0].count, recs.len());
            prop_assert!(b.windows(2).all(|w| w[0].count >= w[1].count));
        }
    }
}
