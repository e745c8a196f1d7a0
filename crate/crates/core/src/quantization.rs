//! Production bands: threshold construction and binning.

use serde::{Deserialize, Serialize};

use crate::domain::{DayWindow, SchemeName, ThresholdScheme, CLASSES};
use crate::error::{Error, Result};

/// Near-zero production floor shared by all shipped schemes (kWh).
pub const ZERO_FLOOR: f64 = 0.05;

/// Band index of `q`: the number of thresholds at or below it.
///
/// A value equal to a threshold belongs to the upper band.
pub fn bin_value(q: f64, scheme: &ThresholdScheme) -> usize {
    scheme.thresholds.iter().filter(|&&t| t <= q).count()
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Sort, cut into `k` equal sub-arrays and place a threshold midway between
/// neighbouring sub-arrays. The first `n % k` sub-arrays take one extra value.
pub fn balanced_class_thresholds(values: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Quantization(format!("need at least 2 classes, got {k}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Quantization("non-finite value".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Quantization(format!(
            "{} distinct values cannot make {k} classes",
            distinct.len()
        )));
    }
    let n = sorted.len();
    let (base, extra) = (n / k, n % k);
    let mut thresholds = Vec::with_capacity(k - 1);
    let mut end = 0;
    for i in 0..k - 1 {
        end += base + usize::from(i < extra);
        thresholds.push((sorted[end - 1] + sorted[end]) / 2.0);
    }
    if !strictly_increasing(&thresholds) {
        return Err(Error::Quantization(format!(
            "repeated values collapse class boundaries: {thresholds:?}"
        )));
    }
    Ok(thresholds)
}

/// Equal-width bands over `[0, v_max]`, with the first band split at `zero_floor`.
pub fn equal_width_thresholds(v_max: f64, zero_floor: f64, k: usize) -> Result<Vec<f64>> {
    if k < 3 {
        return Err(Error::Quantization(format!("need at least 3 classes, got {k}")));
    }
    equal_width_from_width(v_max / (k - 1) as f64, zero_floor, k)
}

/// Thresholds `(zero_floor, width, 2·width, …)`, `k − 1` in total.
pub fn equal_width_from_width(width: f64, zero_floor: f64, k: usize) -> Result<Vec<f64>> {
    if !(width > 0.0) || !width.is_finite() {
        return Err(Error::Quantization(format!("band width must be positive, got {width}")));
    }
    if !(zero_floor > 0.0) || width <= zero_floor {
        return Err(Error::Quantization(format!(
            "zero floor {zero_floor} must lie in (0, {width})"
        )));
    }
    let mut out = vec![zero_floor];
    out.extend((1..k - 1).map(|i| width * i as f64));
    Ok(out)
}

/// Thresholds placed midway between distinct demand levels, after the floor.
pub fn max_margin_thresholds(demand: &[f64], zero_floor: f64) -> Result<Vec<f64>> {
    if demand.len() < 2 {
        return Err(Error::Quantization("need at least two demand levels".into()));
    }
    if !strictly_increasing(demand) {
        return Err(Error::Quantization(format!(
            "demand levels must be distinct and sorted: {demand:?}"
        )));
    }
    if demand[0] <= 0.0 {
        return Err(Error::Quantization("demand levels must be positive".into()));
    }
    let mut out = vec![zero_floor];
    out.extend(demand.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    if !strictly_increasing(&out) {
        return Err(Error::Quantization(format!(
            "zero floor {zero_floor} is above the first midpoint"
        )));
    }
    Ok(out)
}

/// Max-margins scheme from a demand table, keeping the lowest four thresholds.
pub fn max_margins_scheme(demand: &[f64], zero_floor: f64) -> Result<ThresholdScheme> {
    let all = max_margin_thresholds(demand, zero_floor)?;
    if all.len() < CLASSES - 1 {
        return Err(Error::Quantization(format!(
            "{} demand levels yield only {} thresholds",
            demand.len(),
            all.len()
        )));
    }
    ThresholdScheme::from_slice(SchemeName::MaxMargins, &all[..CLASSES - 1])
}

/// Balanced-classes scheme: the floor, then equal-count cuts over the values
/// above the floor.
pub fn balanced_classes_scheme(values: &[f64], zero_floor: f64) -> Result<ThresholdScheme> {
    let above: Vec<f64> = values.iter().copied().filter(|&v| v > zero_floor).collect();
    let mut thresholds = vec![zero_floor];
    thresholds.extend(balanced_class_thresholds(&above, CLASSES - 1)?);
    ThresholdScheme::from_slice(SchemeName::BalancedClasses, &thresholds)
}

pub fn balanced_ranges_scheme(v_max: f64, zero_floor: f64) -> Result<ThresholdScheme> {
    let thresholds = equal_width_thresholds(v_max, zero_floor, CLASSES)?;
    ThresholdScheme::from_slice(SchemeName::BalancedRanges, &thresholds)
}

/// A day together with its band labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDay {
    pub window: DayWindow,
    /// Meaningful only where `window.label_mask` is set; 0 elsewhere.
    pub labels: Vec<usize>,
}

impl LabeledDay {
    pub fn new(window: DayWindow, scheme: &ThresholdScheme) -> Self {
        let labels = window
            .qpvt_kwh
            .iter()
            .zip(&window.label_mask)
            .map(|(&q, &m)| if m { bin_value(q, scheme) } else { 0 })
            .collect();
        Self { window, labels }
    }

    pub fn consistent_with(&self, scheme: &ThresholdScheme) -> bool {
        self.labels
            .iter()
            .zip(&self.window.qpvt_kwh)
            .zip(&self.window.label_mask)
            .all(|((&l, &q), &m)| !m || l == bin_value(q, scheme))
    }

    pub fn observed_labels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(s, _)| self.window.label_mask[*s])
            .map(|(s, &l)| (s, l))
    }
}

pub fn label_days(days: Vec<DayWindow>, scheme: &ThresholdScheme) -> Vec<LabeledDay> {
    days.into_iter().map(|d| LabeledDay::new(d, scheme)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn scheme(name: SchemeName) -> ThresholdScheme {
        ThresholdScheme::default_for(name)
    }

    #[test]
    fn bin_value_examples() {
        assert_eq!(bin_value(0.8, &scheme(SchemeName::MaxMargins)), 3);
        for name in SchemeName::ALL {
            assert_eq!(bin_value(0.0, &scheme(name)), 0);
        }
        assert_eq!(bin_value(3.70, &scheme(SchemeName::BalancedClasses)), 4);
        assert_eq!(bin_value(0.05, &scheme(SchemeName::MaxMargins)), 1);
    }

    #[test]
    fn balanced_classes_examples() {
        let values: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(balanced_class_thresholds(&values, 5).unwrap(), vec![2.5, 4.5, 6.5, 8.5]);
        assert!(balanced_class_thresholds(&[2.0; 20], 5).is_err());
        assert!(balanced_class_thresholds(&[1.0, 2.0, 3.0, 4.0], 5).is_err());
    }

    /// Brute-force empirical quantile: the smallest value with at least
    /// `p·n` values at or below it.
    fn empirical_quantile(values: &[f64], p: f64) -> f64 {
        let n = values.len() as f64;
        let mut best = f64::INFINITY;
        for &v in values {
            let below = values.iter().filter(|&&x| x <= v).count() as f64;
            if below >= p * n && v < best {
                best = v;
            }
        }
        best
    }

    #[test]
    fn balanced_classes_on_uniform_sample() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..5.0)).collect();
        let t = balanced_class_thresholds(&values, 5).unwrap();
        for (i, &ti) in t.iter().enumerate() {
            let q = empirical_quantile(&values, (i + 1) as f64 / 5.0);
            // the threshold sits just above the oracle quantile, below the next value
            assert!(ti >= q, "{ti} < {q}");
            let next = values.iter().copied().filter(|&v| v > q).fold(f64::INFINITY, f64::min);
            assert!(ti <= next);
            assert!((ti - (i + 1) as f64).abs() < 0.1, "threshold {i} = {ti}");
        }
    }

    #[test]
    fn equal_width_examples() {
        assert_eq!(equal_width_thresholds(2.0, 0.05, 5).unwrap(), vec![0.05, 0.5, 1.0, 1.5]);
        assert_eq!(equal_width_from_width(0.5, 0.05, 5).unwrap(), vec![0.05, 0.5, 1.0, 1.5]);
        assert_eq!(equal_width_from_width(1.0, 0.05, 5).unwrap(), vec![0.05, 1.0, 2.0, 3.0]);
        assert!(equal_width_from_width(0.0, 0.05, 5).is_err());
        assert!(equal_width_thresholds(-1.0, 0.05, 5).is_err());
        assert_eq!(
            balanced_ranges_scheme(2.0, ZERO_FLOOR).unwrap(),
            ThresholdScheme::default_for(SchemeName::BalancedRanges)
        );
    }

    #[test]
    fn max_margin_examples() {
        assert_eq!(max_margin_thresholds(&[1.0, 2.0, 4.0], 0.05).unwrap(), vec![0.05, 1.5, 3.0]);
        assert!(max_margin_thresholds(&[0.3, 0.3], 0.05).is_err());
        assert!(max_margins_scheme(&[1.0, 2.0, 4.0], 0.05).is_err());
        let s = max_margins_scheme(&[1.0, 2.0, 4.0, 6.0, 10.0], 0.05).unwrap();
        assert_eq!(s.thresholds, [0.05, 1.5, 3.0, 5.0]);
        assert_eq!(
            ThresholdScheme::default_for(SchemeName::MaxMargins).thresholds,
            [0.05, 0.21, 0.53, 1.05]
        );
    }

    #[test]
    fn balanced_scheme_ignores_near_zero_values() {
        let mut values = vec![0.0; 500];
        values.extend((1..=8).map(f64::from));
        let s = balanced_classes_scheme(&values, ZERO_FLOOR).unwrap();
        assert_eq!(s.thresholds, [0.05, 2.5, 4.5, 6.5]);
    }

    proptest! {
        #[test]
        fn binning_is_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0) {
            for name in SchemeName::ALL {
                let s = scheme(name);
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(bin_value(lo, &s) <= bin_value(hi, &s));
                if bin_value(a, &s) < bin_value(b, &s) {
                    prop_assert!(a < b);
                }
            }
        }

        #[test]
        fn balanced_counts_are_even(values in proptest::collection::hash_set(0u32..100_000, 5..300)) {
            let values: Vec<f64> = values.into_iter().map(|v| f64::from(v) / 100.0).collect();
            let t = balanced_class_thresholds(&values, 5).unwrap();
            let s = ThresholdScheme::from_slice(SchemeName::BalancedClasses, &t).unwrap();
            let mut counts = [0usize; 5];
            for &v in &values {
                counts[bin_value(v, &s)] += 1;
            }
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert!(counts.iter().map(|&c| c - min).sum::<usize>() <= 4);
        }
    }

    #[test]
    fn labels_follow_scheme() {
        let cfg = crate::ingestion::AggregationConfig::default();
        let date = chrono::NaiveDate::from_ymd_opt(2023, 5, 5).unwrap();
        let day = DayWindow::new(
            date,
            cfg.step_times(date, 0),
            vec![vec![0.0]; 8],
            vec![vec![true]; 8],
            vec![0.0, 0.1, 0.3, 0.7, 2.0, 0.8, 0.0, 0.0],
            vec![true, true, true, true, true, true, false, true],
        )
        .unwrap();
        let s = scheme(SchemeName::MaxMargins);
        let labeled = LabeledDay::new(day, &s);
        assert_eq!(labeled.labels, vec![0, 1, 2, 3, 4, 3, 0, 0]);
        assert!(labeled.consistent_with(&s));
        assert_eq!(labeled.observed_labels().count(), 7);
    }
}
