//! Time features: fixed cyclic encodings and the learnable time embedding.

use std::f64::consts::TAU;

use chrono::Datelike;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{local_hour, Timestamp};

pub const HOUR_PERIOD: f64 = 24.0;
pub const DAY_PERIOD: f64 = 365.25;
pub const MONTH_PERIOD: f64 = 12.0;

/// `(sin, cos)` of a position on a cycle of length `period`.
pub fn cyclic_pair(position: f64, period: f64) -> (f64, f64) {
    let angle = TAU * position / period;
    (angle.sin(), angle.cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicFeatures {
    pub hour: (f64, f64),
    pub day: (f64, f64),
    pub month: (f64, f64),
}

impl CyclicFeatures {
    pub const WIDTH: usize = 6;

    pub fn to_array(&self) -> [f64; Self::WIDTH] {
        [
            self.hour.0,
            self.hour.1,
            self.day.0,
            self.day.1,
            self.month.0,
            self.month.1,
        ]
    }
}

/// Hour of day, fractional day of year and month, all in local time.
pub fn cyclic_features(ts: &Timestamp) -> CyclicFeatures {
    let hour = local_hour(ts);
    let date = ts.local_date();
    let day_of_year = f64::from(date.ordinal0()) + hour / 24.0;
    let month = f64::from(date.month0());
    CyclicFeatures {
        hour: cyclic_pair(hour, HOUR_PERIOD),
        day: cyclic_pair(day_of_year, DAY_PERIOD),
        month: cyclic_pair(month, MONTH_PERIOD),
    }
}

/// Parameters of `φ(t)`: one linear channel followed by `dim − 1` sinusoids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbeddingParams {
    /// `[ω₀, ω₁, …, ω_{d−1}]`
    pub weights: Vec<f64>,
    /// `[α₀, α₁, …, α_{d−1}]`
    pub biases: Vec<f64>,
}

impl TimeEmbeddingParams {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Frequencies log-uniform over 1–96 cycles per unit time, phases uniform.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        assert!(dim >= 2, "time embedding needs at least two dimensions");
        let mut weights = Vec::with_capacity(dim);
        let mut biases = Vec::with_capacity(dim);
        weights.push(rng.random_range(-1.0..1.0));
        biases.push(0.0);
        let (lo, hi) = (1.0f64.ln(), 96.0f64.ln());
        for _ in 1..dim {
            let cycles = rng.random_range(lo..hi).exp();
            weights.push(TAU * cycles);
            biases.push(rng.random_range(0.0..TAU));
        }
        Self { weights, biases }
    }
}

pub fn time_embed(t: f64, params: &TimeEmbeddingParams) -> Vec<f64> {
    params
        .weights
        .iter()
        .zip(&params.biases)
        .enumerate()
        .map(|(i, (&w, &b))| {
            let z = w * t + b;
            if i == 0 {
                z
            } else {
                z.sin()
            }
        })
        .collect()
}

/// Partial derivatives of each output channel with respect to its own
/// weight and bias (channels do not share parameters).
pub fn time_embed_param_grads(t: f64, params: &TimeEmbeddingParams) -> Vec<(f64, f64)> {
    params
        .weights
        .iter()
        .zip(&params.biases)
        .enumerate()
        .map(|(i, (&w, &b))| {
            if i == 0 {
                (t, 1.0)
            } else {
                let c = (w * t + b).cos();
                (t * c, c)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDateTime;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn at(s: &str) -> Timestamp {
        Timestamp::from_local(NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M").unwrap(), 120)
    }

    #[test]
    fn hour_pairs() {
        let f = cyclic_features(&at("2023-03-10T06:00"));
        assert!((f.hour.0 - 1.0).abs() < 1e-12 && f.hour.1.abs() < 1e-12);
        let f = cyclic_features(&at("2023-03-10T00:00"));
        assert_eq!(f.hour, (0.0, 1.0));
        let (s, c) = cyclic_pair(DAY_PERIOD / 2.0, DAY_PERIOD);
        assert!(s.abs() < 1e-9 && (c + 1.0).abs() < 1e-9);
        let f = cyclic_features(&at("2023-01-01T00:00"));
        assert_eq!(f.day, (0.0, 1.0));
        assert_eq!(f.month, (0.0, 1.0));
    }

    #[test]
    fn day_shift_keeps_hour_pair() {
        let a = cyclic_features(&at("2023-03-10T07:00"));
        let b = cyclic_features(&at("2023-03-10T07:00").plus_seconds(86_400));
        assert_eq!(a.hour, b.hour);
    }

    #[test]
    fn embed_examples() {
        let p = TimeEmbeddingParams {
            weights: vec![1.0, TAU],
            biases: vec![0.0, 0.0],
        };
        let e = time_embed(0.5, &p);
        assert_eq!(e[0], 0.5);
        let e = time_embed(0.25, &p);
        assert!((e[1] - 1.0).abs() < 1e-15);
        let z = TimeEmbeddingParams {
            weights: vec![0.0; 4],
            biases: vec![0.0; 4],
        };
        assert!(time_embed(0.7, &z).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn pairs_on_unit_circle_and_periodic(pos in -1000.0f64..1000.0) {
            for period in [HOUR_PERIOD, DAY_PERIOD, MONTH_PERIOD] {
                let (s, c) = cyclic_pair(pos, period);
                prop_assert!((s * s + c * c - 1.0).abs() < 1e-9);
                let (s2, c2) = cyclic_pair(pos + period, period);
                prop_assert!((s - s2).abs() < 1e-9 && (c - c2).abs() < 1e-9);
            }
        }

        #[test]
        fn linear_channel_is_not_periodic(w0 in 0.01f64..5.0, t in 0.0f64..1.0, seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut p = TimeEmbeddingParams::init(6, &mut rng);
            p.weights[0] = w0;
            prop_assert!(time_embed(t, &p)[0] != time_embed(t + 1.0, &p)[0]);
        }

        #[test]
        fn analytic_grads_match_finite_differences(t in 0.0f64..1.0, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = TimeEmbeddingParams::init(8, &mut rng);
            let grads = time_embed_param_grads(t, &p);
            let h = 1e-5;
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            for i in 0..p.dim() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.weights[i] += h;
                minus.weights[i] -= h;
                let fd = (time_embed(t, &plus)[i] - time_embed(t, &minus)[i]) / (2.0 * h);
                prop_assert!(rel(grads[i].0, fd) < 1e-4, "weight {}: {} vs {}", i, grads[i].0, fd);
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.biases[i] += h;
                minus.biases[i] -= h;
                let fd = (time_embed(t, &plus)[i] - time_embed(t, &minus)[i]) / (2.0 * h);
                prop_assert!(rel(grads[i].1, fd) < 1e-4, "bias {}: {} vs {}", i, grads[i].1, fd);
            }
        }
    }

    #[test]
    fn init_ranges() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = TimeEmbeddingParams::init(16, &mut rng);
        for i in 1..16 {
            let cycles = p.weights[i] / TAU;
            assert!((1.0..=96.0).contains(&cycles));
            assert!((0.0..TAU).contains(&p.biases[i]));
        }
    }
}
