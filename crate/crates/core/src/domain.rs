//! Shared domain types.
//!
//! Units are fixed throughout the crate: energies in kWh, powers in W,
//! temperatures in °C. Conversions happen once, during ingestion.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, FixedOffset, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Steps per day window.
pub const STEPS: usize = 8;
/// Length of one step in seconds.
pub const STEP_SECONDS: i64 = 3 * 3600;
/// Number of production bands.
pub const CLASSES: usize = 5;

/// Model input features, in column order.
pub const FEATURE_NAMES: [&str; 7] = [
    "temp",
    "humidity",
    "pressure",
    "wind_speed",
    "rain",
    "snow",
    "day_index",
];
pub const FEATURES: usize = FEATURE_NAMES.len();
/// Column holding the absolute day number (always observed).
pub const DAY_INDEX_FEATURE: usize = 6;

/// Accepted range for water temperature sensors.
pub const TEMP_RANGE: (f64, f64) = (-20.0, 100.0);

/// An instant with the fixed UTC offset it was recorded in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub epoch_seconds: i64,
    pub local_offset_minutes: i32,
}

impl Timestamp {
    pub fn new(epoch_seconds: i64, local_offset_minutes: i32) -> Self {
        Self {
            epoch_seconds,
            local_offset_minutes,
        }
    }

    /// Seconds since the epoch shifted into local wall-clock time.
    pub fn local_seconds(&self) -> i64 {
        self.epoch_seconds + i64::from(self.local_offset_minutes) * 60
    }

    pub fn local_datetime(&self) -> NaiveDateTime {
        DateTime::from_timestamp(self.local_seconds(), 0)
            .expect("timestamp within chrono range")
            .naive_utc()
    }

    pub fn local_date(&self) -> NaiveDate {
        self.local_datetime().date()
    }

    pub fn plus_seconds(&self, secs: i64) -> Self {
        Self::new(self.epoch_seconds + secs, self.local_offset_minutes)
    }

    /// Build from a local wall-clock time and offset.
    pub fn from_local(local: NaiveDateTime, local_offset_minutes: i32) -> Self {
        let local_secs = local.and_utc().timestamp();
        Self::new(
            local_secs - i64::from(local_offset_minutes) * 60,
            local_offset_minutes,
        )
    }

    pub fn to_rfc3339(&self) -> String {
        let offset = FixedOffset::east_opt(self.local_offset_minutes * 60)
            .expect("offset within a day");
        DateTime::from_timestamp(self.epoch_seconds, 0)
            .expect("timestamp within chrono range")
            .with_timezone(&offset)
            .to_rfc3339()
    }
}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.epoch_seconds
            .cmp(&other.epoch_seconds)
            .then(self.local_offset_minutes.cmp(&other.local_offset_minutes))
    }
}

impl FromStr for Timestamp {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let dt = DateTime::parse_from_rfc3339(s.trim())?;
        Ok(Self::new(dt.timestamp(), dt.offset().local_minus_utc() / 60))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

/// Local hour of day in `[0, 24)`, including the fractional part.
pub fn local_hour(ts: &Timestamp) -> f64 {
    ts.local_seconds().rem_euclid(86_400) as f64 / 3600.0
}

/// A reading paired with its validity flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub value: f64,
    pub valid: bool,
}

impl Reading {
    pub fn valid(value: f64) -> Self {
        Self { value, valid: true }
    }

    pub fn missing() -> Self {
        Self {
            value: 0.0,
            valid: false,
        }
    }

    pub fn get(&self) -> Option<f64> {
        self.valid.then_some(self.value)
    }

    /// Keep the reading valid only when `accept` holds for its value.
    pub fn checked(value: Option<f64>, accept: impl Fn(f64) -> bool) -> Self {
        match value {
            Some(v) if v.is_finite() && accept(v) => Self::valid(v),
            Some(v) if v.is_finite() => Self { value: v, valid: false },
            _ => Self::missing(),
        }
    }
}

pub fn temperature_in_range(v: f64) -> bool {
    (TEMP_RANGE.0..=TEMP_RANGE.1).contains(&v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub ts: Timestamp,
    pub t_in: Reading,
    pub t_out: Reading,
    /// kg/s
    pub flow: Reading,
    /// W/m²
    pub solar_radiation: Reading,
    pub ambient_temp: Reading,
}

impl SensorRecord {
    /// Apply the range rules; out-of-range values are kept but flagged invalid.
    pub fn from_raw(
        ts: Timestamp,
        t_in: Option<f64>,
        t_out: Option<f64>,
        flow: Option<f64>,
        solar_radiation: Option<f64>,
        ambient_temp: Option<f64>,
    ) -> Self {
        Self {
            ts,
            t_in: Reading::checked(t_in, temperature_in_range),
            t_out: Reading::checked(t_out, temperature_in_range),
            flow: Reading::checked(flow, |v| v >= 0.0),
            solar_radiation: Reading::checked(solar_radiation, |v| v >= 0.0),
            ambient_temp: Reading::checked(ambient_temp, |_| true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub ts: Timestamp,
    pub temperature: Reading,
    /// %RH
    pub humidity: Reading,
    /// hPa
    pub pressure: Reading,
    /// m/s
    pub wind_speed: Reading,
    /// mm
    pub rain_accum: Reading,
    /// mm
    pub snow_accum: Reading,
}

impl WeatherRecord {
    pub fn from_raw(
        ts: Timestamp,
        temperature: Option<f64>,
        humidity: Option<f64>,
        pressure: Option<f64>,
        wind_speed: Option<f64>,
        rain_accum: Option<f64>,
        snow_accum: Option<f64>,
    ) -> Self {
        Self {
            ts,
            temperature: Reading::checked(temperature, |_| true),
            humidity: Reading::checked(humidity, |v| (0.0..=100.0).contains(&v)),
            pressure: Reading::checked(pressure, |v| v > 0.0),
            wind_speed: Reading::checked(wind_speed, |v| v >= 0.0),
            rain_accum: Reading::checked(rain_accum, |v| v >= 0.0),
            snow_accum: Reading::checked(snow_accum, |v| v >= 0.0),
        }
    }

    /// The six weather readings in feature column order.
    pub fn readings(&self) -> [Reading; 6] {
        [
            self.temperature,
            self.humidity,
            self.pressure,
            self.wind_speed,
            self.rain_accum,
            self.snow_accum,
        ]
    }
}

/// One day as eight consecutive 3-hour steps.
///
/// Masked entries hold 0.0, but nothing may read them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayWindow {
    pub date: NaiveDate,
    pub step_times: Vec<Timestamp>,
    pub features: Vec<Vec<f64>>,
    pub feature_mask: Vec<Vec<bool>>,
    pub qpvt_kwh: Vec<f64>,
    pub label_mask: Vec<bool>,
}

impl DayWindow {
    pub fn new(
        date: NaiveDate,
        step_times: Vec<Timestamp>,
        mut features: Vec<Vec<f64>>,
        feature_mask: Vec<Vec<bool>>,
        mut qpvt_kwh: Vec<f64>,
        label_mask: Vec<bool>,
    ) -> Result<Self> {
        for (row, mask) in features.iter_mut().zip(&feature_mask) {
            for (v, &m) in row.iter_mut().zip(mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        for (q, &m) in qpvt_kwh.iter_mut().zip(&label_mask) {
            if !m {
                *q = 0.0;
            }
        }
        let day = Self {
            date,
            step_times,
            features,
            feature_mask,
            qpvt_kwh,
            label_mask,
        };
        day.validate()?;
        Ok(day)
    }

    pub fn feature_count(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("day {}: {msg}", self.date)));
        if self.step_times.len() != STEPS
            || self.features.len() != STEPS
            || self.feature_mask.len() != STEPS
            || self.qpvt_kwh.len() != STEPS
            || self.label_mask.len() != STEPS
        {
            return bad(format!("expected {STEPS} steps"));
        }
        for pair in self.step_times.windows(2) {
            if pair[1].epoch_seconds - pair[0].epoch_seconds != STEP_SECONDS {
                return bad("step times must be 3 hours apart".into());
            }
        }
        let f = self.feature_count();
        for (row, mask) in self.features.iter().zip(&self.feature_mask) {
            if row.len() != f || mask.len() != f {
                return bad("ragged feature matrix".into());
            }
            if row.iter().zip(mask).any(|(v, &m)| m && !v.is_finite()) {
                return bad("non-finite observed feature".into());
            }
        }
        for (&q, &m) in self.qpvt_kwh.iter().zip(&self.label_mask) {
            if m && !(q.is_finite() && q >= 0.0) {
                return bad(format!("invalid label energy {q}"));
            }
        }
        Ok(())
    }

    /// Fraction of the day covered by each step's midpoint, in `[0, 1)`.
    pub fn step_positions(&self) -> [f64; STEPS] {
        let mut out = [0.0; STEPS];
        for (s, o) in out.iter_mut().enumerate() {
            *o = (s as f64 + 0.5) / STEPS as f64;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    BalancedRanges,
    BalancedClasses,
    MaxMargins,
}

impl SchemeName {
    pub const ALL: [SchemeName; 3] = [
        SchemeName::BalancedRanges,
        SchemeName::BalancedClasses,
        SchemeName::MaxMargins,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeName::BalancedRanges => "balanced_ranges",
            SchemeName::BalancedClasses => "balanced_classes",
            SchemeName::MaxMargins => "max_margins",
        }
    }
}

impl FromStr for SchemeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Scheme(format!("unknown scheme `{s}`")))
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Four increasing energy cut points defining five production bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScheme")]
pub struct ThresholdScheme {
    pub name: SchemeName,
    pub thresholds: [f64; CLASSES - 1],
}

#[derive(Deserialize)]
struct RawScheme {
    name: SchemeName,
    thresholds: [f64; CLASSES - 1],
}

impl TryFrom<RawScheme> for ThresholdScheme {
    type Error = Error;

    fn try_from(raw: RawScheme) -> Result<Self> {
        ThresholdScheme::new(raw.name, raw.thresholds)
    }
}

impl ThresholdScheme {
    pub fn new(name: SchemeName, thresholds: [f64; CLASSES - 1]) -> Result<Self> {
        if !thresholds.iter().all(|t| t.is_finite()) {
            return Err(Error::Scheme("thresholds must be finite".into()));
        }
        if thresholds[0] <= 0.0 {
            return Err(Error::Scheme("first threshold must be positive".into()));
        }
        if thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Scheme(format!(
                "thresholds must be strictly increasing: {thresholds:?}"
            )));
        }
        Ok(Self { name, thresholds })
    }

    pub fn from_slice(name: SchemeName, thresholds: &[f64]) -> Result<Self> {
        let arr: [f64; CLASSES - 1] = thresholds.try_into().map_err(|_| {
            Error::Scheme(format!(
                "expected {} thresholds, got {}",
                CLASSES - 1,
                thresholds.len()
            ))
        })?;
        Self::new(name, arr)
    }

    /// Shipped threshold columns (kWh per 3-hour window).
    pub fn default_for(name: SchemeName) -> Self {
        let thresholds = match name {
            SchemeName::BalancedRanges => [0.05, 0.50, 1.00, 1.50],
            SchemeName::BalancedClasses => [0.05, 0.29, 1.24, 3.70],
            SchemeName::MaxMargins => [0.05, 0.21, 0.53, 1.05],
        };
        Self { name, thresholds }
    }
}

/// Likelihoods over the five production bands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: [f64; CLASSES],
}

impl ClassDistribution {
    pub fn new(probs: [f64; CLASSES]) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("not a distribution: {probs:?}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / CLASSES as f64; CLASSES],
        }
    }

    pub fn one_hot(class: usize) -> Self {
        let mut probs = [0.0; CLASSES];
        probs[class] = 1.0;
        Self { probs }
    }

    /// Numerically stable softmax of raw scores.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = [0.0; CLASSES];
        let mut sum = 0.0;
        for (p, &l) in probs.iter_mut().zip(logits) {
            *p = (l - max).exp();
            sum += *p;
        }
        for p in &mut probs {
            *p /= sum;
        }
        Self { probs }
    }

    /// Most likely class; ties resolve to the lower band.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for c in 1..CLASSES {
            if self.probs[c] > self.probs[best] {
                best = c;
            }
        }
        best
    }
}
