//! Sensor and weather ingestion: CSV parsing, heat-production ground truth,
//! 3-hour aggregation, day assembly and the train/test split.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::domain::{
    DayWindow, SensorRecord, Timestamp, WeatherRecord, FEATURES, STEPS, STEP_SECONDS,
};
use crate::error::{Error, Result};

pub const SENSOR_HEADER: [&str; 6] = ["ts", "t_in", "t_out", "flow", "solar_rad", "ambient_temp"];
pub const WEATHER_HEADER: [&str; 7] = [
    "ts",
    "temp",
    "humidity",
    "pressure",
    "wind_speed",
    "rain",
    "snow",
];

const JOULES_PER_KWH: f64 = 3.6e6;

/// Physical constants for turning flow and temperatures into heat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpvtParams {
    /// J/(kg·K); 4186 for water, lower for glycol mixes.
    pub specific_heat: f64,
    /// m², informational only.
    pub collector_area: f64,
}

impl Default for QpvtParams {
    fn default() -> Self {
        Self {
            specific_heat: 4186.0,
            collector_area: 8.6,
        }
    }
}

impl QpvtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.specific_heat > 0.0) {
            return Err(Error::Config("specific_heat must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    /// Local time at which the first 3-hour window of a day starts.
    pub day_offset_minutes: i64,
    /// A window whose unobserved time exceeds this fraction is masked.
    pub max_masked_fraction: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            day_offset_minutes: 60,
            max_masked_fraction: 0.25,
        }
    }
}

impl AggregationConfig {
    /// Anchored day that `ts` belongs to.
    pub fn day_of(&self, ts: &Timestamp) -> NaiveDate {
        let shifted = ts.local_seconds() - self.day_offset_minutes * 60;
        let days = shifted.div_euclid(86_400);
        NaiveDate::from_ymd_opt(1970, 1, 1).unwrap() + chrono::TimeDelta::days(days)
    }

    /// Start of the first window of `date`, in the given offset.
    pub fn day_start(&self, date: NaiveDate, local_offset_minutes: i32) -> Timestamp {
        let midnight = date.and_time(NaiveTime::MIN);
        Timestamp::from_local(midnight, local_offset_minutes).plus_seconds(self.day_offset_minutes * 60)
    }

    pub fn step_times(&self, date: NaiveDate, local_offset_minutes: i32) -> Vec<Timestamp> {
        let start = self.day_start(date, local_offset_minutes);
        (0..STEPS as i64)
            .map(|s| start.plus_seconds(s * STEP_SECONDS))
            .collect()
    }
}

/// Days since 1970-01-01, used as the trend feature.
pub fn day_number(date: NaiveDate) -> f64 {
    f64::from(date.num_days_from_ce() - NaiveDate::from_ymd_opt(1970, 1, 1).unwrap().num_days_from_ce())
}

fn parse_cell(field: &str, path: &Path, line: u64, column: &str) -> Result<Option<f64>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: format!("column `{column}`: cannot parse `{field}` as a number"),
        })
}

/// Read rows of a headed CSV, checking the header and timestamp ordering.
fn read_rows<R: Read, T>(
    reader: R,
    path: &Path,
    header: &[&str],
    mut build: impl FnMut(Timestamp, Vec<Option<f64>>) -> T,
) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let found = rdr.headers().map_err(|e| Error::MalformedRow {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != header {
        return Err(Error::Header {
            path: path.to_path_buf(),
            expected: header.join(","),
            found: found.join(","),
        });
    }
    let mut out = Vec::new();
    let mut last: Option<i64> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let ts: Timestamp = record[0].parse().map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: format!("bad timestamp `{}`: {e}", &record[0]),
        })?;
        if last.is_some_and(|prev| ts.epoch_seconds <= prev) {
            return Err(Error::NonMonotone {
                path: path.to_path_buf(),
                line,
            });
        }
        last = Some(ts.epoch_seconds);
        let values = (1..header.len())
            .map(|i| parse_cell(&record[i], path, line, header[i]))
            .collect::<Result<Vec<_>>>()?;
        out.push(build(ts, values));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

pub fn parse_sensor_csv(path: &Path) -> Result<Vec<SensorRecord>> {
    parse_sensor_reader(open(path)?, path)
}

pub fn parse_sensor_reader<R: Read>(reader: R, path: &Path) -> Result<Vec<SensorRecord>> {
    read_rows(reader, path, &SENSOR_HEADER, |ts, v| {
        SensorRecord::from_raw(ts, v[0], v[1], v[2], v[3], v[4])
    })
}

pub fn parse_weather_csv(path: &Path) -> Result<Vec<WeatherRecord>> {
    parse_weather_reader(open(path)?, path)
}

pub fn parse_weather_reader<R: Read>(reader: R, path: &Path) -> Result<Vec<WeatherRecord>> {
    read_rows(reader, path, &WEATHER_HEADER, |ts, v| {
        WeatherRecord::from_raw(ts, v[0], v[1], v[2], v[3], v[4], v[5])
    })
}

/// Instantaneous heat production in W, or `None` when any input is invalid.
///
/// Negative values (reverse flow, night losses) are clamped to zero.
pub fn compute_qpvt_power(
    flow: Option<f64>,
    t_in: Option<f64>,
    t_out: Option<f64>,
    params: &QpvtParams,
) -> Option<f64> {
    let (flow, t_in, t_out) = (flow?, t_in?, t_out?);
    Some((flow * params.specific_heat * (t_out - t_in)).max(0.0))
}

pub fn record_power(record: &SensorRecord, params: &QpvtParams) -> Option<f64> {
    compute_qpvt_power(
        record.flow.get(),
        record.t_in.get(),
        record.t_out.get(),
        params,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerSample {
    pub ts: Timestamp,
    pub watts: Option<f64>,
}

/// Median spacing of a sorted series, in seconds.
pub fn nominal_interval(times: impl Iterator<Item = i64>) -> Option<i64> {
    let times: Vec<i64> = times.collect();
    let mut gaps: Vec<i64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable();
    Some(gaps[gaps.len() / 2])
}

/// Energy per window (kWh) for one anchored day.
///
/// Each sample holds its value until the next sample, at most `interval_secs`
/// and never past the end of its window. Unobserved time includes both masked
/// samples and gaps. A window is masked when its unobserved fraction exceeds
/// the configured limit; otherwise the observed integral is rescaled to the
/// full window.
pub fn aggregate_windows(
    samples: &[PowerSample],
    day_start: Timestamp,
    interval_secs: i64,
    cfg: &AggregationConfig,
) -> [Option<f64>; STEPS] {
    let mut observed_secs = [0i64; STEPS];
    let mut joules = [0.0f64; STEPS];
    for (i, sample) in samples.iter().enumerate() {
        let offset = sample.ts.epoch_seconds - day_start.epoch_seconds;
        if offset < 0 || offset >= STEPS as i64 * STEP_SECONDS {
            continue;
        }
        let w = (offset / STEP_SECONDS) as usize;
        let window_end = (w as i64 + 1) * STEP_SECONDS;
        let mut dur = interval_secs.min(window_end - offset);
        if let Some(next) = samples.get(i + 1) {
            dur = dur.min(next.ts.epoch_seconds - sample.ts.epoch_seconds);
        }
        if let Some(p) = sample.watts {
            observed_secs[w] += dur;
            joules[w] += p * dur as f64;
        }
    }
    let mut out = [None; STEPS];
    for w in 0..STEPS {
        if observed_secs[w] == 0 {
            continue;
        }
        let masked_fraction = (STEP_SECONDS - observed_secs[w]) as f64 / STEP_SECONDS as f64;
        if masked_fraction > cfg.max_masked_fraction {
            continue;
        }
        let scale = STEP_SECONDS as f64 / observed_secs[w] as f64;
        out[w] = Some(joules[w] * scale / JOULES_PER_KWH);
    }
    out
}

/// Per-window weather features for one anchored day.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherWindows {
    pub values: Vec<[f64; 6]>,
    pub mask: Vec<[bool; 6]>,
    /// Whether any record (valid or not) fell in the window.
    pub present: [bool; STEPS],
}

/// Means for temperature, humidity, pressure and wind; sums for rain and snow.
pub fn aggregate_weather(records: &[WeatherRecord], day_start: Timestamp) -> WeatherWindows {
    const SUMMED: [bool; 6] = [false, false, false, false, true, true];
    let mut sums = vec![[0.0f64; 6]; STEPS];
    let mut counts = vec![[0usize; 6]; STEPS];
    let mut present = [false; STEPS];
    for rec in records {
        let offset = rec.ts.epoch_seconds - day_start.epoch_seconds;
        if offset < 0 || offset >= STEPS as i64 * STEP_SECONDS {
            continue;
        }
        let w = (offset / STEP_SECONDS) as usize;
        present[w] = true;
        for (k, reading) in rec.readings().iter().enumerate() {
            if let Some(v) = reading.get() {
                sums[w][k] += v;
                counts[w][k] += 1;
            }
        }
    }
    let mut values = vec![[0.0f64; 6]; STEPS];
    let mut mask = vec![[false; 6]; STEPS];
    for w in 0..STEPS {
        for k in 0..6 {
            if counts[w][k] > 0 {
                mask[w][k] = true;
                values[w][k] = if SUMMED[k] {
                    sums[w][k]
                } else {
                    sums[w][k] / counts[w][k] as f64
                };
            }
        }
    }
    WeatherWindows {
        values,
        mask,
        present,
    }
}

/// Build the feature block of a day from its weather windows.
pub fn day_features(weather: &WeatherWindows, date: NaiveDate) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let day = day_number(date);
    let mut features = Vec::with_capacity(STEPS);
    let mut mask = Vec::with_capacity(STEPS);
    for w in 0..STEPS {
        let mut row = weather.values[w].to_vec();
        let mut m = weather.mask[w].to_vec();
        row.push(day);
        m.push(true);
        debug_assert_eq!(row.len(), FEATURES);
        features.push(row);
        mask.push(m);
    }
    (features, mask)
}

fn group_by_day<T>(
    items: &[T],
    ts: impl Fn(&T) -> Timestamp,
    cfg: &AggregationConfig,
) -> BTreeMap<NaiveDate, std::ops::Range<usize>> {
    let mut out: BTreeMap<NaiveDate, std::ops::Range<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let d = cfg.day_of(&ts(item));
        out.entry(d).and_modify(|r| r.end = i + 1).or_insert(i..i + 1);
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct Assembled {
    pub days: Vec<DayWindow>,
    /// Days skipped because some window had no weather records at all.
    pub incomplete: Vec<NaiveDate>,
}

impl Assembled {
    pub fn masked_label_fraction(&self) -> f64 {
        let total = self.days.len() * STEPS;
        if total == 0 {
            return 0.0;
        }
        let masked: usize = self
            .days
            .iter()
            .map(|d| d.label_mask.iter().filter(|m| !**m).count())
            .sum();
        masked as f64 / total as f64
    }
}

/// Per-day window energies from sensor records.
pub fn daily_energies(
    sensor: &[SensorRecord],
    params: &QpvtParams,
    cfg: &AggregationConfig,
) -> BTreeMap<NaiveDate, [Option<f64>; STEPS]> {
    let interval = nominal_interval(sensor.iter().map(|r| r.ts.epoch_seconds)).unwrap_or(600);
    let samples: Vec<PowerSample> = sensor
        .iter()
        .map(|r| PowerSample {
            ts: r.ts,
            watts: record_power(r, params),
        })
        .collect();
    group_by_day(&samples, |s| s.ts, cfg)
        .into_iter()
        .map(|(date, range)| {
            let start = cfg.day_start(date, samples[range.start].ts.local_offset_minutes);
            (date, aggregate_windows(&samples[range], start, interval, cfg))
        })
        .collect()
}

/// Join weather features with sensor-derived labels into day windows.
///
/// Every day with weather data becomes a window; labels are masked where the
/// sensor data cannot support them. Labels are never imputed.
pub fn assemble_days(
    sensor: &[SensorRecord],
    weather: &[WeatherRecord],
    params: &QpvtParams,
    cfg: &AggregationConfig,
) -> Result<Assembled> {
    params.validate()?;
    let energies = daily_energies(sensor, params, cfg);
    let mut out = Assembled::default();
    for (date, range) in group_by_day(weather, |r| r.ts, cfg) {
        let offset = weather[range.start].ts.local_offset_minutes;
        let start = cfg.day_start(date, offset);
        let windows = aggregate_weather(&weather[range], start);
        if windows.present.iter().any(|p| !p) {
            out.incomplete.push(date);
            continue;
        }
        let (features, feature_mask) = day_features(&windows, date);
        let labels = energies.get(&date).copied().unwrap_or([None; STEPS]);
        let qpvt: Vec<f64> = labels.iter().map(|q| q.unwrap_or(0.0)).collect();
        let label_mask: Vec<bool> = labels.iter().map(Option::is_some).collect();
        out.days.push(DayWindow::new(
            date,
            cfg.step_times(date, offset),
            features,
            feature_mask,
            qpvt,
            label_mask,
        )?);
    }
    Ok(out)
}

/// Features for a single day to be predicted.
pub fn assemble_prediction_day(
    weather: &[WeatherRecord],
    cfg: &AggregationConfig,
) -> Result<DayWindow> {
    let groups = group_by_day(weather, |r| r.ts, cfg);
    let (date, range) = match groups.len() {
        0 => return Err(Error::Empty("weather file has no records".into())),
        1 => groups.into_iter().next().unwrap(),
        n => {
            return Err(Error::Incompatible(format!(
                "expected one day of weather data, found {n} days"
            )))
        }
    };
    let offset = weather[range.start].ts.local_offset_minutes;
    let windows = aggregate_weather(&weather[range], cfg.day_start(date, offset));
    let missing: Vec<usize> = (0..STEPS).filter(|&w| !windows.present[w]).collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteDay {
            date: date.to_string(),
            missing,
        });
    }
    let (features, feature_mask) = day_features(&windows, date);
    DayWindow::new(
        date,
        cfg.step_times(date, offset),
        features,
        feature_mask,
        vec![0.0; STEPS],
        vec![false; STEPS],
    )
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<DayWindow>,
    pub test: Vec<DayWindow>,
    /// Months with fewer than three days, kept entirely in training.
    pub short_months: Vec<(i32, u32)>,
}

/// Hold out the final two days present in every calendar month.
pub fn split_train_test(days: Vec<DayWindow>) -> Split {
    let mut by_month: BTreeMap<(i32, u32), Vec<NaiveDate>> = BTreeMap::new();
    for d in &days {
        by_month.entry((d.date.year(), d.date.month())).or_default().push(d.date);
    }
    let mut test_dates = std::collections::BTreeSet::new();
    let mut short_months = Vec::new();
    for (month, mut dates) in by_month {
        dates.sort();
        dates.dedup();
        if dates.len() < 3 {
            log::warn!(
                "month {}-{:02} has only {} day(s); keeping it in training",
                month.0,
                month.1,
                dates.len()
            );
            short_months.push(month);
            continue;
        }
        test_dates.extend(dates[dates.len() - 2..].iter().copied());
    }
    let (test, train) = days.into_iter().partition(|d| test_dates.contains(&d.date));
    Split {
        train,
        test,
        short_months,
    }
}

pub fn write_days(path: &Path, days: &[DayWindow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for day in days {
        let line = serde_json::to_string(day).map_err(|e| Error::json("serializing day", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_days(path: &Path) -> Result<Vec<DayWindow>> {
    let reader = BufReader::new(open(path)?);
    let mut days = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let day: DayWindow = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        day.validate()?;
        days.push(day);
    }
    Ok(days)
}
