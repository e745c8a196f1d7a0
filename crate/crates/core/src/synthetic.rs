//! Seeded synthetic year: collector sensor log, hourly weather and the
//! noiseless ground truth, written in the ingestion CSV schemas.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{local_hour, SchemeName, ThresholdScheme, Timestamp, CLASSES, STEPS, STEP_SECONDS};
use crate::error::{Error, Result};
use crate::ingestion::{
    daily_energies, parse_sensor_reader, AggregationConfig, QpvtParams, SENSOR_HEADER, WEATHER_HEADER,
};
use crate::quantization::bin_value;

/// Temperature written in place of a reading during an outage; outside the
/// accepted sensor range.
pub const OUTAGE_TEMPERATURE: f64 = 150.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub days: usize,
    pub start_date: NaiveDate,
    pub utc_offset_minutes: i32,
    pub latitude_deg: f64,
    /// Local clock hour of the sun's highest point.
    pub solar_noon_hour: f64,
    /// W/m²
    pub peak_irradiance: f64,
    /// m²
    pub collector_area: f64,
    pub base_efficiency: f64,
    /// Fractional efficiency loss per year.
    pub annual_degradation: f64,
    /// Heat lost per kelvin of collector-to-ambient difference, W/K.
    pub loss_coefficient: f64,
    pub collector_temperature: f64,
    /// Gaussian noise on measured thermal power, W.
    pub noise_std: f64,
    /// Probability that a 3-hour window of sensor data is lost.
    pub missing_fraction: f64,
    /// Per-sample probability of an isolated out-of-range reading.
    pub spike_rate: f64,
    /// Probability that one weather field is missing for a whole window.
    pub weather_missing_fraction: f64,
    /// Strongest cloud attenuation of irradiance.
    pub cloud_attenuation: f64,
    /// Yearly mean chance that a day is overcast; higher in winter.
    pub cloudy_day_probability: f64,
    /// Standard deviation of the hourly drift of cloud cover around the
    /// day's value; 0 keeps the cover fixed for the whole day.
    pub cloud_drift: f64,
    /// Noise of each weather reading, in units of cloud cover: regional
    /// readings only loosely track the sky over the collector.
    pub weather_noise: f64,
    pub sensor_interval_seconds: i64,
    pub weather_interval_seconds: i64,
    /// kg/s while the pump runs.
    pub pump_flow: f64,
    pub scheme: SchemeName,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            days: 365,
            start_date: NaiveDate::from_ymd_opt(2023, 1, 1).unwrap(),
            utc_offset_minutes: 120,
            latitude_deg: 38.0,
            solar_noon_hour: 12.5,
            peak_irradiance: 850.0,
            collector_area: 2.0,
            base_efficiency: 0.4,
            annual_degradation: 0.05,
            loss_coefficient: 3.0,
            collector_temperature: 45.0,
            noise_std: 15.0,
            missing_fraction: 0.15,
            spike_rate: 0.005,
            weather_missing_fraction: 0.05,
            cloud_attenuation: 0.8,
            cloudy_day_probability: 0.35,
            cloud_drift: 0.0,
            weather_noise: 0.3,
            sensor_interval_seconds: 600,
            weather_interval_seconds: 3600,
            pump_flow: 0.05,
            scheme: SchemeName::MaxMargins,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth config: {m}")));
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return fail("missing_fraction must lie in [0, 1)");
        }
        if !(self.base_efficiency > 0.0 && self.base_efficiency <= 1.0) {
            return fail("base_efficiency must lie in (0, 1]");
        }
        if self.days == 0 {
            return fail("days must be positive");
        }
        for (name, p) in [
            ("spike_rate", self.spike_rate),
            ("weather_missing_fraction", self.weather_missing_fraction),
            ("cloud_attenuation", self.cloud_attenuation),
            ("cloudy_day_probability", self.cloudy_day_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.sensor_interval_seconds <= 0
            || self.weather_interval_seconds <= 0
            || STEP_SECONDS % self.sensor_interval_seconds != 0
            || STEP_SECONDS % self.weather_interval_seconds != 0
        {
            return fail("sampling intervals must divide three hours");
        }
        if !(self.pump_flow > 0.0) || self.noise_std < 0.0 || self.peak_irradiance < 0.0 || self.weather_noise < 0.0 || self.cloud_drift < 0.0 {
            return fail("pump_flow must be positive; noise and irradiance non-negative");
        }
        if !(-89.0..=89.0).contains(&self.latitude_deg) {
            return fail("latitude must lie within ±89°");
        }
        Ok(())
    }
}

/// Sunrise and sunset in local clock hours for a day of the year.
pub fn daylight(cfg: &SynthConfig, day_of_year: u32) -> (f64, f64) {
    let decl = 23.44f64.to_radians() * (2.0 * PI * (284.0 + f64::from(day_of_year)) / 365.0).sin();
    let lat = cfg.latitude_deg.to_radians();
    let cos_h = (-lat.tan() * decl.tan()).clamp(-1.0, 1.0);
    let half_day = cos_h.acos().to_degrees() / 15.0;
    (cfg.solar_noon_hour - half_day, cfg.solar_noon_hour + half_day)
}

/// Clear-sky irradiance at a local clock hour, W/m².
pub fn irradiance(cfg: &SynthConfig, day_of_year: u32, hour: f64) -> f64 {
    let (rise, set) = daylight(cfg, day_of_year);
    if hour <= rise || hour >= set {
        return 0.0;
    }
    cfg.peak_irradiance * (PI * (hour - rise) / (set - rise)).sin().max(0.0)
}

pub fn efficiency(cfg: &SynthConfig, day: usize) -> f64 {
    cfg.base_efficiency * (1.0 - cfg.annual_degradation * day as f64 / 365.0)
}

/// Mean ambient temperature for a day of the year and hour, °C.
fn ambient(day_of_year: u32, hour: f64, cloud: f64) -> f64 {
    let seasonal = 15.0 - 10.0 * (2.0 * PI * (f64::from(day_of_year) - 15.0) / 365.0).cos();
    let diurnal = (7.0 - 4.0 * cloud) * (2.0 * PI * (hour - 9.0) / 24.0).sin();
    seasonal + diurnal
}

/// Noiseless thermal power, W.
pub fn thermal_power(cfg: &SynthConfig, day: usize, day_of_year: u32, hour: f64, cloud: f64, t_amb: f64) -> f64 {
    let g = irradiance(cfg, day_of_year, hour) * (1.0 - cfg.cloud_attenuation * cloud);
    if g <= 0.0 {
        return 0.0;
    }
    let loss = cfg.loss_coefficient * (cfg.collector_temperature - t_amb).max(0.0);
    (efficiency(cfg, day) * cfg.collector_area * g - loss).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorRow {
    pub ts: Timestamp,
    pub t_in: f64,
    pub t_out: f64,
    pub flow: f64,
    pub solar_rad: f64,
    pub ambient_temp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeatherRow {
    pub ts: Timestamp,
    /// temp, humidity, pressure, wind, rain, snow; `None` when missing.
    pub values: [Option<f64>; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub date: NaiveDate,
    pub window: usize,
    pub start: Timestamp,
    pub qpvt_kwh: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub sensor: Vec<SensorRow>,
    /// The same stream without noise, outages or spikes.
    pub clean_sensor: Vec<SensorRow>,
    pub weather: Vec<WeatherRow>,
    pub truth: Vec<TruthRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sensor_csv(rows: &[SensorRow]) -> String {
    let mut out = SENSOR_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.ts, r.t_in, r.t_out, r.flow, r.solar_rad, r.ambient_temp
        ));
    }
    out
}

pub fn weather_csv(rows: &[WeatherRow]) -> String {
    let mut out = WEATHER_HEADER.join(",");
    out.push('\n');
    for r in rows {
        let vals: Vec<String> = r.values.iter().map(|v| fmt_opt(*v)).collect();
        out.push_str(&format!("{},{}\n", r.ts, vals.join(",")));
    }
    out
}

pub fn truth_csv(rows: &[TruthRow]) -> String {
    let mut out = String::from("date,window,start_ts,qpvt_kwh,class\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.date, r.window, r.start, r.qpvt_kwh, r.class));
    }
    out
}

/// Window energies and bands re-derived from the clean stream through the
/// ingestion pipeline.
pub fn derive_truth(clean: &[SensorRow], scheme: &ThresholdScheme) -> Result<Vec<TruthRow>> {
    let csv = sensor_csv(clean);
    let records = parse_sensor_reader(csv.as_bytes(), Path::new("<clean sensor>"))?;
    let cfg = AggregationConfig::default();
    let energies = daily_energies(&records, &QpvtParams::default(), &cfg);
    let offset = clean.first().map(|r| r.ts.local_offset_minutes).unwrap_or(0);
    let mut out = Vec::new();
    for (date, windows) in energies {
        let starts = cfg.step_times(date, offset);
        for (w, q) in windows.iter().enumerate() {
            let q = q.ok_or_else(|| Error::Empty(format!("clean stream has a gap on {date} window {w}")))?;
            out.push(TruthRow {
                date,
                window: w,
                start: starts[w],
                qpvt_kwh: q,
                class: bin_value(q, scheme),
            });
        }
    }
    Ok(out)
}

struct DayWeather {
    cloud_hourly: Vec<f64>,
    cloud_day: f64,
}

pub fn generate_year(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let agg = AggregationConfig::default();
    let start = agg.day_start(cfg.start_date, cfg.utc_offset_minutes);
    let power_noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let windows_total = cfg.days * STEPS;

    // Sky state: each day is clear or overcast, overcast days being more
    // likely in winter, with an optional hourly wobble around the day's cover.
    let mut sky = Vec::with_capacity(cfg.days);
    let mut wobble = 0.0f64;
    for d in 0..cfg.days {
        let date = cfg.start_date + chrono::TimeDelta::days(d as i64);
        let winter = (2.0 * PI * (f64::from(date.ordinal0()) + 10.0) / 365.0).cos();
        let p_cloudy = (cfg.cloudy_day_probability * (1.0 + 0.5 * winter)).clamp(0.0, 1.0);
        let cloud_day = if rng.random_bool(p_cloudy) {
            rng.random_range(0.3f64..1.0)
        } else {
            rng.random_range(0.0..0.15)
        };
        let cloud_hourly = (0..24)
            .map(|_| {
                wobble = 0.6 * wobble + cfg.cloud_drift * unit.sample(&mut rng);
                (cloud_day + wobble).clamp(0.0, 1.0)
            })
            .collect();
        sky.push(DayWeather {
            cloud_hourly,
            cloud_day,
        });
    }

    let outages: Vec<bool> = (0..windows_total).map(|_| rng.random_bool(cfg.missing_fraction)).collect();
    let weather_gaps: Vec<[bool; 6]> = (0..windows_total)
        .map(|_| std::array::from_fn(|_| rng.random_bool(cfg.weather_missing_fraction)))
        .collect();

    let sky_at = |elapsed: i64| -> (usize, usize, &DayWeather) {
        let day = (elapsed / 86_400) as usize;
        let hour_slot = ((elapsed % 86_400) / 3600) as usize;
        (day, hour_slot, &sky[day])
    };

    let mut sensor = Vec::new();
    let mut clean = Vec::new();
    let samples = cfg.days as i64 * 86_400 / cfg.sensor_interval_seconds;
    for k in 0..samples {
        let elapsed = k * cfg.sensor_interval_seconds;
        let ts = start.plus_seconds(elapsed);
        let mid = start.plus_seconds(elapsed + cfg.sensor_interval_seconds / 2);
        let (day, slot, w) = sky_at(elapsed);
        let cloud = w.cloud_hourly[slot];
        let doy = mid.local_date().ordinal0();
        let hour = local_hour(&mid);
        let t_amb = ambient(doy, hour, cloud);
        let g = irradiance(cfg, doy, hour) * (1.0 - cfg.cloud_attenuation * cloud);
        let p_clean = thermal_power(cfg, day, doy, hour, cloud, t_amb);
        let tank = 20.0 + 8.0 * (2.0 * PI * (f64::from(doy) - 100.0) / 365.0).sin();
        let row = |p: f64| {
            let flow = if p > 0.0 { cfg.pump_flow } else { 0.0 };
            let t_out = if p > 0.0 { tank + p / (cfg.pump_flow * 4186.0) } else { tank };
            SensorRow {
                ts,
                t_in: tank,
                t_out,
                flow,
                solar_rad: g,
                ambient_temp: t_amb,
            }
        };
        clean.push(row(p_clean));
        let p_noisy = if p_clean > 0.0 {
            (p_clean + power_noise.sample(&mut rng)).max(0.0)
        } else {
            0.0
        };
        let mut noisy = row(p_noisy);
        let window = (elapsed / STEP_SECONDS) as usize;
        if outages[window] {
            noisy.t_out = OUTAGE_TEMPERATURE;
        }
        if rng.random_bool(cfg.spike_rate) {
            noisy.t_in = OUTAGE_TEMPERATURE;
        }
        sensor.push(noisy);
    }

    let mut weather = Vec::new();
    let records = cfg.days as i64 * 86_400 / cfg.weather_interval_seconds;
    for k in 0..records {
        let elapsed = k * cfg.weather_interval_seconds;
        let ts = start.plus_seconds(elapsed);
        let mid = start.plus_seconds(elapsed + cfg.weather_interval_seconds / 2);
        let (_, slot, w) = sky_at(elapsed);
        let sigma = cfg.weather_noise;
        let cloud = (w.cloud_hourly[slot] + sigma * unit.sample(&mut rng)).clamp(0.0, 1.0);
        let doy = mid.local_date().ordinal0();
        let hour = local_hour(&mid);
        let temp = ambient(doy, hour, cloud) + 0.7 * unit.sample(&mut rng);
        let night = if irradiance(cfg, doy, hour) > 0.0 { 0.0 } else { 8.0 };
        let humidity = (35.0 + 45.0 * cloud + night + 5.0 * unit.sample(&mut rng)).clamp(0.0, 100.0);
        let pressure = 1022.0 - 18.0 * (w.cloud_day + sigma * unit.sample(&mut rng));
        let wind = (1.5 + 6.0 * (w.cloud_day + sigma * unit.sample(&mut rng))).abs();
        let precip = if cloud > 0.6 && rng.random_bool(0.5) {
            (cloud - 0.6) * 6.0 * rng.random::<f64>()
        } else {
            0.0
        };
        let (rain, snow) = if temp < 0.5 { (0.0, precip) } else { (precip, 0.0) };
        let window = (elapsed / STEP_SECONDS) as usize;
        let gaps = weather_gaps[window];
        let raw = [temp, humidity, pressure, wind, rain, snow];
        let values = std::array::from_fn(|i| if gaps[i] { None } else { Some(raw[i]) });
        weather.push(WeatherRow { ts, values });
    }

    let scheme = ThresholdScheme::default_for(cfg.scheme);
    let truth = derive_truth(&clean, &scheme)?;
    Ok(SynthData {
        sensor,
        clean_sensor: clean,
        weather,
        truth,
    })
}

/// Written file names, relative to the output directory.
pub const SENSOR_FILE: &str = "sensor.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const TRUTH_FILE: &str = "truth.csv";

pub fn write_dataset(data: &SynthData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [
        (SENSOR_FILE, sensor_csv(&data.sensor)),
        (WEATHER_FILE, weather_csv(&data.weather)),
        (TRUTH_FILE, truth_csv(&data.truth)),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Count values per band by a direct scan of the thresholds.
pub fn oracle_bin_counts(values: &[f64], thresholds: &[f64]) -> Vec<usize> {
    let mut counts = vec![0; thresholds.len() + 1];
    for &v in values {
        let mut band = 0;
        while band < thresholds.len() && v >= thresholds[band] {
            band += 1;
        }
        counts[band] += 1;
    }
    counts
}

/// Class frequencies of the ground truth.
pub fn truth_class_counts(truth: &[TruthRow]) -> [usize; CLASSES] {
    let mut c = [0; CLASSES];
    for r in truth {
        c[r.class] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{assemble_days, parse_weather_reader};
    use crate::quantization::bin_value;

    fn small(days: usize) -> SynthConfig {
        SynthConfig {
            days,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn night_has_no_power() {
        let cfg = SynthConfig::default();
        for doy in [0, 100, 180, 300] {
            assert_eq!(irradiance(&cfg, doy, 0.0), 0.0);
            assert_eq!(thermal_power(&cfg, 10, doy, 0.0, 0.0, 10.0), 0.0);
            assert!(irradiance(&cfg, doy, cfg.solar_noon_hour) > 0.0);
        }
        let (rise_w, set_w) = daylight(&cfg, 355);
        let (rise_s, set_s) = daylight(&cfg, 172);
        assert!(set_s - rise_s > set_w - rise_w);
    }

    #[test]
    fn no_degradation_same_weather_same_profile() {
        let cfg = SynthConfig {
            annual_degradation: 0.0,
            ..SynthConfig::default()
        };
        for h in 0..48 {
            let hour = h as f64 / 2.0;
            assert_eq!(
                thermal_power(&cfg, 3, 150, hour, 0.2, 18.0),
                thermal_power(&cfg, 250, 150, hour, 0.2, 18.0)
            );
        }
        let aged = SynthConfig::default();
        assert!(efficiency(&aged, 300) < efficiency(&aged, 0));
    }

    #[test]
    fn same_seed_same_files() {
        let a = generate_year(&small(6)).unwrap();
        let b = generate_year(&small(6)).unwrap();
        assert_eq!(sensor_csv(&a.sensor), sensor_csv(&b.sensor));
        assert_eq!(weather_csv(&a.weather), weather_csv(&b.weather));
        assert_eq!(truth_csv(&a.truth), truth_csv(&b.truth));
        let c = generate_year(&SynthConfig { seed: 7, ..small(6) }).unwrap();
        assert_ne!(sensor_csv(&a.sensor), sensor_csv(&c.sensor));
    }

    #[test]
    fn emitted_truth_is_rederived_exactly() {
        let data = generate_year(&small(20)).unwrap();
        let scheme = ThresholdScheme::default_for(SchemeName::MaxMargins);
        assert_eq!(derive_truth(&data.clean_sensor, &scheme).unwrap(), data.truth);
        assert_eq!(data.truth.len(), 20 * STEPS);
        assert!(data.truth.iter().all(|r| r.class == bin_value(r.qpvt_kwh, &scheme)));
    }

    #[test]
    fn generated_csvs_parse_and_assemble() {
        let data = generate_year(&small(10)).unwrap();
        let sensor = parse_sensor_reader(sensor_csv(&data.sensor).as_bytes(), Path::new("s")).unwrap();
        let weather = parse_weather_reader(weather_csv(&data.weather).as_bytes(), Path::new("w")).unwrap();
        let a = assemble_days(&sensor, &weather, &QpvtParams::default(), &AggregationConfig::default()).unwrap();
        assert_eq!(a.days.len(), 10);
        assert!(a.incomplete.is_empty());
    }

    #[test]
    fn config_invariants() {
        assert!(SynthConfig { missing_fraction: 1.0, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { base_efficiency: 0.0, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { base_efficiency: 1.0, ..SynthConfig::default() }.validate().is_ok());
    }

    #[test]
    fn oracle_counts_examples() {
        let mm = ThresholdScheme::default_for(SchemeName::MaxMargins);
        assert_eq!(oracle_bin_counts(&[0.0, 0.1, 0.3, 0.7, 2.0], &mm.thresholds), vec![1, 1, 1, 1, 1]);
        assert_eq!(oracle_bin_counts(&[], &mm.thresholds), vec![0; 5]);
    }
}
