#![allow(dead_code)]

use std::path::Path;

use chrono::NaiveDate;
use pvtcast::domain::{DayWindow, SchemeName, ThresholdScheme, STEPS};
use pvtcast::ingestion::{
    assemble_days, parse_sensor_reader, parse_weather_reader, split_train_test, AggregationConfig, Assembled,
    QpvtParams,
};
use pvtcast::quantization::{label_days, LabeledDay};
use pvtcast::synthetic::{generate_year, sensor_csv, weather_csv, SynthConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random day with roughly `missing` of its feature entries masked; every
/// feature keeps at least one observation.
pub fn random_day(rng: &mut ChaCha8Rng, features: usize, missing: f64) -> DayWindow {
    let date = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap() + chrono::TimeDelta::days(rng.random_range(0..365));
    let mut mask = vec![vec![true; features]; STEPS];
    let mut feats = vec![vec![0.0; features]; STEPS];
    for s in 0..STEPS {
        for k in 0..features {
            feats[s][k] = rng.random_range(-2.0..2.0);
            mask[s][k] = rng.random::<f64>() >= missing;
        }
    }
    for k in 0..features {
        if (0..STEPS).all(|s| !mask[s][k]) {
            mask[rng.random_range(0..STEPS)][k] = true;
        }
    }
    let mut label_mask: Vec<bool> = (0..STEPS).map(|_| rng.random::<f64>() > 0.25).collect();
    label_mask[rng.random_range(0..STEPS)] = true;
    DayWindow::new(
        date,
        AggregationConfig::default().step_times(date, 120),
        feats,
        mask,
        (0..STEPS).map(|_| rng.random_range(0.0..2.0)).collect(),
        label_mask,
    )
    .unwrap()
}

pub struct Dataset {
    pub assembled_masked_fraction: f64,
    pub train: Vec<LabeledDay>,
    pub test: Vec<LabeledDay>,
    pub scheme: ThresholdScheme,
}

/// Generate, serialize, parse and assemble a synthetic dataset, as the
/// command-line pipeline does.
pub fn assemble(cfg: &SynthConfig) -> Assembled {
    let data = generate_year(cfg).unwrap();
    let sensor = parse_sensor_reader(sensor_csv(&data.sensor).as_bytes(), Path::new("sensor.csv")).unwrap();
    let weather = parse_weather_reader(weather_csv(&data.weather).as_bytes(), Path::new("weather.csv")).unwrap();
    assemble_days(&sensor, &weather, &QpvtParams::default(), &AggregationConfig::default()).unwrap()
}

pub fn dataset(cfg: &SynthConfig, scheme: SchemeName) -> Dataset {
    let assembled = assemble(cfg);
    let fraction = assembled.masked_label_fraction();
    let split = split_train_test(assembled.days);
    let scheme = ThresholdScheme::default_for(scheme);
    Dataset {
        assembled_masked_fraction: fraction,
        train: label_days(split.train, &scheme),
        test: label_days(split.test, &scheme),
        scheme,
    }
}
