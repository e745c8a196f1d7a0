use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use pvtcast::cli::{checkpoint_name, RunManifest, SchemeRecord, WindowForecast};
use pvtcast::evaluation::{margin, EvaluationReport};
use pvtcast::ingestion::read_days;
use pvtcast::models::{Model, ModelConfig, ModelKind, Normalizer};
use pvtcast::quantization::{balanced_classes_scheme, ZERO_FLOOR};
use pvtcast::training::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn pvtcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvtcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pvtcast(dir, args);
    assert!(
        out.status.success(),
        "pvtcast {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    pvtcast(dir, args).status.code().unwrap()
}

/// A temp dir holding `c.toml` and a synthesized, prepared dataset.
fn prepared(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), config).unwrap();
    ok(dir.path(), &["--config", "c.toml", "synth", "--out", "raw"]);
    ok(
        dir.path(),
        &["--config", "c.toml", "prepare", "--sensor", "raw/sensor.csv", "--weather", "raw/weather.csv", "--out", "data"],
    );
    dir
}

/// Weather rows of the `n`-th anchored day of a synthesized file.
fn one_day(weather_csv: &Path, n: usize) -> String {
    let text = fs::read_to_string(weather_csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let rows: Vec<&str> = lines.skip(24 * n).take(24).collect();
    format!("{header}\n{}\n", rows.join("\n"))
}

#[test]
fn synth_sizes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "full"]);
    let truth = fs::read_to_string(d.join("full/truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 1 + 365 * 8);
    ok(d, &["synth", "--days", "10", "--out", "a"]);
    ok(d, &["synth", "--days", "10", "--out", "b"]);
    assert_eq!(fs::read_to_string(d.join("a/truth.csv")).unwrap().lines().count(), 1 + 10 * 8);
    let ma = RunManifest::load(&d.join("a/manifest-synth.json")).unwrap();
    let mb = RunManifest::load(&d.join("b/manifest-synth.json")).unwrap();
    assert_eq!(ma.outputs.len(), 3);
    for (x, y) in ma.outputs.iter().zip(&mb.outputs) {
        assert_eq!(x.sha256, y.sha256);
    }
    assert_eq!(ma.config.synth.days, 10);
    assert_eq!(ma.seeds, vec![42]);
}

#[test]
fn synth_unwritable_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("file"), "x").unwrap();
    assert_eq!(code(dir.path(), &["synth", "--days", "2", "--out", "file/sub"]), 2);
}

#[test]
fn prepare_records_thresholds() {
    let dir = prepared("[synth]\ndays = 60\n");
    let d = dir.path();
    let rec: SchemeRecord = serde_json::from_str(&fs::read_to_string(d.join("data/scheme.json")).unwrap()).unwrap();
    assert_eq!(rec.scheme.thresholds, [0.05, 0.21, 0.53, 1.05]);
    assert_eq!(rec.source, "fixed");

    ok(
        d,
        &["prepare", "--sensor", "raw/sensor.csv", "--weather", "raw/weather.csv", "--scheme", "balanced_classes", "--out", "bc"],
    );
    let rec: SchemeRecord = serde_json::from_str(&fs::read_to_string(d.join("bc/scheme.json")).unwrap()).unwrap();
    assert_eq!(rec.source, "fit_on_train");
    let train_values: Vec<f64> = read_days(&d.join("bc/train.jsonl"))
        .unwrap()
        .iter()
        .flat_map(|w| w.qpvt_kwh.iter().zip(&w.label_mask).filter(|(_, m)| **m).map(|(q, _)| *q).collect::<Vec<_>>())
        .collect();
    assert_eq!(rec.scheme, balanced_classes_scheme(&train_values, ZERO_FLOOR).unwrap());
}

#[test]
fn prepare_input_errors_exit_2() {
    let dir = prepared("[synth]\ndays = 5\n");
    let d = dir.path();
    assert_eq!(
        code(d, &["prepare", "--sensor", "raw/sensor.csv", "--weather", "raw/nope.csv", "--out", "x"]),
        2
    );
    assert_eq!(
        code(d, &["prepare", "--sensor", "raw/weather.csv", "--weather", "raw/sensor.csv", "--out", "x"]),
        2
    );
    fs::write(d.join("bad.toml"), "[train]\nlearning_rate = -1.0\n").unwrap();
    assert_eq!(
        code(d, &["--config", "bad.toml", "prepare", "--sensor", "raw/sensor.csv", "--weather", "raw/weather.csv", "--out", "x"]),
        2
    );
}

#[test]
fn train_outputs_and_errors() {
    let dir = prepared("[synth]\ndays = 40\n[train]\nepochs = 2\n");
    let d = dir.path();
    assert_eq!(code(d, &["train", "--data", "data", "--model", "lstm", "--out", "ck"]), 2);

    ok(d, &["--config", "c.toml", "train", "--data", "data", "--model", "mtan", "--jobs", "3", "--out", "ck"]);
    for seed in 1..=6 {
        assert!(d.join("ck").join(checkpoint_name(ModelKind::Mtan, seed)).exists());
        let curve = fs::read_to_string(d.join(format!("ck/mtan-seed{seed}-loss.csv"))).unwrap();
        assert_eq!(curve.lines().count(), 3);
    }

    ok(d, &["train", "--data", "data", "--model", "cyctime", "--seeds", "4", "--epochs", "0", "--out", "zero"]);
    let curve = fs::read_to_string(d.join("zero/cyctime-seed4-loss.csv")).unwrap();
    assert_eq!(curve, "epoch,raw_loss,normalized_loss\n");
    let ckpt = Checkpoint::load(&d.join("zero").join(checkpoint_name(ModelKind::Cyctime, 4))).unwrap();
    assert_eq!((ckpt.epochs_run, ckpt.best_epoch), (0, 0));
    let fresh = Model::new(ckpt.model.clone(), ckpt.features, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(ckpt.restore().unwrap().params, fresh.params);
}

#[test]
fn rnn_on_toy_set_is_quick() {
    let dir = prepared("[synth]\ndays = 3\n[train]\nseeds = [1]\nvalidation_fraction = 0.0\n");
    let start = Instant::now();
    ok(dir.path(), &["--config", "c.toml", "train", "--data", "data", "--model", "rnn", "--out", "ck"]);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn evaluate_stub_and_mismatch() {
    let dir = prepared("[synth]\ndays = 45\npeak_irradiance = 0.0\n");
    let d = dir.path();
    // always answers class 0, which is right on a sunless dataset
    let train = read_days(&d.join("data/train.jsonl")).unwrap();
    let rec: SchemeRecord = serde_json::from_str(&fs::read_to_string(d.join("data/scheme.json")).unwrap()).unwrap();
    let mut model = Model::new(ModelConfig::default_for(ModelKind::Rnn), 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for id in 0..model.params.len() {
        model.params.value_mut(id).fill(0.0);
    }
    let b = model.params.id("classifier.b").unwrap();
    model.params.value_mut(b)[[0, 0]] = 5.0;
    fs::create_dir_all(d.join("stub")).unwrap();
    Checkpoint::from_model(&model, &Normalizer::fit(&train).unwrap(), &rec.scheme, 1)
        .save(&d.join("stub/rnn-seed1.ckpt.json"))
        .unwrap();

    ok(d, &["evaluate", "--data", "data", "--checkpoints", "stub", "--out", "r1"]);
    ok(d, &["evaluate", "--data", "data", "--checkpoints", "stub/rnn-seed1.ckpt.json", "--out", "r2"]);
    let report: EvaluationReport = serde_json::from_str(&fs::read_to_string(d.join("r1/report.json")).unwrap()).unwrap();
    let m = report.model(ModelKind::Rnn).unwrap();
    for (name, v) in &m.metrics {
        assert_eq!((v.mean, v.std), (1.0, 0.0), "{name}");
    }
    for f in ["report.json", "report.txt", "margin_buckets.csv", "class_distance.csv", "time_of_day.csv"] {
        assert_eq!(fs::read(d.join("r1").join(f)).unwrap(), fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }

    ok(
        d,
        &["prepare", "--sensor", "raw/sensor.csv", "--weather", "raw/weather.csv", "--scheme", "balanced_ranges", "--out", "br"],
    );
    assert_eq!(code(d, &["evaluate", "--data", "br", "--checkpoints", "stub", "--out", "r3"]), 2);
}

#[test]
fn predict_night_day_and_errors() {
    let dir = prepared("[synth]\ndays = 40\npeak_irradiance = 0.0\n[train]\nseeds = [1]\nepochs = 30\n");
    let d = dir.path();
    ok(d, &["--config", "c.toml", "train", "--data", "data", "--model", "rnn", "--out", "ck"]);
    fs::write(d.join("day.csv"), one_day(&d.join("raw/weather.csv"), 7)).unwrap();
    let printed = ok(
        d,
        &["predict", "--checkpoint", "ck/rnn-seed1.ckpt.json", "--weather", "day.csv", "--out", "f.json"],
    );
    assert_eq!(printed.lines().count(), 9);
    let forecast: Vec<WindowForecast> = serde_json::from_str(&fs::read_to_string(d.join("f.json")).unwrap()).unwrap();
    assert_eq!(forecast.len(), 8);
    for w in &forecast {
        assert_eq!(w.class, 0);
        let dist = pvtcast::domain::ClassDistribution::new(w.probabilities).unwrap();
        assert_eq!(w.margin, margin(&dist));
    }

    let day = fs::read_to_string(d.join("day.csv")).unwrap();
    let partial: Vec<&str> = day.lines().take(1 + 20).collect();
    fs::write(d.join("partial.csv"), partial.join("\n")).unwrap();
    let out = pvtcast(d, &["predict", "--checkpoint", "ck/rnn-seed1.ckpt.json", "--weather", "partial.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[7]"));

    fs::write(d.join("bad.csv"), "ts,temp\n2023-01-01T01:00:00+02:00,1\n").unwrap();
    assert_eq!(code(d, &["predict", "--checkpoint", "ck/rnn-seed1.ckpt.json", "--weather", "bad.csv"]), 2);
}
