//! Command-line pipeline: synth, prepare, train, evaluate, predict.
//!
//! Exit codes: 0 on success, 1 on an internal failure such as divergence,
//! 2 on bad input or usage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::domain::{ClassDistribution, SchemeName, ThresholdScheme, CLASSES, STEPS};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_model, evaluate_predictions, margin, predict_days, EvaluationReport};
use crate::ingestion::{
    assemble_days, assemble_prediction_day, parse_sensor_csv, parse_weather_csv, read_days, split_train_test,
    write_days,
};
use crate::models::ModelKind;
use crate::quantization::{balanced_classes_scheme, label_days, LabeledDay, ZERO_FLOOR};
use crate::report::write_report;
use crate::synthetic::{generate_year, write_dataset, SENSOR_FILE, TRUTH_FILE, WEATHER_FILE};
use crate::training::{train_all_seeds, Checkpoint};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SCHEME_FILE: &str = "scheme.json";
pub const CHECKPOINT_SUFFIX: &str = ".ckpt.json";

#[derive(Debug, Parser)]
#[command(name = "pvtcast", version, about = "Banded PVT heat production forecasting from weather data")]
pub struct Cli {
    /// TOML run configuration, or a manifest whose config snapshot is reused.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sensor and weather dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Days to generate (default 365).
        #[arg(long)]
        days: Option<usize>,
        /// Generator seed (default 42).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Assemble, split and label a dataset.
    Prepare {
        #[arg(long)]
        sensor: PathBuf,
        #[arg(long)]
        weather: PathBuf,
        /// Threshold scheme (default max_margins).
        #[arg(long)]
        scheme: Option<SchemeName>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model kind over the configured seeds.
    Train {
        /// Directory written by `prepare`.
        #[arg(long)]
        data: PathBuf,
        /// rnn, cyctime or mtan.
        #[arg(long)]
        model: ModelKind,
        /// Comma-separated seeds (default 1..=6).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints on the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint files, or directories searched for `*.ckpt.json`.
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write SVG bar charts.
        #[arg(long)]
        plots: bool,
    },
    /// Forecast the eight windows of one day of weather.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        weather: PathBuf,
        /// Write the forecast as JSON here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to repeat a command bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Command-line arguments after the program name.
    pub arguments: Vec<String>,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Threshold record written by `prepare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeRecord {
    pub scheme: ThresholdScheme,
    /// `fit_on_train` for balanced classes, `fixed` otherwise.
    pub source: String,
    pub train_days: usize,
    pub test_days: usize,
    pub incomplete_days: Vec<chrono::NaiveDate>,
    pub masked_label_fraction: f64,
}

/// One forecast window, as printed by `predict`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowForecast {
    pub window: usize,
    pub start: String,
    pub class: usize,
    /// Energy band of the class in kWh; `None` above the top threshold.
    pub band_kwh: (f64, Option<f64>),
    pub probabilities: [f64; CLASSES],
    pub margin: f64,
}

pub fn forecast_windows(day: &crate::domain::DayWindow, dists: &[ClassDistribution], scheme: &ThresholdScheme) -> Vec<WindowForecast> {
    dists
        .iter()
        .enumerate()
        .map(|(w, d)| {
            let class = d.argmax();
            let lo = if class == 0 { 0.0 } else { scheme.thresholds[class - 1] };
            let hi = scheme.thresholds.get(class).copied();
            WindowForecast {
                window: w,
                start: day.step_times[w].to_rfc3339(),
                class,
                band_kwh: (lo, hi),
                probabilities: d.probs,
                margin: margin(d),
            }
        })
        .collect()
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let arguments = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, arguments) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let cfg = RunManifest::load(p)?.config;
            cfg.validate()?;
            Ok(cfg)
        }
        Some(p) => RunConfig::load(p),
    }
}

pub fn run(cli: Cli, arguments: Vec<String>) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: String::new(),
        arguments,
        config: RunConfig::default(),
        seeds: Vec::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let (out_dir, name) = match cli.command {
        Command::Synth { out, days, seed } => {
            if let Some(d) = days {
                config.synth.days = d;
            }
            if let Some(s) = seed {
                config.synth.seed = s;
            }
            config.validate()?;
            manifest.seeds = vec![config.synth.seed];
            manifest.outputs = cmd_synth(&config, &out)?;
            (out, "manifest-synth.json".to_string())
        }
        Command::Prepare {
            sensor,
            weather,
            scheme,
            out,
        } => {
            if let Some(s) = scheme {
                config.train.scheme = s;
            }
            config.validate()?;
            manifest.inputs = vec![FileDigest::of(&sensor)?, FileDigest::of(&weather)?];
            manifest.outputs = cmd_prepare(&config, &sensor, &weather, &out)?;
            (out, "manifest-prepare.json".to_string())
        }
        Command::Train {
            data,
            model,
            seeds,
            epochs,
            jobs,
            out,
        } => {
            if let Some(s) = seeds {
                config.train.seeds = s;
            }
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            config.validate()?;
            manifest.seeds = config.train.seeds.clone();
            manifest.inputs = vec![FileDigest::of(&data.join(TRAIN_FILE))?, FileDigest::of(&data.join(SCHEME_FILE))?];
            manifest.outputs = cmd_train(&config, &data, model, jobs, &out)?;
            (out, format!("manifest-train-{model}.json"))
        }
        Command::Evaluate {
            data,
            checkpoints,
            out,
            plots,
        } => {
            let files = checkpoint_files(&checkpoints)?;
            manifest.inputs = std::iter::once(data.join(TEST_FILE))
                .chain(files.iter().cloned())
                .map(|p| FileDigest::of(&p))
                .collect::<Result<_>>()?;
            let (outputs, seeds) = cmd_evaluate(&config, &data, &files, &out, plots)?;
            manifest.outputs = outputs;
            manifest.seeds = seeds;
            (out, "manifest-evaluate.json".to_string())
        }
        Command::Predict {
            checkpoint,
            weather,
            out,
        } => {
            let forecast = cmd_predict(&config, &checkpoint, &weather)?;
            print!("{}", render_forecast(&forecast));
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&forecast).map_err(|e| Error::json("forecast", e))?;
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            return Ok(());
        }
    };
    manifest.command = name.trim_start_matches("manifest-").trim_end_matches(".json").to_string();
    manifest.config = config;
    let path = out_dir.join(name);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths.iter().map(|p| FileDigest::of(p)).collect()
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<Vec<FileDigest>> {
    create_dir(out)?;
    let data = generate_year(&config.synth)?;
    write_dataset(&data, out)?;
    println!(
        "synth: {} days, {} sensor rows, {} weather rows -> {}",
        config.synth.days,
        data.sensor.len(),
        data.weather.len(),
        out.display()
    );
    digests(&[out.join(SENSOR_FILE), out.join(WEATHER_FILE), out.join(TRUTH_FILE)])
}

pub fn cmd_prepare(config: &RunConfig, sensor: &Path, weather: &Path, out: &Path) -> Result<Vec<FileDigest>> {
    let sensor_rows = parse_sensor_csv(sensor)?;
    let weather_rows = parse_weather_csv(weather)?;
    let assembled = assemble_days(&sensor_rows, &weather_rows, &config.qpvt, &config.aggregation)?;
    if assembled.days.is_empty() {
        return Err(Error::Empty("no complete day in the weather data".into()));
    }
    let masked_label_fraction = assembled.masked_label_fraction();
    let split = split_train_test(assembled.days);
    let name = config.train.scheme;
    let (scheme, source) = match name {
        SchemeName::BalancedClasses => {
            let values: Vec<f64> = split
                .train
                .iter()
                .flat_map(|d| d.qpvt_kwh.iter().zip(&d.label_mask).filter(|(_, m)| **m).map(|(q, _)| *q))
                .collect();
            (balanced_classes_scheme(&values, ZERO_FLOOR)?, "fit_on_train")
        }
        _ => (config.fixed_scheme(name)?, "fixed"),
    };
    create_dir(out)?;
    let record = SchemeRecord {
        scheme: scheme.clone(),
        source: source.to_string(),
        train_days: split.train.len(),
        test_days: split.test.len(),
        incomplete_days: assembled.incomplete.clone(),
        masked_label_fraction,
    };
    let paths = [out.join(TRAIN_FILE), out.join(TEST_FILE), out.join(SCHEME_FILE)];
    write_days(&paths[0], &split.train)?;
    write_days(&paths[1], &split.test)?;
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::json("scheme record", e))?;
    fs::write(&paths[2], text).map_err(|e| Error::io(&paths[2], e))?;
    println!(
        "prepare: {} train / {} test days, scheme {} {:?}, {:.1}% of windows masked",
        split.train.len(),
        split.test.len(),
        scheme.name,
        scheme.thresholds,
        100.0 * masked_label_fraction
    );
    digests(&paths)
}

pub fn load_scheme(data: &Path) -> Result<SchemeRecord> {
    let path = data.join(SCHEME_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn load_labeled(path: &Path, scheme: &ThresholdScheme) -> Result<Vec<LabeledDay>> {
    Ok(label_days(read_days(path)?, scheme))
}

pub fn checkpoint_name(kind: ModelKind, seed: u64) -> String {
    format!("{kind}-seed{seed}{CHECKPOINT_SUFFIX}")
}

pub fn loss_curve_name(kind: ModelKind, seed: u64) -> String {
    format!("{kind}-seed{seed}-loss.csv")
}

pub fn cmd_train(config: &RunConfig, data: &Path, kind: ModelKind, jobs: usize, out: &Path) -> Result<Vec<FileDigest>> {
    let record = load_scheme(data)?;
    if record.scheme.name != config.train.scheme {
        log::info!(
            "dataset was prepared with {}; training uses it rather than {}",
            record.scheme.name,
            config.train.scheme
        );
    }
    let train = load_labeled(&data.join(TRAIN_FILE), &record.scheme)?;
    let model_cfg = config.model(kind)?;
    create_dir(out)?;
    let runs = train_all_seeds(&model_cfg, &train, &config.train, &record.scheme, jobs)?;
    let mut written = Vec::new();
    let mut first_error = None;
    for run in runs {
        match run.result {
            Ok(outcome) => {
                let ckpt = out.join(checkpoint_name(kind, run.seed));
                let curve = out.join(loss_curve_name(kind, run.seed));
                outcome.checkpoint.save(&ckpt)?;
                outcome.curve.write_csv(&curve)?;
                println!(
                    "train: {kind} seed {} ran {} epochs, kept epoch {}, final normalized loss {:.3}",
                    run.seed,
                    outcome.checkpoint.epochs_run,
                    outcome.checkpoint.best_epoch,
                    outcome.curve.normalized().last().copied().unwrap_or(f64::NAN)
                );
                written.push(ckpt);
                written.push(curve);
            }
            Err(e) => {
                eprintln!("train: {kind} seed {} failed: {e}", run.seed);
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => digests(&written),
    }
}

/// Expand directories into their checkpoint files, sorted by name.
pub fn checkpoint_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(CHECKPOINT_SUFFIX))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("no checkpoint files found".into()));
    }
    Ok(out)
}

pub fn cmd_evaluate(
    config: &RunConfig,
    data: &Path,
    checkpoints: &[PathBuf],
    out: &Path,
    plots: bool,
) -> Result<(Vec<FileDigest>, Vec<u64>)> {
    let record = load_scheme(data)?;
    let test = load_labeled(&data.join(TEST_FILE), &record.scheme)?;
    let mut by_kind: BTreeMap<usize, Vec<Checkpoint>> = BTreeMap::new();
    for path in checkpoints {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.scheme != record.scheme {
            return Err(Error::Incompatible(format!(
                "{} was trained on scheme {} {:?}, the dataset uses {} {:?}",
                path.display(),
                ckpt.scheme.name,
                ckpt.scheme.thresholds,
                record.scheme.name,
                record.scheme.thresholds
            )));
        }
        let slot = ModelKind::ALL.iter().position(|k| *k == ckpt.model.kind).expect("known kind");
        by_kind.entry(slot).or_default().push(ckpt);
    }
    let mut reports = Vec::new();
    let mut seeds = Vec::new();
    for (_, mut group) in by_kind {
        group.sort_by_key(|c| c.seed);
        let kind = group[0].model.kind;
        let mut evals = Vec::new();
        for ckpt in &group {
            if evals.iter().any(|e: &crate::evaluation::SeedEvaluation| e.seed == ckpt.seed) {
                return Err(Error::Incompatible(format!("two {kind} checkpoints share seed {}", ckpt.seed)));
            }
            let model = ckpt.restore()?;
            let preds = predict_days(&model, &ckpt.normalizer, &test)?;
            evals.push(evaluate_predictions(ckpt.seed, &preds)?);
            seeds.push(ckpt.seed);
        }
        reports.push(aggregate_model(kind, evals, &config.evaluation.margin_edges)?);
    }
    seeds.sort_unstable();
    seeds.dedup();
    let test_steps = test.iter().map(|d| d.observed_labels().count()).sum();
    let report = EvaluationReport::new(record.scheme.clone(), test_steps, reports);
    let written = write_report(&report, out, plots)?;
    print!("{}", crate::report::render_table(&report));
    Ok((digests(&written)?, seeds))
}

pub fn cmd_predict(config: &RunConfig, checkpoint: &Path, weather: &Path) -> Result<Vec<WindowForecast>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let rows = parse_weather_csv(weather)?;
    let day = assemble_prediction_day(&rows, &config.aggregation)?;
    let model = ckpt.restore()?;
    let dists = model.predict(&day, &ckpt.normalizer)?;
    Ok(forecast_windows(&day, &dists, &ckpt.scheme))
}

pub fn render_forecast(windows: &[WindowForecast]) -> String {
    let mut out = String::from("window  start                      class  band (kWh)     margin  probabilities\n");
    for w in windows {
        let band = match w.band_kwh.1 {
            Some(hi) => format!("{:.2}-{:.2}", w.band_kwh.0, hi),
            None => format!(">= {:.2}", w.band_kwh.0),
        };
        let probs: Vec<String> = w.probabilities.iter().map(|p| format!("{p:.3}")).collect();
        out.push_str(&format!(
            "{:<7} {:<26} {:<6} {:<14} {:<7.3} {}\n",
            w.window,
            w.start,
            w.class,
            band,
            w.margin,
            probs.join(" ")
        ));
    }
    debug_assert!(windows.len() <= STEPS);
    out
}
