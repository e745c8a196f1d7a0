//! Rendering of evaluation reports: JSON, a text table, CSVs and SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::domain::CLASSES;
use crate::error::{Error, Result};
use crate::evaluation::{EvaluationReport, MeanStd, METRIC_NAMES};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const MARGIN_CSV: &str = "margin_buckets.csv";
pub const DISTANCE_CSV: &str = "class_distance.csv";
pub const TIME_OF_DAY_CSV: &str = "time_of_day.csv";
pub const MARGIN_SVG: &str = "margin_buckets.svg";
pub const DISTANCE_SVG: &str = "class_distance.svg";

const ROW_LABELS: [&str; 9] = [
    "Precision (Micro)",
    "Recall (Micro)",
    "F-Score (Micro)",
    "Precision (Macro)",
    "Recall (Macro)",
    "F-Score (Macro)",
    "Precision (Weighted)",
    "Recall (Weighted)",
    "F-Score (Weighted)",
];

fn pm(v: MeanStd) -> String {
    format!("{:.3} ± {:.3}", v.mean, v.std)
}

pub fn to_json(report: &EvaluationReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::json("report", e))
}

/// Metrics as rows, models as columns.
pub fn render_table(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let t = &report.scheme.thresholds;
    let _ = writeln!(
        out,
        "Scheme: {} (thresholds {}, {}, {}, {} kWh), {} test steps",
        report.scheme.name, t[0], t[1], t[2], t[3], report.test_steps
    );
    let label_w = ROW_LABELS.iter().map(|l| l.chars().count()).max().unwrap_or(0);
    let col_w = 15;
    let _ = write!(out, "{:label_w$}", "Metric");
    for m in &report.models {
        let _ = write!(out, " | {:>col_w$}", m.model.display_name());
    }
    out.push('\n');
    let _ = write!(out, "{}", "-".repeat(label_w));
    for _ in &report.models {
        let _ = write!(out, "-+-{}", "-".repeat(col_w));
    }
    out.push('\n');
    for (label, name) in ROW_LABELS.iter().zip(METRIC_NAMES) {
        let _ = write!(out, "{label:label_w$}");
        for m in &report.models {
            let _ = write!(out, " | {:>col_w$}", pm(m.metric(name)));
        }
        out.push('\n');
    }
    out.push('\n');
    for m in &report.models {
        let _ = writeln!(
            out,
            "{}: seeds {:?}; errors in early daylight {}%, in main production {}%",
            m.model.display_name(),
            m.seeds,
            pm(m.early_error_pct),
            pm(m.main_error_pct)
        );
        let dropped: usize = m.per_seed.iter().map(|s| s.dropped_days.len()).sum();
        if dropped > 0 {
            let _ = writeln!(out, "  {dropped} test day(s) dropped over all seeds: a feature was never observed");
        }
        if m.excluded_classes.iter().any(|c| !c.is_empty()) {
            let _ = writeln!(out, "  classes without support, skipped in macro averages: {:?}", m.excluded_classes);
        }
    }
    for note in &report.notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn margin_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("model,lower_bound,count,correct_pct,wrong_pct\n");
    for m in &report.models {
        for b in &m.margin_buckets {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.model,
                b.lower_bound,
                b.count,
                opt(b.correct_pct),
                opt(b.wrong_pct)
            );
        }
    }
    out
}

pub fn class_distance_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("model,max_distance,mean_pct,std_pct\n");
    for m in &report.models {
        for (d, v) in m.class_distance_cdf.iter().enumerate() {
            let _ = writeln!(out, "{},{d},{},{}", m.model, v.mean, v.std);
        }
    }
    out
}

pub fn time_of_day_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("model,bin,mean_pct,std_pct\n");
    for m in &report.models {
        for (bin, v) in [("early", m.early_error_pct), ("main", m.main_error_pct)] {
            let _ = writeln!(out, "{},{bin},{},{}", m.model, v.mean, v.std);
        }
    }
    out
}

const PALETTE: [&str; 3] = ["#4c72b0", "#dd8452", "#55a868"];

/// Grouped bar chart on a 0–100 % axis.
fn bar_chart(title: &str, x_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (720.0, 360.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 60.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let y = |pct: f64| top + plot_h * (1.0 - pct / 100.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{ty:.1}" x2="{}" y2="{ty:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{tick}</text>"##,
            w - right,
            left - 6.0,
            ty + 4.0
        );
    }
    for (g, cat) in categories.iter().enumerate() {
        let gx = left + group_w * g as f64;
        for (k, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(g).copied().unwrap_or(0.0).clamp(0.0, 100.0);
            let bx = gx + group_w * 0.1 + bar_w * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{bx:.1}" y="{:.1}" width="{bar_w:.1}" height="{:.1}" fill="{}"/>"#,
                y(v),
                y(0.0) - y(v),
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{cat}</text>"#,
            gx + group_w / 2.0,
            y(0.0) + 16.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#333"/>"##,
        y(0.0),
        w - right
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#,
        left + plot_w / 2.0,
        h - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">%</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (k, (name, _)) in series.iter().enumerate() {
        let lx = w - right - 110.0;
        let ly = top + 6.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{ly}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{name}</text>"#,
            PALETTE[k % PALETTE.len()],
            lx + 14.0,
            ly + 9.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Accuracy per margin lower bound, one bar per model.
pub fn margin_svg(report: &EvaluationReport) -> String {
    let Some(first) = report.models.first() else {
        return bar_chart("Accuracy by likelihood margin", "margin lower bound", &[], &[]);
    };
    let cats: Vec<String> = first.margin_buckets.iter().map(|b| format!("{:.1}", b.lower_bound)).collect();
    let series: Vec<(String, Vec<f64>)> = report
        .models
        .iter()
        .map(|m| {
            let vals = m.margin_buckets.iter().map(|b| b.correct_pct.unwrap_or(0.0)).collect();
            (m.model.display_name().to_string(), vals)
        })
        .collect();
    bar_chart("Accuracy by likelihood margin", "margin lower bound", &cats, &series)
}

/// Share of predictions within N bands of the truth.
pub fn class_distance_svg(report: &EvaluationReport) -> String {
    let cats: Vec<String> = (0..CLASSES).map(|d| format!("≤ {d}")).collect();
    let series: Vec<(String, Vec<f64>)> = report
        .models
        .iter()
        .map(|m| {
            (
                m.model.display_name().to_string(),
                m.class_distance_cdf.iter().map(|v| v.mean).collect(),
            )
        })
        .collect();
    bar_chart("Predictions within N classes of the truth", "classes away", &cats, &series)
}

fn write(dir: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Write every rendering of `report` into `dir`; returns the paths written.
pub fn write_report(report: &EvaluationReport, dir: &Path, plots: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    write(dir, REPORT_JSON, &to_json(report)?, &mut written)?;
    write(dir, REPORT_TEXT, &render_table(report), &mut written)?;
    write(dir, MARGIN_CSV, &margin_csv(report), &mut written)?;
    write(dir, DISTANCE_CSV, &class_distance_csv(report), &mut written)?;
    write(dir, TIME_OF_DAY_CSV, &time_of_day_csv(report), &mut written)?;
    if plots {
        write(dir, MARGIN_SVG, &margin_svg(report), &mut written)?;
        write(dir, DISTANCE_SVG, &class_distance_svg(report), &mut written)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClassDistribution, SchemeName, ThresholdScheme, Timestamp};
    use crate::evaluation::{aggregate_model, evaluate_records, PredictionRecord, DEFAULT_MARGIN_EDGES};
    use crate::models::ModelKind;

    fn sample() -> EvaluationReport {
        let date = chrono::NaiveDate::from_ymd_opt(2023, 5, 30).unwrap();
        let recs: Vec<PredictionRecord> = (0..8)
            .map(|s| PredictionRecord {
                date,
                step: s,
                start: Timestamp::new(1_685_404_800 + 10_800 * s as i64, 120),
                truth: s % 5,
                dist: ClassDistribution::one_hot(if s == 3 { 0 } else { s % 5 }),
            })
            .collect();
        let seeds = vec![evaluate_records(1, &recs).unwrap(), evaluate_records(2, &recs).unwrap()];
        let m = aggregate_model(ModelKind::Mtan, seeds, &DEFAULT_MARGIN_EDGES).unwrap();
        EvaluationReport::new(ThresholdScheme::default_for(SchemeName::MaxMargins), 8, vec![m])
    }

    #[test]
    fn table_has_every_metric_row() {
        let text = render_table(&sample());
        for label in ROW_LABELS {
            assert!(text.contains(label), "{label}");
        }
        assert!(text.contains("0.875 ± 0.000"));
        assert!(text.contains("mTAN"));
    }

    #[test]
    fn csv_shapes() {
        let r = sample();
        assert_eq!(margin_csv(&r).lines().count(), 1 + DEFAULT_MARGIN_EDGES.len());
        assert_eq!(class_distance_csv(&r).lines().count(), 1 + CLASSES);
        assert_eq!(time_of_day_csv(&r).lines().count(), 3);
        let last = class_distance_csv(&r).lines().last().unwrap().to_string();
        assert_eq!(last, "mtan,4,100,0");
    }

    #[test]
    fn svg_is_well_formed() {
        let r = sample();
        for svg in [margin_svg(&r), class_distance_svg(&r)] {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert_eq!(svg.matches("<rect").count(), svg.matches("/>").count() - svg.matches("<line").count());
        }
    }

    #[test]
    fn written_files_are_deterministic() {
        let r = sample();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let wa = write_report(&r, a.path(), true).unwrap();
        write_report(&r, b.path(), true).unwrap();
        assert_eq!(wa.len(), 7);
        for p in wa {
            let name = p.file_name().unwrap();
            assert_eq!(fs::read(&p).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let back: EvaluationReport = serde_json::from_str(&fs::read_to_string(a.path().join(REPORT_JSON)).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
