//! Report emission: JSON, CSV and an SVG ROC overlay.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{write, RunReport};
use crate::score::SweepRow;

pub fn to_json(report: &RunReport) -> String {
    crate::pipeline::to_pretty_json(report)
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    series: &'a str,
    scope: &'a str,
    event_type: &'a str,
    level: u8,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    precision: f64,
    recall: f64,
    f1: f64,
}

impl<'a> CsvRow<'a> {
    fn new(series: &'a str, scope: &'a str, event_type: &'a str, row: &SweepRow<f64>) -> Self {
        CsvRow {
            series,
            scope,
            event_type,
            level: row.level,
            tp: row.tp,
            fp: row.fp,
            fn_: row.fn_,
            precision: row.precision,
            recall: row.recall,
            f1: row.f1,
        }
    }
}

/// One row per (topic, scope, level); `scope` is `micro` or `type`.
pub fn to_csv(report: &RunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    for topic in &report.topics {
        for row in &topic.topic_micro {
            w.serialize(CsvRow::new(&topic.topic, "micro", "", row)).map_err(csv_err)?;
        }
        for (ty, rows) in &topic.per_type {
            for row in rows {
                w.serialize(CsvRow::new(&topic.topic, "type", ty, row)).map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const SIZE: f64 = 400.0;
const MARGIN: f64 = 50.0;
const MAX_RADIUS: f64 = 14.0;

/// ROC overlay of every topic. Marker area is proportional to the number of
/// predictions at the level; one scale is shared by all topics.
pub fn to_svg(report: &RunReport) -> String {
    let max_count = report
        .topics
        .iter()
        .flat_map(|t| t.roc_points.iter().map(|p| p.count))
        .max()
        .unwrap_or(0);
    let k = if max_count == 0 {
        0.0
    } else {
        MAX_RADIUS / (max_count as f64).sqrt()
    };
    let x = |v: f64| MARGIN + v * SIZE;
    let y = |v: f64| MARGIN + (1.0 - v) * SIZE;
    let width = SIZE + 2.0 * MARGIN + 160.0;
    let height = SIZE + 2.0 * MARGIN;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#000"/>"##,
        x(0.0),
        y(1.0)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{tick}</text>"#, x(tick), y(0.0) + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#, x(0.0) - 6.0, y(tick) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">false positive rate</text>"#,
        x(0.5),
        y(0.0) + 34.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">true positive rate</text>"#,
        y(0.5),
        y(0.5)
    );

    for (i, topic) in report.topics.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<_> = topic.roc_points.iter().filter(|p| p.count > 0).collect();
        if !pts.is_empty() {
            let path: Vec<String> = std::iter::once((0.0, 0.0))
                .chain(pts.iter().map(|p| (p.fp_rate, p.tp_rate)))
                .map(|(fx, fy)| format!("{:.2},{:.2}", x(fx), y(fy)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        for p in pts {
            let r = k * (p.count as f64).sqrt();
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="{color}" fill-opacity="0.5" stroke="{color}"><title>{} level {}: {} predictions</title></circle>"#,
                x(p.fp_rate),
                y(p.tp_rate),
                r,
                escape(&topic.topic),
                p.level,
                p.count
            );
        }
        let ly = MARGIN + 10.0 + 20.0 * i as f64;
        let lx = x(1.0) + 20.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="12" height="12" fill="{color}"/>"#, ly - 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 18.0, escape(&topic.topic));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `report.json`, `report.csv` and `roc.svg` into `dir`.
pub fn write_all(report: &RunReport, dir: &Path) -> Result<()> {
    write(&dir.join("report.json"), &to_json(report))?;
    write(&dir.join("report.csv"), &to_csv(report)?)?;
    write(&dir.join("roc.svg"), &to_svg(report))
}

/// Plain-text summary: one line per topic with the best level and AUC.
pub fn to_table(report: &RunReport) -> String {
    let mut s = format!(
        "{:<12} {:>5} {:>9} {:>7} {:>8} {:>8} {:>6}  {}\n",
        "topic", "best", "precision", "recall", "macro_f1", "micro_f1", "auc", "auc_status"
    );
    for t in &report.topics {
        let auc = t.auc.value.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let status = serde_json::to_value(t.auc.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>9.3} {:>7.3} {:>8.3} {:>8.3} {:>6}  {status}",
            t.topic, t.best.level, t.best.precision, t.best.recall, t.best.f1, t.best.micro_f1, auc
        );
    }
    for sk in &report.skipped_topics {
        let _ = writeln!(s, "{:<12} skipped: {}", sk.topic, sk.reason);
    }
    s
}
