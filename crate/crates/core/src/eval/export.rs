use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::MetricReport;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::Condition;

pub const SVG_SIZE: f64 = 600.0;
pub const PLOT_HALF_WIDTH: f64 = 4.0;
pub const POINT_RADIUS: f64 = 2.0;
pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const NULL_COLOR: &str = "#555555";

/// A 2-D point with the condition it was generated under.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
    pub class: Condition,
}

/// Zips a `[n, 2]` tensor with per-row conditions.
pub fn sample_points(points: &Tensor, conditions: &[Condition]) -> Result<Vec<SamplePoint>> {
    if points.cols() != 2 || points.rows() != conditions.len() {
        return Err(Error::Shape(format!(
            "expected [{}, 2] points, got {:?}",
            conditions.len(),
            points.shape()
        )));
    }
    Ok(conditions
        .iter()
        .enumerate()
        .map(|(i, &class)| SamplePoint {
            x: points.row(i)[0],
            y: points.row(i)[1],
            class,
        })
        .collect())
}

fn class_field(c: Condition) -> String {
    match c {
        Condition::Class(k) => k.to_string(),
        Condition::Null => "-1".into(),
    }
}

/// CSV with header `x,y,class`; unconditional samples carry class `-1`.
pub fn samples_csv(points: &[SamplePoint]) -> String {
    let mut out = String::from("x,y,class\n");
    for p in points {
        let _ = writeln!(out, "{:.15},{:.15},{}", p.x, p.y, class_field(p.class));
    }
    out
}

pub fn parse_samples_csv(text: &str) -> Result<Vec<SamplePoint>> {
    let mut lines = text.lines();
    if lines.next() != Some("x,y,class") {
        return Err(Error::Usage("samples file must start with header `x,y,class`".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Usage(format!("malformed samples row {}: `{line}`", i + 2));
            let mut f = line.split(',');
            let x = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let y = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let class = match f.next().and_then(|v| v.parse::<i64>().ok()).ok_or_else(bad)? {
                -1 => Condition::Null,
                k if k >= 0 => Condition::Class(k as usize),
                _ => return Err(bad()),
            };
            if f.next().is_some() {
                return Err(bad());
            }
            Ok(SamplePoint { x, y, class })
        })
        .collect()
}

fn to_px(v: f64) -> f64 {
    (v + PLOT_HALF_WIDTH) / (2.0 * PLOT_HALF_WIDTH) * SVG_SIZE
}

/// 600x600 scatter plot of the window `[-4, 4]²` with axes through the origin.
pub fn scatter_svg(points: &[SamplePoint]) -> String {
    let s = SVG_SIZE;
    let mid = s / 2.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{s}" height="{s}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="0" y1="{mid}" x2="{s}" y2="{mid}" stroke="black" stroke-width="1"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line x1="{mid}" y1="0" x2="{mid}" y2="{s}" stroke="black" stroke-width="1"/>"#
    );
    for p in points {
        let color = match p.class {
            Condition::Class(k) => PALETTE[k % PALETTE.len()],
            Condition::Null => NULL_COLOR,
        };
        let _ = writeln!(
            out,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{POINT_RADIUS}" fill="{color}"/>"#,
            to_px(p.x),
            s - to_px(p.y)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Paths written by [`export_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub samples: PathBuf,
    pub metrics: PathBuf,
    pub scatter: PathBuf,
}

/// Writes `samples.csv`, `metrics.json` and `scatter.svg` into `dir`.
pub fn export_report(report: &MetricReport, points: &[SamplePoint], dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        samples: dir.join("samples.csv"),
        metrics: dir.join("metrics.json"),
        scatter: dir.join("scatter.svg"),
    };
    write_file(&files.samples, samples_csv(points).as_bytes())?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(&files.metrics, format!("{json}\n").as_bytes())?;
    write_file(&files.scatter, scatter_svg(points).as_bytes())?;
    Ok(files)
}
