//! CSV tables and SVG scatter plots.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use subflow::clustering::SubmodeTable;
use subflow::mixture::{MixtureSpec, Vec2};
use subflow::objectives::LossRecord;
use subflow::sampler::GenerationBatch;

use crate::CliError;

pub const SVG_SIZE: f64 = 800.0;
pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const REAL_FILL: &str = "#b0b0b0";

/// One evaluation, as appended to a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub nfe: usize,
    pub w: f64,
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub mode_tv: f64,
    pub coverage_count: usize,
    pub field_rmse: Option<f64>,
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(CliError::from)
}

pub fn write_samples(path: &Path, batch: &GenerationBatch) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["sample_index", "class_id", "submode_id", "x", "y"])?;
    for (i, s) in batch.samples.iter().enumerate() {
        let k = s.submode_id.map(|k| k.to_string()).unwrap_or_default();
        w.write_record([i.to_string(), s.class_id.to_string(), k, s.x[0].to_string(), s.x[1].to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// One row per sample and Euler step; `step = 0` is the source point.
pub fn write_trajectories(path: &Path, batch: &GenerationBatch) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["sample_index", "step", "x", "y"])?;
    for (i, s) in batch.samples.iter().enumerate() {
        for (step, p) in s.trajectory.iter().flatten().enumerate() {
            w.write_record([i.to_string(), step.to_string(), p[0].to_string(), p[1].to_string()])?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn write_loss(path: &Path, curve: &[LossRecord]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["step", "loss"])?;
    for r in curve {
        w.write_record([r.step.to_string(), r.loss.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn write_assignments(path: &Path, table: &SubmodeTable) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["sample_index", "class_id", "submode_id"])?;
    for (i, (c, k)) in table.sample_classes.iter().zip(&table.assignments).enumerate() {
        w.write_record([i.to_string(), c.to_string(), k.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn write_priors(path: &Path, table: &SubmodeTable) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(["class_id", "submode_id", "count", "prior"])?;
    for (c, cc) in &table.classes {
        for (k, (n, p)) in cc.counts.iter().zip(cc.prior()).enumerate() {
            w.write_record([c.to_string(), k.to_string(), n.to_string(), p.to_string()])?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<(), CliError> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn read_metric_rows(path: &Path) -> Result<Vec<MetricRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<MetricRow>, _>>()?)
}

/// Reads a feature CSV with a header row. The column named `class` holds the
/// class label; every other column is a feature.
pub fn read_features(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>), CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let class_col = header
        .iter()
        .position(|h| h.trim() == "class")
        .ok_or_else(|| CliError::Core(subflow::Error::Csv { line: 1, msg: "no `class` column".into() }))?;
    let mut feats = Vec::new();
    let mut classes = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let err = |msg: String| CliError::Core(subflow::Error::Csv { line, msg });
        let mut row = Vec::with_capacity(rec.len().saturating_sub(1));
        for (j, field) in rec.iter().enumerate() {
            let field = field.trim();
            if j == class_col {
                classes.push(field.parse().map_err(|_| err(format!("bad class label {field:?}")))?);
            } else {
                row.push(field.parse().map_err(|_| err(format!("bad feature value {field:?}")))?);
            }
        }
        feats.push(row);
    }
    Ok((feats, classes))
}

/// Scatter plot over the spec's 3σ bounding box: `real` in grey, generated
/// points filled by sub-mode index (class index when there is none).
pub fn scatter_svg(spec: &MixtureSpec, real: &[Vec2], batch: &GenerationBatch, title: &str) -> String {
    let (lo, hi) = spec.bounding_box(3.0);
    let sx = SVG_SIZE / (hi[0] - lo[0]);
    let sy = SVG_SIZE / (hi[1] - lo[1]);
    let map = |p: Vec2| ((p[0] - lo[0]) * sx, SVG_SIZE - (p[1] - lo[1]) * sy);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n",
        SVG_SIZE
    ));
    s.push_str(&format!("<rect width=\"{0}\" height=\"{0}\" fill=\"white\"/>\n", SVG_SIZE));
    s.push_str(&format!("<title>{}</title>\n", escape(title)));
    for &p in real {
        let (x, y) = map(p);
        s.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"1.5\" fill=\"{REAL_FILL}\"/>\n"));
    }
    for g in &batch.samples {
        let (x, y) = map(g.x);
        let fill = PALETTE[g.submode_id.unwrap_or(g.class_id) % PALETTE.len()];
        s.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"1.5\" fill=\"{fill}\" fill-opacity=\"0.7\"/>\n"));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}
