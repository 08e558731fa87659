//! Evaluation metrics: dense (MSE, LMSE, DSSIM), sparse (WHDR) and temporal (TCM).

mod dense;
mod tcm;
mod whdr;

pub use dense::*;
pub use tcm::*;
pub use whdr::*;

use std::path::Path;

use crate::error::Result;

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MetricRow {
    pub image: String,
    pub metric: String,
    pub albedo: f64,
    pub shading: f64,
    pub average: f64,
}

impl MetricRow {
    pub fn new(image: impl Into<String>, metric: impl Into<String>, albedo: f64, shading: f64) -> Self {
        Self { image: image.into(), metric: metric.into(), albedo, shading, average: 0.5 * (albedo + shading) }
    }
}

pub fn write_report(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of every metric column, keyed by metric name in first-seen order.
pub fn summarize(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut out: Vec<(MetricRow, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(m, _)| m.metric == r.metric) {
            Some((m, n)) => {
                m.albedo += r.albedo;
                m.shading += r.shading;
                *n += 1;
            }
            None => out.push((MetricRow::new("mean", r.metric.clone(), r.albedo, r.shading), 1)),
        }
    }
    out.into_iter()
        .map(|(m, n)| MetricRow::new("mean", m.metric, m.albedo / n as f64, m.shading / n as f64))
        .collect()
}
