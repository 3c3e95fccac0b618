//! Long-format training metrics.

use std::fs::OpenOptions;
use std::path::Path;

use crate::error::Result;
use crate::eval::csv_err;

pub const METRICS_HEADER: [&str; 5] = ["run_id", "stage", "epoch", "metric", "value"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub stage: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

/// Appends rows to `path`, writing the header if the file is new or empty.
pub fn append_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.write_record([
            r.run_id.as_str(),
            &r.stage,
            &r.epoch.to_string(),
            &r.metric,
            &r.value.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
