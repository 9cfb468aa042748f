//! Evaluation metrics: best-of-N ADE/FDE, grid EMD via an exact
//! transportation solve, log-probability, and a Gaussian KDE baseline.

mod displacement;
mod emd;
mod grid;
mod kde;

pub use displacement::{ade, best_of_n, fde, mean_step_metric};
pub use emd::{emd, transport};
pub use grid::{DensityGrid, GridSpec};
pub use kde::Kde2;

use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// One metric value for one test item at one step (step 0 for whole-horizon
/// metrics such as ADE/FDE).
#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub item: usize,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// Writes records as `item_id,step,metric,value` CSV.
pub fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> crate::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "item_id,step,metric,value")?;
    for r in records {
        writeln!(f, "{},{},{},{}", r.item, r.step, r.metric, r.value)?;
    }
    Ok(())
}

/// Per-metric means over all records.
pub fn summarize(records: &[MetricRecord]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(r.metric.clone()).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
