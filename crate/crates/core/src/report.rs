//! Plot-ready CSV output for training logs and stability studies.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::{StabilityReport, TrainRunRecord};

/// Anything [`emit_plot_data`] can write.
#[derive(Clone, Copy, Debug)]
pub enum PlotData<'a> {
    Train(&'a TrainRunRecord),
    Stability(&'a StabilityReport),
}

impl<'a> From<&'a TrainRunRecord> for PlotData<'a> {
    fn from(r: &'a TrainRunRecord) -> Self {
        PlotData::Train(r)
    }
}

impl<'a> From<&'a StabilityReport> for PlotData<'a> {
    fn from(r: &'a StabilityReport) -> Self {
        PlotData::Stability(r)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Path of the per-strategy curve derived from `path`:
/// `dir/stability.csv` becomes `dir/stability_full.csv`.
pub fn strategy_path(path: &Path, strategy: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("stability");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_{strategy}.{ext}"))
}

/// Writes the loss curve(s) as CSV and returns the files written.
///
/// A training record becomes one `step,lr,total,<terms>` file at `path`.
/// A stability report becomes one `epoch,mean_loss,var_loss` file per
/// strategy next to `path` (see [`strategy_path`]) plus a summary at `path`.
pub fn emit_plot_data<'a>(data: impl Into<PlotData<'a>>, path: &Path) -> Result<Vec<PathBuf>> {
    match data.into() {
        PlotData::Train(r) => {
            write(path, &r.to_csv())?;
            Ok(vec![path.to_path_buf()])
        }
        PlotData::Stability(r) => {
            let mut written = Vec::new();
            for s in &r.strategies {
                let p = strategy_path(path, s.strategy.as_str());
                write(&p, &s.to_csv())?;
                written.push(p);
            }
            write(path, &r.summary_csv())?;
            written.push(path.to_path_buf());
            Ok(written)
        }
    }
}
