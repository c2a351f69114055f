//! Per-run summary file (`summary.json`): the numbers `report` tabulates.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub hit_fraction: f64,
    pub chance_rate: f64,
    pub hits: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub variant: String,
    /// Epochs trained when the summary was written.
    pub epochs: usize,
    pub per_video_acc: f64,
    pub per_class_acc: f64,
    /// Present for the query-decoder variant only.
    pub localization: Option<LocalizationSummary>,
}

impl RunSummary {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Data(format!("summary serialisation: {e}")))?;
        fs::write(path, json + "\n")
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("summary {}: {e}", path.display())))
    }
}
