//! Training run-log: one JSON record per line, header first.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cospeech_core::objectives::LossBreakdown;

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHeader {
    pub config_hash: String,
    pub seed: u64,
    pub clips: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

pub struct RunLog {
    file: fs::File,
}

impl RunLog {
    pub fn create(path: &Path, header: &RunHeader) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        let line = serde_json::to_string(header).expect("header serializes");
        writeln!(file, "{line}")?;
        Ok(RunLog { file })
    }

    pub fn record(&mut self, record: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

/// Parse a run-log back into header and epoch records.
pub fn read_runlog(path: &Path) -> Result<(RunHeader, Vec<EpochRecord>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: RunHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| crate::error::CliError::Data("empty run-log".into()))?,
    )
    .map_err(|e| crate::error::CliError::Data(e.to_string()))?;
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line).map_err(|e| crate::error::CliError::Data(e.to_string()))?,
        );
    }
    Ok((header, records))
}
