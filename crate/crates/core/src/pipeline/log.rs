use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::Phase;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    /// Seconds since the phase started.
    pub wall_time: f64,
}

/// `train_log.jsonl` writer. Opening it for a phase drops that phase's
/// earlier lines and keeps the others, so re-running a phase replaces its log.
#[derive(Debug, Default)]
pub struct TrainLog {
    path: Option<PathBuf>,
    lines: Vec<LogLine>,
}

impl TrainLog {
    /// A log kept only in memory.
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path, phase: Phase) -> Result<Self> {
        let mut kept = Vec::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let parsed: LogLine = serde_json::from_str(line)
                    .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
                if parsed.phase != phase {
                    kept.push(parsed);
                }
            }
        }
        let mut text = String::new();
        for l in &kept {
            text.push_str(&serde_json::to_string(l)?);
            text.push('\n');
        }
        write_atomic(path, text.as_bytes())?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            lines: Vec::new(),
        })
    }

    pub fn record(&mut self, line: LogLine) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(path, e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    /// Lines recorded through this handle.
    pub fn lines(&self) -> &[LogLine] {
        &self.lines
    }

    pub fn read(path: &Path) -> Result<Vec<LogLine>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
            .collect()
    }
}
