//! Newline-delimited JSON metrics streams.
//!
//! Timestamps are logical (a per-stream sequence number) so that identical
//! runs produce byte-identical streams.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AePretrain,
    Train,
    Probe,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub timestamp: u64,
    pub config_hash: String,
    pub phase: Phase,
    pub block_id: usize,
    pub epoch: usize,
    pub step: usize,
    pub values: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn sort_key(&self) -> (usize, Phase, usize, usize) {
        (self.block_id, self.phase, self.epoch, self.step)
    }
}

/// Append-only writer; records are buffered and flushed by [`flush`].
///
/// [`flush`]: MetricsWriter::flush
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    run_id: String,
    config_hash: String,
    next_timestamp: u64,
    last_durable_epoch: Option<usize>,
}

impl MetricsWriter {
    /// Creates (truncating) the stream at `path`.
    pub fn create(path: &Path, run_id: &str, config_hash: &str) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_file(path, file, run_id, config_hash, 0))
    }

    /// Re-opens an existing stream for appending, continuing its timestamps.
    pub fn append(path: &Path, run_id: &str, config_hash: &str) -> Result<Self> {
        let (existing, _) = read_metrics(path)?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let next = existing.last().map_or(0, |r| r.timestamp + 1);
        Ok(Self::from_file(path, file, run_id, config_hash, next))
    }

    fn from_file(path: &Path, file: File, run_id: &str, config_hash: &str, next: u64) -> Self {
        MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            next_timestamp: next,
            last_durable_epoch: None,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(
        &mut self,
        phase: Phase,
        block_id: usize,
        epoch: usize,
        step: usize,
        values: BTreeMap<String, f64>,
    ) -> Result<()> {
        let record = MetricsRecord {
            run_id: self.run_id.clone(),
            timestamp: self.next_timestamp,
            config_hash: self.config_hash.clone(),
            phase,
            block_id,
            epoch,
            step,
            values,
        };
        self.next_timestamp += 1;
        self.write_record(&record)
    }

    pub fn write_record(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}").map_err(|e| self.abort(e))
    }

    /// Flushes buffered records and marks `epoch` durable.
    pub fn flush(&mut self, epoch: usize) -> Result<()> {
        self.out.flush().map_err(|e| self.abort(e))?;
        self.last_durable_epoch = Some(epoch);
        Ok(())
    }

    fn abort(&self, e: std::io::Error) -> Error {
        let durable = self
            .last_durable_epoch
            .map_or("none".to_string(), |e| e.to_string());
        Error::TrainingAborted {
            context: format!("writing metrics to {}", self.path.display()),
            reason: format!("{e}; last durable epoch: {durable}"),
        }
    }
}

/// Reads a stream, dropping (with a warning) an unterminated final line that
/// does not parse. Returns the records and any warnings.
pub fn read_metrics(path: &Path) -> Result<(Vec<MetricsRecord>, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let terminated = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(e) if i + 1 == lines.len() && !terminated => {
                let msg = format!("{}: ignoring truncated final line {}: {e}", path.display(), i + 1);
                log::warn!("{msg}");
                warnings.push(msg);
            }
            Err(e) => {
                return Err(Error::MalformedRecord {
                    index: i,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok((records, warnings))
}
