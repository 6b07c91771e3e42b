use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::segnet::{save_checkpoint, SegModel};

/// One metrics-log entry. `losses[i]` is `None` when dataset `i` took no
/// part in the iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub losses: Vec<Option<f64>>,
    pub seconds: f64,
}

/// Collects training metrics every `log_every` iterations, optionally
/// mirrors them to a CSV file, and writes periodic checkpoints.
///
/// Iterations are counted across every strategy stage run through the same
/// monitor.
#[derive(Debug)]
pub struct Monitor {
    log_every: usize,
    csv: Option<csv::Writer<File>>,
    header_written: bool,
    checkpoint_every: usize,
    checkpoint_dir: Option<PathBuf>,
    started: Instant,
    iter: usize,
    rows: Vec<LogRow>,
}

impl Default for Monitor {
    fn default() -> Self {
        Self::silent()
    }
}

impl Monitor {
    /// Records nothing.
    pub fn silent() -> Self {
        Self::new(0)
    }

    /// Keeps a row in memory every `log_every` iterations (0 disables).
    pub fn new(log_every: usize) -> Self {
        Self {
            log_every,
            csv: None,
            header_written: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
            started: Instant::now(),
            iter: 0,
            rows: Vec::new(),
        }
    }

    pub fn with_csv(mut self, path: &Path) -> Result<Self> {
        self.csv = Some(csv::Writer::from_writer(File::create(path)?));
        Ok(self)
    }

    /// Saves `ckpt_<iter>.cdcl` under `dir` every `every` iterations.
    pub fn with_checkpoints(mut self, dir: &Path, every: usize) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self.checkpoint_every = every;
        self
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    /// Iterations seen so far.
    pub fn iterations(&self) -> usize {
        self.iter
    }

    pub fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
        dir.join(format!("ckpt_{iter:06}.cdcl"))
    }

    pub(crate) fn record(&mut self, lr: f64, losses: Vec<Option<f64>>, model: &SegModel) -> Result<()> {
        self.iter += 1;
        if self.log_every > 0 && self.iter.is_multiple_of(self.log_every) {
            let row = LogRow { iter: self.iter, lr, losses, seconds: self.started.elapsed().as_secs_f64() };
            self.write_csv(&row)?;
            self.rows.push(row);
        }
        if let Some(dir) = &self.checkpoint_dir {
            if self.checkpoint_every > 0 && self.iter.is_multiple_of(self.checkpoint_every) {
                save_checkpoint(model, &Self::checkpoint_path(dir, self.iter))?;
            }
        }
        Ok(())
    }

    fn write_csv(&mut self, row: &LogRow) -> Result<()> {
        let Some(w) = self.csv.as_mut() else { return Ok(()) };
        let csv_err = |e: csv::Error| Error::Format(format!("metrics log: {e}"));
        if !self.header_written {
            let mut header = vec!["iter".to_string(), "lr".to_string()];
            header.extend((0..row.losses.len()).map(|i| format!("loss_{i}")));
            header.push("seconds".into());
            w.write_record(&header).map_err(csv_err)?;
            self.header_written = true;
        }
        let mut rec = vec![row.iter.to_string(), row.lr.to_string()];
        rec.extend(row.losses.iter().map(|l| l.map(|v| v.to_string()).unwrap_or_default()));
        rec.push(format!("{:.3}", row.seconds));
        w.write_record(&rec).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}
