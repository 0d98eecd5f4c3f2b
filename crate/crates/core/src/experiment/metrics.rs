use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{PcError, Result};

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub free_energy: Option<f64>,
    pub layer_error_norms: Vec<f64>,
    pub task_metric: f64,
    /// Name of `task_metric`, e.g. `accuracy` or `max_abs_gap`.
    pub metric: String,
    /// Milliseconds since the run started; `null` unless timing is enabled.
    pub wall_ms: Option<f64>,
}

/// Streams [`MetricsRecord`]s as JSON lines and enforces increasing steps.
pub struct MetricsWriter {
    out: Option<Box<dyn Write>>,
    path: Option<std::path::PathBuf>,
    last_step: Option<u64>,
    started: Option<Instant>,
    records: Vec<MetricsRecord>,
}

impl MetricsWriter {
    pub fn new(out: Box<dyn Write>, timing: bool) -> Self {
        MetricsWriter { out: Some(out), path: None, last_step: None, started: timing.then(Instant::now), records: Vec::new() }
    }

    /// Creates the file at `path` on the first record, so a run that fails
    /// before producing metrics leaves no file behind.
    pub fn lazy(path: &Path, timing: bool) -> Self {
        MetricsWriter {
            out: None,
            path: Some(path.to_path_buf()),
            last_step: None,
            started: timing.then(Instant::now),
            records: Vec::new(),
        }
    }

    /// Discards output, keeping records in memory only.
    pub fn sink() -> Self {
        Self::new(Box::new(std::io::sink()), false)
    }

    pub fn write(&mut self, step: u64, free_energy: Option<f64>, layer_error_norms: Vec<f64>, metric: &str, value: f64) -> Result<()> {
        if self.last_step.is_some_and(|s| step <= s) {
            return Err(PcError::State(format!("metrics step {step} does not increase")));
        }
        let rec = MetricsRecord {
            step,
            free_energy: free_energy.filter(|f| f.is_finite()),
            layer_error_norms,
            task_metric: value,
            metric: metric.to_string(),
            wall_ms: self.started.map(|t| t.elapsed().as_secs_f64() * 1e3),
        };
        if self.out.is_none() {
            let path = self.path.as_ref().expect("lazy writers have a path");
            self.out = Some(Box::new(BufWriter::new(File::create(path)?)));
        }
        let out = self.out.as_mut().expect("opened above");
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
        self.last_step = Some(step);
        self.records.push(rec);
        Ok(())
    }

    pub fn next_step(&self) -> u64 {
        self.last_step.map_or(0, |s| s + 1)
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn finish(mut self) -> Result<Vec<MetricsRecord>> {
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok(self.records)
    }
}
