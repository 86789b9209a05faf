//! JSONL event stream and CSV summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::AlignmentRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained network.
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub train_loss: Option<f64>,
    /// Percent, measured on the fly with dropout active.
    pub train_acc: Option<f64>,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Largest `‖WWᵀ − I‖_F` over parametric layers at the end of the epoch.
    pub max_gram_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum Event {
    Epoch(EpochRecord),
    Alignment(AlignmentRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub name: String,
    pub epochs: Vec<EpochRecord>,
    pub alignment: Vec<AlignmentRecord>,
    /// Seconds since the start of the run at the end of each epoch. Not part
    /// of the deterministic stream.
    #[serde(skip)]
    pub wall_seconds: Vec<f64>,
}

impl RunMetrics {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }

    /// Everything except wall-clock times, in emission order.
    pub fn events(&self) -> Vec<Event> {
        let mut out = Vec::new();
        let mut align = self.alignment.iter().peekable();
        for e in &self.epochs {
            out.push(Event::Epoch(e.clone()));
            while let Some(a) = align.next_if(|a| a.step <= e.steps) {
                out.push(Event::Alignment(a.clone()));
            }
        }
        out.extend(align.cloned().map(Event::Alignment));
        out
    }
}

/// Appends events to `metrics.jsonl` and writes `summary.csv` on finish.
pub struct MetricsSink {
    dir: Option<PathBuf>,
    jsonl: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn disabled() -> Self {
        MetricsSink { dir: None, jsonl: None }
    }

    /// Starts a fresh `metrics.jsonl` in `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(MetricsSink {
            dir: Some(dir.to_path_buf()),
            jsonl: Some(BufWriter::new(file)),
        })
    }

    pub fn emit(&mut self, event: &Event) -> Result<()> {
        if let (Some(w), Some(dir)) = (self.jsonl.as_mut(), self.dir.as_ref()) {
            let line = serde_json::to_string(event).expect("metrics serialize");
            let path = dir.join("metrics.jsonl");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn finish(&mut self, metrics: &RunMetrics) -> Result<()> {
        if let Some(dir) = &self.dir {
            write_summary(&dir.join("summary.csv"), metrics)?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let mut s = String::from("epoch,steps,lr,train_loss,train_acc,test_loss,test_acc,max_gram_residual,wall_s\n");
    for (i, e) in metrics.epochs.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.steps,
            e.lr,
            opt(e.train_loss),
            opt(e.train_acc),
            e.test_loss,
            e.test_acc,
            opt(e.max_gram_residual),
            opt(metrics.wall_seconds.get(i).copied()),
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a JSONL stream back into events.
pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}
