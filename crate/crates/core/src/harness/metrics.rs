use std::io::Write;
use std::time::Duration;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    /// Pairs (or transition samples) consumed so far.
    pub iteration: usize,
    pub mean_reward: f64,
    pub reward_stderr: f64,
    /// Mean preference weight f per fine-tuned step since the previous row,
    /// in descending step order. NaN where no pair was formed.
    pub step_f: Vec<(usize, f64)>,
    pub loss: f64,
    pub drift: f64,
    /// Elapsed time; kept out of the CSV so metric files stay reproducible.
    pub wall_clock: Duration,
}

/// Rows in strictly increasing iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.iteration <= last.iteration {
                return Err(Error::Contract(format!(
                    "metric iteration {} does not follow {}",
                    record.iteration, last.iteration
                )));
            }
        }
        let finite = [
            record.mean_reward,
            record.reward_stderr,
            record.loss,
            record.drift,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!(
                "metric row at iteration {}",
                record.iteration
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Comma-separated rows: iteration, reward, reward_stderr, loss, drift,
    /// then one `f_k` column per fine-tuned step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let steps: Vec<usize> = self
            .records
            .first()
            .map(|r| r.step_f.iter().map(|s| s.0).collect())
            .unwrap_or_default();
        let mut header = vec![
            "iteration".to_string(),
            "reward".into(),
            "reward_stderr".into(),
            "loss".into(),
            "drift".into(),
        ];
        header.extend(steps.iter().map(|k| format!("f_{k}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.iteration.to_string(),
                fmt(r.mean_reward),
                fmt(r.reward_stderr),
                fmt(r.loss),
                fmt(r.drift),
            ];
            row.extend(r.step_f.iter().map(|s| fmt(s.1)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        if let Some(dir) = path.as_ref().parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Shortest round-trip representation, so files compare byte for byte.
pub(crate) fn fmt(v: f64) -> String {
    format!("{v:?}")
}
