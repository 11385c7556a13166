use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Append-only per-step training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::Usage(format!("step {} after step {}", r.step, last.step)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// `(step, val_loss, val_acc)` of every evaluation.
    pub fn evals(&self) -> Vec<(usize, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| Some((r.step, r.val_loss?, r.val_acc?)))
            .collect()
    }

    fn has_evals(&self) -> bool {
        self.records.iter().any(|r| r.val_loss.is_some())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        let evals = self.has_evals();
        let mut header = vec!["step", "epoch", "lr", "train_loss"];
        if evals {
            header.extend(["val_loss", "val_acc"]);
        }
        out.write_record(&header)?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.epoch.to_string(), r.lr.to_string(), r.train_loss.to_string()];
            if evals {
                row.push(opt(r.val_loss));
                row.push(opt(r.val_acc));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(r);
        let mut log = Self::new();
        for row in rd.records() {
            let row = row?;
            let num = |i: usize| -> Result<Option<f64>> {
                match row.get(i).unwrap_or("") {
                    "" => Ok(None),
                    s => s
                        .parse()
                        .map(Some)
                        .map_err(|e| Error::Config(format!("metrics column {i}: {e}"))),
                }
            };
            let req = |i: usize| num(i)?.ok_or_else(|| Error::Config(format!("metrics column {i} empty")));
            log.push(StepRecord {
                step: req(0)? as usize,
                epoch: req(1)? as usize,
                lr: req(2)?,
                train_loss: req(3)?,
                val_loss: num(4)?,
                val_acc: num(5)?,
            })?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, val: Option<f64>) -> StepRecord {
        StepRecord {
            step,
            epoch: 0,
            lr: 1e-3 / 3.0,
            train_loss: 0.1 + step as f64,
            val_loss: val,
            val_acc: val.map(|_| 0.5),
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut log = MetricsLog::new();
        log.push(rec(1, None)).unwrap();
        log.push(rec(2, Some(0.25))).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,epoch,lr,train_loss,val_loss,val_acc\n"));
        assert!(text.ends_with('\n'));
        assert_eq!(MetricsLog::read_csv(buf.as_slice()).unwrap(), log);
    }

    #[test]
    fn steps_must_increase() {
        let mut log = MetricsLog::new();
        log.push(rec(2, None)).unwrap();
        assert!(log.push(rec(2, None)).is_err());
    }
}
