use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// On the grouped training stream, from the forward passes of the epoch.
    pub train_f1: f64,
    /// Eval-mode score on a fixed subsample of raw training windows.
    pub train_f1_ungrouped: f64,
    pub val_f1: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Input(format!("writing train log: {e}"));
        w.write_record(["epoch", "train_loss", "train_f1", "val_f1", "is_best", "train_f1_ungrouped"])
            .map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_f1.to_string(),
                r.val_f1.to_string(),
                r.is_best.to_string(),
                r.train_f1_ungrouped.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Input(format!("writing train log: {e}")))
    }
}
