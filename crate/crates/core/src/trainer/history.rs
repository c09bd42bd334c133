use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One completed epoch. Validation fields are NaN when nothing was held out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// percent
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// epoch whose parameters were kept
    pub best_epoch: usize,
    /// sorted manifest indices touched during training
    pub items_read: Vec<usize>,
    pub validation_items: Vec<usize>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }

    /// Every field except wall-clock time, bit for bit.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        let key = |h: &TrainHistory| -> Vec<[u64; 5]> {
            h.records
                .iter()
                .map(|r| {
                    [
                        r.epoch as u64,
                        r.train_loss.to_bits(),
                        r.train_acc.to_bits(),
                        r.val_loss.to_bits(),
                        r.val_acc.to_bits(),
                    ]
                })
                .collect()
        };
        key(self) == key(other)
            && self.best_epoch == other.best_epoch
            && self.items_read == other.items_read
            && self.validation_items == other.validation_items
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Epoch records from a history CSV.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::parse(path.display().to_string(), e.to_string())))
            .collect()
    }
}
