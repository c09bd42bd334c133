use serde::{Deserialize, Serialize};

use super::TrainHistory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: String,
    /// `"30-40"` style for the reference rows
    pub epochs: String,
    pub mean_epoch_seconds: Option<f64>,
    pub total_seconds: Option<f64>,
    pub total_minutes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub measured: Vec<TimingRow>,
    pub reference: Vec<TimingRow>,
}

fn reference_row(model: &str, epochs: &str) -> TimingRow {
    TimingRow {
        model: model.into(),
        epochs: epochs.into(),
        mean_epoch_seconds: None,
        total_seconds: None,
        total_minutes: None,
    }
}

/// Per-model epoch counts and wall-clock totals next to typical reference
/// epoch ranges.
pub fn timing_report(histories: &[(&str, &TrainHistory)]) -> Result<TimingReport> {
    let mut measured = Vec::new();
    for (name, h) in histories {
        if h.records.is_empty() {
            return Err(Error::Contract(format!("history of {name} has no epochs")));
        }
        let total = h.total_seconds();
        measured.push(TimingRow {
            model: name.to_string(),
            epochs: h.epochs().to_string(),
            mean_epoch_seconds: Some(total / h.epochs() as f64),
            total_seconds: Some(total),
            total_minutes: Some(total / 60.0),
        });
    }
    Ok(TimingReport {
        measured,
        reference: vec![reference_row("capsnet (reference)", "30-40"), reference_row("cnn (reference)", "250-300")],
    })
}

impl TimingReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "epochs", "mean_epoch_seconds", "total_seconds", "total_minutes"])
            .expect("in-memory csv");
        let cell = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_default();
        for r in self.measured.iter().chain(&self.reference) {
            w.write_record([
                r.model.clone(),
                r.epochs.clone(),
                cell(r.mean_epoch_seconds),
                cell(r.total_seconds),
                cell(r.total_minutes),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::EpochRecord;

    fn history(epochs: usize, secs: f64) -> TrainHistory {
        TrainHistory {
            records: (1..=epochs)
                .map(|epoch| EpochRecord {
                    epoch,
                    train_loss: 0.1,
                    train_acc: 90.0,
                    val_loss: 0.1,
                    val_acc: 90.0,
                    seconds: secs,
                })
                .collect(),
            best_epoch: epochs,
            items_read: vec![],
            validation_items: vec![],
        }
    }

    #[test]
    fn thirty_epochs_at_two_seconds() {
        let h = history(30, 2.0);
        let r = timing_report(&[("capsnet_m", &h)]).unwrap();
        assert_eq!(r.measured[0].total_seconds, Some(60.0));
        assert_eq!(r.measured[0].total_minutes, Some(1.0));
        assert_eq!(r.reference[0].epochs, "30-40");
        assert_eq!(r.reference[1].epochs, "250-300");
    }

    #[test]
    fn identical_histories_identical_rows() {
        let h = history(5, 1.5);
        let r = timing_report(&[("a", &h), ("b", &h)]).unwrap();
        let strip = |row: &TimingRow| (row.epochs.clone(), row.mean_epoch_seconds, row.total_seconds);
        assert_eq!(strip(&r.measured[0]), strip(&r.measured[1]));
    }

    #[test]
    fn empty_history_rejected() {
        assert!(timing_report(&[("a", &history(0, 1.0))]).is_err());
    }
}
