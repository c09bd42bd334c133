use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auc_macro, metrics, per_emotion_report, ClassMetrics, Confusion};
use crate::corpus::{CorpusManifest, Emotion};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::models::{argmax_lowest, Model};
use crate::trainer::{targets, EVAL_CHUNK};

/// One scored test item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item: usize,
    pub truth: usize,
    pub predicted: usize,
    pub emotion: Emotion,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub n_test_items: usize,
    /// percent
    pub overall_accuracy: f64,
    pub per_emotion_accuracy: BTreeMap<Emotion, f64>,
    /// unweighted mean of `per_emotion_accuracy`
    pub emotion_average: f64,
    pub per_speaker: BTreeMap<String, ClassMetrics>,
    /// `None` when no class had both positives and negatives
    pub auc_macro: Option<f64>,
    pub confusion: Confusion,
}

/// Score `items` with a frozen model. Chunks are scored in parallel on the
/// current rayon pool and reassembled in item order.
pub fn predict_items(
    model: &Model,
    manifest: &CorpusManifest,
    items: &[usize],
    features: &[Option<&FeatureMatrix>],
) -> Result<Vec<Prediction>> {
    let x = crate::trainer::gather(features, items)?;
    let truth = targets(model, manifest, items)?;
    let k = model.n_classes();
    let scored: Vec<Result<Vec<f64>>> = x
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| model.forward(chunk).map(|t| t.into_data()))
        .collect();
    let mut preds = Vec::with_capacity(items.len());
    let mut pos = 0;
    for chunk in scored {
        for row in chunk?.chunks_exact(k) {
            let i = items[pos];
            preds.push(Prediction {
                item: i,
                truth: truth[pos],
                predicted: argmax_lowest(row),
                emotion: manifest.labels(i).emotion,
                scores: row.to_vec(),
            });
            pos += 1;
        }
    }
    Ok(preds)
}

impl EvalReport {
    pub fn from_predictions(preds: &[Prediction], class_names: &[String], seed: u64) -> Result<EvalReport> {
        let k = class_names.len();
        let pairs: Vec<(usize, usize)> = preds.iter().map(|p| (p.truth, p.predicted)).collect();
        let confusion = Confusion::from_pairs(&pairs, k)?;
        let m = metrics(&confusion)?;
        let outcomes: Vec<(Emotion, bool)> = preds.iter().map(|p| (p.emotion, p.truth == p.predicted)).collect();
        let table = per_emotion_report(&outcomes, &[])?;
        let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.scores.clone()).collect();
        let labels: Vec<usize> = preds.iter().map(|p| p.truth).collect();
        let auc = match auc_macro(&scores, &labels, k) {
            Ok(a) => Some(a.macro_auc),
            Err(Error::UndefinedAuc(msg)) => {
                log::warn!("AUC undefined: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(EvalReport {
            seed,
            class_names: class_names.to_vec(),
            n_test_items: preds.len(),
            overall_accuracy: m.accuracy,
            per_emotion_accuracy: table.rows.iter().copied().collect(),
            emotion_average: table.average,
            per_speaker: class_names.iter().cloned().zip(m.per_class).collect(),
            auc_macro: auc,
            confusion,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        serde_json::from_str(text).map_err(|e| Error::parse("eval report", e.to_string()))
    }

    /// `emotion,accuracy` rows plus the average row.
    pub fn emotion_csv(&self) -> String {
        let mut out = String::from("emotion,accuracy\n");
        for (e, a) in &self.per_emotion_accuracy {
            out += &format!("{e},{a:.4}\n");
        }
        out += &format!("average,{:.4}\n", self.emotion_average);
        out
    }

    /// `speaker,precision,recall,f1` rows.
    pub fn speaker_csv(&self) -> String {
        let mut out = String::from("speaker,precision,recall,f1\n");
        for (s, m) in &self.per_speaker {
            out += &format!("{s},{:.6},{:.6},{:.6}\n", m.precision, m.recall, m.f1);
        }
        out
    }

    /// Write `<stem>.json`, `<stem>_emotions.csv`, `<stem>_speakers.csv`,
    /// `<stem>_confusion.csv` and `<stem>_confusion.pgm` into `dir`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<()> {
        write(dir, &format!("{stem}.json"), self.to_json().as_bytes())?;
        write(dir, &format!("{stem}_emotions.csv"), self.emotion_csv().as_bytes())?;
        write(dir, &format!("{stem}_speakers.csv"), self.speaker_csv().as_bytes())?;
        write(
            dir,
            &format!("{stem}_confusion.csv"),
            confusion_csv(&self.confusion, &self.class_names).as_bytes(),
        )?;
        write(dir, &format!("{stem}_confusion.pgm"), &confusion_pgm(&self.confusion, 16))
    }
}

pub(crate) fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Score a model on `items` and summarize.
pub fn evaluate(
    model: &Model,
    manifest: &CorpusManifest,
    items: &[usize],
    features: &[Option<&FeatureMatrix>],
    seed: u64,
) -> Result<EvalReport> {
    let preds = predict_items(model, manifest, items, features)?;
    EvalReport::from_predictions(&preds, model.class_names(), seed)
}

/// Header row of class names, then one row per true class.
pub fn confusion_csv(c: &Confusion, names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for n in names {
        out += ",";
        out += n;
    }
    out += "\n";
    for (name, row) in names.iter().zip(&c.counts) {
        out += name;
        for v in row {
            out += &format!(",{v}");
        }
        out += "\n";
    }
    out
}

/// Binary grayscale (P5) image of the row-normalized confusion matrix; each
/// cell is `cell`×`cell` pixels and darker means more mass.
pub fn confusion_pgm(c: &Confusion, cell: usize) -> Vec<u8> {
    let n = c.n();
    let side = n * cell;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    let sums = c.row_sums();
    for r in 0..n {
        let shades: Vec<u8> = (0..n)
            .map(|col| {
                let frac = if sums[r] == 0 { 0.0 } else { c.counts[r][col] as f64 / sums[r] as f64 };
                (255.0 - (255.0 * frac).round()) as u8
            })
            .collect();
        for _ in 0..cell {
            for &s in &shades {
                out.extend(std::iter::repeat(s).take(cell));
            }
        }
    }
    out
}

/// Mean of per-trial results. Confusion counts are summed, not averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedReport {
    pub n_trials: usize,
    pub overall_accuracy: f64,
    /// mean over the trials in which the emotion was tested
    pub per_emotion_accuracy: BTreeMap<Emotion, f64>,
    pub emotion_average: f64,
    pub auc_macro: Option<f64>,
    pub confusion: Confusion,
    pub trials: Vec<EvalReport>,
}

impl AveragedReport {
    pub fn from_reports(reports: Vec<EvalReport>) -> Result<AveragedReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Contract("no trial reports to average".into()))?;
        let n = reports.len() as f64;
        let mut confusion = Confusion::zeros(first.confusion.n());
        let mut per_emotion: BTreeMap<Emotion, (f64, usize)> = BTreeMap::new();
        for r in &reports {
            confusion.add(&r.confusion)?;
            for (e, a) in &r.per_emotion_accuracy {
                let slot = per_emotion.entry(*e).or_insert((0.0, 0));
                slot.0 += a;
                slot.1 += 1;
            }
        }
        let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc_macro).collect();
        Ok(AveragedReport {
            n_trials: reports.len(),
            overall_accuracy: reports.iter().map(|r| r.overall_accuracy).sum::<f64>() / n,
            per_emotion_accuracy: per_emotion.into_iter().map(|(e, (s, k))| (e, s / k as f64)).collect(),
            emotion_average: reports.iter().map(|r| r.emotion_average).sum::<f64>() / n,
            auc_macro: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            confusion,
            trials: reports,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `emotion,trial0,...,mean` rows plus an `overall` and `average` row.
    pub fn emotion_csv(&self) -> String {
        let mut out = String::from("emotion");
        for t in 0..self.n_trials {
            out += &format!(",trial{t}");
        }
        out += ",mean\n";
        let cell = |v: Option<&f64>| v.map(|a| format!("{a:.4}")).unwrap_or_default();
        for (e, mean) in &self.per_emotion_accuracy {
            out += e.name();
            for r in &self.trials {
                out += &format!(",{}", cell(r.per_emotion_accuracy.get(e)));
            }
            out += &format!(",{mean:.4}\n");
        }
        out += "average";
        for r in &self.trials {
            out += &format!(",{:.4}", r.emotion_average);
        }
        out += &format!(",{:.4}\n", self.emotion_average);
        out += "overall";
        for r in &self.trials {
            out += &format!(",{:.4}", r.overall_accuracy);
        }
        out += &format!(",{:.4}\n", self.overall_accuracy);
        out
    }
}
