//! Neutral-only training with Adam and early stopping on a speaker-stratified
//! slice of the training split, plus the multi-trial rotation protocol and
//! the training-time comparison.

mod history;
mod timing;
mod trials;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::corpus::{CorpusManifest, SplitPlan};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::models::{argmax_lowest, input_statistics, Architecture, Model};
use crate::rng::{derive, rng, sub_seed, Purpose};

pub use history::{EpochRecord, TrainHistory};
pub use timing::{timing_report, TimingReport, TimingRow};
pub use trials::{run_trials, trial_seed, TrialResult, TrialsOutcome};

/// Items per inference chunk. Fixed so results never depend on the number
/// of worker threads.
pub const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `None` picks the architecture default (40 capsule, 300 CNN)
    pub max_epochs: Option<usize>,
    /// epochs without validation-loss improvement before stopping
    pub patience: usize,
    pub seed: u64,
    pub trials: usize,
    /// share of each speaker's training items held out for validation
    pub validation_fraction: f64,
    /// fold over repetitions instead of rotating utterances
    pub cv_folds: Option<usize>,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.001,
            max_epochs: None,
            patience: 10,
            seed: 0,
            trials: 5,
            validation_fraction: 0.1,
            cv_folds: None,
            bn_momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn epochs_for(&self, arch: Architecture) -> usize {
        self.max_epochs
            .unwrap_or(if arch.is_capsule() { 40 } else { 300 })
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("train.batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.max_epochs == Some(0) {
            v.push("train.max_epochs must be at least 1".to_string());
        }
        if self.patience == 0 {
            v.push("train.patience must be at least 1".to_string());
        }
        if self.trials == 0 {
            v.push("train.trials must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            v.push(format!(
                "train.validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        if matches!(self.cv_folds, Some(k) if k < 2) {
            v.push("train.cv_folds must be at least 2".to_string());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            v.push(format!("train.bn_momentum must lie in [0, 1), got {}", self.bn_momentum));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// How validation items are carved out of the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Holdout {
    /// `validation_fraction` of each speaker's items, seeded
    Stratified,
    /// items whose repetition ≡ `fold` (mod `k`)
    Fold { k: usize, fold: usize },
}

/// Class index of every manifest speaker, following the model's class names.
pub(crate) fn class_lookup(model: &Model) -> BTreeMap<&str, usize> {
    model
        .class_names()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect()
}

pub(crate) fn gather<'a>(
    features: &[Option<&'a FeatureMatrix>],
    items: &[usize],
) -> Result<Vec<&'a FeatureMatrix>> {
    items
        .iter()
        .map(|&i| {
            features
                .get(i)
                .copied()
                .flatten()
                .ok_or_else(|| Error::Contract(format!("no features for manifest item {i}")))
        })
        .collect()
}

pub(crate) fn targets(model: &Model, manifest: &CorpusManifest, items: &[usize]) -> Result<Vec<usize>> {
    let lookup = class_lookup(model);
    items
        .iter()
        .map(|&i| {
            let spk = &manifest.labels(i).speaker_id;
            lookup
                .get(spk.as_str())
                .copied()
                .ok_or_else(|| Error::Contract(format!("speaker {spk:?} is not one of the model's classes")))
        })
        .collect()
}

fn select_validation(
    manifest: &CorpusManifest,
    train: &[usize],
    cfg: &TrainConfig,
    holdout: Holdout,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let held: BTreeSet<usize> = match holdout {
        Holdout::Stratified => {
            let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &i in train {
                by_speaker
                    .entry(manifest.labels(i).speaker_id.as_str())
                    .or_default()
                    .push(i);
            }
            let mut r = rng(derive(sub_seed(cfg.seed, Purpose::Split), 0x7661_6c69_6461_7465));
            let mut held = BTreeSet::new();
            for items in by_speaker.values_mut() {
                items.shuffle(&mut r);
                let want = (cfg.validation_fraction * items.len() as f64).round() as usize;
                held.extend(items.iter().take(want.min(items.len() - 1)));
            }
            held
        }
        Holdout::Fold { k, fold } => {
            if k < 2 || fold >= k {
                return Err(Error::Config(format!("fold {fold} of {k} is not a valid fold")));
            }
            train
                .iter()
                .copied()
                .filter(|&i| manifest.labels(i).repetition as usize % k == fold)
                .collect()
        }
    };
    let (val, fit): (Vec<usize>, Vec<usize>) = train.iter().partition(|i| held.contains(i));
    if fit.is_empty() {
        return Err(Error::Config("validation holdout leaves no training items".into()));
    }
    Ok((fit, val))
}

fn as_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericFault { .. } => Error::Divergence { epoch, batch },
        other => other,
    }
}

/// Mean loss and accuracy (%) of a model in inference mode.
pub(crate) fn evaluate_split(
    model: &Model,
    inputs: &[&FeatureMatrix],
    targets: &[usize],
) -> Result<(f64, f64)> {
    let chunks: Vec<Result<(f64, usize)>> = inputs
        .par_chunks(EVAL_CHUNK)
        .zip(targets.par_chunks(EVAL_CHUNK))
        .map(|(x, t)| {
            let (loss, scores) = model.evaluate_loss(x, t)?;
            let k = model.n_classes();
            let correct = scores
                .chunks_exact(k)
                .zip(t)
                .filter(|(s, &t)| argmax_lowest(s) == t)
                .count();
            Ok((loss.total * x.len() as f64, correct))
        })
        .collect();
    let (mut loss, mut correct) = (0.0, 0);
    for c in chunks {
        let (l, k) = c?;
        loss += l;
        correct += k;
    }
    let n = inputs.len() as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

/// Train on the split's neutral items; see [`train_with_holdout`].
pub fn train(
    model: Model,
    manifest: &CorpusManifest,
    split: &SplitPlan,
    features: &[Option<&FeatureMatrix>],
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    train_with_holdout(model, manifest, split, features, cfg, Holdout::Stratified)
}

/// Mini-batch Adam over the split's training items. `features` is indexed by
/// manifest position. The returned model holds the parameters of the epoch
/// with the lowest validation loss (training loss when nothing is held out).
pub fn train_with_holdout(
    model: Model,
    manifest: &CorpusManifest,
    split: &SplitPlan,
    features: &[Option<&FeatureMatrix>],
    cfg: &TrainConfig,
    holdout: Holdout,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    split.check(manifest)?;
    let speakers = manifest.speakers();
    if speakers.len() != model.n_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but the manifest has {} speakers",
            model.n_classes(),
            speakers.len()
        )));
    }
    let mut model = model.with_class_names(speakers)?;
    let train_feats = gather(features, &split.train_items)?;
    let (mean, std) = input_statistics(&train_feats)?;
    model.set_input_stats(&mean, &std)?;

    let (fit, val) = select_validation(manifest, &split.train_items, cfg, holdout)?;
    let val_x = gather(features, &val)?;
    let val_t = targets(&model, manifest, &val)?;
    let mut read: BTreeSet<usize> = BTreeSet::new();
    read.extend(&val);

    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), &model.param_sizes());
    let shuffle = sub_seed(cfg.seed, Purpose::Shuffle);
    let dropout = sub_seed(cfg.seed, Purpose::Dropout);
    let k = model.n_classes();
    let max_epochs = cfg.epochs_for(model.config().architecture);

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    for epoch in 1..=max_epochs {
        let start = Instant::now();
        let mut order = fit.clone();
        order.shuffle(&mut rng(derive(shuffle, epoch as u64)));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            read.extend(batch);
            let x = gather(features, batch)?;
            let t = targets(&model, manifest, batch)?;
            let seed = derive(dropout, ((epoch as u64) << 32) | b as u64);
            let out = model.train_step(&x, &t, seed).map_err(|e| as_divergence(e, epoch, b))?;
            if !out.loss.total.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            loss_sum += out.loss.total * batch.len() as f64;
            correct += out
                .scores
                .chunks_exact(k)
                .zip(&t)
                .filter(|(s, &t)| argmax_lowest(s) == t)
                .count();
            {
                let grads: Vec<&[f64]> = out.grads.iter().map(Vec::as_slice).collect();
                let mut params = model.params_mut();
                adam_step(&mut params, &grads, &mut adam)?;
            }
            if let Some((m, v)) = &out.batch_stats {
                model.update_running_stats(m, v, cfg.bn_momentum);
            }
        }
        let n_fit = fit.len() as f64;
        let train_loss = loss_sum / n_fit;
        let train_acc = 100.0 * correct as f64 / n_fit;
        let (val_loss, val_acc) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let n_batches = fit.len().div_ceil(cfg.batch_size);
            evaluate_split(&model, &val_x, &val_t).map_err(|e| as_divergence(e, epoch, n_batches))?
        };
        let criterion = if val.is_empty() { train_loss } else { val_loss };
        if !criterion.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: fit.len().div_ceil(cfg.batch_size),
            });
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            seconds: start.elapsed().as_secs_f64().max(1e-9),
        });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5} acc {train_acc:.1}%, val loss {val_loss:.5} acc {val_acc:.1}%"
        );
        if best.as_ref().map_or(true, |(l, _, _)| criterion < *l) {
            best = Some((criterion, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    if let Some(i) = split.test_items.iter().find(|i| read.contains(i)) {
        return Err(Error::ProtocolViolation(format!("training read test item {i}")));
    }
    let history = TrainHistory {
        records,
        best_epoch,
        items_read: read.into_iter().collect(),
        validation_items: val,
    };
    Ok((best_model, history))
}
