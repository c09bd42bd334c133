use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{evaluate, predict_items, write, EvalReport};
use crate::corpus::{AudioClip, CorpusManifest, Protocol, SplitOptions, SplitPlan};
use crate::dsp::{add_noise, extract_features, FeatureConfig, FeatureMatrix};
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig};
use crate::rng::{derive, sub_seed, Purpose};
use crate::trainer::{train, TrainConfig};

fn view(v: &[Option<FeatureMatrix>]) -> Vec<Option<&FeatureMatrix>> {
    v.iter().map(Option::as_ref).collect()
}

/// Clean and distorted evaluation of the same test items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    /// speech:noise RMS ratio
    pub ratio: f64,
    pub seed: u64,
    pub clean: EvalReport,
    pub distorted: EvalReport,
}

impl NoiseReport {
    /// `emotion,normal,distorted` rows plus `average` and `overall`.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("emotion,normal,distorted\n");
        for (e, clean) in &self.clean.per_emotion_accuracy {
            let noisy = self.distorted.per_emotion_accuracy.get(e).copied().unwrap_or(f64::NAN);
            out += &format!("{e},{clean:.4},{noisy:.4}\n");
        }
        out += &format!(
            "average,{:.4},{:.4}\n",
            self.clean.emotion_average, self.distorted.emotion_average
        );
        out += &format!(
            "overall,{:.4},{:.4}\n",
            self.clean.overall_accuracy, self.distorted.overall_accuracy
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Paired table, JSON, and both reports (with their confusion matrices)
    /// under `normal_*` and `distorted_*`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        write(dir, "noise_table.csv", self.table_csv().as_bytes())?;
        write(dir, "noise.json", self.to_json().as_bytes())?;
        self.clean.write_all(dir, "normal")?;
        self.distorted.write_all(dir, "distorted")
    }
}

/// Evaluate `items` on clean audio and on audio distorted with white noise at
/// `ratio`. `load` returns the clip of a manifest item; features of both
/// versions are extracted with `feature_cfg`.
pub fn noise_eval(
    model: &Model,
    manifest: &CorpusManifest,
    items: &[usize],
    load: &(dyn Fn(usize) -> Result<AudioClip> + Sync),
    feature_cfg: &FeatureConfig,
    ratio: f64,
    seed: u64,
) -> Result<NoiseReport> {
    let noise_seed = sub_seed(seed, Purpose::Noise);
    let pairs: Vec<Result<(FeatureMatrix, FeatureMatrix)>> = items
        .par_iter()
        .map(|&i| {
            let clip = load(i)?;
            let noisy = add_noise(&clip, ratio, derive(noise_seed, i as u64))?;
            Ok((extract_features(&clip, feature_cfg)?, extract_features(&noisy, feature_cfg)?))
        })
        .collect();
    let mut clean: Vec<Option<FeatureMatrix>> = vec![None; manifest.len()];
    let mut noisy: Vec<Option<FeatureMatrix>> = vec![None; manifest.len()];
    for (&i, p) in items.iter().zip(pairs) {
        let (c, n) = p?;
        clean[i] = Some(c);
        noisy[i] = Some(n);
    }
    let names = model.class_names();
    let clean_report = EvalReport::from_predictions(&predict_items(model, manifest, items, &view(&clean))?, names, seed)?;
    let noisy_report = EvalReport::from_predictions(&predict_items(model, manifest, items, &view(&noisy))?, names, seed)?;
    if noisy_report.overall_accuracy > clean_report.overall_accuracy {
        log::warn!(
            "distorted accuracy {:.2}% exceeds clean accuracy {:.2}%",
            noisy_report.overall_accuracy,
            clean_report.overall_accuracy
        );
    }
    Ok(NoiseReport {
        ratio,
        seed,
        clean: clean_report,
        distorted: noisy_report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub routing: usize,
    pub decoder: bool,
    /// inference-mode accuracy on the training items, percent
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    /// the one split every cell trains and tests on
    pub plan: SplitPlan,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("routing,decoder,train_accuracy,test_accuracy,epochs,best_epoch\n");
        for c in &self.cells {
            out += &format!(
                "{},{},{:.4},{:.4},{},{}\n",
                c.routing,
                if c.decoder { "on" } else { "off" },
                c.train_accuracy,
                c.test_accuracy,
                c.epochs,
                c.best_epoch
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub const ABLATION_ROUTINGS: std::ops::RangeInclusive<usize> = 1..=5;

/// Train and score every (routing iterations 1..=5) × (decoder on, off)
/// combination of a capsule model on one shared split and seed.
pub fn ablation_grid(
    manifest: &CorpusManifest,
    features: &[Option<&FeatureMatrix>],
    protocol: Protocol,
    split_opts: &SplitOptions,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<AblationReport> {
    if !model_cfg.architecture.is_capsule() {
        return Err(Error::Config(format!(
            "ablation needs a capsule architecture, got {}",
            model_cfg.architecture
        )));
    }
    let plan = SplitPlan::for_trial(manifest, protocol, sub_seed(cfg.seed, Purpose::Split), 0, split_opts)?;
    let mut cells = Vec::new();
    for routing in ABLATION_ROUTINGS {
        for decoder in [true, false] {
            let tag = |e: Error| Error::AblationCell {
                routing,
                decoder,
                source: Box::new(e),
            };
            let mc = ModelConfig {
                routing_iterations: routing,
                decoder_enabled: decoder,
                n_classes: manifest.speakers().len(),
                ..model_cfg.clone()
            };
            log::info!("ablation cell: routing {routing}, decoder {decoder}");
            let model = build_model(&mc, cfg.seed).map_err(tag)?;
            let (model, history) = train(model, manifest, &plan, features, cfg).map_err(tag)?;
            let on_train = evaluate(&model, manifest, &plan.train_items, features, cfg.seed).map_err(tag)?;
            let on_test = evaluate(&model, manifest, &plan.test_items, features, cfg.seed).map_err(tag)?;
            cells.push(AblationCell {
                routing,
                decoder,
                train_accuracy: on_train.overall_accuracy,
                test_accuracy: on_test.overall_accuracy,
                epochs: history.epochs(),
                best_epoch: history.best_epoch,
            });
        }
    }
    Ok(AblationReport {
        seed: cfg.seed,
        plan,
        cells,
    })
}
