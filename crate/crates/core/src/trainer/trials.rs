use std::path::Path;

use super::{train_with_holdout, Holdout, TrainConfig, TrainHistory};
use crate::corpus::{CorpusManifest, Protocol, SplitOptions, SplitPlan};
use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, AveragedReport, EvalReport};
use crate::models::{build_model, Model, ModelConfig};
use crate::rng::{derive, sub_seed, Purpose};

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub plan: SplitPlan,
    pub model: Model,
    pub history: TrainHistory,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrialsOutcome {
    pub trials: Vec<TrialResult>,
    pub average: AveragedReport,
}

/// Seed used for everything inside trial `k` except its split.
pub fn trial_seed(global: u64, k: usize) -> u64 {
    derive(global, k as u64)
}

/// Train and evaluate `cfg.trials` utterance rotations (trial `k` splits with
/// seed `split_base + k`), or `cfg.cv_folds` repetition folds over one split.
/// The model's class count is taken from the manifest. With `out`, trial `k`
/// writes `trial<k>/{best.capw, config.json, history.csv, split.json,
/// report.json}`.
pub fn run_trials(
    manifest: &CorpusManifest,
    protocol: Protocol,
    split_opts: &SplitOptions,
    features: &[Option<&FeatureMatrix>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrialsOutcome> {
    cfg.validate()?;
    let model_cfg = ModelConfig {
        n_classes: manifest.speakers().len(),
        ..model_cfg.clone()
    };
    let split_base = sub_seed(cfg.seed, Purpose::Split);
    let n = cfg.cv_folds.unwrap_or(cfg.trials);
    let mut trials = Vec::with_capacity(n);
    for k in 0..n {
        let tag = |e: Error| Error::Trial {
            trial: k,
            source: Box::new(e),
        };
        let (plan, holdout) = match cfg.cv_folds {
            None => (
                SplitPlan::for_trial(manifest, protocol, split_base, k, split_opts).map_err(tag)?,
                Holdout::Stratified,
            ),
            Some(folds) => {
                let mut plan = SplitPlan::for_trial(manifest, protocol, split_base, 0, split_opts).map_err(tag)?;
                plan.trial_index = k;
                (plan, Holdout::Fold { k: folds, fold: k })
            }
        };
        let seed = trial_seed(cfg.seed, k);
        let tcfg = TrainConfig { seed, ..cfg.clone() };
        log::info!("trial {k}: {} train, {} test items", plan.train_items.len(), plan.test_items.len());
        let model = build_model(&model_cfg, seed).map_err(tag)?;
        let (model, history) =
            train_with_holdout(model, manifest, &plan, features, &tcfg, holdout).map_err(tag)?;
        let report = evaluate(&model, manifest, &plan.test_items, features, seed).map_err(tag)?;
        if let Some(out) = out {
            let dir = out.join(format!("trial{k}"));
            model.save(&dir).map_err(tag)?;
            history.write_csv(dir.join("history.csv")).map_err(tag)?;
            plan.write_json(dir.join("split.json")).map_err(tag)?;
            report.write_all(&dir, "report").map_err(tag)?;
        }
        trials.push(TrialResult {
            plan,
            model,
            history,
            report,
        });
    }
    let average = AveragedReport::from_reports(trials.iter().map(|t| t.report.clone()).collect())?;
    Ok(TrialsOutcome { trials, average })
}
