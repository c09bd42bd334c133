use std::collections::BTreeSet;

use capsid::corpus::{generate_synthetic_corpus, make_split_plan, CorpusManifest, Emotion, Protocol, SplitOptions, SplitPlan};
use capsid::dsp::{extract_features, FeatureConfig, FeatureMatrix};
use capsid::models::{build_model, Architecture, GeometryPreset, Model, ModelConfig};
use capsid::trainer::{run_trials, timing_report, train, TrainConfig};
use capsid::Error;

struct Fixture {
    manifest: CorpusManifest,
    features: Vec<FeatureMatrix>,
}

impl Fixture {
    fn new(speakers: usize, utterances: usize, reps: usize, seed: u64) -> Fixture {
        let corpus = generate_synthetic_corpus(speakers, utterances, reps, seed).unwrap();
        let cfg = FeatureConfig {
            target_frames: 8,
            ..FeatureConfig::default()
        };
        let features = corpus.clips.iter().map(|c| extract_features(c, &cfg).unwrap()).collect();
        Fixture {
            manifest: corpus.manifest,
            features,
        }
    }

    fn view(&self) -> Vec<Option<&FeatureMatrix>> {
        self.features.iter().map(Some).collect()
    }
}

fn micro(n_classes: usize) -> ModelConfig {
    ModelConfig {
        geometry: GeometryPreset::Micro,
        input_frames: 8,
        n_classes,
        decoder_hidden: 32,
        ..ModelConfig::default()
    }
}

fn two_speaker_split(f: &Fixture) -> SplitPlan {
    make_split_plan(&f.manifest, Protocol::EsdStyle, 3, &two_utterances()).unwrap()
}

fn two_utterances() -> SplitOptions {
    SplitOptions {
        train_utterances: Some(2),
        ..SplitOptions::default()
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 0.003,
        max_epochs: Some(50),
        patience: 50,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn fit(f: &Fixture, plan: &SplitPlan, cfg: &TrainConfig) -> (Model, capsid::trainer::TrainHistory) {
    let model = build_model(&micro(2), cfg.seed).unwrap();
    train(model, &f.manifest, plan, &f.view(), cfg).unwrap()
}

#[test]
fn memorizes_twenty_clips_within_fifty_epochs() {
    let f = Fixture::new(2, 4, 5, 11);
    let plan = two_speaker_split(&f);
    assert_eq!(plan.train_items.len(), 20);
    let (_, h) = fit(&f, &plan, &quick_cfg());
    assert!(h.epochs() <= 50);
    assert!(
        h.records.iter().any(|r| r.train_acc == 100.0),
        "train accuracy never reached 100%: {:?}",
        h.records.iter().map(|r| r.train_acc).collect::<Vec<_>>()
    );
}

#[test]
fn early_epoch_loss_does_not_increase() {
    let f = Fixture::new(4, 8, 3, 21);
    let plan = make_split_plan(&f.manifest, Protocol::EsdStyle, 3, &SplitOptions::default()).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: Some(5),
        seed: 5,
        ..TrainConfig::default()
    };
    let model = build_model(&micro(4), cfg.seed).unwrap();
    let (_, h) = train(model, &f.manifest, &plan, &f.view(), &cfg).unwrap();
    for w in h.records.windows(2) {
        assert!(w[1].train_loss <= w[0].train_loss, "{} then {}", w[0].train_loss, w[1].train_loss);
    }
}

#[test]
fn same_seed_same_history_and_weights() {
    let f = Fixture::new(2, 4, 5, 11);
    let plan = two_speaker_split(&f);
    let cfg = TrainConfig {
        max_epochs: Some(4),
        ..quick_cfg()
    };
    let (m1, h1) = fit(&f, &plan, &cfg);
    let (m2, h2) = fit(&f, &plan, &cfg);
    assert!(h1.same_trajectory(&h2));
    assert_eq!(m1, m2);
    assert!(h1.records.iter().all(|r| r.seconds > 0.0));
}

#[test]
fn training_reads_only_training_items() {
    let f = Fixture::new(2, 4, 5, 11);
    let plan = two_speaker_split(&f);
    let cfg = TrainConfig {
        max_epochs: Some(2),
        ..quick_cfg()
    };
    let (_, h) = fit(&f, &plan, &cfg);
    let train: BTreeSet<_> = plan.train_items.iter().copied().collect();
    assert!(h.items_read.iter().all(|i| train.contains(i)));
    assert!(plan.test_items.iter().all(|i| !h.items_read.contains(i)));
    // one of ten per speaker held out
    assert_eq!(h.validation_items.len(), 2);
}

#[test]
fn emotional_training_item_is_a_protocol_violation() {
    let f = Fixture::new(2, 4, 5, 11);
    let mut plan = two_speaker_split(&f);
    let (pos, &angry) = plan
        .test_items
        .iter()
        .enumerate()
        .find(|(_, &i)| f.manifest.labels(i).emotion == Emotion::Angry)
        .unwrap();
    plan.test_items.remove(pos);
    plan.train_items.push(angry);
    let model = build_model(&micro(2), 1).unwrap();
    let err = train(model, &f.manifest, &plan, &f.view(), &quick_cfg()).unwrap_err();
    assert!(matches!(err, Error::ProtocolViolation(_)), "{err}");
}

#[test]
fn exploding_step_is_reported_as_divergence() {
    let f = Fixture::new(2, 4, 5, 11);
    let plan = two_speaker_split(&f);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..quick_cfg()
    };
    let model = build_model(&micro(2), 1).unwrap();
    let err = train(model, &f.manifest, &plan, &f.view(), &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err}");
}

#[test]
fn cnn_trains_on_micro_input() {
    let f = Fixture::new(2, 4, 5, 11);
    let plan = two_speaker_split(&f);
    // the CNN needs at least 92 frames
    let cfg_feat = FeatureConfig {
        target_frames: 92,
        ..FeatureConfig::default()
    };
    let corpus = generate_synthetic_corpus(2, 4, 5, 11).unwrap();
    let feats: Vec<FeatureMatrix> = corpus.clips.iter().map(|c| extract_features(c, &cfg_feat).unwrap()).collect();
    let view: Vec<Option<&FeatureMatrix>> = feats.iter().map(Some).collect();
    let mc = ModelConfig {
        architecture: Architecture::BaselineCnn,
        input_frames: 92,
        n_classes: 2,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        max_epochs: Some(3),
        ..quick_cfg()
    };
    let (model, h) = train(build_model(&mc, 2).unwrap(), &f.manifest, &plan, &view, &cfg).unwrap();
    assert_eq!(h.epochs(), 3);
    assert!(h.records.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
    assert_eq!(model.class_names(), &["spk00".to_string(), "spk01".to_string()][..]);
}

#[test]
fn trials_rotate_utterances_and_average_exactly() {
    let f = Fixture::new(3, 8, 2, 4);
    let cfg = TrainConfig {
        max_epochs: Some(1),
        trials: 5,
        ..quick_cfg()
    };
    let out = tempfile::tempdir().unwrap();
    let res = run_trials(
        &f.manifest,
        Protocol::EsdStyle,
        &SplitOptions::default(),
        &f.view(),
        &micro(3),
        &cfg,
        Some(out.path()),
    )
    .unwrap();
    assert_eq!(res.trials.len(), 5);
    let sets: BTreeSet<_> = res.trials.iter().map(|t| t.plan.train_utterances(&f.manifest)).collect();
    assert_eq!(sets.len(), 5);
    let mean = res.trials.iter().map(|t| t.report.overall_accuracy).sum::<f64>() / 5.0;
    assert!((res.average.overall_accuracy - mean).abs() < 1e-12);
    for k in 0..5 {
        let dir = out.path().join(format!("trial{k}"));
        for name in ["best.capw", "config.json", "history.csv", "split.json", "report.json"] {
            assert!(dir.join(name).exists(), "missing {name} in trial{k}");
        }
    }
    // a saved checkpoint scores bit-identically after reloading
    let loaded = Model::load(&out.path().join("trial0")).unwrap();
    let x: Vec<&FeatureMatrix> = f.features.iter().take(5).collect();
    assert_eq!(
        loaded.forward(&x).unwrap(),
        res.trials[0].model.forward(&x).unwrap()
    );
}

#[test]
fn single_trial_average_equals_its_report() {
    let f = Fixture::new(2, 4, 2, 9);
    let cfg = TrainConfig {
        max_epochs: Some(1),
        trials: 1,
        ..quick_cfg()
    };
    let res = run_trials(&f.manifest, Protocol::EsdStyle, &two_utterances(), &f.view(), &micro(2), &cfg, None)
        .unwrap();
    let r = &res.trials[0].report;
    assert_eq!(res.average.overall_accuracy, r.overall_accuracy);
    assert_eq!(res.average.per_emotion_accuracy, r.per_emotion_accuracy);
    assert_eq!(res.average.confusion, r.confusion);
}

#[test]
fn repetition_folds_share_one_split() {
    let f = Fixture::new(2, 4, 4, 9);
    let cfg = TrainConfig {
        max_epochs: Some(1),
        cv_folds: Some(2),
        ..quick_cfg()
    };
    let res = run_trials(&f.manifest, Protocol::EsdStyle, &two_utterances(), &f.view(), &micro(2), &cfg, None)
        .unwrap();
    assert_eq!(res.trials.len(), 2);
    assert_eq!(res.trials[0].plan.train_items, res.trials[1].plan.train_items);
    let v0: BTreeSet<_> = res.trials[0].history.validation_items.iter().collect();
    assert!(res.trials[1].history.validation_items.iter().all(|i| !v0.contains(i)));
    let t = timing_report(&[("a", &res.trials[0].history), ("b", &res.trials[1].history)]).unwrap();
    assert_eq!(t.measured.len(), 2);
}

#[test]
fn trial_errors_carry_the_trial_index() {
    let f = Fixture::new(2, 4, 2, 9);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        trials: 2,
        ..quick_cfg()
    };
    let err = run_trials(&f.manifest, Protocol::EsdStyle, &two_utterances(), &f.view(), &micro(2), &cfg, None)
        .unwrap_err();
    assert!(matches!(err, Error::Trial { trial: 0, .. }), "{err}");
    assert_eq!(err.class(), "divergence");
}
