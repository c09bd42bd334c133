//! Acceptance criteria 1 to 11. Each test writes one verdict line to stderr
//! (visible without `--nocapture`) and fails if its criterion does not hold.
//! Criteria run one at a time so the timed ones measure a quiet machine.
//!
//! Criterion 11 needs a RAVDESS speech tree in `CAPSID_RAVDESS_DIR`; it is
//! skipped otherwise.

#[path = "../../core/tests/gradcheck/mod.rs"]
mod gradcheck;

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use capsid::autodiff::Tensor;
use capsid::corpus::{
    generate_synthetic_corpus, make_split_plan, scan_ravdess, AudioClip, CorpusManifest, Emotion, Protocol,
    RavdessOptions, SplitOptions,
};
use capsid::dsp::{add_noise, delta_features, extract_features, FeatureConfig, FeatureMatrix, Matrix};
use capsid::evaluator::{
    ablation_grid, auc_macro, metrics, noise_eval, wilcoxon_signed_rank, Confusion, Sidedness, ABLATION_ROUTINGS,
};
use capsid::models::{build_model, margin_loss, route, squash, total_loss, Architecture, GeometryPreset, LossConfig, ModelConfig};
use capsid::trainer::{run_trials, train, TrainConfig};
use capsid_oracles::{
    auc_pair_count, brute_metrics, mfcc_reference, route_by_hand, squash_reference, wilcoxon_enumerate, MfccParams,
};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

static SERIAL: Mutex<()> = Mutex::new(());

/// Run `check` alone, print its verdict line and fail on error.
fn criterion(n: u8, title: &str, check: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|p| p.into_inner());
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(check)) {
        Ok(r) => r,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    let line = format!("criterion {n:>2} {tag}  {title} [{secs:.1}s]: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    if let Err(e) = outcome {
        panic!("criterion {n}: {e}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

#[test]
fn criterion_01_routing_core() {
    criterion(1, "routing trajectory vs hand iteration", || {
        let fx = vec![
            vec![vec![0.9, 0.4], vec![0.6, -0.3]],
            vec![vec![0.8, 0.5], vec![-0.5, 0.4]],
        ];
        let start = Instant::now();
        let u: Vec<f64> = fx.iter().flat_map(|i| flat(i)).collect();
        let (_, state) = route(&Tensor::new(&[2, 2, 2], u).unwrap(), 3).map_err(|e| e.to_string())?;
        let want = route_by_hand(&fx, 3);
        let elapsed = start.elapsed().as_secs_f64();
        let mut worst: f64 = 0.0;
        let mut worst_sum: f64 = 0.0;
        for (got, want) in state.steps.iter().zip(&want) {
            worst = worst
                .max(max_abs_diff(got.b.data(), &flat(&want.b)))
                .max(max_abs_diff(got.c.data(), &flat(&want.c)))
                .max(max_abs_diff(got.s.data(), &flat(&want.s)))
                .max(max_abs_diff(got.v.data(), &flat(&want.v)));
            for row in got.c.data().chunks(2) {
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        ensure(state.steps.len() == 3, || format!("{} iterations recorded", state.steps.len()))?;
        ensure(worst <= 1e-9, || format!("trajectory deviates by {worst:e}"))?;
        ensure(worst_sum <= 1e-9, || format!("coupling sums off by {worst_sum:e}"))?;
        ensure(elapsed < 1.0, || format!("took {elapsed:.3}s"))?;
        Ok(format!("max deviation {worst:.1e}, Σc error {worst_sum:.1e}"))
    });
}

#[test]
fn criterion_02_squash_contract() {
    criterion(2, "squash length, zero and direction", || {
        let mut rng = SplitMix64::seed_from_u64(2);
        let (mut len_err, mut cos_err, mut ref_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for _ in 0..1000 {
            let d = rng.gen_range(1..17);
            let scale = 10f64.powf(rng.gen_range(-2.0..1.5));
            let s: Vec<f64> = (0..d).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            let v = squash(&Tensor::new(&[d], s.clone()).unwrap()).unwrap();
            let (ns, nv) = (norm(&s), norm(v.data()));
            len_err = len_err.max((nv - ns * ns / (1.0 + ns * ns)).abs());
            let cos = s.iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>() / (ns * nv);
            cos_err = cos_err.max((cos - 1.0).abs());
            ref_err = ref_err.max(max_abs_diff(v.data(), &squash_reference(&s)));
        }
        let zero = squash(&Tensor::zeros(&[8])).unwrap();
        ensure(zero.data().iter().all(|x| *x == 0.0), || "squash(0) ≠ 0".into())?;
        ensure(len_err <= 1e-12, || format!("length error {len_err:e}"))?;
        ensure(cos_err <= 1e-12, || format!("cosine error {cos_err:e}"))?;
        ensure(ref_err <= 1e-12, || format!("deviates from textbook form by {ref_err:e}"))?;
        Ok(format!("1000 vectors, length error {len_err:.1e}, cosine error {cos_err:.1e}"))
    });
}

#[test]
fn criterion_03_loss_values() {
    criterion(3, "margin and total loss hand cases", || {
        let cfg = LossConfig::default();
        let mut l = vec![0.05; 5];
        l[2] = 0.95;
        let a = margin_loss(&l, 2, &cfg).unwrap();
        l[2] = 0.8;
        let b = margin_loss(&l, 2, &cfg).unwrap();
        l[2] = 0.95;
        l[4] = 0.3;
        let c = margin_loss(&l, 2, &cfg).unwrap();
        let t = total_loss(0.02, Some(4.0), &cfg);
        for (got, want) in [(a, 0.0), (b, 0.01), (c, 0.02), (t, 0.022)] {
            ensure((got - want).abs() <= 1e-15, || format!("{got} vs {want}"))?;
        }
        ensure(total_loss(0.02, None, &cfg) == 0.02, || "decoder-off total ≠ margin".into())?;
        Ok(format!("margin {a}, {b}, {c}; total {t}"))
    });
}

#[test]
fn criterion_04_gradient_suite() {
    criterion(4, "central-difference gradient suite", || {
        let start = Instant::now();
        gradcheck::elementwise_ops();
        gradcheck::shape_and_reduction_ops();
        gradcheck::layer_ops();
        gradcheck::capsule_ops();
        gradcheck::loss_ops();
        gradcheck::routing_chain_gradient();
        let e2e = gradcheck::micro_capsnet_end_to_end_gradient();
        let secs = start.elapsed().as_secs_f64();
        ensure(e2e <= 1e-4, || format!("end-to-end error {e2e:e}"))?;
        ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
        Ok(format!("all ops ≤ 1e-5 over 10 shapes, micro model {e2e:.1e}"))
    });
}

#[test]
fn criterion_05_mfcc_oracle() {
    criterion(5, "MFCC chain vs reference implementation", || {
        let start = Instant::now();
        let sr = 16_000u32;
        let n = 8000;
        let tau = 2.0 * std::f64::consts::PI;
        let signals: [(&str, Vec<f64>); 3] = [
            ("silence", vec![0.0; n]),
            ("440 Hz", (0..n).map(|i| 0.5 * (tau * 440.0 * i as f64 / sr as f64).sin()).collect()),
            (
                "chirp",
                (0..n)
                    .map(|i| {
                        let t = i as f64 / sr as f64;
                        0.3 * (tau * (200.0 * t + 3800.0 * t * t)).sin()
                    })
                    .collect(),
            ),
        ];
        let cfg = FeatureConfig {
            target_frames: 60,
            ..FeatureConfig::default()
        };
        let params = MfccParams {
            target_frames: 60,
            ..MfccParams::default()
        };
        let mut worst: f64 = 0.0;
        for (name, s) in &signals {
            let ours = extract_features(&AudioClip::new(s.clone(), sr).unwrap(), &cfg).map_err(|e| e.to_string())?;
            let (reference, valid) = mfcc_reference(s, sr, &params);
            ensure(ours.n_valid_frames == valid, || format!("{name}: {} vs {valid} frames", ours.n_valid_frames))?;
            ensure(valid == (n - 400) / 160 + 1, || format!("{name}: frame count {valid}"))?;
            let e = max_abs_diff(&ours.values, &flat(&reference));
            ensure(e <= 1e-3, || format!("{name}: coefficient error {e:e}"))?;
            worst = worst.max(e);
        }
        let d = delta_features(&Matrix::from_vec(25, 20, vec![-3.5; 500]), 2).unwrap();
        ensure(d.data.iter().all(|x| *x == 0.0), || "deltas of a constant are not 0".into())?;
        let secs = start.elapsed().as_secs_f64();
        ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
        Ok(format!("max coefficient error {worst:.1e}"))
    });
}

fn features_of(clips: &[AudioClip], cfg: &FeatureConfig) -> Vec<FeatureMatrix> {
    use rayon::prelude::*;
    clips.par_iter().map(|c| extract_features(c, cfg).unwrap()).collect()
}

#[test]
fn criterion_06_desk_scale_learning() {
    criterion(6, "synthetic 8×8×9 corpus, CapsNet-M and CNN", || {
        let start = Instant::now();
        let corpus = generate_synthetic_corpus(8, 8, 9, 7).map_err(|e| e.to_string())?;
        let fc = FeatureConfig {
            target_frames: 125,
            ..FeatureConfig::default()
        };
        let feats = features_of(&corpus.clips, &fc);
        let view: Vec<Option<&FeatureMatrix>> = feats.iter().map(Some).collect();
        let caps = ModelConfig {
            input_frames: 125,
            routing_iterations: 3,
            decoder_enabled: true,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            seed: 7,
            trials: 1,
            ..TrainConfig::default()
        };
        let opts = SplitOptions::default();
        let out = run_trials(&corpus.manifest, Protocol::EsdStyle, &opts, &view, &caps, &cfg, None)
            .map_err(|e| e.to_string())?;
        let t = &out.trials[0];
        let neutral = t.report.per_emotion_accuracy[&Emotion::Neutral];
        let overall = t.report.overall_accuracy;
        let caps_epochs = t.history.epochs();

        let cnn = ModelConfig {
            architecture: Architecture::BaselineCnn,
            ..caps.clone()
        };
        let cnn_cfg = TrainConfig {
            max_epochs: Some(40),
            ..cfg.clone()
        };
        let cnn_out = run_trials(&corpus.manifest, Protocol::EsdStyle, &opts, &view, &cnn, &cnn_cfg, None);
        let secs = start.elapsed().as_secs_f64();
        let summary = format!(
            "CapsNet-M neutral {neutral:.2}%, overall {overall:.2}% after {caps_epochs} epochs; CNN {}; {:.1} min",
            match &cnn_out {
                Ok(o) => format!("{:.2}% overall", o.average.overall_accuracy),
                Err(e) => format!("failed: {e}"),
            },
            secs / 60.0
        );
        ensure(caps_epochs <= 40, || format!("{caps_epochs} epochs: {summary}"))?;
        ensure(neutral >= 95.0 && overall >= 80.0, || summary.clone())?;
        ensure(cnn_out.is_ok(), || summary.clone())?;
        ensure(secs < 30.0 * 60.0, || format!("over 30 min: {summary}"))?;
        Ok(summary)
    });
}

fn micro_setup(speakers: usize, reps: usize) -> (CorpusManifest, Vec<AudioClip>, Vec<FeatureMatrix>, ModelConfig) {
    let corpus = generate_synthetic_corpus(speakers, 6, reps, 17).unwrap();
    let fc = FeatureConfig {
        target_frames: 8,
        ..FeatureConfig::default()
    };
    let feats = features_of(&corpus.clips, &fc);
    let mc = ModelConfig {
        geometry: GeometryPreset::Micro,
        input_frames: 8,
        n_classes: speakers,
        decoder_hidden: 32,
        ..ModelConfig::default()
    };
    (corpus.manifest, corpus.clips, feats, mc)
}

#[test]
fn criterion_07_ablation_grid() {
    criterion(7, "ablation grid over routing × decoder", || {
        let (manifest, _, feats, mc) = micro_setup(3, 2);
        let view: Vec<Option<&FeatureMatrix>> = feats.iter().map(Some).collect();
        let cfg = TrainConfig {
            max_epochs: Some(3),
            batch_size: 8,
            seed: 4,
            ..TrainConfig::default()
        };
        let r = ablation_grid(&manifest, &view, Protocol::EsdStyle, &SplitOptions::default(), &mc, &cfg)
            .map_err(|e| e.to_string())?;
        let cells: BTreeSet<(usize, bool)> = r.cells.iter().map(|c| (c.routing, c.decoder)).collect();
        let expected: BTreeSet<(usize, bool)> =
            ABLATION_ROUTINGS.flat_map(|k| [(k, true), (k, false)]).collect();
        ensure(r.cells.len() == 10, || format!("{} cells", r.cells.len()))?;
        ensure(cells == expected, || format!("cells {cells:?}"))?;
        ensure(r.to_csv().lines().count() == 11, || "csv is not 10 rows + header".into())?;
        ensure(
            r.cells.iter().all(|c| c.epochs == 3 && c.test_accuracy.is_finite()),
            || "a cell did not complete".into(),
        )?;
        r.plan.check(&manifest).map_err(|e| e.to_string())?;
        let accs: Vec<String> = r.cells.iter().map(|c| format!("{:.0}", c.test_accuracy)).collect();
        Ok(format!("10 cells on one split, test accuracies {}", accs.join("/")))
    });
}

#[test]
fn criterion_08_noise_harness() {
    criterion(8, "noise ratio, paired table, vanishing noise", || {
        let (manifest, clips, feats, mc) = micro_setup(2, 2);
        let mut worst: f64 = 0.0;
        for (i, c) in clips.iter().enumerate() {
            let noisy = add_noise(c, 2.0, i as u64).map_err(|e| e.to_string())?;
            let noise: Vec<f64> = noisy.samples.iter().zip(&c.samples).map(|(a, b)| a - b).collect();
            let ratio = c.rms() / (norm(&noise) / (noise.len() as f64).sqrt());
            worst = worst.max((ratio / 2.0 - 1.0).abs());
        }
        ensure(worst <= 0.01, || format!("RMS ratio off by {:.2}%", 100.0 * worst))?;

        let view: Vec<Option<&FeatureMatrix>> = feats.iter().map(Some).collect();
        let split = SplitOptions {
            train_utterances: Some(3),
            ..SplitOptions::default()
        };
        let plan = make_split_plan(&manifest, Protocol::EsdStyle, 0, &split).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            max_epochs: Some(3),
            batch_size: 4,
            seed: 8,
            ..TrainConfig::default()
        };
        let (model, _) = train(build_model(&mc, 8).unwrap(), &manifest, &plan, &view, &cfg).map_err(|e| e.to_string())?;
        let fc = FeatureConfig {
            target_frames: 8,
            ..FeatureConfig::default()
        };
        let load = |i: usize| Ok(clips[i].clone());
        let report = noise_eval(&model, &manifest, &plan.test_items, &load, &fc, 2.0, 3).map_err(|e| e.to_string())?;
        let table = report.table_csv();
        let lines: Vec<&str> = table.lines().collect();
        ensure(lines[0] == "emotion,normal,distorted", || format!("header {:?}", lines[0]))?;
        ensure(lines.len() == 1 + 6 + 2, || format!("{} table lines", lines.len()))?;

        let quiet = noise_eval(&model, &manifest, &plan.test_items, &load, &fc, 1e9, 3).map_err(|e| e.to_string())?;
        ensure(quiet.distorted == quiet.clean, || "ratio 1e9 changed the report".into())?;
        ensure(quiet.clean == report.clean, || "clean report is not stable".into())?;
        Ok(format!(
            "RMS ratio within {:.3}%, normal {:.1}% vs distorted {:.1}%",
            100.0 * worst,
            report.clean.overall_accuracy,
            report.distorted.overall_accuracy
        ))
    });
}

#[test]
fn criterion_09_metrics() {
    criterion(9, "metrics, AUC and Wilcoxon vs brute-force oracles", || {
        let mut rng = SplitMix64::seed_from_u64(99);
        for case in 0..100 {
            let k = rng.gen_range(2..8);
            let n = rng.gen_range(1..120);
            let pairs: Vec<(usize, usize)> = (0..n).map(|_| (rng.gen_range(0..k), rng.gen_range(0..k))).collect();
            let m = metrics(&Confusion::from_pairs(&pairs, k).unwrap()).unwrap();
            let b = brute_metrics(&pairs, k);
            let same = m.accuracy == b.accuracy
                && (0..k).all(|c| {
                    m.per_class[c].precision == b.precision[c]
                        && m.per_class[c].recall == b.recall[c]
                        && m.per_class[c].f1 == b.f1[c]
                });
            ensure(same, || format!("metrics differ on instance {case}"))?;
        }
        let mut auc_worst: f64 = 0.0;
        for _ in 0..100 {
            let k = rng.gen_range(2..5);
            let n = rng.gen_range(4..=50);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect()).collect();
            if let Some(want) = auc_pair_count(&scores, &labels, k) {
                let got = auc_macro(&scores, &labels, k).map_err(|e| e.to_string())?.macro_auc;
                auc_worst = auc_worst.max((got - want).abs());
            }
        }
        ensure(auc_worst <= 1e-12, || format!("AUC off by {auc_worst:e}"))?;
        let d = [1.0, 2.0, 3.0, 4.0, 5.0];
        let p = wilcoxon_signed_rank(&d, &[0.0; 5], Sidedness::TwoSided).map_err(|e| e.to_string())?.p_value;
        let (_, oracle_p) = wilcoxon_enumerate(&d);
        ensure(p == 0.0625 && oracle_p == 0.0625, || format!("p = {p}, oracle {oracle_p}"))?;
        Ok(format!("100 metric instances exact, AUC error {auc_worst:.1e}, Wilcoxon p = {p}"))
    });
}

fn capsid(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_capsid"))
        .args(args)
        .env("CAPSID_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("capsid {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Relative paths of every file under `dir`, sorted.
fn files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

/// Byte-compare two run directories, ignoring wall-clock and path records.
fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let fa = files(a);
    ensure(fa == files(b), || format!("{} and {} hold different files", a.display(), b.display()))?;
    let mut compared = 0;
    for f in &fa {
        let name = Path::new(f).file_name().unwrap().to_string_lossy();
        if matches!(name.as_ref(), "run.json" | "history.csv" | "timing.csv") {
            continue;
        }
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        ensure(x == y, || format!("{f} differs between reruns"))?;
        compared += 1;
    }
    Ok(compared)
}

#[test]
fn criterion_10_reproducibility() {
    criterion(10, "CLI reruns from run.json are bit-identical", || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
        let cfg = p("micro.cfg");
        std::fs::write(
            &cfg,
            "features.target_frames = 8\nmodel.geometry = micro\nmodel.decoder_hidden = 16\n\
             train.max_epochs = 2\ntrain.trials = 2\ntrain.batch_size = 8\n",
        )
        .map_err(|e| e.to_string())?;
        capsid(&["synth", "--speakers", "3", "--utterances", "6", "--reps", "2", "--seed", "5", "--out", &p("corpus")])?;
        let manifest = p("corpus/manifest.csv");
        let mut compared = 0;
        let runs: [(&str, Vec<&str>); 4] = [
            ("extract", vec!["extract", "--config", &cfg, "--manifest", &manifest]),
            ("train", vec!["train", "--config", &cfg, "--manifest", &manifest, "--seed", "3"]),
            ("ablate", vec!["ablate", "--config", &cfg, "--manifest", &manifest, "--set", "train.max_epochs=1"]),
            (
                "eval",
                vec!["eval", "--config", &cfg, "--manifest", &manifest, "--noise-ratio", "2"],
            ),
        ];
        let model_dir = p("train_a/trial0");
        for (name, args) in &runs {
            let first = p(&format!("{name}_a"));
            let mut a: Vec<&str> = args.clone();
            if *name == "eval" {
                a.extend(["--model", &model_dir]);
            }
            a.extend(["--out", &first]);
            capsid(&a)?;
            let rerun = p(&format!("{name}_b"));
            let run_json = format!("{first}/run.json");
            capsid(&[name, "--config", &run_json, "--out", &rerun])?;
            compared += same_outputs(Path::new(&first), Path::new(&rerun))?;
        }
        let threads = p("train_c");
        capsid(&["train", "--config", &p("train_a/run.json"), "--workers", "3", "--out", &threads])?;
        compared += same_outputs(Path::new(&p("train_a")), Path::new(&threads))?;
        Ok(format!("extract, train, ablate and eval reruns plus a 3-worker rerun agree on {compared} files"))
    });
}

#[test]
fn criterion_11_ravdess_open_data() {
    let Some(root) = std::env::var_os("CAPSID_RAVDESS_DIR") else {
        let _ = std::io::stderr()
            .lock()
            .write_all(b"criterion 11 SKIP  RAVDESS open-data check: set CAPSID_RAVDESS_DIR to run it\n");
        return;
    };
    criterion(11, "RAVDESS speech, ravdess-style split", || {
        let manifest = scan_ravdess(&root, RavdessOptions::default()).map_err(|e| e.to_string())?;
        let fc = FeatureConfig::default();
        let feats: Vec<FeatureMatrix> = {
            use rayon::prelude::*;
            manifest
                .entries()
                .par_iter()
                .map(|e| extract_features(&capsid::corpus::load_wav(&e.path)?, &fc))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?
        };
        let view: Vec<Option<&FeatureMatrix>> = feats.iter().map(Some).collect();
        let mc = ModelConfig {
            input_frames: fc.target_frames,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            seed: 11,
            trials: 1,
            ..TrainConfig::default()
        };
        let out = run_trials(&manifest, Protocol::RavdessStyle, &SplitOptions::default(), &view, &mc, &cfg, None)
            .map_err(|e| e.to_string())?;
        let neutral = out.average.per_emotion_accuracy[&Emotion::Neutral];
        let summary = format!(
            "{} speakers, neutral {neutral:.2}%, overall {:.2}%",
            manifest.speakers().len(),
            out.average.overall_accuracy
        );
        ensure(neutral >= 85.0, || summary.clone())?;
        Ok(summary)
    });
}
