use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use capsid::config::{Need, RunConfig};
use capsid::corpus::{
    generate_synthetic_corpus, load_wav, write_manifest_csv, write_wav_pcm16, CorpusManifest, ManifestEntry, SplitPlan,
};
use capsid::dsp::write_archive;
use capsid::evaluator::{ablation_grid, evaluate, noise_eval, wilcoxon_signed_rank, AveragedReport, EvalReport};
use capsid::models::Model;
use capsid::trainer::{run_trials, timing_report, TrainHistory};
use capsid::Error;
use serde_json::json;

use crate::data::{self, prepare, view, write};

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, &[Need::Out])?;
    let s = &cfg.synth;
    let corpus = generate_synthetic_corpus(s.speakers, s.utterances, s.reps, cfg.run.seed)?;
    let mut entries = Vec::with_capacity(corpus.clips.len());
    for (entry, clip) in corpus.manifest.entries().iter().zip(&corpus.clips) {
        let path = out.join(&entry.path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_wav_pcm16(&path, clip)?;
        entries.push(ManifestEntry {
            path,
            labels: entry.labels.clone(),
        });
    }
    let manifest = CorpusManifest::new(corpus.manifest.kind, entries)?;
    write_manifest_csv(out.join("manifest.csv"), &manifest)?;
    println!(
        "synthesized {} clips ({} speakers × {} utterances × {} reps × 6 emotions) in {}",
        manifest.len(),
        s.speakers,
        s.utterances,
        s.reps,
        out.display()
    );
    Ok(())
}

pub fn extract(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, &[Need::Corpus, Need::Out])?;
    let manifest = data::manifest(cfg)?;
    let features = data::extract_items(cfg, &manifest, None)?;
    let archive = data::to_archive(&manifest, features);
    let path = out.join("features.capf");
    write_archive(&path, &archive)?;
    println!(
        "extracted {} of {} clips ({} skipped) into {}",
        archive.records.len(),
        manifest.len(),
        manifest.len() - archive.records.len(),
        path.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, &[Need::Corpus, Need::Out])?;
    let manifest = data::manifest(cfg)?;
    let features = data::features(cfg, &manifest, None)?;
    let outcome = run_trials(
        &manifest,
        cfg.corpus.protocol,
        &cfg.split,
        &view(&features),
        &cfg.model,
        &cfg.train,
        Some(out),
    )?;
    write(&out.join("average.json"), &outcome.average.to_json())?;
    write(&out.join("average_emotions.csv"), &outcome.average.emotion_csv())?;
    let labels: Vec<String> = (0..outcome.trials.len())
        .map(|k| format!("{} trial{k}", cfg.model.architecture))
        .collect();
    let rows: Vec<(&str, &TrainHistory)> = labels
        .iter()
        .zip(&outcome.trials)
        .map(|(l, t)| (l.as_str(), &t.history))
        .collect();
    write(&out.join("timing.csv"), &timing_report(&rows)?.to_csv())?;
    for (k, t) in outcome.trials.iter().enumerate() {
        println!(
            "trial {k}: {:.2}% over {} test items after {} epochs (best {})",
            t.report.overall_accuracy,
            t.report.n_test_items,
            t.history.epochs(),
            t.history.best_epoch
        );
    }
    println!("average over {} trials: {:.2}%", outcome.average.n_trials, outcome.average.overall_accuracy);
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, &[Need::Corpus, Need::Model, Need::Out])?;
    let dir = cfg.paths.model.as_deref().expect("validated");
    let model = Model::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let mc = model.config();
    if (mc.input_rows, mc.input_frames) != (cfg.features.n_rows(), cfg.features.target_frames) {
        return Err(Error::Config(format!(
            "checkpoint expects {}×{} inputs but the feature config gives {}×{}",
            mc.input_rows,
            mc.input_frames,
            cfg.features.n_rows(),
            cfg.features.target_frames
        ))
        .into());
    }
    let split_path = cfg.paths.split.clone().unwrap_or_else(|| dir.join("split.json"));
    let plan = SplitPlan::read_json(&split_path).with_context(|| format!("reading {}", split_path.display()))?;
    let manifest = data::manifest(cfg)?;
    plan.check(&manifest)?;
    let seed = cfg.run.seed;
    if cfg.eval.noise {
        let load = |i: usize| load_wav(&manifest.entries()[i].path);
        let report = noise_eval(
            &model,
            &manifest,
            &plan.test_items,
            &load,
            &cfg.features,
            cfg.eval.noise_ratio,
            seed,
        )?;
        report.write_all(out)?;
        print!("{}", report.table_csv());
    } else {
        let features = data::features(cfg, &manifest, Some(&plan.test_items))?;
        let report = evaluate(&model, &manifest, &plan.test_items, &view(&features), seed)?;
        report.write_all(out, "report")?;
        print!("{}", report.emotion_csv());
        println!("overall: {:.2}% over {} test items", report.overall_accuracy, report.n_test_items);
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, &[Need::Corpus, Need::Out])?;
    let manifest = data::manifest(cfg)?;
    let features = data::features(cfg, &manifest, None)?;
    let report = ablation_grid(
        &manifest,
        &view(&features),
        cfg.corpus.protocol,
        &cfg.split,
        &cfg.model,
        &cfg.train,
    )?;
    write(&out.join("ablation.csv"), &report.to_csv())?;
    write(&out.join("ablation.json"), &report.to_json())?;
    print!("{}", report.to_csv());
    Ok(())
}

struct Run {
    label: String,
    average: AveragedReport,
    histories: Vec<TrainHistory>,
}

/// `trial<k>` subdirectories of a run, ordered by `k`.
fn trial_dirs(run: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(run).map_err(|e| Error::io(run, e))? {
        let path = entry.map_err(|e| Error::io(run, e))?.path();
        let k = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("trial"))
            .and_then(|k| k.parse::<usize>().ok());
        if let (Some(k), true) = (k, path.is_dir()) {
            dirs.push((k, path));
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("{} holds no trial directories", run.display())).into());
    }
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

fn load_run(dir: &Path, label: String) -> Result<Run> {
    let mut reports = Vec::new();
    let mut histories = Vec::new();
    for t in trial_dirs(dir)? {
        let path = t.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        reports.push(EvalReport::from_json(&text)?);
        let hist = t.join("history.csv");
        if hist.exists() {
            histories.push(TrainHistory {
                records: TrainHistory::read_csv(&hist)?,
                best_epoch: 0,
                items_read: Vec::new(),
                validation_items: Vec::new(),
            });
        }
    }
    Ok(Run {
        label,
        average: AveragedReport::from_reports(reports)?,
        histories,
    })
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, &[Need::Out])?;
    if cfg.paths.compare.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()).into());
    }
    let mut runs = Vec::new();
    for (i, dir) in cfg.paths.compare.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
        let label = if runs.iter().any(|r: &Run| r.label == name) {
            format!("{name}_{i}")
        } else {
            name.to_string()
        };
        let run = load_run(dir, label).with_context(|| format!("reading run {}", dir.display()))?;
        write(&out.join(format!("{}_average.json", run.label)), &run.average.to_json())?;
        runs.push(run);
    }

    let mut emotions: BTreeMap<_, Vec<Option<f64>>> = BTreeMap::new();
    for (i, run) in runs.iter().enumerate() {
        for (e, acc) in &run.average.per_emotion_accuracy {
            emotions.entry(*e).or_insert_with(|| vec![None; runs.len()])[i] = Some(*acc);
        }
    }
    let mut table = String::from("emotion");
    for r in &runs {
        table += &format!(",{}", r.label);
    }
    table.push('\n');
    let cell = |v: Option<f64>| v.map(|a| format!("{a:.4}")).unwrap_or_default();
    for (e, accs) in &emotions {
        table += &format!("{e}");
        for a in accs {
            table += &format!(",{}", cell(*a));
        }
        table.push('\n');
    }
    table += "overall";
    for r in &runs {
        table += &format!(",{:.4}", r.average.overall_accuracy);
    }
    table.push('\n');
    write(&out.join("report_emotions.csv"), &table)?;
    print!("{table}");

    let labels: Vec<String> = runs
        .iter()
        .flat_map(|r| (0..r.histories.len()).map(move |k| format!("{} trial{k}", r.label)))
        .collect();
    let rows: Vec<(&str, &TrainHistory)> = labels
        .iter()
        .map(String::as_str)
        .zip(runs.iter().flat_map(|r| &r.histories))
        .collect();
    if !rows.is_empty() {
        write(&out.join("timing.csv"), &timing_report(&rows)?.to_csv())?;
    }

    if let [a, b] = &runs[..] {
        let paired: Vec<(f64, f64)> = emotions
            .values()
            .filter_map(|v| Some((v[0]?, v[1]?)))
            .collect();
        let (xa, xb): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
        let test = match wilcoxon_signed_rank(&xa, &xb, cfg.eval.sidedness) {
            Ok(t) => {
                println!(
                    "wilcoxon {} vs {}: W = {}, n = {}, p = {:.4}",
                    a.label, b.label, t.statistic, t.n, t.p_value
                );
                Some(t)
            }
            Err(e @ Error::DegenerateTest(_)) => {
                log::warn!("no significance test: {e}");
                None
            }
            Err(e) => return Err(e.into()),
        };
        let comparison = json!({
            "seed": cfg.run.seed,
            "runs": [a.label, b.label],
            "emotions": emotions.keys().map(|e| e.to_string()).collect::<Vec<_>>(),
            "overall": [a.average.overall_accuracy, b.average.overall_accuracy],
            "wilcoxon": test,
        });
        write(
            &out.join("comparison.json"),
            &(serde_json::to_string_pretty(&comparison).expect("json") + "\n"),
        )?;
    }
    Ok(())
}
