//! Run configuration: one merged view of every stage's settings, loadable
//! from flat `section.key = value` text or from a `run.json` written by an
//! earlier run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{
    read_manifest_csv, scan_ravdess, scan_susas_words, CorpusKind, CorpusManifest, Protocol, RavdessOptions,
    SplitOptions,
};
use crate::dsp::FeatureConfig;
use crate::error::{Error, Result};
use crate::evaluator::Sidedness;
use crate::models::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; never changes numeric results.
    pub workers: usize,
    pub skip_errors: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            workers: 1,
            skip_errors: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub kind: CorpusKind,
    pub protocol: Protocol,
    pub include_song: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            kind: CorpusKind::Generic,
            protocol: Protocol::EsdStyle,
            include_song: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub speakers: usize,
    pub utterances: usize,
    pub reps: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            speakers: 8,
            utterances: 8,
            reps: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// also score white-noise distorted audio
    pub noise: bool,
    /// speech:noise RMS ratio of the distortion study
    pub noise_ratio: f64,
    pub sidedness: Sidedness,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            noise: false,
            noise_ratio: 2.0,
            sidedness: Sidedness::TwoSided,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// manifest CSV
    pub manifest: Option<PathBuf>,
    /// corpus tree scanned when no manifest is given (RAVDESS, SUSAS words)
    pub corpus_root: Option<PathBuf>,
    /// feature archive
    pub archive: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// checkpoint directory for evaluation
    pub model: Option<PathBuf>,
    /// split plan; defaults to the one stored next to the checkpoint
    pub split: Option<PathBuf>,
    /// run directories compared by `report`
    pub compare: Vec<PathBuf>,
}

/// Every setting of a run. Serialized as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub split: SplitOptions,
    pub synth: SynthSection,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            run: RunSection::default(),
            corpus: CorpusSection::default(),
            split: SplitOptions::default(),
            synth: SynthSection::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            paths: Paths::default(),
        };
        cfg.finalize();
        cfg
    }
}

/// Path fields a command cannot run without.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    /// a manifest CSV or a corpus root
    Corpus,
    Archive,
    Out,
    Model,
}

impl RunConfig {
    /// Load a config file: JSON when the first non-blank character is `{`,
    /// flat `section.key = value` text otherwise. Unset keys keep defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        if text.trim_start().starts_with('{') {
            RunConfig::from_json(text)
        } else {
            let mut cfg = RunConfig::default();
            cfg.apply_flat(text)?;
            Ok(cfg)
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::parse("run config", e.to_string()))?;
        let mut base = to_value(&RunConfig::default());
        let mut errors = Vec::new();
        merge(&mut base, value, "", &mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        let mut cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.finalize();
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Apply flat `key = value` lines (`#` starts a comment). Every bad line
    /// is reported, not just the first.
    pub fn apply_flat(&mut self, text: &str) -> Result<()> {
        let mut errors = Vec::new();
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
                None => errors.push(format!("line {}: expected `key = value`, got {line:?}", n + 1)),
            }
        }
        if let Err(Error::Config(msg)) = self.set_all(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))) {
            errors.push(msg);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    /// Set `section.key` fields from text values, collecting every failure.
    pub fn set_all<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut value = to_value(self);
        let mut errors = Vec::new();
        for (key, raw) in pairs {
            let mut trial = value.clone();
            match assign(&mut trial, key, raw) {
                Err(msg) => errors.push(msg),
                Ok(()) => match serde_json::from_value::<RunConfig>(trial.clone()) {
                    Ok(_) => value = trial,
                    Err(e) => errors.push(format!("{key} = {raw:?}: {e}")),
                },
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        *self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        self.finalize();
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set_all([(key, raw)])
    }

    /// Propagate the values other sections derive from: the training seed
    /// and the model's input geometry.
    pub fn finalize(&mut self) {
        self.train.seed = self.run.seed;
        self.model.input_rows = self.features.n_rows();
        self.model.input_frames = self.features.target_frames;
    }

    /// Every violated field of every section, plus missing or nonexistent
    /// paths for what the command needs.
    pub fn violations(&self, needs: &[Need]) -> Vec<String> {
        let mut v = self.features.violations();
        // n_classes comes from the corpus at run time
        v.extend(
            ModelConfig {
                n_classes: self.model.n_classes.max(2),
                ..self.model.clone()
            }
            .violations(),
        );
        v.extend(self.train.violations());
        if self.run.workers == 0 {
            v.push("run.workers must be at least 1".into());
        }
        if !(self.eval.noise_ratio > 0.0) {
            v.push(format!("eval.noise_ratio must be positive, got {}", self.eval.noise_ratio));
        }
        let p = &self.paths;
        for need in needs {
            match need {
                Need::Corpus if p.manifest.is_none() && p.corpus_root.is_none() => {
                    v.push("paths.manifest or paths.corpus_root is required".into())
                }
                Need::Archive if p.archive.is_none() => v.push("paths.archive is required".into()),
                Need::Out if p.out.is_none() => v.push("paths.out is required".into()),
                Need::Model if p.model.is_none() => v.push("paths.model is required".into()),
                _ => {}
            }
        }
        let inputs = [
            ("paths.manifest", &p.manifest),
            ("paths.corpus_root", &p.corpus_root),
            ("paths.model", &p.model),
            ("paths.split", &p.split),
        ];
        for (key, path) in inputs {
            if let Some(path) = path {
                if !path.exists() {
                    v.push(format!("{key}: {} does not exist", path.display()));
                }
            }
        }
        if needs.contains(&Need::Archive) {
            if let Some(a) = &p.archive {
                if !a.exists() {
                    v.push(format!("paths.archive: {} does not exist", a.display()));
                }
            }
        }
        for dir in &p.compare {
            if !dir.exists() {
                v.push(format!("paths.compare: {} does not exist", dir.display()));
            }
        }
        v
    }

    pub fn validate(&self, needs: &[Need]) -> Result<()> {
        let v = self.violations(needs);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Manifest from `paths.manifest`, or by scanning `paths.corpus_root`
    /// according to `corpus.kind`.
    pub fn load_manifest(&self) -> Result<CorpusManifest> {
        if let Some(m) = &self.paths.manifest {
            return read_manifest_csv(m, self.corpus.kind);
        }
        let root = self
            .paths
            .corpus_root
            .as_ref()
            .ok_or_else(|| Error::Config("paths.manifest or paths.corpus_root is required".into()))?;
        match self.corpus.kind {
            CorpusKind::Ravdess => scan_ravdess(
                root,
                RavdessOptions {
                    include_song: self.corpus.include_song,
                },
            ),
            CorpusKind::SusasWords => scan_susas_words(root),
            kind => Err(Error::Config(format!(
                "corpus.kind = {kind:?} has no directory scanner; give paths.manifest"
            ))),
        }
    }
}

fn to_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Overlay `src` on `dst`, recording keys `dst` does not have.
fn merge(dst: &mut Value, src: Value, prefix: &str, errors: &mut Vec<String>) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &key, errors),
                    Some(slot) => *slot = v,
                    None => errors.push(format!("unknown key {key}")),
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn assign(root: &mut Value, key: &str, raw: &str) -> std::result::Result<(), String> {
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part).ok_or_else(|| format!("unknown key {key}"))?,
            _ => return Err(format!("unknown key {key}")),
        };
    }
    let raw = raw.trim().trim_matches('"');
    *slot = match slot {
        Value::Object(_) => return Err(format!("{key} is a section, not a value")),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.into()))
                .collect(),
        ),
        Value::Bool(_) => Value::Bool(parse_bool(raw).ok_or_else(|| format!("{key}: expected true/false, got {raw:?}"))?),
        Value::Number(_) => number(raw).ok_or_else(|| format!("{key}: expected a number, got {raw:?}"))?,
        Value::String(_) => Value::String(raw.into()),
        Value::Null if key.starts_with("paths.") => Value::String(raw.into()),
        Value::Null => guess(raw),
    };
    Ok(())
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

fn number(raw: &str) -> Option<Value> {
    if let Ok(u) = raw.parse::<u64>() {
        return Some(Value::from(u));
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Some(Value::from(i));
    }
    raw.parse::<f64>().ok().and_then(serde_json::Number::from_f64).map(Value::Number)
}

fn guess(raw: &str) -> Value {
    match raw.to_ascii_lowercase().as_str() {
        "" | "none" | "null" => Value::Null,
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => number(raw).unwrap_or_else(|| Value::String(raw.into())),
    }
}
