//! Audio ingestion, corpus manifests, synthetic corpora and text-independent
//! split plans.

mod adapters;
mod manifest;
mod split;
mod synthetic;
mod wav;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adapters::{parse_ravdess_name, scan_ravdess, scan_susas_words, RavdessName, RavdessOptions};
pub use manifest::{read_manifest_csv, write_manifest_csv};
pub use split::{make_split_plan, Protocol, SplitOptions, SplitPlan};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus};
pub use wav::{load_wav, read_wav_bytes, write_wav_pcm16, write_wav_bytes_pcm16};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Neutral,
    Happy,
    Sad,
    Angry,
    Fear,
    Disgust,
    Loud,
    Soft,
    Slow,
    Fast,
    Calm,
    Surprise,
}

impl Emotion {
    pub const ALL: [Emotion; 12] = [
        Emotion::Neutral,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Angry,
        Emotion::Fear,
        Emotion::Disgust,
        Emotion::Loud,
        Emotion::Soft,
        Emotion::Slow,
        Emotion::Fast,
        Emotion::Calm,
        Emotion::Surprise,
    ];

    /// The six emotions studied on the ESD and RAVDESS corpora.
    pub const STUDIED: [Emotion; 6] = [
        Emotion::Neutral,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Angry,
        Emotion::Fear,
        Emotion::Disgust,
    ];

    /// SUSAS talking styles used for evaluation.
    pub const SUSAS: [Emotion; 6] = [
        Emotion::Neutral,
        Emotion::Angry,
        Emotion::Loud,
        Emotion::Soft,
        Emotion::Slow,
        Emotion::Fast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Angry => "angry",
            Emotion::Fear => "fear",
            Emotion::Disgust => "disgust",
            Emotion::Loud => "loud",
            Emotion::Soft => "soft",
            Emotion::Slow => "slow",
            Emotion::Fast => "fast",
            Emotion::Calm => "calm",
            Emotion::Surprise => "surprise",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let e = match lower.as_str() {
            "neutral" => Emotion::Neutral,
            "happy" => Emotion::Happy,
            "sad" => Emotion::Sad,
            "angry" | "anger" => Emotion::Angry,
            "fear" | "fearful" => Emotion::Fear,
            "disgust" => Emotion::Disgust,
            "loud" => Emotion::Loud,
            "soft" => Emotion::Soft,
            "slow" => Emotion::Slow,
            "fast" => Emotion::Fast,
            "calm" => Emotion::Calm,
            "surprise" | "surprised" => Emotion::Surprise,
            _ => return Err(Error::parse("emotion", format!("unknown emotion {s:?}"))),
        };
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipLabels {
    pub speaker_id: String,
    pub emotion: Emotion,
    pub utterance_id: String,
    pub repetition: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub labels: Option<ClipLabels>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let clip = AudioClip {
            samples,
            sample_rate_hz,
            labels: None,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn with_labels(mut self, labels: ClipLabels) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Contract("audio clip has no samples".into()));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some(i) = self
            .samples
            .iter()
            .position(|x| !x.is_finite() || x.abs() > 1.0)
        {
            return Err(Error::Contract(format!(
                "sample {i} = {} outside [-1, 1]",
                self.samples[i]
            )));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Ravdess,
    SusasWords,
    Generic,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labels: ClipLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub kind: CorpusKind,
    entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(kind: CorpusKind, entries: Vec<ManifestEntry>) -> Result<Self> {
        let manifest = CorpusManifest { kind, entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let l = &e.labels;
            let key = (&l.speaker_id, l.emotion, &l.utterance_id, l.repetition);
            if !seen.insert(key) {
                return Err(Error::Contract(format!(
                    "manifest entry {i} duplicates ({}, {}, {}, {})",
                    l.speaker_id, l.emotion, l.utterance_id, l.repetition
                )));
            }
        }
        let speakers = self.speakers().len();
        let utterances = self.utterances().len();
        if speakers < 2 || utterances < 2 {
            return Err(Error::Contract(format!(
                "manifest needs at least 2 speakers and 2 utterances, found {speakers} and {utterances}"
            )));
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self, index: usize) -> &ClipLabels {
        &self.entries[index].labels
    }

    /// Sorted distinct speaker ids; a speaker's position is its class index.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.iter().map(|e| &e.labels.speaker_id).collect();
        set.into_iter().cloned().collect()
    }

    pub fn utterances(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .entries
            .iter()
            .map(|e| &e.labels.utterance_id)
            .collect();
        set.into_iter().cloned().collect()
    }

    pub fn emotions(&self) -> Vec<Emotion> {
        let set: BTreeSet<Emotion> = self.entries.iter().map(|e| e.labels.emotion).collect();
        set.into_iter().collect()
    }
}
