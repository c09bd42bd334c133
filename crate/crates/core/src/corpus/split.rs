use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CorpusKind, CorpusManifest, Emotion};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Neutral speech of 4 random utterances trains; every emotion of the
    /// remaining utterances tests.
    EsdStyle,
    /// Neutral speech of one statement trains; all emotions of the other
    /// statement test.
    RavdessStyle,
    /// Neutral speech of 15 random words trains; every condition of the
    /// remaining words tests.
    SusasStyle,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "esd" | "esd_style" => Ok(Protocol::EsdStyle),
            "ravdess" | "ravdess_style" => Ok(Protocol::RavdessStyle),
            "susas" | "susas_style" => Ok(Protocol::SusasStyle),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::EsdStyle => "esd_style",
            Protocol::RavdessStyle => "ravdess_style",
            Protocol::SusasStyle => "susas_style",
        }
    }

    fn default_train_utterances(self) -> usize {
        match self {
            Protocol::EsdStyle => 4,
            Protocol::RavdessStyle => 1,
            Protocol::SusasStyle => 15,
        }
    }

    fn accepts(self, kind: CorpusKind) -> bool {
        match self {
            Protocol::EsdStyle => matches!(kind, CorpusKind::Generic | CorpusKind::Synthetic),
            Protocol::RavdessStyle => matches!(kind, CorpusKind::Ravdess | CorpusKind::Generic),
            Protocol::SusasStyle => matches!(
                kind,
                CorpusKind::SusasWords | CorpusKind::Generic | CorpusKind::Synthetic
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Number of utterances whose neutral takes train; protocol default when
    /// `None` (4 for esd_style, 15 for susas_style).
    pub train_utterances: Option<usize>,
    /// Statement used for training under ravdess_style.
    pub ravdess_train_statement: String,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            train_utterances: None,
            ravdess_train_statement: "statement01".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    #[serde(rename = "trial")]
    pub trial_index: usize,
    pub seed: u64,
    pub protocol: Protocol,
    #[serde(rename = "train")]
    pub train_items: Vec<usize>,
    #[serde(rename = "test")]
    pub test_items: Vec<usize>,
}

impl SplitPlan {
    /// Plan for trial `k` of a rotation run: seed is `base_seed + k`.
    pub fn for_trial(
        manifest: &CorpusManifest,
        protocol: Protocol,
        base_seed: u64,
        trial: usize,
        opts: &SplitOptions,
    ) -> Result<SplitPlan> {
        let mut plan = make_split_plan(
            manifest,
            protocol,
            base_seed.wrapping_add(trial as u64),
            opts,
        )?;
        plan.trial_index = trial;
        Ok(plan)
    }

    pub fn train_utterances(&self, manifest: &CorpusManifest) -> BTreeSet<String> {
        self.train_items
            .iter()
            .map(|&i| manifest.labels(i).utterance_id.clone())
            .collect()
    }

    pub fn test_utterances(&self, manifest: &CorpusManifest) -> BTreeSet<String> {
        self.test_items
            .iter()
            .map(|&i| manifest.labels(i).utterance_id.clone())
            .collect()
    }

    /// Check the text-independence and neutral-only invariants against a
    /// manifest.
    pub fn check(&self, manifest: &CorpusManifest) -> Result<()> {
        for &i in self.train_items.iter().chain(&self.test_items) {
            if i >= manifest.len() {
                return Err(Error::Contract(format!(
                    "split item {i} out of range for a manifest of {}",
                    manifest.len()
                )));
            }
        }
        if let Some(&i) = self
            .train_items
            .iter()
            .find(|&&i| manifest.labels(i).emotion != Emotion::Neutral)
        {
            return Err(Error::ProtocolViolation(format!(
                "train item {i} has emotion {}",
                manifest.labels(i).emotion
            )));
        }
        let train = self.train_utterances(manifest);
        let test = self.test_utterances(manifest);
        if let Some(u) = train.intersection(&test).next() {
            return Err(Error::ProtocolViolation(format!(
                "utterance {u:?} appears in both train and test"
            )));
        }
        let train_set: BTreeSet<_> = self.train_items.iter().collect();
        if self.test_items.iter().any(|i| train_set.contains(i)) {
            return Err(Error::ProtocolViolation("train and test items overlap".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split plan serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<SplitPlan> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("split plan", e.to_string()))
    }
}

pub fn make_split_plan(
    manifest: &CorpusManifest,
    protocol: Protocol,
    trial_seed: u64,
    opts: &SplitOptions,
) -> Result<SplitPlan> {
    manifest.validate()?;
    if !protocol.accepts(manifest.kind) {
        return Err(Error::Config(format!(
            "protocol {} does not apply to a {:?} corpus",
            protocol.name(),
            manifest.kind
        )));
    }
    let utterances = manifest.utterances();
    let train_utts: BTreeSet<String> = match protocol {
        Protocol::RavdessStyle => {
            let stmt = &opts.ravdess_train_statement;
            if !utterances.contains(stmt) {
                return Err(Error::Config(format!("statement {stmt:?} not in manifest")));
            }
            [stmt.clone()].into()
        }
        Protocol::EsdStyle | Protocol::SusasStyle => {
            let k = opts
                .train_utterances
                .unwrap_or_else(|| protocol.default_train_utterances());
            if k == 0 || utterances.len() <= k {
                return Err(Error::Config(format!(
                    "{} needs more than {k} distinct utterances, manifest has {}",
                    protocol.name(),
                    utterances.len()
                )));
            }
            let mut order = utterances.clone();
            order.shuffle(&mut rng::rng(trial_seed));
            order.into_iter().take(k).collect()
        }
    };

    let mut train_items = Vec::new();
    let mut test_items = Vec::new();
    for (i, e) in manifest.entries().iter().enumerate() {
        let l = &e.labels;
        if train_utts.contains(&l.utterance_id) {
            if l.emotion == Emotion::Neutral {
                train_items.push(i);
            }
        } else {
            test_items.push(i);
        }
    }
    if train_items.is_empty() || test_items.is_empty() {
        return Err(Error::Config(format!(
            "{} produced an empty train or test set",
            protocol.name()
        )));
    }
    let plan = SplitPlan {
        trial_index: 0,
        seed: trial_seed,
        protocol,
        train_items,
        test_items,
    };
    plan.check(manifest)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClipLabels, ManifestEntry};
    use proptest::prelude::*;

    fn grid(speakers: usize, utts: usize, emotions: &[Emotion], reps: u32, kind: CorpusKind) -> CorpusManifest {
        let mut entries = Vec::new();
        for s in 0..speakers {
            for u in 0..utts {
                for &e in emotions {
                    for r in 0..reps {
                        entries.push(ManifestEntry {
                            path: format!("s{s}_u{u}_{e}_{r}.wav").into(),
                            labels: ClipLabels {
                                speaker_id: format!("s{s:02}"),
                                emotion: e,
                                utterance_id: format!("u{u:02}"),
                                repetition: r,
                            },
                        });
                    }
                }
            }
        }
        CorpusManifest::new(kind, entries).unwrap()
    }

    #[test]
    fn esd_shaped_counts() {
        let m = grid(50, 8, &Emotion::STUDIED, 9, CorpusKind::Generic);
        let p = make_split_plan(&m, Protocol::EsdStyle, 11, &SplitOptions::default()).unwrap();
        assert_eq!(p.train_items.len(), 50 * 4 * 9);
        assert_eq!(p.test_items.len(), 50 * 4 * 6 * 9);
    }

    #[test]
    fn susas_shaped_word_sets() {
        let m = grid(9, 35, &Emotion::SUSAS, 1, CorpusKind::SusasWords);
        let p = make_split_plan(&m, Protocol::SusasStyle, 3, &SplitOptions::default()).unwrap();
        let train = p.train_utterances(&m);
        let test = p.test_utterances(&m);
        assert_eq!(train.len(), 15);
        assert_eq!(train.union(&test).count(), 35);
    }

    #[test]
    fn ravdess_statement_one_trains() {
        let m = grid(4, 2, &Emotion::STUDIED, 2, CorpusKind::Generic);
        let entries: Vec<_> = m
            .entries()
            .iter()
            .cloned()
            .map(|mut e| {
                let stmt = if e.labels.utterance_id == "u00" { "statement01" } else { "statement02" };
                e.labels.utterance_id = stmt.to_string();
                e
            })
            .collect();
        let m = CorpusManifest::new(CorpusKind::Ravdess, entries).unwrap();
        let p = make_split_plan(&m, Protocol::RavdessStyle, 0, &SplitOptions::default()).unwrap();
        assert_eq!(p.train_utterances(&m), ["statement01".to_string()].into());
        assert_eq!(p.test_utterances(&m), ["statement02".to_string()].into());
        assert_eq!(p.train_items.len(), 4 * 2);
        assert_eq!(p.test_items.len(), 4 * 6 * 2);
    }

    #[test]
    fn deterministic_and_rotating() {
        let m = grid(3, 8, &Emotion::STUDIED, 1, CorpusKind::Synthetic);
        let a = make_split_plan(&m, Protocol::EsdStyle, 99, &SplitOptions::default()).unwrap();
        let b = make_split_plan(&m, Protocol::EsdStyle, 99, &SplitOptions::default()).unwrap();
        assert_eq!(a, b);
        let sets: BTreeSet<_> = (0..5)
            .map(|k| {
                SplitPlan::for_trial(&m, Protocol::EsdStyle, 99, k, &SplitOptions::default())
                    .unwrap()
                    .train_utterances(&m)
            })
            .collect();
        assert!(sets.len() > 1);
    }

    #[test]
    fn configuration_errors() {
        let m = grid(3, 4, &Emotion::STUDIED, 1, CorpusKind::Synthetic);
        assert!(matches!(
            make_split_plan(&m, Protocol::EsdStyle, 0, &SplitOptions::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_split_plan(&m, Protocol::RavdessStyle, 0, &SplitOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn json_field_names() {
        let m = grid(2, 8, &[Emotion::Neutral, Emotion::Sad], 1, CorpusKind::Synthetic);
        let p = make_split_plan(&m, Protocol::EsdStyle, 5, &SplitOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        for key in ["trial", "seed", "protocol", "train", "test"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["protocol"], "esd_style");
        let back: SplitPlan = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn split_invariants_hold(speakers in 2usize..5, utts in 5usize..10, seed in any::<u64>()) {
            let m = grid(speakers, utts, &Emotion::STUDIED, 2, CorpusKind::Synthetic);
            let p = make_split_plan(&m, Protocol::EsdStyle, seed, &SplitOptions::default()).unwrap();
            for &i in &p.train_items {
                prop_assert_eq!(m.labels(i).emotion, Emotion::Neutral);
            }
            let tr = p.train_utterances(&m);
            let te = p.test_utterances(&m);
            prop_assert!(tr.is_disjoint(&te));
            prop_assert_eq!(tr.len() + te.len(), utts);
        }
    }
}
