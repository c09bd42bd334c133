//! Directory adapters for the RAVDESS and SUSAS layouts.

use std::path::{Path, PathBuf};

use super::{ClipLabels, CorpusKind, CorpusManifest, Emotion, ManifestEntry};
use crate::error::{Error, Result};

/// Decoded RAVDESS file name
/// (`modality-vocal-emotion-intensity-statement-repetition-actor`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RavdessName {
    pub speaker_id: String,
    /// `None` for emotion codes outside the six studied emotions (calm,
    /// surprised); such files are skipped.
    pub emotion: Option<Emotion>,
    pub utterance_id: String,
    /// `(intensity - 1) * 2 + repetition`, so normal and strong takes of the
    /// same statement stay distinct.
    pub repetition: u32,
    pub song: bool,
}

impl RavdessName {
    pub fn skip(&self) -> bool {
        self.emotion.is_none()
    }
}

pub fn parse_ravdess_name(filename: &str) -> Result<RavdessName> {
    let stem = Path::new(filename)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(filename);
    let fields: Vec<&str> = stem.split('-').collect();
    if fields.len() != 7 {
        return Err(Error::parse(
            "RAVDESS file name",
            format!("{filename:?} has {} fields, expected 7", fields.len()),
        ));
    }
    let mut codes = [0u32; 7];
    for (slot, f) in codes.iter_mut().zip(&fields) {
        if f.len() != 2 || !f.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::parse(
                "RAVDESS file name",
                format!("field {f:?} in {filename:?} is not a 2-digit code"),
            ));
        }
        *slot = f.parse().expect("two ascii digits");
    }
    let [_modality, vocal, emotion, intensity, statement, repetition, actor] = codes;
    let emotion = match emotion {
        1 => Some(Emotion::Neutral),
        3 => Some(Emotion::Happy),
        4 => Some(Emotion::Sad),
        5 => Some(Emotion::Angry),
        6 => Some(Emotion::Fear),
        7 => Some(Emotion::Disgust),
        2 | 8 => None,
        other => {
            return Err(Error::parse(
                "RAVDESS file name",
                format!("unknown emotion code {other:02} in {filename:?}"),
            ))
        }
    };
    if !(1..=2).contains(&intensity) || !(1..=2).contains(&repetition) {
        return Err(Error::parse(
            "RAVDESS file name",
            format!("intensity/repetition out of range in {filename:?}"),
        ));
    }
    let song = vocal == 2;
    let utterance_id = if song {
        format!("song-statement{statement:02}")
    } else {
        format!("statement{statement:02}")
    };
    Ok(RavdessName {
        speaker_id: format!("actor{actor:02}"),
        emotion,
        utterance_id,
        repetition: (intensity - 1) * 2 + repetition,
        song,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RavdessOptions {
    /// Include the sung recordings (speech only by default).
    pub include_song: bool,
}

fn collect_files(root: &Path, ext: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let read = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut entries: Vec<PathBuf> = read
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(root, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, ext, out)?;
        } else if p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case(ext))
        {
            out.push(p);
        }
    }
    Ok(())
}

/// Walk a RAVDESS tree and build a manifest of the studied emotions.
pub fn scan_ravdess(root: impl AsRef<Path>, opts: RavdessOptions) -> Result<CorpusManifest> {
    let mut files = Vec::new();
    collect_files(root.as_ref(), "wav", &mut files)?;
    let mut entries = Vec::new();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let parsed = parse_ravdess_name(name)?;
        if parsed.song && !opts.include_song {
            continue;
        }
        let Some(emotion) = parsed.emotion else {
            log::debug!("skipping {name}: emotion not studied");
            continue;
        };
        entries.push(ManifestEntry {
            path,
            labels: ClipLabels {
                speaker_id: parsed.speaker_id,
                emotion,
                utterance_id: parsed.utterance_id,
                repetition: parsed.repetition,
            },
        });
    }
    CorpusManifest::new(CorpusKind::Ravdess, entries)
}

/// Walk a SUSAS-style word tree laid out as
/// `<root>/<speaker>/<style>/<word><repetition>.wav`, e.g.
/// `m1/angry/break3.wav`. A file stem without trailing digits has
/// repetition 0. Style directories that are not one of the known emotions
/// are skipped.
pub fn scan_susas_words(root: impl AsRef<Path>) -> Result<CorpusManifest> {
    let root = root.as_ref();
    let mut files = Vec::new();
    collect_files(root, "wav", &mut files)?;
    let mut entries = Vec::new();
    for path in files {
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let parts: Vec<&str> = rel.iter().filter_map(|c| c.to_str()).collect();
        if parts.len() != 3 {
            return Err(Error::parse(
                "SUSAS layout",
                format!("{} is not <speaker>/<style>/<word>.wav", rel.display()),
            ));
        }
        let Ok(emotion) = parts[1].parse::<Emotion>() else {
            log::debug!("skipping {}: unknown style {:?}", rel.display(), parts[1]);
            continue;
        };
        let stem = Path::new(parts[2])
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let word = stem.trim_end_matches(|c: char| c.is_ascii_digit());
        if word.is_empty() {
            return Err(Error::parse("SUSAS layout", format!("no word in {stem:?}")));
        }
        let repetition = stem[word.len()..].parse().unwrap_or(0);
        entries.push(ManifestEntry {
            path: path.clone(),
            labels: ClipLabels {
                speaker_id: parts[0].to_string(),
                emotion,
                utterance_id: word.to_ascii_lowercase(),
                repetition,
            },
        });
    }
    CorpusManifest::new(CorpusKind::SusasWords, entries)
}
