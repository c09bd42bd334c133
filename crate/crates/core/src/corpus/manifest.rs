use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClipLabels, CorpusKind, CorpusManifest, ManifestEntry};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    path: String,
    speaker: String,
    emotion: String,
    utterance: String,
    repetition: u32,
}

/// Read a generic manifest CSV. Relative paths are resolved against the
/// directory holding the manifest.
pub fn read_manifest_csv(path: impl AsRef<Path>, kind: CorpusKind) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .quoting(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(format!("manifest {}", path.display()), e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse("manifest header", e.to_string()))?
        .clone();
    let expected = ["path", "speaker", "emotion", "utterance", "repetition"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            "manifest header",
            format!("expected {:?}, found {:?}", expected.join(","), headers),
        ));
    }
    let mut entries = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::parse(format!("manifest row {}", line + 1), e.to_string()))?;
        let p = PathBuf::from(&row.path);
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            labels: ClipLabels {
                speaker_id: row.speaker,
                emotion: row.emotion.parse()?,
                utterance_id: row.utterance,
                repetition: row.repetition,
            },
        });
    }
    CorpusManifest::new(kind, entries)
}

/// Write a manifest CSV; paths under the manifest's directory are stored
/// relative to it.
pub fn write_manifest_csv(path: impl AsRef<Path>, manifest: &CorpusManifest) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)
        .map_err(|e| Error::parse(format!("manifest {}", path.display()), e.to_string()))?;
    for e in manifest.entries() {
        let rel = e.path.strip_prefix(&base).unwrap_or(&e.path);
        let text = rel.to_string_lossy().into_owned();
        if text.contains(',') {
            return Err(Error::Contract(format!("path {text:?} contains a comma")));
        }
        w.serialize(Row {
            path: text,
            speaker: e.labels.speaker_id.clone(),
            emotion: e.labels.emotion.name().to_string(),
            utterance: e.labels.utterance_id.clone(),
            repetition: e.labels.repetition,
        })
        .map_err(|e| Error::parse("manifest write", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
