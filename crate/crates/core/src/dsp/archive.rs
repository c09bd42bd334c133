//! Feature archive: concatenated little-endian records
//! `{"CAPF", version u32, rows u32, cols u32, n_valid u32, rows*cols f32}`
//! plus a CSV sidecar mapping record index to manifest labels.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::corpus::ClipLabels;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CAPF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveRecord {
    pub manifest_index: usize,
    pub path: PathBuf,
    pub labels: ClipLabels,
    pub features: FeatureMatrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureArchive {
    pub records: Vec<ArchiveRecord>,
}

impl FeatureArchive {
    /// Map manifest index → record position.
    pub fn index(&self) -> HashMap<usize, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(pos, r)| (r.manifest_index, pos))
            .collect()
    }

    /// Features aligned with a manifest of `len` entries (`None` where no
    /// record exists).
    pub fn by_manifest(&self, len: usize) -> Vec<Option<&FeatureMatrix>> {
        let mut out = vec![None; len];
        for r in &self.records {
            if r.manifest_index < len {
                out[r.manifest_index] = Some(&r.features);
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarRow {
    index: usize,
    manifest_index: usize,
    path: String,
    speaker: String,
    emotion: String,
    utterance: String,
    repetition: u32,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

pub fn write_archive(path: impl AsRef<Path>, archive: &FeatureArchive) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in &archive.records {
        let f = &r.features;
        buf.extend_from_slice(MAGIC);
        for v in [VERSION, f.rows as u32, f.cols as u32, f.n_valid_frames as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &f.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;

    let side = sidecar_path(path);
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Never)
        .from_path(&side)
        .map_err(|e| Error::parse("feature sidecar", e.to_string()))?;
    for (index, r) in archive.records.iter().enumerate() {
        w.serialize(SidecarRow {
            index,
            manifest_index: r.manifest_index,
            path: r.path.to_string_lossy().into_owned(),
            speaker: r.labels.speaker_id.clone(),
            emotion: r.labels.emotion.name().into(),
            utterance: r.labels.utterance_id.clone(),
            repetition: r.labels.repetition,
        })
        .map_err(|e| Error::parse("feature sidecar", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&side, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<FeatureArchive> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut reader = csv::ReaderBuilder::new()
        .quoting(false)
        .from_path(&side)
        .map_err(|e| Error::parse("feature sidecar", e.to_string()))?;
    let rows: Vec<SidecarRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse("feature sidecar", e.to_string()))?;

    let u32_at = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::parse("feature archive", "truncated record header"))
    };
    let mut pos = 0;
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        if bytes.get(pos..pos + 4) != Some(MAGIC.as_slice()) {
            return Err(Error::parse(
                "feature archive",
                format!("record {} does not start with CAPF", row.index),
            ));
        }
        let version = u32_at(pos + 4)?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("feature archive version {version}")));
        }
        let r = u32_at(pos + 8)? as usize;
        let c = u32_at(pos + 12)? as usize;
        let n_valid = u32_at(pos + 16)? as usize;
        pos += 20;
        let n = r * c;
        let body = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| Error::parse("feature archive", "truncated record body"))?;
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        pos += 4 * n;
        records.push(ArchiveRecord {
            manifest_index: row.manifest_index,
            path: row.path.into(),
            labels: ClipLabels {
                speaker_id: row.speaker,
                emotion: row.emotion.parse()?,
                utterance_id: row.utterance,
                repetition: row.repetition,
            },
            features: FeatureMatrix {
                rows: r,
                cols: c,
                values,
                n_valid_frames: n_valid,
            },
        });
    }
    if pos != bytes.len() {
        return Err(Error::parse(
            "feature archive",
            "trailing bytes: sidecar and archive disagree on record count",
        ));
    }
    Ok(FeatureArchive { records })
}
