use std::path::Path;

use anyhow::{Context, Result};
use capsid::config::{Need, RunConfig};
use capsid::corpus::{load_wav, CorpusManifest};
use capsid::dsp::{extract_features, read_archive, ArchiveRecord, FeatureArchive, FeatureMatrix};
use capsid::Error;
use rayon::prelude::*;

/// Validate for `needs`, create the output directory and record `run.json`.
pub fn prepare<'a>(cfg: &'a RunConfig, needs: &[Need]) -> Result<&'a Path> {
    cfg.validate(needs)?;
    let out = cfg
        .paths
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("paths.out is required".into()))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_json(out.join("run.json"))?;
    Ok(out)
}

pub fn manifest(cfg: &RunConfig) -> Result<CorpusManifest> {
    Ok(cfg.load_manifest().context("loading the corpus manifest")?)
}

/// Features of `items` (every entry when `None`), aligned with the
/// manifest. Failed clips abort, or with `run.skip_errors` are logged and
/// left as `None`.
pub fn extract_items(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    items: Option<&[usize]>,
) -> Result<Vec<Option<FeatureMatrix>>> {
    let all: Vec<usize> = (0..manifest.len()).collect();
    let items = items.unwrap_or(&all);
    let results: Vec<capsid::Result<FeatureMatrix>> = items
        .par_iter()
        .map(|&i| extract_features(&load_wav(&manifest.entries()[i].path)?, &cfg.features))
        .collect();
    let mut out = vec![None; manifest.len()];
    for (&i, r) in items.iter().zip(results) {
        let entry = &manifest.entries()[i];
        match r {
            Ok(f) => out[i] = Some(f),
            Err(e) if cfg.run.skip_errors => log::warn!("skipping {}: {e}", entry.path.display()),
            Err(e) => return Err(anyhow::Error::new(e).context(format!("extracting {}", entry.path.display()))),
        }
    }
    Ok(out)
}

pub fn to_archive(manifest: &CorpusManifest, features: Vec<Option<FeatureMatrix>>) -> FeatureArchive {
    let records = features
        .into_iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let e = &manifest.entries()[i];
            f.map(|features| ArchiveRecord {
                manifest_index: i,
                path: e.path.clone(),
                labels: e.labels.clone(),
                features,
            })
        })
        .collect();
    FeatureArchive { records }
}

/// Features from `paths.archive` when given, else extracted now.
pub fn features(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    items: Option<&[usize]>,
) -> Result<Vec<Option<FeatureMatrix>>> {
    let Some(path) = &cfg.paths.archive else {
        return extract_items(cfg, manifest, items);
    };
    let archive = read_archive(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = vec![None; manifest.len()];
    let (rows, cols) = (cfg.features.n_rows(), cfg.features.target_frames);
    for r in archive.records {
        if r.manifest_index >= manifest.len() || manifest.labels(r.manifest_index) != &r.labels {
            return Err(Error::Config(format!(
                "archive {} does not match the manifest at record for {}",
                path.display(),
                r.path.display()
            ))
            .into());
        }
        if (r.features.rows, r.features.cols) != (rows, cols) {
            return Err(Error::Config(format!(
                "archive holds {}×{} matrices but the feature config gives {rows}×{cols}",
                r.features.rows, r.features.cols
            ))
            .into());
        }
        out[r.manifest_index] = Some(r.features);
    }
    Ok(out)
}

pub fn view(v: &[Option<FeatureMatrix>]) -> Vec<Option<&FeatureMatrix>> {
    v.iter().map(Option::as_ref).collect()
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}
