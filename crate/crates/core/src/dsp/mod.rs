//! MFCC front end: pre-emphasis, Hamming-windowed framing, power spectrum,
//! triangular mel filterbank, log compression, orthonormal DCT-II and
//! regression deltas, stacked into a fixed-width zero-padded matrix.

mod archive;
mod mfcc;
mod noise;
mod resample;

use serde::{Deserialize, Serialize};

use crate::corpus::AudioClip;
use crate::error::{Error, Result};

pub use archive::{read_archive, write_archive, ArchiveRecord, FeatureArchive};
pub use mfcc::{
    dct_cepstra, dct_matrix, delta_features, frame_signal, hamming, hz_to_mel, log_mel,
    mel_filterbank, mel_to_hz, power_spectrum, LOG_FLOOR,
};
pub use noise::add_noise;
pub use resample::resample;

/// Dense row-major matrix used throughout the front end.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// FFT size; smallest power of two ≥ the frame length when unset.
    pub n_fft: Option<usize>,
    pub n_mel_filters: usize,
    pub n_cepstra: usize,
    pub fmin_hz: f64,
    /// Upper filterbank edge; Nyquist when unset.
    pub fmax_hz: Option<f64>,
    pub target_frames: usize,
    pub pre_emphasis: f64,
    pub delta_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_fft: None,
            n_mel_filters: 40,
            n_cepstra: 20,
            fmin_hz: 0.0,
            fmax_hz: None,
            target_frames: 300,
            pre_emphasis: 0.97,
            delta_window: 2,
        }
    }
}

impl FeatureConfig {
    /// Collect every violated field.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.hop_ms > 0.0) {
            v.push(format!("features.hop_ms = {} must be > 0", self.hop_ms));
        }
        if !(self.frame_ms > self.hop_ms) {
            v.push(format!(
                "features.frame_ms = {} must exceed hop_ms = {}",
                self.frame_ms, self.hop_ms
            ));
        }
        if self.n_cepstra == 0 || self.n_cepstra > self.n_mel_filters {
            v.push(format!(
                "features.n_cepstra = {} must be in 1..=n_mel_filters ({})",
                self.n_cepstra, self.n_mel_filters
            ));
        }
        if self.target_frames == 0 {
            v.push("features.target_frames must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            v.push(format!("features.pre_emphasis = {} must be in [0, 1)", self.pre_emphasis));
        }
        if self.delta_window == 0 {
            v.push("features.delta_window must be ≥ 1".into());
        }
        if self.fmin_hz < 0.0 {
            v.push(format!("features.fmin_hz = {} must be ≥ 0", self.fmin_hz));
        }
        if let Some(n) = self.n_fft {
            if !n.is_power_of_two() {
                v.push(format!("features.n_fft = {n} must be a power of two"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn frame_len(&self, sample_rate_hz: u32) -> usize {
        (self.frame_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate_hz: u32) -> usize {
        ((self.hop_ms * sample_rate_hz as f64 / 1000.0).round() as usize).max(1)
    }

    pub fn fft_len(&self, sample_rate_hz: u32) -> usize {
        self.n_fft
            .unwrap_or_else(|| self.frame_len(sample_rate_hz).next_power_of_two())
    }

    pub fn upper_hz(&self, sample_rate_hz: u32) -> f64 {
        self.fmax_hz.unwrap_or(sample_rate_hz as f64 / 2.0)
    }

    /// Rows of the stacked feature matrix (cepstra plus deltas).
    pub fn n_rows(&self) -> usize {
        2 * self.n_cepstra
    }
}

/// Stacked MFCC + delta matrix: rows `0..n_cepstra` are cepstra, the next
/// `n_cepstra` rows their deltas, one column per frame. Columns at and beyond
/// `n_valid_frames` are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub n_valid_frames: usize,
}

impl FeatureMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

pub fn extract_features(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    clip.validate()?;
    let sr = clip.sample_rate_hz;
    let frames = frame_signal(clip, cfg)?;
    let spec = power_spectrum(&frames, cfg.fft_len(sr))?;
    let filters = mel_filterbank(cfg, sr)?;
    let logmel = log_mel(&spec, &filters)?;
    let cepstra = dct_cepstra(&logmel, cfg.n_cepstra)?;
    let deltas = delta_features(&cepstra, cfg.delta_window)?;

    let n_valid = cepstra.rows.min(cfg.target_frames);
    let rows = cfg.n_rows();
    let cols = cfg.target_frames;
    let mut values = vec![0.0; rows * cols];
    for t in 0..n_valid {
        for k in 0..cfg.n_cepstra {
            values[k * cols + t] = cepstra.get(t, k);
            values[(cfg.n_cepstra + k) * cols + t] = deltas.get(t, k);
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFault { op: "extract_features" });
    }
    Ok(FeatureMatrix {
        rows,
        cols,
        values,
        n_valid_frames: n_valid,
    })
}
