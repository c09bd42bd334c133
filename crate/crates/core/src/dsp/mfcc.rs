use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureConfig, Matrix};
use crate::corpus::AudioClip;
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Pre-emphasize, cut into overlapping frames and apply a Hamming window.
/// Returns `n_frames × frame_len` with `n_frames = (L - W) / H + 1`.
pub fn frame_signal(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Matrix> {
    let w = cfg.frame_len(clip.sample_rate_hz);
    let h = cfg.hop_len(clip.sample_rate_hz);
    let x = &clip.samples;
    if w == 0 || x.len() < w {
        return Err(Error::TooShort {
            samples: x.len(),
            needed: w.max(1),
        });
    }
    let a = cfg.pre_emphasis;
    let emphasized: Vec<f64> = (0..x.len())
        .map(|t| if t == 0 { x[0] } else { x[t] - a * x[t - 1] })
        .collect();
    let window = hamming(w);
    let n_frames = (x.len() - w) / h + 1;
    let mut out = Matrix::zeros(n_frames, w);
    for f in 0..n_frames {
        let start = f * h;
        for (dst, (s, win)) in out
            .row_mut(f)
            .iter_mut()
            .zip(emphasized[start..start + w].iter().zip(&window))
        {
            *dst = s * win;
        }
    }
    Ok(out)
}

/// `|DFT_k|² / n_fft` for `k = 0 ..= n_fft/2`, frames zero-padded to `n_fft`.
pub fn power_spectrum(frames: &Matrix, n_fft: usize) -> Result<Matrix> {
    if !n_fft.is_power_of_two() || n_fft < frames.cols {
        return Err(Error::Config(format!(
            "n_fft {n_fft} must be a power of two ≥ frame length {}",
            frames.cols
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut out = Matrix::zeros(frames.rows, n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for r in 0..frames.rows {
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(if i < frames.cols { frames.get(r, i) } else { 0.0 }, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (dst, c) in out.row_mut(r).iter_mut().zip(&buf[..n_bins]) {
            *dst = c.norm_sqr() / n_fft as f64;
        }
    }
    Ok(out)
}

/// Triangular filters with centres equally spaced on the mel scale, edges
/// snapped to FFT bins; each filter peaks at exactly 1 on its centre bin.
pub fn mel_filterbank(cfg: &FeatureConfig, sample_rate_hz: u32) -> Result<Matrix> {
    let n_fft = cfg.fft_len(sample_rate_hz);
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate_hz as f64 / 2.0;
    let fmax = cfg.upper_hz(sample_rate_hz);
    if fmax > nyquist + 1e-9 || cfg.fmin_hz >= fmax {
        return Err(Error::Config(format!(
            "filterbank range [{}, {fmax}] Hz invalid for Nyquist {nyquist} Hz",
            cfg.fmin_hz
        )));
    }
    let m = cfg.n_mel_filters;
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(fmax);
    let bins: Vec<usize> = (0..m + 2)
        .map(|i| {
            let hz = mel_to_hz(lo + (hi - lo) * i as f64 / (m + 1) as f64);
            (((n_fft + 1) as f64 * hz / sample_rate_hz as f64).floor() as usize).min(n_bins - 1)
        })
        .collect();
    if bins.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "{m} mel filters are too many for n_fft = {n_fft}: centre bins collide"
        )));
    }
    let mut fb = Matrix::zeros(m, n_bins);
    for j in 0..m {
        let (left, centre, right) = (bins[j], bins[j + 1], bins[j + 2]);
        for k in left..centre {
            fb.set(j, k, (k - left) as f64 / (centre - left) as f64);
        }
        for k in centre..=right {
            fb.set(j, k, (right - k) as f64 / (right - centre) as f64);
        }
    }
    Ok(fb)
}

/// `ln(max(filters · row, 1e-10))` per frame.
pub fn log_mel(powspec: &Matrix, filters: &Matrix) -> Result<Matrix> {
    if powspec.cols != filters.cols {
        return Err(Error::Shape(format!(
            "power spectrum has {} bins, filterbank expects {}",
            powspec.cols, filters.cols
        )));
    }
    let mut out = Matrix::zeros(powspec.rows, filters.rows);
    for r in 0..powspec.rows {
        let p = powspec.row(r);
        for j in 0..filters.rows {
            let e: f64 = filters.row(j).iter().zip(p).map(|(w, x)| w * x).sum();
            out.set(r, j, e.max(LOG_FLOOR).ln());
        }
    }
    Ok(out)
}

/// Orthonormal DCT-II matrix, `n × n`, row k = basis k.
pub fn dct_matrix(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m.set(k, i, scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos());
        }
    }
    m
}

/// Orthonormal DCT-II of each row, keeping the first `n_cepstra` coefficients.
pub fn dct_cepstra(logmel: &Matrix, n_cepstra: usize) -> Result<Matrix> {
    if n_cepstra > logmel.cols {
        return Err(Error::Config(format!(
            "n_cepstra {n_cepstra} exceeds {} filters",
            logmel.cols
        )));
    }
    let basis = dct_matrix(logmel.cols);
    let mut out = Matrix::zeros(logmel.rows, n_cepstra);
    for r in 0..logmel.rows {
        let x = logmel.row(r);
        for k in 0..n_cepstra {
            let c: f64 = basis.row(k).iter().zip(x).map(|(b, v)| b * v).sum();
            out.set(r, k, c);
        }
    }
    Ok(out)
}

/// Regression deltas over `±window` frames with boundary frames repeated.
/// Input and output are `frames × coefficients`.
pub fn delta_features(mfcc: &Matrix, window: usize) -> Result<Matrix> {
    if mfcc.rows < 2 {
        return Err(Error::TooShort {
            samples: mfcc.rows,
            needed: 2,
        });
    }
    if window == 0 {
        return Err(Error::Config("delta window must be ≥ 1".into()));
    }
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let last = mfcc.rows as isize - 1;
    let at = |t: isize| t.clamp(0, last) as usize;
    let mut out = Matrix::zeros(mfcc.rows, mfcc.cols);
    for t in 0..mfcc.rows as isize {
        for k in 0..mfcc.cols {
            let mut acc = 0.0;
            for n in 1..=window as isize {
                acc += n as f64 * (mfcc.get(at(t + n), k) - mfcc.get(at(t - n), k));
            }
            out.set(t as usize, k, acc / denom);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f64>, sr: u32) -> AudioClip {
        AudioClip::new(samples, sr).unwrap()
    }

    #[test]
    fn frame_counts() {
        let cfg = FeatureConfig::default();
        let f = frame_signal(&clip(vec![0.1; 12000], 12000), &cfg).unwrap();
        assert_eq!((f.rows, f.cols), (98, 300));
        let f = frame_signal(&clip(vec![0.1; 300], 12000), &cfg).unwrap();
        assert_eq!(f.rows, 1);
        let f = frame_signal(&clip(vec![0.0; 1000], 12000), &cfg).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
        assert!(matches!(
            frame_signal(&clip(vec![0.1; 299], 12000), &cfg),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn frame_formula_holds_for_all_lengths() {
        let cfg = FeatureConfig::default();
        for len in 300..900 {
            let f = frame_signal(&clip(vec![0.0; len], 12000), &cfg).unwrap();
            assert_eq!(f.rows, (len - 300) / 120 + 1);
        }
    }

    #[test]
    fn bin_aligned_cosine_has_quarter_n_power() {
        let n = 64;
        let k = 5;
        let frame: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * k as f64 * i as f64 / n as f64).cos())
            .collect();
        let p = power_spectrum(&Matrix::from_vec(1, n, frame), n).unwrap();
        assert_eq!(p.cols, n / 2 + 1);
        assert!((p.get(0, k) - n as f64 / 4.0).abs() < 1e-9);
        let off: f64 = (0..p.cols).filter(|&j| j != k).map(|j| p.get(0, j)).sum();
        assert!(off < 1e-9);
        let z = power_spectrum(&Matrix::zeros(1, 10), 16).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mel_scale_and_filter_shape() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        let cfg = FeatureConfig {
            n_fft: Some(512),
            ..FeatureConfig::default()
        };
        let fb = mel_filterbank(&cfg, 16000).unwrap();
        assert_eq!((fb.rows, fb.cols), (40, 257));
        for j in 0..fb.rows {
            let row = fb.row(j);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert_eq!(row.iter().cloned().fold(0.0, f64::max), 1.0);
        }
        for k in 0..fb.cols {
            let s: f64 = (0..fb.rows).map(|j| fb.get(j, k)).sum();
            assert!((0.0..=2.0).contains(&s));
        }
    }

    #[test]
    fn too_many_filters_is_a_config_error() {
        let cfg = FeatureConfig {
            n_fft: Some(64),
            n_mel_filters: 60,
            ..FeatureConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg, 16000), Err(Error::Config(_))));
    }

    #[test]
    fn log_floor_and_doubling() {
        let fb = Matrix::from_vec(2, 3, vec![1.0, 0.5, 0.0, 0.0, 0.5, 1.0]);
        let zero = log_mel(&Matrix::zeros(1, 3), &fb).unwrap();
        assert!(zero.data.iter().all(|&v| v == LOG_FLOOR.ln()));
        let p = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let p2 = Matrix::from_vec(1, 3, vec![2.0, 4.0, 6.0]);
        let a = log_mel(&p, &fb).unwrap();
        let b = log_mel(&p2, &fb).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((y - x - 2f64.ln()).abs() < 1e-12);
        }
        assert!(log_mel(&Matrix::zeros(1, 4), &fb).is_err());
    }

    #[test]
    fn dct_constant_row_and_orthonormality() {
        let n = 40;
        let c = 1.7;
        let m = dct_cepstra(&Matrix::from_vec(1, n, vec![c; n]), n).unwrap();
        assert!((m.get(0, 0) - c * (n as f64).sqrt()).abs() < 1e-12);
        assert!((1..n).all(|k| m.get(0, k).abs() < 1e-12));

        let d = dct_matrix(n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = d.row(i).iter().zip(d.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        // inverse via transpose
        let x: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let y = dct_cepstra(&Matrix::from_vec(1, n, x.clone()), n).unwrap();
        for i in 0..n {
            let back: f64 = (0..n).map(|k| d.get(k, i) * y.get(0, k)).sum();
            assert!((back - x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn deltas() {
        let constant = Matrix::from_vec(5, 2, vec![3.0; 10]);
        assert!(delta_features(&constant, 2).unwrap().data.iter().all(|&v| v == 0.0));

        let ramp = Matrix::from_vec(8, 1, (0..8).map(|t| t as f64).collect());
        let d = delta_features(&ramp, 2).unwrap();
        for t in 2..6 {
            assert!((d.get(t, 0) - 1.0).abs() < 1e-12);
        }

        // hand evaluation, N = 2: c = [1, 4, 2, 8, 5]
        let c = Matrix::from_vec(5, 1, vec![1.0, 4.0, 2.0, 8.0, 5.0]);
        let d = delta_features(&c, 2).unwrap();
        // t=0: 1*(4-1) + 2*(2-1) = 5 -> 0.5
        // t=1: 1*(2-1) + 2*(8-1) = 15 -> 1.5
        // t=2: 1*(8-4) + 2*(5-1) = 12 -> 1.2
        // t=3: 1*(5-2) + 2*(5-4) = 5 -> 0.5
        // t=4: 1*(5-8) + 2*(5-2) = 3 -> 0.3
        let want = [0.5, 1.5, 1.2, 0.5, 0.3];
        for (t, w) in want.iter().enumerate() {
            assert!((d.get(t, 0) - w).abs() < 1e-12, "t={t}");
        }
        assert!(delta_features(&Matrix::zeros(1, 3), 2).is_err());
    }
}
