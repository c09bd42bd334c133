use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{rms, AudioClip};
use crate::error::{Error, Result};
use crate::rng;

/// Add white Gaussian noise at speech:noise RMS ratio `amplitude_ratio`
/// (2.0 is the 2:1 distortion, about 6 dB SNR). The realized noise is
/// rescaled so the ratio is exact before the output is clipped to [-1, 1].
pub fn add_noise(clip: &AudioClip, amplitude_ratio: f64, seed: u64) -> Result<AudioClip> {
    if !(amplitude_ratio > 0.0) || !amplitude_ratio.is_finite() {
        return Err(Error::Contract(format!(
            "noise ratio must be positive and finite, got {amplitude_ratio}"
        )));
    }
    let speech_rms = clip.rms();
    if speech_rms == 0.0 {
        return Err(Error::DegenerateSignal("clip has zero RMS".into()));
    }
    let mut r = rng::rng(seed);
    let noise: Vec<f64> = (0..clip.samples.len())
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    let noise_rms = rms(&noise);
    let scale = if noise_rms > 0.0 {
        speech_rms / amplitude_ratio / noise_rms
    } else {
        0.0
    };
    let samples = clip
        .samples
        .iter()
        .zip(&noise)
        .map(|(s, n)| (s + scale * n).clamp(-1.0, 1.0))
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate_hz: clip.sample_rate_hz,
        labels: clip.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(rms_target: f64) -> AudioClip {
        let amp = rms_target * 2f64.sqrt();
        let x = (0..16000)
            .map(|i| amp * (i as f64 * 0.0731).sin())
            .collect();
        AudioClip::new(x, 16000).unwrap()
    }

    #[test]
    fn two_to_one_ratio() {
        let clip = tone(0.2);
        let noisy = add_noise(&clip, 2.0, 3).unwrap();
        let injected: Vec<f64> = noisy.samples.iter().zip(&clip.samples).map(|(a, b)| a - b).collect();
        let r = rms(&injected);
        assert!((r - 0.1).abs() <= 0.001, "{r}");
    }

    #[test]
    fn huge_ratio_is_nearly_identity() {
        let clip = tone(0.2);
        let noisy = add_noise(&clip, 1e9, 3).unwrap();
        let diff: Vec<f64> = noisy.samples.iter().zip(&clip.samples).map(|(a, b)| a - b).collect();
        assert!(rms(&diff) < 1e-6);
    }

    #[test]
    fn seeded() {
        let clip = tone(0.2);
        assert_eq!(add_noise(&clip, 2.0, 1).unwrap(), add_noise(&clip, 2.0, 1).unwrap());
        assert_ne!(add_noise(&clip, 2.0, 1).unwrap(), add_noise(&clip, 2.0, 2).unwrap());
    }

    #[test]
    fn zero_rms_is_degenerate() {
        let clip = AudioClip::new(vec![0.0; 100], 8000).unwrap();
        assert!(matches!(add_noise(&clip, 2.0, 0), Err(Error::DegenerateSignal(_))));
    }
}
