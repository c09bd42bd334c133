//! Desk-scale synthetic corpus: a speaker is a fixed formant envelope plus a
//! base pitch, an utterance is a pitch-sweep and syllable pattern, and an
//! emotion rescales pitch and reshapes the amplitude envelope.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{AudioClip, ClipLabels, CorpusKind, CorpusManifest, Emotion, ManifestEntry};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const SYNTH_RATE_HZ: u32 = 16_000;
const MAX_HARMONIC_HZ: f64 = 5_000.0;
const BANDWIDTHS: [f64; 3] = [90.0, 130.0, 180.0];
const FORMANT_GAINS: [f64; 3] = [1.0, 0.7, 0.45];

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    /// One clip per manifest entry, same order.
    pub clips: Vec<AudioClip>,
}

#[derive(Debug, Clone, Copy)]
struct Voice {
    formants: [f64; 3],
    f0: f64,
}

#[derive(Debug, Clone, Copy)]
struct Utterance {
    duration: f64,
    sweep_start: f64,
    sweep_end: f64,
    wobble_hz: f64,
    wobble_depth: f64,
    syllable_hz: f64,
}

#[derive(Debug, Clone, Copy)]
struct Style {
    pitch: f64,
    amplitude: f64,
    tremolo_hz: f64,
    tremolo_depth: f64,
    /// exponent on the syllable envelope; larger is more percussive
    attack: f64,
    /// linear amplitude slope over the clip (negative decays)
    tilt: f64,
    tempo: f64,
}

fn style(emotion: Emotion) -> Style {
    let base = Style {
        pitch: 1.0,
        amplitude: 0.5,
        tremolo_hz: 0.0,
        tremolo_depth: 0.0,
        attack: 1.0,
        tilt: 0.0,
        tempo: 1.0,
    };
    match emotion {
        Emotion::Neutral | Emotion::Calm => base,
        Emotion::Happy => Style { pitch: 1.15, amplitude: 0.6, tremolo_hz: 5.0, tremolo_depth: 0.15, tempo: 1.1, ..base },
        Emotion::Sad => Style { pitch: 0.88, amplitude: 0.35, tilt: -0.5, tempo: 0.85, ..base },
        Emotion::Angry | Emotion::Loud => Style { pitch: 1.22, amplitude: 0.8, attack: 2.5, tempo: 1.15, ..base },
        Emotion::Fear => Style { pitch: 1.18, amplitude: 0.45, tremolo_hz: 8.0, tremolo_depth: 0.3, ..base },
        Emotion::Disgust => Style { pitch: 0.93, amplitude: 0.55, attack: 1.6, tilt: 0.3, ..base },
        Emotion::Soft => Style { amplitude: 0.25, ..base },
        Emotion::Slow => Style { tempo: 0.75, ..base },
        Emotion::Fast => Style { tempo: 1.3, ..base },
        Emotion::Surprise => Style { pitch: 1.3, amplitude: 0.65, tilt: 0.4, ..base },
    }
}

fn formant_gain(voice: &Voice, f: f64) -> f64 {
    voice
        .formants
        .iter()
        .zip(BANDWIDTHS.iter().zip(FORMANT_GAINS))
        .map(|(&fm, (&bw, g))| {
            let x = (f - fm) / bw;
            g / (1.0 + x * x)
        })
        .sum::<f64>()
        + 0.01
}

fn synthesize(voice: &Voice, utt: &Utterance, sty: &Style, rep_rng: &mut rng::Rng) -> Vec<f64> {
    let pitch_jitter = 1.0 + 0.03 * (rep_rng.gen::<f64>() * 2.0 - 1.0);
    let dur_jitter = 1.0 + 0.05 * (rep_rng.gen::<f64>() * 2.0 - 1.0);
    let phase0 = rep_rng.gen::<f64>() * 2.0 * PI;
    let duration = (utt.duration * dur_jitter / sty.tempo).clamp(1.0, 3.0);
    let n = (duration * SYNTH_RATE_HZ as f64).round() as usize;
    let dt = 1.0 / SYNTH_RATE_HZ as f64;

    let mut out = Vec::with_capacity(n);
    let mut phase = phase0;
    let mut gains: Vec<f64> = Vec::new();
    let mut norm = 1.0;
    for t_idx in 0..n {
        let t = t_idx as f64 * dt;
        let progress = t_idx as f64 / n as f64;
        let sweep = utt.sweep_start + (utt.sweep_end - utt.sweep_start) * progress;
        let wobble = 1.0 + utt.wobble_depth * (2.0 * PI * utt.wobble_hz * t).sin();
        let f0 = voice.f0 * sty.pitch * pitch_jitter * sweep * wobble;
        phase += 2.0 * PI * f0 * dt;

        // harmonic weights change slowly; refresh them every 32 samples
        if t_idx % 32 == 0 {
            let n_harm = (MAX_HARMONIC_HZ / f0).floor().max(1.0) as usize;
            gains.clear();
            gains.extend((1..=n_harm).map(|h| formant_gain(voice, h as f64 * f0) / h as f64));
            norm = gains.iter().sum::<f64>().max(1e-9);
        }
        // sin(h*phase) by the Chebyshev recurrence
        let (s1, c1) = phase.sin_cos();
        let mut prev = 0.0;
        let mut cur = s1;
        let mut acc = 0.0;
        for &g in &gains {
            acc += g * cur;
            let next = 2.0 * c1 * cur - prev;
            prev = cur;
            cur = next;
        }
        let syllable = (0.5 - 0.5 * (2.0 * PI * utt.syllable_hz * sty.tempo * t).cos()).powf(sty.attack);
        let tremolo = 1.0 - sty.tremolo_depth * (0.5 + 0.5 * (2.0 * PI * sty.tremolo_hz * t).sin());
        let tilt = (1.0 + sty.tilt * (progress - 0.5)).max(0.1);
        let env = sty.amplitude * (0.15 + 0.85 * syllable) * tremolo * tilt;
        let noise: f64 = StandardNormal.sample(rep_rng);
        out.push((env * acc / norm + 0.003 * noise).clamp(-1.0, 1.0));
    }
    out
}

/// Build a corpus of `n_speakers × n_utterances × n_reps × 6` clips covering
/// the six studied emotions, 1–3 s each at 16 kHz.
pub fn generate_synthetic_corpus(
    n_speakers: usize,
    n_utterances: usize,
    n_reps: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if n_speakers < 2 || n_utterances < 2 || n_reps < 1 {
        return Err(Error::Contract(format!(
            "synthetic corpus needs ≥2 speakers, ≥2 utterances, ≥1 repetition (got {n_speakers}, {n_utterances}, {n_reps})"
        )));
    }
    let base = rng::sub_seed(seed, Purpose::Synth);
    let voices: Vec<Voice> = (0..n_speakers)
        .map(|s| {
            let mut r = rng::rng(rng::derive(base, s as u64));
            Voice {
                formants: [
                    r.gen_range(300.0..850.0),
                    r.gen_range(950.0..2300.0),
                    r.gen_range(2400.0..3500.0),
                ],
                f0: r.gen_range(95.0..210.0),
            }
        })
        .collect();
    let utterances: Vec<Utterance> = (0..n_utterances)
        .map(|u| {
            let mut r = rng::rng(rng::derive(base ^ 0x7574_7465_7261_6e63, u as u64));
            Utterance {
                duration: r.gen_range(1.1..2.9),
                sweep_start: r.gen_range(0.8..1.2),
                sweep_end: r.gen_range(0.8..1.2),
                wobble_hz: r.gen_range(0.5..4.0),
                wobble_depth: r.gen_range(0.0..0.12),
                syllable_hz: r.gen_range(2.0..5.0),
            }
        })
        .collect();

    let mut entries = Vec::new();
    let mut clips = Vec::new();
    for (s, voice) in voices.iter().enumerate() {
        for (u, utt) in utterances.iter().enumerate() {
            for (e_idx, &emotion) in Emotion::STUDIED.iter().enumerate() {
                let sty = style(emotion);
                for rep in 0..n_reps {
                    let key = (((s * n_utterances + u) * 6 + e_idx) * n_reps + rep) as u64;
                    let mut r = rng::rng(rng::derive(base ^ 0x636c_6970, key));
                    let samples = synthesize(voice, utt, &sty, &mut r);
                    let labels = ClipLabels {
                        speaker_id: format!("spk{s:02}"),
                        emotion,
                        utterance_id: format!("utt{u:02}"),
                        repetition: rep as u32,
                    };
                    let path = format!("wav/spk{s:02}_utt{u:02}_{emotion}_rep{rep}.wav");
                    clips.push(AudioClip::new(samples, SYNTH_RATE_HZ)?.with_labels(labels.clone()));
                    entries.push(ManifestEntry {
                        path: path.into(),
                        labels,
                    });
                }
            }
        }
    }
    Ok(SyntheticCorpus {
        manifest: CorpusManifest::new(CorpusKind::Synthetic, entries)?,
        clips,
    })
}
