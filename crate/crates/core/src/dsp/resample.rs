use std::f64::consts::PI;

use crate::corpus::AudioClip;

const TAPS: usize = 64;
const HALF: isize = (TAPS / 2) as isize;
const MAX_TABLE_PHASES: usize = 1024;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(tau: f64) -> f64 {
    let x = tau / HALF as f64;
    if x.abs() >= 1.0 {
        return 0.0;
    }
    0.42 + 0.5 * (PI * x).cos() + 0.08 * (2.0 * PI * x).cos()
}

/// Taps for one fractional phase, normalized to unit DC gain.
fn phase_taps(frac: f64, cutoff: f64) -> [f64; TAPS] {
    let mut taps = [0.0; TAPS];
    for (k, t) in taps.iter_mut().enumerate() {
        let tau = (k as isize - (HALF - 1)) as f64 - frac;
        *t = cutoff * sinc(cutoff * tau) * blackman(tau);
    }
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// 64-tap windowed-sinc polyphase resampler. The cutoff sits at the lower of
/// the two Nyquist rates; samples beyond either end are replicated from the
/// boundary so DC passes through unchanged.
pub fn resample(clip: &AudioClip, target_hz: u32) -> AudioClip {
    assert!(target_hz > 0, "target rate must be positive");
    let src = clip.sample_rate_hz as u64;
    let dst = target_hz as u64;
    if src == dst {
        return clip.clone();
    }
    let g = gcd(src, dst);
    let up = dst / g;
    let down = src / g;
    let cutoff = (up as f64 / down as f64).min(1.0);
    let x = &clip.samples;
    let len = x.len() as u64;
    let n_out = ((len * up + down / 2) / down).max(1) as usize;

    let table: Option<Vec<[f64; TAPS]>> = (up as usize <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| phase_taps(p as f64 / up as f64, cutoff)).collect());

    let last = x.len() as isize - 1;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as isize;
        let phase = pos % up;
        let computed;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                computed = phase_taps(phase as f64 / up as f64, cutoff);
                &computed
            }
        };
        let mut acc = 0.0;
        for (k, h) in taps.iter().enumerate() {
            let idx = (base + k as isize - (HALF - 1)).clamp(0, last) as usize;
            acc += h * x[idx];
        }
        out.push(acc.clamp(-1.0, 1.0));
    }
    AudioClip {
        samples: out,
        sample_rate_hz: target_hz,
        labels: clip.labels.clone(),
    }
}
