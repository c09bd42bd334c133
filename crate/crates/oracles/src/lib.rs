//! Slow, direct reference implementations used only by tests. Nothing here
//! depends on `capsid`; each routine is written from the textbook definition
//! with plain loops so that it fails differently from the optimized code.

use std::f64::consts::PI;

/// Parameters of the reference MFCC chain.
#[derive(Debug, Clone, Copy)]
pub struct MfccParams {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_filters: usize,
    pub n_cepstra: usize,
    pub target_frames: usize,
    pub pre_emphasis: f64,
    pub delta_n: usize,
}

impl Default for MfccParams {
    fn default() -> Self {
        MfccParams {
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_filters: 40,
            n_cepstra: 20,
            target_frames: 300,
            pre_emphasis: 0.97,
            delta_n: 2,
        }
    }
}

/// Reference MFCC + delta matrix, `2·n_cepstra` rows of `target_frames`
/// columns, plus the number of unpadded frames.
pub fn mfcc_reference(samples: &[f64], sr: u32, p: &MfccParams) -> (Vec<Vec<f64>>, usize) {
    let sr_f = sr as f64;
    let win = (p.frame_ms * sr_f / 1000.0).round() as usize;
    let hop = ((p.hop_ms * sr_f / 1000.0).round() as usize).max(1);
    let mut n_fft = 1;
    while n_fft < win {
        n_fft *= 2;
    }
    let n_bins = n_fft / 2 + 1;

    // pre-emphasis
    let mut y = vec![0.0; samples.len()];
    for t in 0..samples.len() {
        y[t] = if t == 0 {
            samples[0]
        } else {
            samples[t] - p.pre_emphasis * samples[t - 1]
        };
    }

    let n_frames = (samples.len() - win) / hop + 1;

    // triangular filters on snapped FFT bins, HTK mel scale
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(sr_f / 2.0);
    let mut edges = Vec::new();
    for i in 0..p.n_filters + 2 {
        let hz = inv_mel(top * i as f64 / (p.n_filters + 1) as f64);
        let b = ((n_fft + 1) as f64 * hz / sr_f).floor() as usize;
        edges.push(b.min(n_bins - 1));
    }
    let weight = |j: usize, k: usize| -> f64 {
        let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
        if k >= l && k < c {
            (k - l) as f64 / (c - l) as f64
        } else if k >= c && k <= r {
            (r - k) as f64 / (r - c) as f64
        } else {
            0.0
        }
    };

    let mut ceps = vec![vec![0.0; p.n_cepstra]; n_frames];
    for f in 0..n_frames {
        let mut frame = vec![0.0; n_fft];
        for n in 0..win {
            let w = 0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1) as f64).cos();
            frame[n] = y[f * hop + n] * w;
        }
        // naive DFT
        let mut power = vec![0.0; n_bins];
        for (k, pw) in power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * n % n_fft) as f64 / n_fft as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            *pw = (re * re + im * im) / n_fft as f64;
        }
        let mut logmel = vec![0.0; p.n_filters];
        for (j, lm) in logmel.iter_mut().enumerate() {
            let mut e = 0.0;
            for (k, pw) in power.iter().enumerate() {
                e += weight(j, k) * pw;
            }
            *lm = if e > 1e-10 { e.ln() } else { 1e-10f64.ln() };
        }
        let m = p.n_filters as f64;
        for (k, c) in ceps[f].iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, lm) in logmel.iter().enumerate() {
                acc += lm * (PI * k as f64 * (i as f64 + 0.5) / m).cos();
            }
            *c = acc * if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
        }
    }

    let deltas = regression_deltas(&ceps, p.delta_n);
    let valid = n_frames.min(p.target_frames);
    let mut out = vec![vec![0.0; p.target_frames]; 2 * p.n_cepstra];
    for t in 0..valid {
        for k in 0..p.n_cepstra {
            out[k][t] = ceps[t][k];
            out[p.n_cepstra + k][t] = deltas[t][k];
        }
    }
    (out, valid)
}

/// `d_t = Σ_n n·(c_{t+n} − c_{t−n}) / (2 Σ n²)` with indices clamped to the
/// sequence; `seq` is `[frames][coefficients]`.
pub fn regression_deltas(seq: &[Vec<f64>], n_win: usize) -> Vec<Vec<f64>> {
    let last = seq.len() as i64 - 1;
    let mut denom = 0.0;
    for n in 1..=n_win {
        denom += (n * n) as f64;
    }
    denom *= 2.0;
    let mut out = vec![vec![0.0; seq[0].len()]; seq.len()];
    for t in 0..seq.len() as i64 {
        for k in 0..seq[0].len() {
            let mut acc = 0.0;
            for n in 1..=n_win as i64 {
                let fwd = (t + n).min(last).max(0) as usize;
                let back = (t - n).min(last).max(0) as usize;
                acc += n as f64 * (seq[fwd][k] - seq[back][k]);
            }
            out[t as usize][k] = acc / denom;
        }
    }
    out
}

/// One routing iteration as written down by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStep {
    /// logits used to compute `c` in this iteration
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Textbook squash `(|s|² / (1 + |s|²)) · s / |s|`, zero at the origin.
pub fn squash_reference(s: &[f64]) -> Vec<f64> {
    let sq: f64 = s.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return vec![0.0; s.len()];
    }
    let norm = sq.sqrt();
    let gain = sq / (1.0 + sq);
    s.iter().map(|x| gain * x / norm).collect()
}

/// Dynamic routing on `uhat[i][j][d]` for `r` iterations, returning every
/// intermediate state.
pub fn route_by_hand(uhat: &[Vec<Vec<f64>>], r: usize) -> Vec<RoutingStep> {
    let n_lower = uhat.len();
    let n_upper = uhat[0].len();
    let dim = uhat[0][0].len();
    let mut b = vec![vec![0.0f64; n_upper]; n_lower];
    let mut steps = Vec::new();
    for it in 0..r {
        let mut c = vec![vec![0.0; n_upper]; n_lower];
        for i in 0..n_lower {
            let mut z = 0.0;
            for j in 0..n_upper {
                z += b[i][j].exp();
            }
            for j in 0..n_upper {
                c[i][j] = b[i][j].exp() / z;
            }
        }
        let mut s = vec![vec![0.0; dim]; n_upper];
        for j in 0..n_upper {
            for i in 0..n_lower {
                for d in 0..dim {
                    s[j][d] += c[i][j] * uhat[i][j][d];
                }
            }
        }
        let v: Vec<Vec<f64>> = s.iter().map(|sj| squash_reference(sj)).collect();
        steps.push(RoutingStep {
            b: b.clone(),
            c,
            s,
            v: v.clone(),
        });
        if it + 1 < r {
            for i in 0..n_lower {
                for j in 0..n_upper {
                    let mut dot = 0.0;
                    for d in 0..dim {
                        dot += uhat[i][j][d] * v[j][d];
                    }
                    b[i][j] += dot;
                }
            }
        }
    }
    steps
}

/// Per-class scores derived by counting items one at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteMetrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

/// Metrics from `(truth, predicted)` pairs. Zero denominators give 0.
pub fn brute_metrics(pairs: &[(usize, usize)], n_classes: usize) -> BruteMetrics {
    let mut correct = 0usize;
    for &(t, p) in pairs {
        if t == p {
            correct += 1;
        }
    }
    let accuracy = 100.0 * correct as f64 / pairs.len() as f64;
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut f1 = Vec::new();
    for c in 0..n_classes {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for &(t, p) in pairs {
            if p == c && t == c {
                tp += 1;
            } else if p == c {
                fp += 1;
            } else if t == c {
                fneg += 1;
            }
        }
        let pr = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rc = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        let f = if pr + rc == 0.0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) };
        precision.push(pr);
        recall.push(rc);
        f1.push(f);
    }
    BruteMetrics {
        accuracy,
        precision,
        recall,
        f1,
    }
}

/// Macro one-vs-rest AUC by comparing every positive/negative pair; ties
/// count one half. Classes without both positives and negatives are skipped;
/// `None` if no class qualifies.
pub fn auc_pair_count(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..n_classes {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (a, la) in labels.iter().enumerate() {
            if *la != c {
                continue;
            }
            for (b, lb) in labels.iter().enumerate() {
                if *lb == c {
                    continue;
                }
                pairs += 1.0;
                if scores[a][c] > scores[b][c] {
                    wins += 1.0;
                } else if scores[a][c] == scores[b][c] {
                    wins += 0.5;
                }
            }
        }
        if pairs > 0.0 {
            total += wins / pairs;
            used += 1;
        }
    }
    (used > 0).then(|| total / used as f64)
}

/// Wilcoxon signed-rank by full enumeration of sign patterns. Zero
/// differences are dropped. Returns `(W = min(W+, W-), two-sided p)`.
pub fn wilcoxon_enumerate(diffs: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    assert!((1..=24).contains(&n), "enumeration oracle needs 1..=24 nonzero differences");
    // midranks of |d| by counting
    let mut ranks = vec![0.0; n];
    for i in 0..n {
        let mut less = 0.0;
        let mut equal = 0.0;
        for j in 0..n {
            if d[j].abs() < d[i].abs() {
                less += 1.0;
            } else if d[j].abs() == d[i].abs() {
                equal += 1.0;
            }
        }
        ranks[i] = less + (equal + 1.0) / 2.0;
    }
    let mut w_plus = 0.0f64;
    let mut total = 0.0;
    for i in 0..n {
        total += ranks[i];
        if d[i] > 0.0 {
            w_plus += ranks[i];
        }
    }
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let mut at_or_below = 0u64;
    for mask in 0u64..(1u64 << n) {
        let mut wp = 0.0;
        for (i, r) in ranks.iter().enumerate() {
            if mask >> i & 1 == 1 {
                wp += r;
            }
        }
        if wp <= w + 1e-9 {
            at_or_below += 1;
        }
    }
    let p = (2.0 * at_or_below as f64 / (1u64 << n) as f64).min(1.0);
    (w, p)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Direct valid cross-correlation of one `[c][h][w]` image with
/// `[o][c][kh][kw]` kernels.
pub fn conv2d_naive(
    x: &[Vec<Vec<f64>>],
    k: &[Vec<Vec<Vec<f64>>>],
    bias: &[f64],
    stride: (usize, usize),
) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (x[0].len(), x[0][0].len());
    let (kh, kw) = (k[0][0].len(), k[0][0][0].len());
    let oh = (h - kh) / stride.0 + 1;
    let ow = (w - kw) / stride.1 + 1;
    let mut out = vec![vec![vec![0.0; ow]; oh]; k.len()];
    for (o, ko) in k.iter().enumerate() {
        for r in 0..oh {
            for q in 0..ow {
                let mut acc = bias[o];
                for (c, kc) in ko.iter().enumerate() {
                    for a in 0..kh {
                        for b in 0..kw {
                            acc += kc[a][b] * x[c][r * stride.0 + a][q * stride.1 + b];
                        }
                    }
                }
                out[o][r][q] = acc;
            }
        }
    }
    out
}
