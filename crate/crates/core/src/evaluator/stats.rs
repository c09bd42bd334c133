use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::metrics::midranks;
use crate::error::{Error, Result};
use Sidedness::*;

/// Largest sample handled by exact enumeration.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    #[default]
    TwoSided,
    /// alternative: first system scores higher
    Greater,
    /// alternative: first system scores lower
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W⁺, W⁻)`
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// pairs left after dropping zero differences
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
    pub sidedness: Sidedness,
}

/// Null distribution of `2·W⁺` for the given doubled ranks: `counts[s]` is
/// the number of sign patterns whose doubled positive rank sum equals `s`.
pub fn signed_rank_counts(doubled_ranks: &[u64]) -> Vec<u64> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Wilcoxon signed-rank test on paired samples `a[i]` vs `b[i]`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], sidedness: Sidedness) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Contract("paired samples must be finite".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Err(Error::DegenerateTest("all paired differences are zero".into()));
    }
    let n = d.len();
    if n < 5 {
        return Err(Error::DegenerateTest(format!(
            "{n} nonzero differences; the test needs at least 5"
        )));
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = midranks(&abs);
    // midranks are multiples of 1/2, so doubling makes them exact integers
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let total2: u64 = doubled.iter().sum();
    let plus2: u64 = doubled.iter().zip(&d).filter(|(_, x)| **x > 0.0).map(|(r, _)| r).sum();
    let minus2 = total2 - plus2;
    let w_plus = plus2 as f64 / 2.0;
    let w_minus = minus2 as f64 / 2.0;

    let (p_value, exact) = if n <= EXACT_MAX_N {
        let counts = signed_rank_counts(&doubled);
        let all = (1u64 << n) as f64;
        let cdf = |upto: u64| counts[..=upto as usize].iter().sum::<u64>() as f64 / all;
        let p = match sidedness {
            TwoSided => (2.0 * cdf(plus2.min(minus2))).min(1.0),
            // P(W⁺ ≥ observed) = P(W⁻ ≤ observed W⁻) by symmetry
            Greater => cdf(minus2),
            Less => cdf(plus2),
        };
        (p, true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let p = match sidedness {
            TwoSided => (2.0 * std.cdf(-z.abs())).min(1.0),
            Greater => std.cdf(-z),
            Less => std.cdf(z),
        };
        (p, false)
    };
    Ok(WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n,
        p_value,
        exact,
        sidedness,
    })
}
