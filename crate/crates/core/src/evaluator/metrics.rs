use serde::{Deserialize, Serialize};

use crate::corpus::Emotion;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// percentage of items on the diagonal
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Square count matrix, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn zeros(n: usize) -> Self {
        Confusion {
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_pairs(pairs: &[(usize, usize)], n: usize) -> Result<Self> {
        let mut m = Confusion::zeros(n);
        for &(t, p) in pairs {
            if t >= n || p >= n {
                return Err(Error::Contract(format!("class pair ({t}, {p}) out of range for {n} classes")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Elementwise sum of equally sized matrices.
    pub fn add(&mut self, other: &Confusion) -> Result<()> {
        if other.n() != self.n() {
            return Err(Error::Shape(format!("confusion sizes {} and {}", self.n(), other.n())));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Contract("empty confusion matrix".into()));
        }
        if self.counts.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("confusion matrix is not square".into()));
        }
        if self.total() == 0 {
            return Err(Error::Contract("confusion matrix holds no items".into()));
        }
        Ok(())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and per-class precision, recall and F1. Zero denominators give 0.
pub fn metrics(confusion: &Confusion) -> Result<Metrics> {
    confusion.check()?;
    let n = confusion.n();
    let accuracy = 100.0 * confusion.trace() as f64 / confusion.total() as f64;
    let per_class = (0..n)
        .map(|c| {
            let tp = confusion.counts[c][c];
            let predicted: u64 = (0..n).map(|r| confusion.counts[r][c]).sum();
            let actual: u64 = confusion.counts[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            ClassMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
            }
        })
        .collect();
    Ok(Metrics { accuracy, per_class })
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Micro-averaged `(precision, recall)`, both as fractions. For single-label
/// multiclass data each equals the accuracy.
pub fn micro_average(confusion: &Confusion) -> Result<(f64, f64)> {
    confusion.check()?;
    let n = confusion.n();
    let tp = confusion.trace();
    let fp: u64 = (0..n)
        .map(|c| (0..n).filter(|&r| r != c).map(|r| confusion.counts[r][c]).sum::<u64>())
        .sum();
    let fneg: u64 = (0..n)
        .map(|c| (0..n).filter(|&p| p != c).map(|p| confusion.counts[c][p]).sum::<u64>())
        .sum();
    Ok((ratio(tp, tp + fp), ratio(tp, tp + fneg)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub macro_auc: f64,
    /// `None` for classes lacking positives or negatives
    pub per_class: Vec<Option<f64>>,
}

impl AucResult {
    pub fn skipped(&self) -> Vec<usize> {
        (0..self.per_class.len()).filter(|&c| self.per_class[c].is_none()).collect()
    }
}

/// Ranks starting at 1, tied values share their midrank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Macro one-vs-rest ROC AUC via the Mann-Whitney rank statistic.
/// `scores[i]` holds the per-class scores of item `i`.
pub fn auc_macro(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<AucResult> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != n_classes) {
        return Err(Error::Shape(format!("score row of length {} for {n_classes} classes", row.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Contract(format!("label {l} out of range for {n_classes} classes")));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let n_pos = labels.iter().filter(|&&l| l == c).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            per_class.push(None);
            continue;
        }
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let ranks = midranks(&column);
        let pos_rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&l, _)| l == c).map(|(_, r)| r).sum();
        let (p, q) = (n_pos as f64, n_neg as f64);
        per_class.push(Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q)));
    }
    let used: Vec<f64> = per_class.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::UndefinedAuc(
            "no class has both positive and negative items".into(),
        ));
    }
    let skipped: Vec<usize> = (0..n_classes).filter(|&c| per_class[c].is_none()).collect();
    if !skipped.is_empty() {
        log::warn!("AUC skipped classes {skipped:?} (no positives or no negatives)");
    }
    Ok(AucResult {
        macro_auc: used.iter().sum::<f64>() / used.len() as f64,
        per_class,
    })
}

/// Accuracy per emotion plus the unweighted mean over the emotions present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionTable {
    pub rows: Vec<(Emotion, f64)>,
    pub average: f64,
}

impl EmotionTable {
    pub fn get(&self, e: Emotion) -> Option<f64> {
        self.rows.iter().find(|(x, _)| *x == e).map(|(_, a)| *a)
    }
}

/// `outcomes` pairs each prediction's emotion with whether it was correct.
/// Emotions without items are left out.
pub fn per_emotion_report(outcomes: &[(Emotion, bool)], expected: &[Emotion]) -> Result<EmotionTable> {
    let mut rows = Vec::new();
    for &e in Emotion::ALL.iter() {
        let (mut n, mut correct) = (0u64, 0u64);
        for &(x, ok) in outcomes {
            if x == e {
                n += 1;
                correct += u64::from(ok);
            }
        }
        if n > 0 {
            rows.push((e, 100.0 * correct as f64 / n as f64));
        } else if expected.contains(&e) {
            log::warn!("emotion {e} has no test items; omitted from the table");
        }
    }
    if rows.is_empty() {
        return Err(Error::Contract("no predictions to tabulate".into()));
    }
    let average = rows.iter().map(|(_, a)| a).sum::<f64>() / rows.len() as f64;
    Ok(EmotionTable { rows, average })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forty_five_of_fifty() {
        let mut pairs = vec![(0, 0); 45];
        pairs.extend([(0, 1); 5]);
        let m = metrics(&Confusion::from_pairs(&pairs, 2).unwrap()).unwrap();
        assert_eq!(m.accuracy, 90.0);
    }

    #[test]
    fn f1_of_point_eight_and_point_six() {
        assert!((f1(0.8, 0.6) - 0.685_714_285_714_285_7).abs() < 1e-15);
    }

    #[test]
    fn diagonal_is_perfect() {
        let c = Confusion {
            counts: vec![vec![3, 0, 0], vec![0, 5, 0], vec![0, 0, 1]],
        };
        let m = metrics(&c).unwrap();
        assert_eq!(m.accuracy, 100.0);
        assert!(m.per_class.iter().all(|k| k.precision == 1.0 && k.recall == 1.0 && k.f1 == 1.0));
    }

    #[test]
    fn zero_denominators_and_empty() {
        let c = Confusion {
            counts: vec![vec![2, 0], vec![1, 0]],
        };
        let m = metrics(&c).unwrap();
        assert_eq!(m.per_class[1], ClassMetrics { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert!(matches!(metrics(&Confusion::zeros(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_extremes() {
        let labels = [0, 0, 1, 1];
        let sep = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.2, 0.8]];
        assert_eq!(auc_macro(&sep, &labels, 2).unwrap().macro_auc, 1.0);
        let flat = vec![vec![0.5, 0.5]; 4];
        let r = auc_macro(&flat, &labels, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.5)]);
        assert!(matches!(auc_macro(&flat, &[1, 1, 1, 1], 2), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn auc_skips_absent_class() {
        let r = auc_macro(&[vec![0.9, 0.1, 0.0], vec![0.1, 0.9, 0.0]], &[0, 1], 3).unwrap();
        assert_eq!(r.skipped(), vec![2]);
        assert_eq!(r.macro_auc, 1.0);
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn emotion_average_is_unweighted() {
        let mut o = vec![(Emotion::Neutral, true); 10];
        o.push((Emotion::Angry, false));
        o.push((Emotion::Angry, true));
        let t = per_emotion_report(&o, &[]).unwrap();
        assert_eq!(t.rows, vec![(Emotion::Neutral, 100.0), (Emotion::Angry, 50.0)]);
        assert_eq!(t.average, 75.0);
    }
}
