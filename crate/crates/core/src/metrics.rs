//! Accuracy, macro-F1 and one-vs-rest AUC, reported as percentages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub macro_f1: f64,
    pub auc: f64,
}

impl Metrics {
    /// Two decimals, as in result tables.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| (v * 100.0).round() / 100.0;
        Metrics {
            acc: r(self.acc),
            macro_f1: r(self.macro_f1),
            auc: r(self.auc),
        }
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Invalid("metrics of an empty set".into()));
    }
    if a != b {
        return Err(Error::Invalid(format!("{a} labels but {b} predictions")));
    }
    Ok(())
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_len(y_true.len(), y_pred.len())?;
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / y_true.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes that occur in either
/// `y_true` or `y_pred`.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_len(y_true.len(), y_pred.len())?;
    let k = y_true.iter().chain(y_pred).max().map_or(0, |m| m + 1);
    let (mut tp, mut fp, mut fneg) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let (mut sum, mut n) = (0.0, 0);
    for c in 0..k {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom > 0 {
            sum += 2.0 * tp[c] as f64 / denom as f64;
            n += 1;
        }
    }
    Ok(100.0 * sum / n as f64)
}

/// Binary AUC as a fraction, from average ranks (Mann-Whitney U): ties
/// count one half.
pub fn auc_binary(positive: &[bool], scores: &[f64]) -> Result<f64> {
    check_len(positive.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Invalid("AUC is undefined when only one class is present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, kept integral.
    let mut rank2_pos = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share (i + j + 2) / 2.
        let pos_in_run = order[i..=j].iter().filter(|&&o| positive[o]).count() as u64;
        rank2_pos += pos_in_run * (i + j + 2) as u64;
        i = j + 1;
    }
    let (p, n) = (p as u64, n as u64);
    // 2U = 2R - P(P+1), an integer; U / (P N) is then a single rounding.
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Macro one-vs-rest AUC in percent over the classes present in `y_true`;
/// `scores` holds one row of per-class scores per sample.
pub fn auc_ovr(y_true: &[usize], scores: &[Vec<f64>]) -> Result<f64> {
    check_len(y_true.len(), scores.len())?;
    let k = scores[0].len();
    if scores.iter().any(|r| r.len() != k) || y_true.iter().any(|&y| y >= k) {
        return Err(Error::Invalid("score rows must all have one entry per class".into()));
    }
    let present: Vec<usize> = (0..k).filter(|c| y_true.contains(c)).collect();
    if present.len() < 2 {
        return Err(Error::Invalid("AUC is undefined when only one class is present".into()));
    }
    if k == 2 {
        let pos: Vec<bool> = y_true.iter().map(|&y| y == 1).collect();
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        return Ok(100.0 * auc_binary(&pos, &s)?);
    }
    let mut sum = 0.0;
    for &c in &present {
        let pos: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        sum += auc_binary(&pos, &s)?;
    }
    Ok(100.0 * sum / present.len() as f64)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// All three metrics from per-sample logits; AUC ranks softmax
/// probabilities.
pub fn evaluate(y_true: &[usize], logits: &[Vec<f64>]) -> Result<Metrics> {
    check_len(y_true.len(), logits.len())?;
    let pred: Vec<usize> = logits.iter().map(|l| crate::train::argmax(l)).collect();
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    Ok(Metrics {
        acc: accuracy(y_true, &pred)?,
        macro_f1: macro_f1(y_true, &pred)?,
        auc: auc_ovr(y_true, &probs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let auc = auc_binary(&[true, true, false, false], &[0.9, 0.8, 0.3, 0.1]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn all_tied_is_half() {
        assert_eq!(auc_binary(&[true, false, true], &[0.5; 3]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc_binary(&[true, true], &[0.1, 0.2]).is_err());
        assert!(auc_ovr(&[1, 1], &[vec![0.1, 0.9], vec![0.3, 0.7]]).is_err());
    }

    #[test]
    fn f1_perfect_and_worst() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 100.0);
        assert_eq!(macro_f1(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1], &[0, 0]).unwrap(), 50.0);
    }
}
