//! Accuracy@k over multi-label next-visit predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The `k` values reported for every evaluation.
pub const REPORT_KS: [usize; 4] = [5, 10, 20, 30];

/// Category ids ordered by descending score, ties by ascending id. `-0.0`
/// and `0.0` tie.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let key = |i: usize| scores[i] + 0.0;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    order
}

/// Share of the sample's positives that land in the top `k` (clamped to the
/// number of categories).
pub fn sample_accuracy(scores: &[f64], labels: &[bool], k: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Labels(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::Labels("k must be at least 1".into()));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::Labels("sample has no positive label".into()));
    }
    let hits = ranking(scores)
        .into_iter()
        .take(k)
        .filter(|&c| labels[c])
        .count();
    Ok(hits as f64 / positives as f64)
}

/// Mean of per-sample Accuracy@k.
pub fn accuracy_at_k(scores: &[Vec<f64>], labels: &[Vec<bool>], k: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Labels(format!(
            "{} score rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Labels("no samples".into()));
    }
    let mut total = 0.0;
    for (s, y) in scores.iter().zip(labels) {
        total += sample_accuracy(s, y, k)?;
    }
    Ok(total / scores.len() as f64)
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: String,
    pub ks: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub loss: f64,
    pub patients: usize,
    pub steps: usize,
}

impl Metrics {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.accuracy[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(ranking(&[0.0, -0.0, 1.0]), vec![2, 0, 1]);
        assert_eq!(ranking(&[-0.0, 0.0]), vec![0, 1]);
    }

    #[test]
    fn perfect_ranking() {
        let s = [0.1, 5.0, 3.0, -1.0];
        let y = [false, true, true, false];
        assert_eq!(sample_accuracy(&s, &y, 2).unwrap(), 1.0);
    }

    #[test]
    fn half_of_positives_in_top_k() {
        let s: Vec<f64> = (0..10).map(|i| -(i as f64)).collect();
        let mut y = vec![false; 10];
        y[2] = true;
        y[8] = true;
        assert_eq!(sample_accuracy(&s, &y, 5).unwrap(), 0.5);
    }

    #[test]
    fn ties_break_by_id() {
        assert_eq!(ranking(&[1.0, 2.0, 2.0, 1.0]), vec![1, 2, 0, 3]);
        assert_eq!(sample_accuracy(&[0.0, 0.0], &[false, true], 1).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(sample_accuracy(&[1.0], &[false], 1).is_err());
        assert!(sample_accuracy(&[1.0], &[true], 0).is_err());
        assert!(accuracy_at_k(&[], &[], 1).is_err());
    }

    #[test]
    fn k_beyond_categories_is_full() {
        assert_eq!(sample_accuracy(&[3.0, 1.0, 2.0], &[true, true, false], 30).unwrap(), 1.0);
    }
}
