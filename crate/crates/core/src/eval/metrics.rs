//! Ranking metrics over binary labels. Equal scores are always processed as
//! one block, so every metric depends only on the ordering of scores.

use crate::error::{Error, Result};

struct Sorted {
    /// (positives, negatives) per block of equal scores, highest score first.
    blocks: Vec<(usize, usize)>,
    positives: usize,
    negatives: usize,
}

fn sort_blocks(scores: &[f64], labels: &[bool]) -> Result<Sorted> {
    if scores.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::validation(format!("non-finite score at index {i}")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut prev = f64::NAN;
    for &i in &idx {
        if scores[i] != prev {
            blocks.push((0, 0));
            prev = scores[i];
        }
        let last = blocks.last_mut().expect("pushed above");
        if labels[i] {
            last.0 += 1;
        } else {
            last.1 += 1;
        }
    }
    let positives = labels.iter().filter(|&&l| l).count();
    Ok(Sorted {
        blocks,
        positives,
        negatives: labels.len() - positives,
    })
}

/// Area under the ROC curve by trapezoidal integration over tie blocks
/// (ties count one half).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let s = sort_blocks(scores, labels)?;
    if s.positives == 0 || s.negatives == 0 {
        return Err(Error::validation("AUROC needs both classes"));
    }
    let (p, n) = (s.positives as f64, s.negatives as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut area = 0.0;
    for (bp, bn) in s.blocks {
        let (tp1, fp1) = (tp + bp as f64, fp + bn as f64);
        area += (fp1 - fp) * (tp + tp1) / 2.0;
        tp = tp1;
        fp = fp1;
    }
    Ok(area / (p * n))
}

/// Step-integrated precision-recall area: the mean over positives of the
/// precision at the end of their tie block.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let s = sort_blocks(scores, labels)?;
    if s.positives == 0 {
        return Err(Error::validation(
            "average precision needs at least one positive",
        ));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut sum = 0.0;
    for (bp, bn) in s.blocks {
        tp += bp;
        seen += bp + bn;
        sum += bp as f64 * tp as f64 / seen as f64;
    }
    Ok(sum / s.positives as f64)
}

/// Best F1 over thresholds at every distinct score (predict positive when
/// `score >= threshold`).
pub fn f1max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let s = sort_blocks(scores, labels)?;
    if s.positives == 0 {
        return Err(Error::validation("F1max needs at least one positive"));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut best: f64 = 0.0;
    for (bp, bn) in s.blocks {
        tp += bp;
        seen += bp + bn;
        if tp > 0 {
            let precision = tp as f64 / seen as f64;
            let recall = tp as f64 / s.positives as f64;
            best = best.max(2.0 * precision * recall / (precision + recall));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.9], &labels(&[0, 1])).unwrap(), 1.0);
        assert_eq!(
            auroc(&[0.2, 0.4, 0.6, 0.8], &labels(&[0, 1, 0, 1])).unwrap(),
            0.75
        );
        assert_eq!(auroc(&[0.5; 4], &labels(&[0, 1, 0, 1])).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &labels(&[1, 1])).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(
            average_precision(&[0.9, 0.1], &labels(&[1, 0])).unwrap(),
            1.0
        );
        let ap = average_precision(&[0.9, 0.5, 0.1], &labels(&[1, 0, 1])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(
            average_precision(&[0.9, 0.1], &labels(&[0, 1])).unwrap(),
            0.5
        );
        assert!(average_precision(&[0.1], &labels(&[0])).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1max(&[0.9, 0.1], &labels(&[1, 0])).unwrap(), 1.0);
        let f = f1max(&[0.9, 0.8, 0.1], &labels(&[1, 0, 1])).unwrap();
        // thresholds: 0.9 -> P=1,R=.5,F1=2/3; 0.8 -> P=.5,R=.5,F1=.5; 0.1 -> P=2/3,R=1,F1=.8
        assert!((f - 0.8).abs() < 1e-15);
        assert_eq!(f1max(&[0.3, 0.2, 0.7], &labels(&[1, 1, 1])).unwrap(), 1.0);
    }

    #[test]
    fn nan_scores_are_rejected() {
        assert!(auroc(&[f64::NAN, 0.1], &labels(&[0, 1])).is_err());
    }
}
