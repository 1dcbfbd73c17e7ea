//! Accuracy, expected calibration error, OOD-detection AUROC and
//! generalization-error prediction, all scored on the maximum softmax
//! probability.

use serde::{Deserialize, Serialize};

use crate::autodiff::argmax;
use crate::error::{Error, Result};

/// Default number of equal-width calibration bins.
pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub label: usize,
    /// `argmax(probs) == label`, ties broken toward the lowest index.
    pub correct: bool,
    /// `max(probs)`.
    pub confidence: f64,
}

impl PredictionRecord {
    pub fn new(probs: Vec<f64>, label: usize) -> Result<Self> {
        if label >= probs.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: probs.len(),
            });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::input(format!(
                "probabilities must form a distribution (sum {total})"
            )));
        }
        let top = argmax(&probs);
        Ok(Self {
            correct: top == label,
            confidence: probs[top],
            probs,
            label,
        })
    }
}

fn nonempty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::input(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    nonempty(records, "record set")?;
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Bin `i` covers `[i/n, (i+1)/n)`; a confidence of exactly 1 falls in the
/// top bin.
fn bin_index(confidence: f64, n_bins: usize) -> usize {
    (1..n_bins)
        .take_while(|&i| i as f64 / n_bins as f64 <= confidence)
        .count()
}

/// Fraction-weighted mean of `|accuracy - mean confidence|` over the
/// nonempty bins.
pub fn ece(records: &[PredictionRecord], n_bins: usize) -> Result<f64> {
    nonempty(records, "record set")?;
    if n_bins == 0 {
        return Err(Error::input("n_bins must be at least 1"));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for r in records {
        let b = bin_index(r.confidence, n_bins);
        count[b] += 1;
        conf[b] += r.confidence;
        hits[b] += usize::from(r.correct);
    }
    let n = records.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (hits[b] as f64 / c - conf[b] / c).abs()
        })
        .sum())
}

/// Mann-Whitney AUROC for separating in-distribution (higher score) from
/// OOD samples; ties count one half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    nonempty(id_scores, "id score list")?;
    nonempty(ood_scores, "ood score list")?;
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(Error::input("scores contain NaN"));
    }
    let mut ood = ood_scores.to_vec();
    ood.sort_by(f64::total_cmp);
    // twice the U statistic, kept integral
    let twice_u: u64 = id_scores
        .iter()
        .map(|&s| {
            let below = ood.partition_point(|&o| o < s) as u64;
            let at_or_below = ood.partition_point(|&o| o <= s) as u64;
            2 * below + (at_or_below - below)
        })
        .sum();
    Ok(twice_u as f64 / (2 * id_scores.len() * ood.len()) as f64)
}

fn fraction_above(records: &[PredictionRecord], tau: f64) -> f64 {
    records.iter().filter(|r| r.confidence > tau).count() as f64 / records.len() as f64
}

/// Candidate thresholds: 0, 1 and midpoints between consecutive distinct
/// confidences, ascending.
pub fn gep_candidates(records: &[PredictionRecord]) -> Vec<f64> {
    let mut conf: Vec<f64> = records.iter().map(|r| r.confidence).collect();
    conf.sort_by(f64::total_cmp);
    conf.dedup();
    let mut out = vec![0.0];
    out.extend(conf.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    out.push(1.0);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Threshold minimizing `|accuracy - fraction(confidence > tau)|` on the
/// given records; the lowest candidate wins ties.
pub fn tune_gep_threshold(val_records: &[PredictionRecord]) -> Result<f64> {
    let acc = accuracy(val_records)?;
    let mut best = (f64::INFINITY, 0.0);
    for tau in gep_candidates(val_records) {
        let err = (acc - fraction_above(val_records, tau)).abs();
        if err < best.0 {
            best = (err, tau);
        }
    }
    Ok(best.1)
}

/// `|true_acc - fraction(confidence > tau)|`.
pub fn gep_error(target_records: &[PredictionRecord], true_acc: f64, tau: f64) -> Result<f64> {
    nonempty(target_records, "record set")?;
    Ok((true_acc - fraction_above(target_records, tau)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(confidence: f64, correct: bool) -> PredictionRecord {
        let label = if correct { 0 } else { 1 };
        PredictionRecord::new(vec![confidence, 1.0 - confidence], label).unwrap()
    }

    #[test]
    fn record_uses_lowest_index_on_ties() {
        let r = PredictionRecord::new(vec![0.5, 0.5], 0).unwrap();
        assert!(r.correct);
        assert!(!PredictionRecord::new(vec![0.5, 0.5], 1).unwrap().correct);
        assert!(PredictionRecord::new(vec![0.5, 0.6], 1).is_err());
        assert!(PredictionRecord::new(vec![0.5, 0.5], 2).is_err());
    }

    #[test]
    fn ece_examples() {
        let sharp: Vec<_> = (0..5).map(|_| rec(1.0, true)).collect();
        assert_eq!(ece(&sharp, 15).unwrap(), 0.0);
        let four = [rec(0.9, true), rec(0.9, true), rec(0.9, true), rec(0.9, false)];
        assert!((ece(&four, 15).unwrap() - 0.15).abs() < 1e-12);
        assert!(ece(&[], 15).is_err());
    }

    #[test]
    fn top_bin_holds_one() {
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0 / 15.0, 15), 1);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[f64::NAN], &[0.1]).is_err());
    }

    #[test]
    fn gep_examples() {
        let same: Vec<_> = (0..4).map(|_| rec(0.9, true)).collect();
        assert_eq!(tune_gep_threshold(&same).unwrap(), 0.0);
        let two = [
            PredictionRecord::new(vec![0.8, 0.2], 0).unwrap(),
            PredictionRecord::new(vec![0.2; 5], 1).unwrap(),
        ];
        let tau = tune_gep_threshold(&two).unwrap();
        assert_eq!(tau, 0.5);
        assert_eq!(gep_error(&two, 0.5, tau).unwrap(), 0.0);
        assert_eq!(gep_error(&same, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(gep_error(&same, 1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn gep_hand_count() {
        let recs: Vec<_> = (0..10).map(|i| rec(if i < 6 { 0.9 } else { 0.6 }, true)).collect();
        assert!((gep_error(&recs, 0.8, 0.75).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[rec(0.9, true), rec(0.7, true)]).unwrap(), 1.0);
        assert_eq!(accuracy(&[rec(0.9, false)]).unwrap(), 0.0);
        let r = [rec(0.9, true), rec(0.8, true), rec(0.7, true), rec(0.6, false)];
        assert_eq!(accuracy(&r).unwrap(), 0.75);
    }
}
