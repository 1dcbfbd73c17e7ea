use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Result of evaluating one query under K anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    /// Column mean of `per_anchor_probs`.
    pub mu: Vec<f64>,
    /// Column sample standard deviation (divisor `K - 1`), zero when `K = 1`.
    pub sigma: Vec<f64>,
    /// `mu * (1 - sigma)` clamped at zero and renormalized.
    pub mu_calib: Vec<f64>,
    /// K x q member probabilities.
    pub per_anchor_probs: Matrix,
}

impl EnsemblePrediction {
    pub fn num_members(&self) -> usize {
        self.per_anchor_probs.rows()
    }
}

/// Aggregates a K x q matrix of member probabilities.
///
/// With all-zero `sigma` (in particular `K = 1`) `mu_calib` is `mu` exactly.
/// Per-class `sigma` is bounded by `0.5 * sqrt(K / (K - 1))` for probability
/// rows, so the clamp only engages for `K = 2` with fully opposed members.
pub fn aggregate(per_anchor_probs: Matrix) -> Result<EnsemblePrediction> {
    let (k, q) = per_anchor_probs.shape();
    if k == 0 || q == 0 {
        return Err(Error::input("aggregate needs at least one member and one class"));
    }
    let mut mu = vec![0.0; q];
    for r in 0..k {
        for (m, p) in mu.iter_mut().zip(per_anchor_probs.row(r)) {
            *m += p;
        }
    }
    for m in &mut mu {
        *m /= k as f64;
    }

    let mut sigma = vec![0.0; q];
    if k > 1 {
        for r in 0..k {
            for ((s, p), m) in sigma.iter_mut().zip(per_anchor_probs.row(r)).zip(&mu) {
                *s += (p - m) * (p - m);
            }
        }
        for s in &mut sigma {
            *s = (*s / (k - 1) as f64).sqrt();
        }
    }

    let mu_calib = if sigma.iter().all(|&s| s == 0.0) {
        mu.clone()
    } else {
        let raw: Vec<f64> = mu.iter().zip(&sigma).map(|(m, s)| (m * (1.0 - s)).max(0.0)).collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.iter().map(|v| v / total).collect()
        } else {
            mu.clone()
        }
    };

    Ok(EnsemblePrediction {
        mu,
        sigma,
        mu_calib,
        per_anchor_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_member_is_returned_unchanged() {
        let p = aggregate(m(&[&[0.2, 0.3, 0.5]])).unwrap();
        assert_eq!(p.mu, vec![0.2, 0.3, 0.5]);
        assert_eq!(p.sigma, vec![0.0; 3]);
        assert_eq!(p.mu_calib, p.mu);
    }

    #[test]
    fn equal_sigma_renormalizes_to_mu() {
        let p = aggregate(m(&[&[0.6, 0.4], &[0.8, 0.2]])).unwrap();
        assert!(close(&p.mu, &[0.7, 0.3], 1e-15));
        let s = 0.02f64.sqrt();
        assert!(close(&p.sigma, &[s, s], 1e-12));
        assert!(close(&p.mu_calib, &[0.7, 0.3], 1e-12));

        let p = aggregate(m(&[&[0.9, 0.1], &[0.5, 0.5]])).unwrap();
        let s = 0.08f64.sqrt();
        assert!(close(&p.sigma, &[s, s], 1e-12));
        assert!(close(&p.mu_calib, &[0.7, 0.3], 1e-12));
    }

    #[test]
    fn asymmetric_sigma_widens_margin() {
        let p = aggregate(m(&[&[0.6, 0.3, 0.1], &[0.6, 0.1, 0.3]])).unwrap();
        let s = 0.02f64.sqrt();
        assert!(close(&p.sigma, &[0.0, s, s], 1e-12));
        let raw = [0.6, 0.2 * (1.0 - s), 0.2 * (1.0 - s)];
        let z: f64 = raw.iter().sum();
        let want: Vec<f64> = raw.iter().map(|v| v / z).collect();
        assert!(close(&p.mu_calib, &want, 1e-12));
        assert!(p.mu_calib[0] - p.mu_calib[1] > p.mu[0] - p.mu[1]);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(aggregate(Matrix::zeros(0, 2)).is_err());
    }
}
