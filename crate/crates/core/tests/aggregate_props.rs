use gduq_core::anchoring::aggregate;
use gduq_core::autodiff::{softmax, Matrix};
use proptest::prelude::*;

fn member_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..8, 2usize..6).prop_flat_map(|(k, q)| {
        prop::collection::vec(-6.0f64..6.0, k * q).prop_map(move |v| softmax(&Matrix::new(k, q, v).unwrap()))
    })
}

// oracle: two-pass textbook formulas, accumulated in a different order
fn oracle(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (k, q) = m.shape();
    let mu: Vec<f64> = (0..q)
        .map(|c| (0..k).rev().map(|r| m.get(r, c)).sum::<f64>() / k as f64)
        .collect();
    let sigma = (0..q)
        .map(|c| {
            if k == 1 {
                0.0
            } else {
                let ss: f64 = (0..k).rev().map(|r| (m.get(r, c) - mu[c]).powi(2)).sum();
                (ss / (k - 1) as f64).sqrt()
            }
        })
        .collect();
    (mu, sigma)
}

proptest! {
    #[test]
    fn matches_brute_force(m in member_matrix()) {
        let p = aggregate(m.clone()).unwrap();
        let (mu, sigma) = oracle(&m);
        for c in 0..mu.len() {
            prop_assert!((p.mu[c] - mu[c]).abs() < 1e-12);
            prop_assert!((p.sigma[c] - sigma[c]).abs() < 1e-12);
            prop_assert!(p.sigma[c] >= 0.0);
        }
        prop_assert!((p.mu.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((p.mu_calib.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.mu_calib.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn invariant_to_member_order(m in member_matrix(), seed in any::<u64>()) {
        let mut r = gduq_core::rng::stream(seed, "perm");
        let perm = gduq_core::rng::permutation(m.rows(), &mut r);
        let a = aggregate(m.clone()).unwrap();
        let b = aggregate(m.select_rows(&perm)).unwrap();
        for c in 0..a.mu.len() {
            prop_assert!((a.mu[c] - b.mu[c]).abs() < 1e-12);
            prop_assert!((a.sigma[c] - b.sigma[c]).abs() < 1e-12);
            prop_assert!((a.mu_calib[c] - b.mu_calib[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_members_have_zero_sigma(row in prop::collection::vec(-5.0f64..5.0, 2..6), k in 1usize..10) {
        let p = softmax(&Matrix::row_vector(row));
        let m = p.broadcast_rows(k).unwrap();
        let agg = aggregate(m).unwrap();
        prop_assert!(agg.sigma.iter().all(|&s| s < 1e-15));
    }

    #[test]
    fn uniform_sigma_keeps_mu(half in 1usize..4, base in prop::collection::vec(0.05f64..1.0, 8), frac in 0.0f64..1.0) {
        // members p + d*e and p - d*e with e = (+1, -1, +1, ...): sigma = d*sqrt(2) on every class
        let q = 2 * half;
        let z: f64 = base[..q].iter().sum();
        let p: Vec<f64> = base[..q].iter().map(|b| b / z).collect();
        let d = frac * p.iter().cloned().fold(f64::INFINITY, f64::min);
        let e = |c: usize| if c.is_multiple_of(2) { 1.0 } else { -1.0 };
        let up: Vec<f64> = (0..q).map(|c| p[c] + d * e(c)).collect();
        let down: Vec<f64> = (0..q).map(|c| p[c] - d * e(c)).collect();
        let agg = aggregate(Matrix::from_rows(&[up, down]).unwrap()).unwrap();
        for c in 0..q {
            prop_assert!((agg.sigma[c] - agg.sigma[0]).abs() < 1e-15);
            prop_assert!((agg.mu_calib[c] - agg.mu[c]).abs() < 1e-12);
        }
    }
}
