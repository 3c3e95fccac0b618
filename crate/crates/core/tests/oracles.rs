//! Independent reference computations checked against the library.

use rand::Rng as _;
use tamm_core::losses::{contrastive_loss, LossConfig};
use tamm_core::numkit::{normalize_rows, Matrix};
use tamm_core::rng::{normal_vec, seeded};

/// Direct transcription: exp, sum, log, no max-shift.
fn naive_infonce(a: &Matrix, b: &Matrix, tau: f64) -> f64 {
    let n = a.rows();
    let sim = |i: usize, j: usize| a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| sim(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| sim(j, i).exp()).sum();
        total += -(sim(i, i).exp() / row).ln() - (sim(i, i).exp() / col).ln();
    }
    total / (2.0 * n as f64)
}

fn unit_rows(rng: &mut tamm_core::rng::Rng, n: usize, d: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(rng, d)).collect();
    normalize_rows(&Matrix::from_rows(&rows).unwrap()).unwrap().0
}

#[test]
fn contrastive_matches_naive() {
    let mut rng = seeded(2024, 0);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let tau = [0.05, 0.07, 1.0][k % 3];
        let a = unit_rows(&mut rng, n, d);
        let b = unit_rows(&mut rng, n, d);
        let got = contrastive_loss(&a, &b, &LossConfig::new(tau).unwrap()).unwrap().loss;
        worst = worst.max((got - naive_infonce(&a, &b, tau)).abs());
    }
    assert!(worst < 1e-10, "max abs diff {worst:e}");
}

#[test]
fn single_pair_is_exactly_zero() {
    let mut rng = seeded(5, 0);
    for tau in [0.05, 0.07, 1.0] {
        let a = unit_rows(&mut rng, 1, 8);
        let b = unit_rows(&mut rng, 1, 8);
        assert_eq!(contrastive_loss(&a, &b, &LossConfig::new(tau).unwrap()).unwrap().loss, 0.0);
    }
}

#[test]
fn orthonormal_pair_closed_form() {
    let a = Matrix::identity(2);
    for tau in [0.05, 0.07, 1.0] {
        let got = contrastive_loss(&a, &a, &LossConfig::new(tau).unwrap()).unwrap().loss;
        let want = (1.0 + (-1.0 / tau).exp()).ln();
        assert!((got - want).abs() < 1e-9, "tau {tau}: {got} vs {want}");
    }
}
