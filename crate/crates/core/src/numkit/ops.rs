use std::f64::consts::PI;

use super::matrix::Matrix;
use crate::error::{Result, TammError};

/// Norms below this are refused by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

const GELU_COEFF: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = (2.0 / PI).sqrt() * (x + GELU_COEFF * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    /// Derivative; ReLU uses 0 at exactly 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let k = (2.0 / PI).sqrt();
                let inner = k * (x + GELU_COEFF * x * x * x);
                let t = inner.tanh();
                let dinner = k * (1.0 + 3.0 * GELU_COEFF * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }

    pub fn forward(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }

    /// Gradient w.r.t. the pre-activation given the upstream gradient.
    pub fn backward(self, pre: &Matrix, grad: &Matrix) -> Result<Matrix> {
        pre.check_same_shape(grad, "activation backward")?;
        let data = pre
            .as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(&x, &g)| g * self.derivative(x))
            .collect();
        Matrix::new(pre.rows(), pre.cols(), data)
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    Activation::Relu.forward(x)
}

pub fn gelu(x: &Matrix) -> Matrix {
    Activation::Gelu.forward(x)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit vector along `v` plus the original norm (needed by the backward pass).
pub fn l2_normalize(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(TammError::DegenerateVector {
            norm: n,
            threshold: NORM_EPS,
        });
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Vector-Jacobian product of normalization: `(I − ŷŷᵀ) g / ‖v‖`.
pub fn l2_normalize_backward(unit: &[f64], norm: f64, grad: &[f64]) -> Vec<f64> {
    let proj: f64 = unit.iter().zip(grad).map(|(y, g)| y * g).sum();
    unit.iter()
        .zip(grad)
        .map(|(y, g)| (g - y * proj) / norm)
        .collect()
}

/// Row-wise normalization of a batch. Returns the unit rows and per-row norms.
pub fn normalize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (u, n) = l2_normalize(x.row(r))?;
        out.row_mut(r).copy_from_slice(&u);
        norms.push(n);
    }
    Ok((out, norms))
}

pub fn normalize_rows_backward(unit: &Matrix, norms: &[f64], grad: &Matrix) -> Result<Matrix> {
    unit.check_same_shape(grad, "normalize backward")?;
    let mut out = Matrix::zeros(unit.rows(), unit.cols());
    for r in 0..unit.rows() {
        let g = l2_normalize_backward(unit.row(r), norms[r], grad.row(r));
        out.row_mut(r).copy_from_slice(&g);
    }
    Ok(out)
}

/// Max-shifted log-sum-exp of a nonempty row.
pub fn logsumexp_row(row: &[f64]) -> Result<f64> {
    let max = row
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if row.is_empty() {
        return Err(TammError::shape("logsumexp of an empty row"));
    }
    if row.len() == 1 {
        return Ok(row[0]);
    }
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    #[test]
    fn relu_values() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        // 0.5·(1 + tanh(√(2/π)·1.044715))
        let expected = 0.5 * (1.0 + ((2.0 / PI).sqrt() * 1.044715f64).tanh());
        assert!((Activation::Gelu.apply(1.0) - expected).abs() < 1e-15);
        assert!((Activation::Gelu.apply(1.0) - 0.841_191_990_607_9).abs() < 1e-12);
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Relu, Activation::Gelu] {
            for &x in &[-2.3, -0.7, 0.31, 1.9] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let (u, n) = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(n, 5.0);
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let (again, _) = l2_normalize(&u).unwrap();
        assert!((again[0] - u[0]).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(
            l2_normalize(&[0.0, 1e-14]),
            Err(TammError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn normalized_norm_is_one() {
        let mut rng = seeded(1, 0);
        for scale in [1e-6, 1e-3, 1.0, 1e3, 1e8] {
            let v: Vec<f64> = normal_vec(&mut rng, 8).iter().map(|x| x * scale).collect();
            let (u, _) = l2_normalize(&v).unwrap();
            assert!((norm(&u) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn logsumexp_cases() {
        assert_eq!(logsumexp_row(&[0.0]).unwrap(), 0.0);
        let c = 3.7;
        let v = logsumexp_row(&[c; 5]).unwrap();
        assert!((v - (c + 5f64.ln())).abs() < 1e-14);
        assert!((logsumexp_row(&[1.0, 0.0]).unwrap() - 1.313_261_687_518_223).abs() < 1e-12);
        assert!(logsumexp_row(&[]).is_err());
        // large values must not overflow
        assert!((logsumexp_row(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
