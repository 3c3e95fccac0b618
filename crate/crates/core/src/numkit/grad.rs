use super::matrix::{matmul, matmul_backward, Matrix};
use super::ops::{l2_normalize, l2_normalize_backward, logsumexp_row, Activation};
use crate::error::{Result, TammError};

/// Maps an upstream gradient to gradients w.r.t. the op's inputs.
pub trait Vjp {
    type Upstream: ?Sized;
    type Grads;

    fn vjp(&self, upstream: &Self::Upstream) -> Result<Self::Grads>;
}

/// A forward value together with its backward map.
#[derive(Debug, Clone)]
pub struct GradPair<V, B> {
    pub value: V,
    pub backward: B,
}

impl<V, B: Vjp> GradPair<V, B> {
    pub fn vjp(&self, upstream: &B::Upstream) -> Result<B::Grads> {
        self.backward.vjp(upstream)
    }
}

#[derive(Debug, Clone)]
pub struct MatmulVjp {
    a: Matrix,
    b: Matrix,
}

impl Vjp for MatmulVjp {
    type Upstream = Matrix;
    type Grads = (Matrix, Matrix);

    fn vjp(&self, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
        matmul_backward(&self.a, &self.b, upstream)
    }
}

pub fn matmul_traced(a: &Matrix, b: &Matrix) -> Result<GradPair<Matrix, MatmulVjp>> {
    Ok(GradPair {
        value: matmul(a, b)?,
        backward: MatmulVjp {
            a: a.clone(),
            b: b.clone(),
        },
    })
}

#[derive(Debug, Clone)]
pub struct ActivationVjp {
    activation: Activation,
    pre: Matrix,
}

impl Vjp for ActivationVjp {
    type Upstream = Matrix;
    type Grads = Matrix;

    fn vjp(&self, upstream: &Matrix) -> Result<Matrix> {
        self.activation.backward(&self.pre, upstream)
    }
}

pub fn activation_traced(activation: Activation, x: &Matrix) -> GradPair<Matrix, ActivationVjp> {
    GradPair {
        value: activation.forward(x),
        backward: ActivationVjp {
            activation,
            pre: x.clone(),
        },
    }
}

#[derive(Debug, Clone)]
pub struct NormalizeVjp {
    unit: Vec<f64>,
    norm: f64,
}

impl Vjp for NormalizeVjp {
    type Upstream = [f64];
    type Grads = Vec<f64>;

    fn vjp(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.unit.len() {
            return Err(TammError::shape(format!(
                "normalize backward: upstream length {} vs {}",
                upstream.len(),
                self.unit.len()
            )));
        }
        Ok(l2_normalize_backward(&self.unit, self.norm, upstream))
    }
}

pub fn l2_normalize_traced(v: &[f64]) -> Result<GradPair<Vec<f64>, NormalizeVjp>> {
    let (unit, norm) = l2_normalize(v)?;
    Ok(GradPair {
        value: unit.clone(),
        backward: NormalizeVjp { unit, norm },
    })
}

#[derive(Debug, Clone)]
pub struct LogsumexpVjp {
    softmax: Vec<f64>,
}

impl Vjp for LogsumexpVjp {
    type Upstream = f64;
    type Grads = Vec<f64>;

    fn vjp(&self, upstream: &f64) -> Result<Vec<f64>> {
        Ok(self.softmax.iter().map(|p| p * upstream).collect())
    }
}

pub fn logsumexp_traced(row: &[f64]) -> Result<GradPair<f64, LogsumexpVjp>> {
    let value = logsumexp_row(row)?;
    let softmax = row.iter().map(|x| (x - value).exp()).collect();
    Ok(GradPair {
        value,
        backward: LogsumexpVjp { softmax },
    })
}

/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `params`.
pub fn numeric_gradient<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(TammError::config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = finite(f(&x)?, i)?;
        x[i] = orig - eps;
        let minus = finite(f(&x)?, i)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

fn finite(v: f64, coord: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TammError::Numeric(format!(
            "objective is {v} when perturbing coordinate {coord}"
        )))
    }
}

/// Largest `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)` over
/// all coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Compare an analytic gradient against central differences of `f`.
pub fn finite_diff_check<F>(f: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(TammError::shape(format!(
            "analytic gradient has {} entries for {} params",
            analytic.len(),
            params.len()
        )));
    }
    let numeric = numeric_gradient(f, params, eps)?;
    Ok(relative_error(analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::ops::norm;
    use crate::rng::{normal_vec, seeded};

    fn flat(m: &Matrix) -> Vec<f64> {
        m.as_slice().to_vec()
    }

    #[test]
    fn quadratic_form_is_exact() {
        let q = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]];
        let f = |x: &[f64]| -> Result<f64> {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += x[i] * q[i][j] * x[j];
                }
            }
            Ok(s)
        };
        let x = [0.3, -1.2, 0.7];
        let grad: Vec<f64> = (0..3)
            .map(|i| 2.0 * (0..3).map(|j| q[i][j] * x[j]).sum::<f64>())
            .collect();
        let err = finite_diff_check(f, &x, &grad, FD_EPS).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function() {
        let err = finite_diff_check(|_| Ok(4.2), &[1.0, 2.0], &[0.0, 0.0], FD_EPS).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let f = |x: &[f64]| Ok(if x[0] > 1.0 { f64::NAN } else { x[0] });
        assert!(matches!(
            finite_diff_check(f, &[1.0], &[1.0], 1e-3),
            Err(TammError::Numeric(_))
        ));
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = seeded(11, 0);
        let a = Matrix::uniform(3, 4, 1.0, &mut rng);
        let b = Matrix::uniform(4, 2, 1.0, &mut rng);
        let w = Matrix::uniform(3, 2, 1.0, &mut rng);
        let pair = matmul_traced(&a, &b).unwrap();
        let (ga, gb) = pair.vjp(&w).unwrap();
        let loss = |a: &Matrix, b: &Matrix| -> Result<f64> {
            let c = matmul(a, b)?;
            Ok(c.as_slice().iter().zip(w.as_slice()).map(|(x, y)| x * y).sum())
        };
        let err_a = finite_diff_check(
            |x| loss(&Matrix::new(3, 4, x.to_vec())?, &b),
            a.as_slice(),
            &flat(&ga),
            FD_EPS,
        )
        .unwrap();
        let err_b = finite_diff_check(
            |x| loss(&a, &Matrix::new(4, 2, x.to_vec())?),
            b.as_slice(),
            &flat(&gb),
            FD_EPS,
        )
        .unwrap();
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn normalize_gradient() {
        let mut rng = seeded(12, 0);
        let v = normal_vec(&mut rng, 8);
        let w = normal_vec(&mut rng, 8);
        let pair = l2_normalize_traced(&v).unwrap();
        assert!((norm(&pair.value) - 1.0).abs() < 1e-12);
        let g = pair.vjp(&w).unwrap();
        let f = |x: &[f64]| -> Result<f64> {
            let (u, _) = l2_normalize(x)?;
            Ok(u.iter().zip(&w).map(|(a, b)| a * b).sum())
        };
        let err = finite_diff_check(f, &v, &g, FD_EPS).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn activation_gradients() {
        let mut rng = seeded(13, 0);
        let x = Matrix::uniform(3, 5, 2.0, &mut rng);
        let w = Matrix::uniform(3, 5, 1.0, &mut rng);
        for act in [Activation::Relu, Activation::Gelu] {
            let pair = activation_traced(act, &x);
            let g = pair.vjp(&w).unwrap();
            let f = |p: &[f64]| -> Result<f64> {
                let y = act.forward(&Matrix::new(3, 5, p.to_vec())?);
                Ok(y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum())
            };
            let err = finite_diff_check(f, x.as_slice(), &flat(&g), FD_EPS).unwrap();
            assert!(err < 1e-6, "{act:?}: {err}");
        }
    }

    #[test]
    fn logsumexp_gradient() {
        let row = [0.3, -1.0, 2.2, 0.0];
        let pair = logsumexp_traced(&row).unwrap();
        let g = pair.vjp(&1.0).unwrap();
        let err = finite_diff_check(logsumexp_row, &row, &g, FD_EPS).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
