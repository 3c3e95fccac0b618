//! AdamW and the warmup + cosine learning-rate schedule.

use crate::error::{Result, TammError};
use crate::numkit::Matrix;

pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl OptimState {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    fn check(&self, params: &[&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(TammError::shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(TammError::shape(format!(
                    "tensor {i}: param {:?}, grad {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.first[i].shape()
                )));
            }
        }
        Ok(())
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut OptimState,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) -> Result<()> {
    state.check(params, grads)?;
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[k].as_mut_slice();
        let v = state.second[k].as_mut_slice();
        for (((p, &g), m), v) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p = *p * decay - lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then a half cosine down to 0.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(TammError::config(format!(
            "warmup ({warmup_steps} steps) must be shorter than training ({total_steps} steps)"
        )));
    }
    if step > total_steps {
        return Err(TammError::config(format!("step {step} beyond schedule end {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param() -> Matrix {
        Matrix::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap()
    }

    #[test]
    fn zero_grad_decays_exactly() {
        let mut p = param();
        let g = Matrix::zeros(2, 2);
        let mut st = OptimState::new(&[&p]);
        adamw_step(&mut [&mut p], &[&g], &mut st, 0.1, (0.9, 0.999), 0.01).unwrap();
        let f = 1.0 - 0.1 * 0.01;
        for (a, b) in p.as_slice().iter().zip(param().as_slice()) {
            assert_eq!(*a, b * f);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = param();
        let g = Matrix::zeros(2, 2);
        let mut st = OptimState::new(&[&p]);
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[&g], &mut st, 0.3, (0.9, 0.999), 0.0).unwrap();
        }
        assert_eq!(p, param());
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut p = Matrix::zeros(1, 3);
        let g = Matrix::new(1, 3, vec![0.5, -2.0, 1e-3]).unwrap();
        let mut st = OptimState::new(&[&p]);
        let lr = 0.01;
        adamw_step(&mut [&mut p], &[&g], &mut st, lr, (0.9, 0.999), 0.0).unwrap();
        // after bias correction m̂ = g and v̂ = g², so the step is −lr·g/(|g|+ε)
        for (u, gi) in p.as_slice().iter().zip(g.as_slice()) {
            let expect = -lr * gi / (gi.abs() + ADAM_EPS);
            assert!((u - expect).abs() < 1e-15, "{u} vs {expect}");
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = param();
        let g = Matrix::zeros(1, 2);
        let mut st = OptimState::new(&[&p]);
        assert!(matches!(
            adamw_step(&mut [&mut p], &[&g], &mut st, 0.1, (0.9, 0.999), 0.0),
            Err(TammError::Shape(_))
        ));
    }

    #[test]
    fn schedule_landmarks() {
        let base = 5e-4;
        assert_eq!(cosine_lr(0, 100, 10, base).unwrap(), 0.0);
        assert_eq!(cosine_lr(10, 100, 10, base).unwrap(), base);
        assert!((cosine_lr(55, 100, 10, base).unwrap() - base / 2.0).abs() < 1e-18);
        assert!(cosine_lr(100, 100, 10, base).unwrap().abs() < 1e-18);
        assert!(cosine_lr(101, 100, 10, base).is_err());
        assert!(cosine_lr(3, 10, 10, base).is_err());
        assert_eq!(cosine_lr(0, 10, 0, base).unwrap(), base);
    }

    #[test]
    fn schedule_is_continuous_and_nonnegative() {
        let (total, warm, base) = (200u64, 20u64, 1.0);
        let below = cosine_lr(warm - 1, total, warm, base).unwrap();
        let at = cosine_lr(warm, total, warm, base).unwrap();
        let above = cosine_lr(warm + 1, total, warm, base).unwrap();
        assert!((at - below) <= base / warm as f64 + 1e-12);
        assert!((at - above) < 1e-3);
        for s in 0..=total {
            assert!(cosine_lr(s, total, warm, base).unwrap() >= 0.0);
        }
    }
}
