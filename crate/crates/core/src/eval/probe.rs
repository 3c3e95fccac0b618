//! Linear probe on frozen features.

use crate::error::{Result, TammError};
use crate::numkit::{logsumexp_row, matmul, matmul_tn, Matrix};
use crate::rng::{permutation, seeded, STREAM_PROBE};
use crate::train::{adamw_step, DualFeatures, OptimState};

use super::InferenceMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 1e-2,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
        }
    }
}

/// Features a probe sees under `mode`: the concatenation for `Both`.
pub fn probe_features(feats: &DualFeatures, mode: InferenceMode) -> Matrix {
    match mode {
        InferenceMode::Both => feats.concat(),
        InferenceMode::IaaOnly => feats.vision.clone(),
        InferenceMode::TaaOnly => feats.semantic.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weight: Matrix,
    pub bias: Matrix,
    pub classes: Vec<u32>,
}

/// Mean softmax cross-entropy of `x·W + b` against target columns, with
/// gradients w.r.t. `W` and `b`.
pub fn probe_loss(weight: &Matrix, bias: &Matrix, x: &Matrix, targets: &[usize]) -> Result<(f64, Matrix, Matrix)> {
    let mut logits = matmul(x, weight)?;
    let n = x.rows();
    if targets.len() != n {
        return Err(TammError::shape(format!("{n} rows for {} targets", targets.len())));
    }
    let c = weight.cols();
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row_mut(i);
        for (v, b) in row.iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
        let lse = logsumexp_row(row)?;
        loss += lse - row[t];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n as f64;
        }
        row[t] -= 1.0 / n as f64;
    }
    let gw = matmul_tn(x, &logits)?;
    let mut gb = Matrix::zeros(1, c);
    for row in logits.iter_rows() {
        for (g, v) in gb.as_mut_slice().iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((loss / n as f64, gw, gb))
}

impl LinearProbe {
    /// Full-batch AdamW from a zero start.
    pub fn fit(x: &Matrix, labels: &[u32], cfg: &ProbeConfig) -> Result<Self> {
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(TammError::config("a linear probe needs at least two classes"));
        }
        let targets: Vec<usize> = labels
            .iter()
            .map(|l| classes.binary_search(l).unwrap())
            .collect();
        let mut weight = Matrix::zeros(x.cols(), classes.len());
        let mut bias = Matrix::zeros(1, classes.len());
        let mut state = OptimState::new(&[&weight, &bias]);
        for _ in 0..cfg.epochs {
            let (_, gw, gb) = probe_loss(&weight, &bias, x, &targets)?;
            adamw_step(
                &mut [&mut weight, &mut bias],
                &[&gw, &gb],
                &mut state,
                cfg.lr,
                cfg.betas,
                cfg.weight_decay,
            )?;
        }
        Ok(LinearProbe { weight, bias, classes })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<u32>> {
        let logits = matmul(x, &self.weight)?;
        Ok(logits
            .iter_rows()
            .map(|row| {
                let scores: Vec<f64> = row.iter().zip(self.bias.as_slice()).map(|(a, b)| a + b).collect();
                self.classes[super::argmax(&scores)]
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[u32]) -> Result<f64> {
        if labels.is_empty() {
            return Err(TammError::config("accuracy over an empty set"));
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Trains on one set, reports accuracy on the other.
pub fn linear_probe(
    x_train: &Matrix,
    y_train: &[u32],
    x_test: &Matrix,
    y_test: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64> {
    LinearProbe::fit(x_train, y_train, cfg)?.accuracy(x_test, y_test)
}

/// Per-class split of `idx` with `train_fraction` of each class (at least one
/// sample on each side) going to training.
pub fn stratified_split(
    labels: &[u32],
    idx: &[usize],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TammError::config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut classes: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = seeded(seed, STREAM_PROBE);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in classes {
        let members: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == c).collect();
        if members.len() < 2 {
            return Err(TammError::config(format!("class {c} has fewer than 2 samples to split")));
        }
        let cut = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        let perm = permutation(&mut rng, members.len());
        train.extend(perm[..cut].iter().map(|&p| members[p]));
        test.extend(perm[cut..].iter().map(|&p| members[p]));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, FD_EPS};
    use crate::rng::normal_vec;

    #[test]
    fn loss_gradient() {
        let mut rng = seeded(1, 0);
        let x = Matrix::new(5, 4, normal_vec(&mut rng, 20)).unwrap();
        let w = Matrix::new(4, 3, normal_vec(&mut rng, 12)).unwrap();
        let b = Matrix::new(1, 3, normal_vec(&mut rng, 3)).unwrap();
        let t = [0, 2, 1, 1, 0];
        let (_, gw, gb) = probe_loss(&w, &b, &x, &t).unwrap();
        let mut params = w.as_slice().to_vec();
        params.extend_from_slice(b.as_slice());
        let mut analytic = gw.into_vec();
        analytic.extend(gb.into_vec());
        let err = finite_diff_check(
            |p| {
                let w = Matrix::new(4, 3, p[..12].to_vec())?;
                let b = Matrix::new(1, 3, p[12..].to_vec())?;
                Ok(probe_loss(&w, &b, &x, &t)?.0)
            },
            &params,
            &analytic,
            FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn separable_two_class() {
        // class = sign of the first coordinate, margin 0.5
        let mut rng = seeded(2, 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let mut v = normal_vec(&mut rng, 3);
            let c = (i % 2) as u32;
            v[0] = if c == 1 { 0.5 + v[0].abs() } else { -0.5 - v[0].abs() };
            rows.push(v);
            labels.push(c);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        // brute-force witness that a separating hyperplane exists
        assert!(rows.iter().zip(&labels).all(|(r, &c)| (r[0] > 0.0) == (c == 1)));
        let acc = linear_probe(&x, &labels, &x, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::zeros(3, 2);
        assert!(matches!(
            LinearProbe::fit(&x, &[4, 4, 4], &ProbeConfig::default()),
            Err(TammError::Config(_))
        ));
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let idx: Vec<usize> = (0..30).collect();
        let (tr, te) = stratified_split(&labels, &idx, 0.7, 4).unwrap();
        assert_eq!(tr.len(), 21);
        assert_eq!(te.len(), 9);
        assert!(tr.iter().all(|i| !te.contains(i)));
        for c in 0..3 {
            assert_eq!(tr.iter().filter(|&&i| labels[i] == c).count(), 7);
        }
        assert_eq!(stratified_split(&labels, &idx, 0.7, 4).unwrap(), (tr, te));
    }
}
