//! Symmetric contrastive loss and the losses built on it.

use std::ops::Deref;

use crate::error::{Result, TammError};
use crate::numkit::{dot, logsumexp_row, matmul, matmul_tn, norm, Matrix};

/// CLIP-convention temperature; never learned.
pub const DEFAULT_TAU: f64 = 0.07;

/// Rows further than this from unit norm are rejected by [`BatchFeatures`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    tau: f64,
}

impl LossConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(TammError::config(format!("temperature must be > 0, got {tau}")));
        }
        Ok(LossConfig { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: DEFAULT_TAU }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Point,
    Image,
    AdaptedImage,
    Text,
    VisionPoint,
    SemanticPoint,
}

/// A batch of unit-norm feature rows tagged with their modality.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    features: Matrix,
    modality: Modality,
}

impl BatchFeatures {
    pub fn new(features: Matrix, modality: Modality) -> Result<Self> {
        if features.rows() == 0 {
            return Err(TammError::shape("empty feature batch"));
        }
        for (i, row) in features.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(TammError::shape(format!(
                    "{modality:?} row {i} has norm {n}, expected unit"
                )));
            }
        }
        Ok(BatchFeatures { features, modality })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn into_inner(self) -> Matrix {
        self.features
    }
}

impl Deref for BatchFeatures {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.features
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

fn check_aligned(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TammError::shape(format!(
            "{what}: batches {}x{} and {}x{} are not aligned",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.rows() == 0 {
        return Err(TammError::shape(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Symmetric InfoNCE over the similarity matrix `A·Bᵀ/τ`, averaged over both
/// directions and all `n` rows. Row `i` of `a` is the positive for row `i`
/// of `b`.
pub fn contrastive_loss(a: &Matrix, b: &Matrix, cfg: &LossConfig) -> Result<ContrastiveOutput> {
    check_aligned(a, b, "contrastive loss")?;
    let n = a.rows();
    let tau = cfg.tau;
    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sim.set(i, j, dot(a.row(i), b.row(j)) / tau);
        }
    }

    let mut row_lse = Vec::with_capacity(n);
    let mut col_lse = Vec::with_capacity(n);
    let mut column = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        for (j, c) in column.iter_mut().enumerate() {
            *c = sim.get(j, i);
        }
        let r = logsumexp_row(sim.row(i))?;
        let c = logsumexp_row(&column)?;
        let diag = sim.get(i, i);
        total += (r - diag) + (c - diag);
        row_lse.push(r);
        col_lse.push(c);
    }
    let loss = total / (2.0 * n as f64);

    // dL/dS = (softmax_rows + softmax_cols − 2I) / 2n
    let scale = 1.0 / (2.0 * n as f64);
    let mut dsim = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s = sim.get(i, j);
            let mut g = (s - row_lse[i]).exp() + (s - col_lse[j]).exp();
            if i == j {
                g -= 2.0;
            }
            dsim.set(i, j, g * scale / tau);
        }
    }
    let grad_a = matmul(&dsim, b)?;
    let grad_b = matmul_tn(&dsim, a)?;
    Ok(ContrastiveOutput {
        loss,
        grad_a,
        grad_b,
    })
}

#[derive(Debug, Clone)]
pub struct RealignOutput {
    pub loss: f64,
    /// Gradient w.r.t. the adapted image rows. Text features are frozen.
    pub grad_image: Matrix,
}

/// Image-text re-alignment loss for the image adapter.
pub fn realign_loss(adapted_image: &Matrix, text: &Matrix, cfg: &LossConfig) -> Result<RealignOutput> {
    let out = contrastive_loss(adapted_image, text, cfg)?;
    Ok(RealignOutput {
        loss: out.loss,
        grad_image: out.grad_a,
    })
}

#[derive(Debug, Clone)]
pub struct TrimodalOutput {
    pub loss: f64,
    /// Semantic-point ↔ text term.
    pub text_term: f64,
    /// View-averaged vision-point ↔ adapted-image term.
    pub image_term: f64,
    pub grad_semantic: Matrix,
    pub grad_vision: Matrix,
    /// Per-view gradient w.r.t. the image rows, for callers that train the
    /// image path.
    pub grad_views: Vec<Matrix>,
}

/// `contrastive(semantic, text) + (1/m)·Σₖ contrastive(vision, viewₖ)`.
pub fn trimodal_loss(
    semantic: &Matrix,
    text: &Matrix,
    vision: &Matrix,
    views: &[Matrix],
    cfg: &LossConfig,
) -> Result<TrimodalOutput> {
    if views.is_empty() {
        return Err(TammError::config("tri-modal loss needs at least one image view"));
    }
    let text_out = contrastive_loss(semantic, text, cfg)?;
    let m = views.len() as f64;
    let mut image_term = 0.0;
    let mut grad_vision = Matrix::zeros(vision.rows(), vision.cols());
    let mut grad_views = Vec::with_capacity(views.len());
    for view in views {
        let out = contrastive_loss(vision, view, cfg)?;
        image_term += out.loss;
        grad_vision.add_assign(&out.grad_a)?;
        grad_views.push(out.grad_b.scale(1.0 / m));
    }
    image_term /= m;
    let grad_vision = grad_vision.scale(1.0 / m);
    Ok(TrimodalOutput {
        loss: text_out.loss + image_term,
        text_term: text_out.loss,
        image_term,
        grad_semantic: text_out.grad_a,
        grad_vision,
        grad_views,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccuracyDirection {
    /// For each row of `a`, its partner must beat every other row of `b`.
    #[default]
    AOverB,
    /// For each row of `b`, its partner must beat every other row of `a`.
    BOverA,
    /// Mean of both directions.
    Mean,
}

/// Fraction of pairs whose partner strictly out-scores every other candidate.
/// Ties count as misses.
pub fn contrastive_accuracy(a: &Matrix, b: &Matrix) -> Result<f64> {
    contrastive_accuracy_dir(a, b, AccuracyDirection::AOverB)
}

pub fn contrastive_accuracy_dir(a: &Matrix, b: &Matrix, dir: AccuracyDirection) -> Result<f64> {
    check_aligned(a, b, "contrastive accuracy")?;
    let n = a.rows();
    if n < 2 {
        return Err(TammError::config("contrastive accuracy needs at least 2 pairs"));
    }
    let one_way = |x: &Matrix, y: &Matrix| -> f64 {
        let hits = (0..n)
            .filter(|&i| {
                let own = dot(x.row(i), y.row(i));
                (0..n).all(|j| j == i || own > dot(x.row(i), y.row(j)))
            })
            .count();
        hits as f64 / n as f64
    };
    Ok(match dir {
        AccuracyDirection::AOverB => one_way(a, b),
        AccuracyDirection::BOverA => one_way(b, a),
        AccuracyDirection::Mean => 0.5 * (one_way(a, b) + one_way(b, a)),
    })
}

/// Mean contrastive accuracy over consecutive chunks of `chunk` pairs; a
/// trailing chunk shorter than 2 is dropped.
pub fn chunked_contrastive_accuracy(a: &Matrix, b: &Matrix, chunk: usize) -> Result<f64> {
    check_aligned(a, b, "chunked contrastive accuracy")?;
    if chunk < 2 {
        return Err(TammError::config("accuracy chunk must hold at least 2 pairs"));
    }
    let mut weighted = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 2 <= a.rows() {
        let end = (start + chunk).min(a.rows());
        let idx: Vec<usize> = (start..end).collect();
        let acc = contrastive_accuracy(&a.select_rows(&idx), &b.select_rows(&idx))?;
        weighted += acc * idx.len() as f64;
        count += idx.len();
        start = end;
    }
    if count == 0 {
        return Err(TammError::config("contrastive accuracy needs at least 2 pairs"));
    }
    Ok(weighted / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, l2_normalize, FD_EPS};
    use crate::rng::{normal_vec, seeded, Rng};

    fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        let data = (0..n)
            .flat_map(|_| l2_normalize(&normal_vec(rng, d)).unwrap().0)
            .collect();
        Matrix::new(n, d, data).unwrap()
    }

    /// Direct transcription of the loss without any max-shift.
    fn naive_loss(a: &Matrix, b: &Matrix, tau: f64) -> f64 {
        let n = a.rows();
        let s = |i: usize, j: usize| dot(a.row(i), b.row(j)) / tau;
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| s(i, j).exp()).sum();
            let col: f64 = (0..n).map(|j| s(j, i).exp()).sum();
            total += (s(i, i).exp() / row).ln() + (s(i, i).exp() / col).ln();
        }
        -total / (2.0 * n as f64)
    }

    #[test]
    fn single_pair_is_zero() {
        let mut rng = seeded(1, 0);
        let a = unit_rows(&mut rng, 1, 5);
        let b = unit_rows(&mut rng, 1, 5);
        assert_eq!(contrastive_loss(&a, &b, &LossConfig::default()).unwrap().loss, 0.0);
    }

    #[test]
    fn orthonormal_pair_closed_form() {
        let e = Matrix::identity(2);
        let out = contrastive_loss(&e, &e, &LossConfig::new(1.0).unwrap()).unwrap();
        assert!((out.loss - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((out.loss - 0.313_261_7).abs() < 1e-7);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = seeded(2, 0);
        let a = unit_rows(&mut rng, 6, 8);
        let b = unit_rows(&mut rng, 6, 8);
        let cfg = LossConfig::default();
        let got = contrastive_loss(&a, &b, &cfg).unwrap().loss;
        assert!((got - naive_loss(&a, &b, cfg.tau())).abs() < 1e-10);
    }

    #[test]
    fn config_and_shape_errors() {
        assert!(LossConfig::new(0.0).is_err());
        assert!(LossConfig::new(-1.0).is_err());
        let a = Matrix::identity(3);
        let b = Matrix::identity(2);
        assert!(matches!(
            contrastive_loss(&a, &b, &LossConfig::default()),
            Err(TammError::Shape(_))
        ));
        assert!(matches!(
            trimodal_loss(&a, &a, &a, &[], &LossConfig::default()),
            Err(TammError::Config(_))
        ));
        assert!(contrastive_accuracy(&Matrix::identity(1), &Matrix::identity(1)).is_err());
    }

    #[test]
    fn symmetric_bit_exact() {
        let mut rng = seeded(3, 0);
        for _ in 0..20 {
            let a = unit_rows(&mut rng, 7, 5);
            let b = unit_rows(&mut rng, 7, 5);
            let cfg = LossConfig::default();
            let ab = contrastive_loss(&a, &b, &cfg).unwrap().loss;
            let ba = contrastive_loss(&b, &a, &cfg).unwrap().loss;
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn realign_matches_contrastive() {
        let mut rng = seeded(4, 0);
        let a = unit_rows(&mut rng, 5, 6);
        let b = unit_rows(&mut rng, 5, 6);
        let cfg = LossConfig::default();
        let c = contrastive_loss(&a, &b, &cfg).unwrap();
        let r = realign_loss(&a, &b, &cfg).unwrap();
        assert_eq!(c.loss.to_bits(), r.loss.to_bits());
        assert_eq!(c.grad_a, r.grad_image);
    }

    #[test]
    fn trimodal_reductions() {
        let mut rng = seeded(5, 0);
        let sp = unit_rows(&mut rng, 4, 6);
        let t = unit_rows(&mut rng, 4, 6);
        let vp = unit_rows(&mut rng, 4, 6);
        let v = unit_rows(&mut rng, 4, 6);
        let cfg = LossConfig::default();
        let one = trimodal_loss(&sp, &t, &vp, std::slice::from_ref(&v), &cfg).unwrap();
        let expected = contrastive_loss(&sp, &t, &cfg).unwrap().loss
            + contrastive_loss(&vp, &v, &cfg).unwrap().loss;
        assert_eq!(one.loss, expected);
        let two = trimodal_loss(&sp, &t, &vp, &[v.clone(), v.clone()], &cfg).unwrap();
        assert!((two.loss - one.loss).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients() {
        let mut rng = seeded(6, 0);
        let (n, d) = (4, 5);
        let a = unit_rows(&mut rng, n, d);
        let b = unit_rows(&mut rng, n, d);
        let cfg = LossConfig::new(0.5).unwrap();
        let out = contrastive_loss(&a, &b, &cfg).unwrap();
        let ea = finite_diff_check(
            |x| Ok(contrastive_loss(&Matrix::new(n, d, x.to_vec())?, &b, &cfg)?.loss),
            a.as_slice(),
            out.grad_a.as_slice(),
            FD_EPS,
        )
        .unwrap();
        let eb = finite_diff_check(
            |x| Ok(contrastive_loss(&a, &Matrix::new(n, d, x.to_vec())?, &cfg)?.loss),
            b.as_slice(),
            out.grad_b.as_slice(),
            FD_EPS,
        )
        .unwrap();
        assert!(ea < 1e-6 && eb < 1e-6, "{ea} {eb}");
    }

    #[test]
    fn accuracy_cases() {
        let e = Matrix::identity(4);
        assert_eq!(contrastive_accuracy(&e, &e).unwrap(), 1.0);
        let shifted = e.select_rows(&[1, 2, 3, 0]);
        assert_eq!(contrastive_accuracy(&e, &shifted).unwrap(), 0.0);
        // duplicate candidate rows tie with the partner and count as misses
        let dup = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(contrastive_accuracy(&dup, &dup).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_directions() {
        // row 0 of a prefers b0, row 1 of a prefers b0 too
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.8, 0.6]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(contrastive_accuracy_dir(&a, &b, AccuracyDirection::AOverB).unwrap(), 0.5);
        assert_eq!(contrastive_accuracy_dir(&a, &b, AccuracyDirection::BOverA).unwrap(), 1.0);
        assert_eq!(contrastive_accuracy_dir(&a, &b, AccuracyDirection::Mean).unwrap(), 0.75);
    }

    #[test]
    fn batch_features_validate_norm() {
        assert!(BatchFeatures::new(Matrix::identity(3), Modality::Text).is_ok());
        assert!(BatchFeatures::new(Matrix::identity(3).scale(2.0), Modality::Text).is_err());
    }
}
