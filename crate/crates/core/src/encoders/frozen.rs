//! Frozen stand-ins for the pre-trained image and text encoders.
//!
//! A sample is described by a latent vector of dimension `z`. The text path
//! sees the semantic block of the latent, the image path the visual block;
//! the two blocks overlap. Each path projects its block into the shared
//! `d`-dimensional space through a fixed matrix with orthonormal rows.
//! Rendered-image features may additionally pass through a fixed invertible
//! affine map (the domain shift) before renormalization.

use std::ops::Range;

use crate::error::{Result, TammError};
use crate::numkit::{l2_normalize, Matrix};
use crate::rng::{self, hash_f64s, normal_vec, seeded, STREAM_PROJECTION, STREAM_SHIFT, STREAM_VIEW};

/// Shifts with a larger condition number are rejected at construction.
pub const MAX_SHIFT_CONDITION: f64 = 1e3;

/// Largest log-scale of the shift's anisotropic stretch at full strength.
const SHIFT_LOG_SCALE: f64 = 1.2;

/// Norm of the shift's bias at full strength.
const SHIFT_BIAS_NORM: f64 = 1.0;

/// How far the image projection is tilted away from the text projection.
const IMAGE_PROJ_TILT: f64 = 0.15;

/// Which latent coordinates each frozen path reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentSplit {
    pub visual: Range<usize>,
    pub semantic: Range<usize>,
}

impl LatentSplit {
    /// `overlap` is the fraction of the `z` latent coordinates read by both
    /// paths; the remainder is divided evenly between visual-only and
    /// semantic-only coordinates.
    pub fn new(z: usize, overlap: f64) -> Result<Self> {
        if z < 2 {
            return Err(TammError::config(format!("latent dim must be ≥ 2, got {z}")));
        }
        if !(0.0..=1.0).contains(&overlap) {
            return Err(TammError::config(format!("overlap must lie in [0, 1], got {overlap}")));
        }
        let shared = ((z as f64 * overlap).round() as usize).clamp(1, z);
        let visual_only = (z - shared) / 2;
        Ok(LatentSplit {
            visual: 0..visual_only + shared,
            semantic: visual_only..z,
        })
    }

    pub fn shared(&self) -> Range<usize> {
        self.semantic.start..self.visual.end
    }
}

/// Fixed affine map `x ↦ ((x·U)·B(s)·Uᵀ) ⊙ exp(s·g) + s·b`, where `B(s)`
/// rotates coordinate pairs by `s·θₖ`. Invertible for every strength.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    strength: f64,
    basis: Matrix,
    angles: Vec<f64>,
    log_scales: Vec<f64>,
    bias: Vec<f64>,
}

impl DomainShift {
    pub fn generate(d: usize, seed: u64, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(TammError::config(format!(
                "shift strength must lie in [0, 1], got {strength}"
            )));
        }
        let mut rng = seeded(seed, STREAM_SHIFT);
        let basis = orthonormal_rows(&mut rng, d, d)?;
        let angles = (0..d / 2)
            .map(|_| rand::Rng::random_range(&mut rng, -std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        let log_scales = (0..d)
            .map(|_| rand::Rng::random_range(&mut rng, -SHIFT_LOG_SCALE..=SHIFT_LOG_SCALE))
            .collect();
        let dir = l2_normalize(&normal_vec(&mut rng, d))?.0;
        let bias = dir.iter().map(|x| x * SHIFT_BIAS_NORM).collect();
        let shift = DomainShift {
            strength,
            basis,
            angles,
            log_scales,
            bias,
        };
        let cond = shift.condition_number();
        if !(cond <= MAX_SHIFT_CONDITION) {
            return Err(TammError::Numeric(format!(
                "domain shift condition number {cond} exceeds {MAX_SHIFT_CONDITION}"
            )));
        }
        Ok(shift)
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn with_strength(&self, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(TammError::config(format!(
                "shift strength must lie in [0, 1], got {strength}"
            )));
        }
        Ok(DomainShift {
            strength,
            ..self.clone()
        })
    }

    /// Ratio of the largest to the smallest singular value.
    pub fn condition_number(&self) -> f64 {
        let s = self.strength;
        let max = self.log_scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.log_scales.iter().copied().fold(f64::INFINITY, f64::min);
        (s * (max - min)).exp()
    }

    fn rotate(&self, x: &[f64], sign: f64) -> Vec<f64> {
        let d = x.len();
        // into the basis
        let mut c = vec![0.0; d];
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = (0..d).map(|i| x[i] * self.basis.get(i, k)).sum();
        }
        for (k, theta) in self.angles.iter().enumerate() {
            let (sin, cos) = (sign * self.strength * theta).sin_cos();
            let (a, b) = (c[2 * k], c[2 * k + 1]);
            c[2 * k] = a * cos - b * sin;
            c[2 * k + 1] = a * sin + b * cos;
        }
        (0..d)
            .map(|i| (0..d).map(|k| c[k] * self.basis.get(i, k)).sum())
            .collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.strength == 0.0 {
            return x.to_vec();
        }
        let r = self.rotate(x, 1.0);
        r.iter()
            .zip(&self.log_scales)
            .zip(&self.bias)
            .map(|((v, g), b)| v * (self.strength * g).exp() + self.strength * b)
            .collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        if self.strength == 0.0 {
            return y.to_vec();
        }
        let unscaled: Vec<f64> = y
            .iter()
            .zip(&self.log_scales)
            .zip(&self.bias)
            .map(|((v, g), b)| (v - self.strength * b) * (-self.strength * g).exp())
            .collect();
        self.rotate(&unscaled, -1.0)
    }
}

/// Fixed state of the frozen encoders. Rebuilt bit-exactly from
/// `(seed, z, d, views, overlap, private_scale, view_noise, shift strength)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoderSpec {
    pub seed: u64,
    pub z: usize,
    pub d: usize,
    pub views: usize,
    pub overlap: f64,
    /// Weight of the coordinates read by only one path.
    pub private_scale: f64,
    pub view_noise: f64,
    pub split: LatentSplit,
    /// `z × d`, orthonormal rows.
    pub text_proj: Matrix,
    /// `z × d`, orthonormal rows, tilted away from `text_proj`.
    pub image_proj: Matrix,
    pub shift: DomainShift,
}

impl FrozenEncoderSpec {
    pub fn new(
        seed: u64,
        z: usize,
        d: usize,
        views: usize,
        overlap: f64,
        private_scale: f64,
        view_noise: f64,
        shift_strength: f64,
    ) -> Result<Self> {
        if z > d {
            return Err(TammError::config(format!("latent dim {z} exceeds feature dim {d}")));
        }
        if views == 0 {
            return Err(TammError::config("at least one image view is required"));
        }
        if !(private_scale >= 0.0) || !private_scale.is_finite() {
            return Err(TammError::config(format!(
                "private scale must be finite and ≥ 0, got {private_scale}"
            )));
        }
        if !(view_noise >= 0.0) {
            return Err(TammError::config(format!("view noise must be ≥ 0, got {view_noise}")));
        }
        let split = LatentSplit::new(z, overlap)?;
        let mut rng = seeded(seed, STREAM_PROJECTION);
        let text_proj = orthonormal_rows(&mut rng, z, d)?;
        let tilted: Vec<f64> = text_proj
            .as_slice()
            .iter()
            .map(|v| v + IMAGE_PROJ_TILT * rng::normal(&mut rng) / (d as f64).sqrt())
            .collect();
        let image_proj = gram_schmidt(Matrix::new(z, d, tilted)?)?;
        let shift = DomainShift::generate(d, seed, shift_strength)?;
        Ok(FrozenEncoderSpec {
            seed,
            z,
            d,
            views,
            overlap,
            private_scale,
            view_noise,
            split,
            text_proj,
            image_proj,
            shift,
        })
    }

    pub fn with_shift_strength(&self, strength: f64) -> Result<Self> {
        Ok(FrozenEncoderSpec {
            shift: self.shift.with_strength(strength)?,
            ..self.clone()
        })
    }

    fn check_latent(&self, latent: &[f64]) -> Result<()> {
        if latent.len() != self.z {
            return Err(TammError::shape(format!(
                "latent has {} entries, expected {}",
                latent.len(),
                self.z
            )));
        }
        Ok(())
    }
}

fn project(latent: &[f64], range: &Range<usize>, spec: &FrozenEncoderSpec, proj: &Matrix) -> Vec<f64> {
    let shared = spec.split.shared();
    let mut out = vec![0.0; proj.cols()];
    for k in range.clone() {
        let lk = if shared.contains(&k) {
            latent[k]
        } else {
            latent[k] * spec.private_scale
        };
        for (o, p) in out.iter_mut().zip(proj.row(k)) {
            *o += lk * p;
        }
    }
    out
}

/// Text-path embedding of a latent (semantic block only).
pub fn frozen_text_embed(latent: &[f64], spec: &FrozenEncoderSpec) -> Result<Vec<f64>> {
    spec.check_latent(latent)?;
    Ok(l2_normalize(&project(latent, &spec.split.semantic, spec, &spec.text_proj))?.0)
}

/// Image-path embedding of one rendered view of a latent, optionally passed
/// through the domain shift.
pub fn frozen_image_embed(
    latent: &[f64],
    view_index: usize,
    spec: &FrozenEncoderSpec,
    shifted: bool,
) -> Result<Vec<f64>> {
    spec.check_latent(latent)?;
    if view_index >= spec.views {
        return Err(TammError::config(format!(
            "view index {view_index} out of range for {} views",
            spec.views
        )));
    }
    let clean = project(latent, &spec.split.visual, spec, &spec.image_proj);
    let scale = crate::numkit::norm(&clean) * spec.view_noise / (spec.d as f64).sqrt();
    let mut rng = seeded(hash_f64s(latent, spec.seed), STREAM_VIEW + view_index as u64);
    let noisy: Vec<f64> = clean
        .iter()
        .map(|c| c + scale * rng::normal(&mut rng))
        .collect();
    let unit = l2_normalize(&noisy)?.0;
    if shifted && spec.shift.strength() != 0.0 {
        Ok(l2_normalize(&spec.shift.apply(&unit))?.0)
    } else {
        Ok(unit)
    }
}

/// `rows × cols` matrix with orthonormal rows drawn from a Gaussian.
pub fn orthonormal_rows(rng: &mut rng::Rng, rows: usize, cols: usize) -> Result<Matrix> {
    if rows > cols {
        return Err(TammError::shape(format!(
            "cannot build {rows} orthonormal rows in dimension {cols}"
        )));
    }
    gram_schmidt(Matrix::new(rows, cols, normal_vec(rng, rows * cols))?)
}

fn gram_schmidt(mut m: Matrix) -> Result<Matrix> {
    for r in 0..m.rows() {
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for p in 0..r {
                let proj = crate::numkit::dot(m.row(r), m.row(p));
                let prev = m.row(p).to_vec();
                for (x, q) in m.row_mut(r).iter_mut().zip(&prev) {
                    *x -= proj * q;
                }
            }
        }
        let (unit, _) = l2_normalize(m.row(r))?;
        m.row_mut(r).copy_from_slice(&unit);
    }
    Ok(m)
}
