//! Synthetic triplet datasets and their binary file format.
//!
//! Every class owns a latent vector; every sample perturbs its class latent.
//! The visual block of a sample latent drives its point-cloud geometry and
//! its image features, the semantic block drives its text feature, and the
//! two blocks share a configurable fraction of coordinates. Image features
//! pass through the frozen domain shift, whose strength is either fixed or
//! tuned by bisection so held-out image-text contrastive accuracy lands in a
//! target band.

mod format;

use log::debug;

pub(crate) use format::Reader;
pub use format::{
    decode_triplets, encode_triplets, read_triplets, write_triplets, FORMAT_VERSION, MAGIC,
};

use crate::encoders::{frozen_image_embed, frozen_text_embed, FrozenEncoderSpec, PointCloud};
use crate::error::{Result, TammError};
use crate::losses::chunked_contrastive_accuracy;
use crate::numkit::Matrix;
use crate::rng::{
    normal, normal_vec, permutation, seeded, STREAM_CLASS_LATENT, STREAM_GEOMETRY,
    STREAM_INSTANCE, STREAM_SPLIT,
};

/// Pairs per chunk when measuring image-text contrastive accuracy.
pub const ACCURACY_CHUNK: usize = 64;

/// Number of blobs every point cloud is made of.
const ANCHORS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Pretrain,
    EvalSeen,
    EvalHeldout,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Pretrain => 0,
            Split::EvalSeen => 1,
            Split::EvalHeldout => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Pretrain),
            1 => Some(Split::EvalSeen),
            2 => Some(Split::EvalHeldout),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::EvalSeen => "eval-seen",
            Split::EvalHeldout => "eval-heldout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShiftSetting {
    /// Bisect the strength until held-out accuracy falls in the band.
    Auto { low: f64, high: f64 },
    Fixed(f64),
}

impl ShiftSetting {
    pub const DEFAULT_BAND: (f64, f64) = (0.35, 0.55);

    pub fn auto() -> Self {
        ShiftSetting::Auto {
            low: Self::DEFAULT_BAND.0,
            high: Self::DEFAULT_BAND.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    /// The last `heldout_classes` classes never appear in pre-training.
    pub heldout_classes: usize,
    pub samples_per_class: usize,
    /// Samples of each seen class reserved for evaluation.
    pub eval_seen_per_class: usize,
    pub views: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub points: usize,
    pub shift: ShiftSetting,
    /// Fraction of latent coordinates read by both frozen paths.
    pub overlap: f64,
    /// Weight of latent coordinates seen by only one of the frozen paths.
    pub private_scale: f64,
    /// Std-dev of the per-sample perturbation of the class latent.
    pub instance_noise: f64,
    pub view_noise: f64,
    pub point_jitter: f64,
    /// Scale of the latent-driven displacement of each blob.
    pub geometry_scale: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 30,
            heldout_classes: 10,
            samples_per_class: 100,
            eval_seen_per_class: 20,
            views: 4,
            latent_dim: 16,
            feature_dim: 64,
            points: 256,
            shift: ShiftSetting::auto(),
            overlap: 0.5,
            private_scale: 0.3,
            instance_noise: 0.5,
            view_noise: 0.3,
            point_jitter: 0.04,
            geometry_scale: 0.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TammError::config(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.heldout_classes >= self.classes {
            return fail(format!(
                "held-out classes ({}) must leave at least one pre-training class out of {}",
                self.heldout_classes, self.classes
            ));
        }
        if self.views == 0 || self.latent_dim < 2 || self.feature_dim == 0 {
            return fail("views, latent and feature dims must be ≥ 1 (latent ≥ 2)".into());
        }
        if self.eval_seen_per_class >= self.samples_per_class {
            return fail(format!(
                "eval-seen samples per class ({}) must be below samples per class ({})",
                self.eval_seen_per_class, self.samples_per_class
            ));
        }
        if self.points < crate::encoders::MIN_POINTS {
            return fail(format!(
                "need at least {} points per cloud, got {}",
                crate::encoders::MIN_POINTS,
                self.points
            ));
        }
        for (name, v) in [
            ("private_scale", self.private_scale),
            ("instance_noise", self.instance_noise),
            ("view_noise", self.view_noise),
            ("point_jitter", self.point_jitter),
            ("geometry_scale", self.geometry_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        match self.shift {
            ShiftSetting::Fixed(s) if !(0.0..=1.0).contains(&s) => {
                fail(format!("shift strength must lie in [0, 1], got {s}"))
            }
            ShiftSetting::Auto { low, high } if !(0.0 <= low && low < high && high <= 1.0) => {
                fail(format!("invalid accuracy band [{low}, {high}]"))
            }
            _ => Ok(()),
        }
    }

    pub fn seen_classes(&self) -> usize {
        self.classes - self.heldout_classes
    }
}

/// Generation parameters recorded in a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    /// False for files carrying externally computed features.
    pub synthetic: bool,
    pub seed: u64,
    pub classes: usize,
    pub heldout_classes: usize,
    pub samples_per_class: usize,
    pub eval_seen_per_class: usize,
    pub views: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub points: usize,
    pub shift_strength: f64,
    pub overlap: f64,
    pub private_scale: f64,
    pub instance_noise: f64,
    pub view_noise: f64,
    pub point_jitter: f64,
    pub geometry_scale: f64,
}

impl DatasetHeader {
    /// Rebuilds the frozen encoders this dataset was generated with.
    pub fn encoder_spec(&self) -> Result<FrozenEncoderSpec> {
        if !self.synthetic {
            return Err(TammError::config(
                "dataset carries external features; no synthetic encoder to rebuild",
            ));
        }
        FrozenEncoderSpec::new(
            self.seed,
            self.latent_dim,
            self.feature_dim,
            self.views,
            self.overlap,
            self.private_scale,
            self.view_noise,
            self.shift_strength,
        )
    }
}

/// A full dataset: per-sample clouds, image views, texts and labels, plus the
/// class-level text embeddings used for zero-shot classification.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub header: DatasetHeader,
    pub clouds: Vec<PointCloud>,
    /// One `n × d` matrix per view.
    pub images: Vec<Matrix>,
    /// `n × d`
    pub texts: Matrix,
    pub labels: Vec<u32>,
    pub splits: Vec<Split>,
    /// `classes × d`, one text-path embedding per class.
    pub class_bank: Matrix,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn views(&self) -> usize {
        self.images.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.texts.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Sorted distinct labels among `idx`.
    pub fn classes_in(&self, idx: &[usize]) -> Vec<u32> {
        let mut c: Vec<u32> = idx.iter().map(|&i| self.labels[i]).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Checks internal consistency; used after reading external files.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let d = self.feature_dim();
        if self.clouds.len() != n || self.splits.len() != n || self.texts.rows() != n {
            return Err(TammError::shape("triplet arrays disagree on sample count"));
        }
        if self.images.is_empty() || self.images.iter().any(|m| m.shape() != (n, d)) {
            return Err(TammError::shape("image views must each be n × d"));
        }
        if self.class_bank.cols() != d {
            return Err(TammError::shape("class bank dim differs from feature dim"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.class_bank.rows()) {
            return Err(TammError::shape(format!(
                "label {bad} has no class-bank entry ({} classes)",
                self.class_bank.rows()
            )));
        }
        let pre = self.classes_in(&self.indices(Split::Pretrain));
        let held = self.classes_in(&self.indices(Split::EvalHeldout));
        if held.iter().any(|c| pre.binary_search(c).is_ok()) {
            return Err(TammError::config("held-out classes overlap pre-training classes"));
        }
        Ok(())
    }
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn quantize_matrix(m: Matrix) -> Matrix {
    m.map(quantize)
}

/// Sample latents plus their labels and split tags, in storage order.
struct Layout {
    latents: Vec<Vec<f64>>,
    labels: Vec<u32>,
    splits: Vec<Split>,
}

fn layout(spec: &DatasetSpec, class_latents: &[Vec<f64>]) -> Layout {
    let seen = spec.seen_classes();
    let mut rng = seeded(spec.seed, STREAM_INSTANCE);
    let mut buckets: [Vec<(Vec<f64>, u32)>; 3] = Default::default();
    for (k, class) in class_latents.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let latent: Vec<f64> = class
                .iter()
                .map(|c| c + spec.instance_noise * normal(&mut rng))
                .collect();
            let bucket = if k >= seen {
                2
            } else if s < spec.samples_per_class - spec.eval_seen_per_class {
                0
            } else {
                1
            };
            buckets[bucket].push((latent, k as u32));
        }
    }
    let mut order_rng = seeded(spec.seed, STREAM_SPLIT);
    let mut out = Layout {
        latents: Vec::new(),
        labels: Vec::new(),
        splits: Vec::new(),
    };
    for (bucket, split) in buckets
        .into_iter()
        .zip([Split::Pretrain, Split::EvalSeen, Split::EvalHeldout])
    {
        let perm = permutation(&mut order_rng, bucket.len());
        for i in perm {
            out.latents.push(bucket[i].0.clone());
            out.labels.push(bucket[i].1);
            out.splits.push(split);
        }
    }
    out
}

/// Blob centres: fixed cube corners displaced linearly by the visual latent.
struct Geometry {
    base: Vec<[f64; 3]>,
    /// Per anchor, a `3 × |visual|` displacement map.
    maps: Vec<Matrix>,
}

impl Geometry {
    fn new(spec: &DatasetSpec, visual_dims: usize) -> Self {
        let mut rng = seeded(spec.seed, STREAM_GEOMETRY);
        let base = (0..ANCHORS)
            .map(|a| {
                let bit = |b: usize| if a >> b & 1 == 1 { 0.5 } else { -0.5 };
                [bit(0), bit(1), bit(2)]
            })
            .collect();
        let scale = spec.geometry_scale / (visual_dims as f64).sqrt();
        let maps = (0..ANCHORS)
            .map(|_| {
                let v = normal_vec(&mut rng, 3 * visual_dims);
                Matrix::new(3, visual_dims, v.iter().map(|x| x * scale).collect()).unwrap()
            })
            .collect();
        Geometry { base, maps }
    }

    fn cloud(&self, visual: &[f64], points: usize, jitter: f64, rng: &mut crate::rng::Rng) -> Result<PointCloud> {
        let centres: Vec<[f64; 3]> = self
            .base
            .iter()
            .zip(&self.maps)
            .map(|(b, m)| {
                let mut c = *b;
                for (axis, ca) in c.iter_mut().enumerate() {
                    *ca += crate::numkit::dot(m.row(axis), visual);
                }
                c
            })
            .collect();
        let pts = (0..points)
            .map(|j| {
                let c = centres[j % ANCHORS];
                [
                    quantize(c[0] + jitter * normal(rng)),
                    quantize(c[1] + jitter * normal(rng)),
                    quantize(c[2] + jitter * normal(rng)),
                ]
            })
            .collect();
        PointCloud::new(pts)
    }
}

/// Held-out image-text contrastive accuracy averaged over views.
pub fn heldout_alignment(images: &[Matrix], texts: &Matrix, heldout: &[usize]) -> Result<f64> {
    let t = texts.select_rows(heldout);
    let mut total = 0.0;
    for view in images {
        total += chunked_contrastive_accuracy(&view.select_rows(heldout), &t, ACCURACY_CHUNK)?;
    }
    Ok(total / images.len() as f64)
}

fn shifted_images(
    clean: &[Matrix],
    encoders: &FrozenEncoderSpec,
) -> Result<Vec<Matrix>> {
    if encoders.shift.strength() == 0.0 {
        return Ok(clean.to_vec());
    }
    clean
        .iter()
        .map(|view| {
            let mut out = Matrix::zeros(view.rows(), view.cols());
            for r in 0..view.rows() {
                let shifted = encoders.shift.apply(view.row(r));
                out.row_mut(r)
                    .copy_from_slice(&crate::numkit::l2_normalize(&shifted)?.0);
            }
            Ok(out)
        })
        .collect()
}

/// Bisects the shift strength until held-out accuracy lands in `[low, high]`.
fn tune_shift(
    clean: &[Matrix],
    texts: &Matrix,
    heldout: &[usize],
    encoders: &FrozenEncoderSpec,
    low: f64,
    high: f64,
) -> Result<f64> {
    let target = 0.5 * (low + high);
    let measure = |s: f64| -> Result<f64> {
        let spec = encoders.with_shift_strength(s)?;
        heldout_alignment(&shifted_images(clean, &spec)?, texts, heldout)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let at_max = measure(hi)?;
    if at_max > high {
        return Err(TammError::config(format!(
            "full-strength shift only lowers accuracy to {at_max:.3}; cannot reach [{low}, {high}]"
        )));
    }
    let mut best = (hi, at_max);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let acc = measure(mid)?;
        debug!("shift strength {mid:.5} → held-out accuracy {acc:.4}");
        if (acc - target).abs() < (best.1 - target).abs() {
            best = (mid, acc);
        }
        if (acc - target).abs() <= 0.25 * (high - low) {
            return Ok(mid);
        }
        if acc > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (low..=high).contains(&best.1) {
        Ok(best.0)
    } else {
        Err(TammError::config(format!(
            "shift tuning failed: closest accuracy {:.3} outside [{low}, {high}]",
            best.1
        )))
    }
}

/// Generates a dataset. Deterministic for a fixed spec.
pub fn generate(spec: &DatasetSpec) -> Result<TripletSet> {
    spec.validate()?;
    let mut encoders = FrozenEncoderSpec::new(
        spec.seed,
        spec.latent_dim,
        spec.feature_dim,
        spec.views,
        spec.overlap,
        spec.private_scale,
        spec.view_noise,
        0.0,
    )?;
    let mut class_rng = seeded(spec.seed, STREAM_CLASS_LATENT);
    let class_latents: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(&mut class_rng, spec.latent_dim))
        .collect();
    let lay = layout(spec, &class_latents);
    let n = lay.labels.len();
    let d = spec.feature_dim;

    let mut texts = Matrix::zeros(n, d);
    for (i, l) in lay.latents.iter().enumerate() {
        texts.row_mut(i).copy_from_slice(&frozen_text_embed(l, &encoders)?);
    }
    let texts = quantize_matrix(texts);

    let mut clean = vec![Matrix::zeros(n, d); spec.views];
    for (i, l) in lay.latents.iter().enumerate() {
        for (v, view) in clean.iter_mut().enumerate() {
            view.row_mut(i)
                .copy_from_slice(&frozen_image_embed(l, v, &encoders, false)?);
        }
    }

    let geometry = Geometry::new(spec, encoders.split.visual.len());
    let mut geo_rng = seeded(spec.seed, STREAM_GEOMETRY + 100);
    let clouds = lay
        .latents
        .iter()
        .map(|l| {
            geometry.cloud(
                &l[encoders.split.visual.clone()],
                spec.points,
                spec.point_jitter,
                &mut geo_rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let heldout: Vec<usize> = (0..n).filter(|&i| lay.splits[i] == Split::EvalHeldout).collect();
    let strength = match spec.shift {
        ShiftSetting::Fixed(s) => s,
        ShiftSetting::Auto { low, high } => {
            let eval_idx: Vec<usize> = if heldout.len() >= 2 {
                heldout.clone()
            } else {
                (0..n).collect()
            };
            tune_shift(&clean, &texts, &eval_idx, &encoders, low, high)?
        }
    };
    let strength = quantize(strength);
    encoders = encoders.with_shift_strength(strength)?;
    let images: Vec<Matrix> = shifted_images(&clean, &encoders)?
        .into_iter()
        .map(quantize_matrix)
        .collect();

    let mut bank = Matrix::zeros(spec.classes, d);
    for (k, l) in class_latents.iter().enumerate() {
        bank.row_mut(k).copy_from_slice(&frozen_text_embed(l, &encoders)?);
    }

    let header = DatasetHeader {
        synthetic: true,
        seed: spec.seed,
        classes: spec.classes,
        heldout_classes: spec.heldout_classes,
        samples_per_class: spec.samples_per_class,
        eval_seen_per_class: spec.eval_seen_per_class,
        views: spec.views,
        latent_dim: spec.latent_dim,
        feature_dim: spec.feature_dim,
        points: spec.points,
        shift_strength: strength,
        overlap: spec.overlap,
        private_scale: spec.private_scale,
        instance_noise: spec.instance_noise,
        view_noise: spec.view_noise,
        point_jitter: spec.point_jitter,
        geometry_scale: spec.geometry_scale,
    };
    Ok(TripletSet {
        header,
        clouds,
        images,
        texts,
        labels: lay.labels,
        splits: lay.splits,
        class_bank: quantize_matrix(bank),
    })
}
