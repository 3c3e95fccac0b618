//! Trainable permutation-invariant point-cloud encoder.
//!
//! Per-point MLP `3 → h → h` (ReLU), mean and max pooling over points,
//! concatenated and projected `2h → d`, then L2-normalized.
//!
//! The cloud is first put into a canonical order (lexicographic on
//! coordinates) and exact duplicate points are merged with a multiplicity.
//! Every reduction therefore runs in the same order for any permutation of
//! the input, and duplicating every point scales the mean-pool numerator and
//! denominator by the same power of two.

use std::cmp::Ordering;

use crate::error::{Result, TammError};
use crate::numkit::{gemm_acc, gemm_tn_acc, l2_normalize, l2_normalize_backward, Matrix};
use crate::rng::{seeded, STREAM_INIT};

pub const MIN_POINTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() < MIN_POINTS {
            return Err(TammError::config(format!(
                "point cloud needs at least {MIN_POINTS} points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(TammError::Numeric("non-finite point coordinate".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Unique points in canonical order with their multiplicities.
    fn canonical(&self) -> (Vec<[f64; 3]>, Vec<f64>) {
        let mut sorted = self.points.clone();
        sorted.sort_by(cmp_point);
        let mut unique: Vec<[f64; 3]> = Vec::with_capacity(sorted.len());
        let mut counts: Vec<f64> = Vec::with_capacity(sorted.len());
        for p in sorted {
            match unique.last() {
                Some(last) if cmp_point(last, &p) == Ordering::Equal => {
                    *counts.last_mut().unwrap() += 1.0;
                }
                _ => {
                    unique.push(p);
                    counts.push(1.0);
                }
            }
        }
        (unique, counts)
    }
}

fn cmp_point(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoderParams {
    /// `3 × h`
    pub w1: Matrix,
    /// `1 × h`
    pub b1: Matrix,
    /// `h × h`
    pub w2: Matrix,
    /// `1 × h`
    pub b2: Matrix,
    /// `2h × d`
    pub w3: Matrix,
    /// `1 × d`
    pub b3: Matrix,
}

/// Gradients with the same layout as [`PointEncoderParams`].
pub type PointEncoderGrads = PointEncoderParams;

impl PointEncoderParams {
    pub fn init(h: usize, d: usize, seed: u64) -> Result<Self> {
        if h == 0 || d == 0 {
            return Err(TammError::config(format!(
                "point encoder dims must be ≥ 1, got h={h} d={d}"
            )));
        }
        let mut rng = seeded(seed, STREAM_INIT);
        Ok(PointEncoderParams {
            w1: Matrix::uniform(3, h, 2f64.sqrt(), &mut rng),
            b1: Matrix::uniform(1, h, 1.0, &mut rng),
            w2: Matrix::uniform(h, h, (6.0 / h as f64).sqrt(), &mut rng),
            b2: Matrix::zeros(1, h),
            w3: Matrix::uniform(2 * h, d, (6.0 / (2 * h) as f64).sqrt(), &mut rng),
            b3: Matrix::zeros(1, d),
        })
    }

    pub fn zeros_like(&self) -> Self {
        PointEncoderParams {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(1, self.b2.cols()),
            w3: Matrix::zeros(self.w3.rows(), self.w3.cols()),
            b3: Matrix::zeros(1, self.b3.cols()),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w3.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim();
        let d = self.output_dim();
        let ok = self.w1.shape() == (3, h)
            && self.b1.shape() == (1, h)
            && self.w2.shape() == (h, h)
            && self.b2.shape() == (1, h)
            && self.w3.shape() == (2 * h, d)
            && self.b3.shape() == (1, d);
        if ok {
            Ok(())
        } else {
            Err(TammError::shape("inconsistent point encoder parameter shapes"))
        }
    }
}

/// Cached forward pass for one cloud.
#[derive(Debug, Clone)]
pub struct PointTrace {
    coords: Vec<f64>,
    counts: Vec<f64>,
    total: f64,
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    unit: Vec<f64>,
    norm: f64,
}

impl PointTrace {
    pub fn feature(&self) -> &[f64] {
        &self.unit
    }

    /// Accumulates parameter gradients for upstream gradient `grad` on the
    /// unit feature into `acc`.
    pub fn backward_into(
        &self,
        params: &PointEncoderParams,
        w2_t: &Matrix,
        grad: &[f64],
        acc: &mut PointEncoderGrads,
    ) {
        let h = params.hidden_dim();
        let d = params.output_dim();
        let n = self.counts.len();
        let g_out = l2_normalize_backward(&self.unit, self.norm, grad);

        // head
        for (p, &pv) in self.pooled.iter().enumerate() {
            if pv == 0.0 {
                continue;
            }
            let row = acc.w3.row_mut(p);
            for (a, g) in row.iter_mut().zip(&g_out) {
                *a += pv * g;
            }
        }
        for (a, g) in acc.b3.as_mut_slice().iter_mut().zip(&g_out) {
            *a += g;
        }
        let mut g_pooled = vec![0.0; 2 * h];
        for (p, gp) in g_pooled.iter_mut().enumerate() {
            let row = &params.w3.as_slice()[p * d..(p + 1) * d];
            *gp = row.iter().zip(&g_out).map(|(w, g)| w * g).sum();
        }
        let (g_mean, g_max) = g_pooled.split_at(h);

        // pooling → second layer pre-activation
        let mut g_pre2 = vec![0.0; n * h];
        for i in 0..n {
            let weight = self.counts[i] / self.total;
            let row = &mut g_pre2[i * h..(i + 1) * h];
            let act = &self.hidden2[i * h..(i + 1) * h];
            for j in 0..h {
                if act[j] > 0.0 {
                    row[j] = weight * g_mean[j];
                }
            }
        }
        for j in 0..h {
            let i = self.argmax[j];
            if self.hidden2[i * h + j] > 0.0 {
                g_pre2[i * h + j] += g_max[j];
            }
        }

        gemm_tn_acc(&self.hidden1, &g_pre2, acc.w2.as_mut_slice(), n, h, h);
        column_sums_into(&g_pre2, n, h, acc.b2.as_mut_slice());

        let mut g_hidden1 = vec![0.0; n * h];
        gemm_acc(&g_pre2, w2_t.as_slice(), &mut g_hidden1, n, h, h);
        for (g, &a) in g_hidden1.iter_mut().zip(&self.hidden1) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        gemm_tn_acc(&self.coords, &g_hidden1, acc.w1.as_mut_slice(), n, 3, h);
        column_sums_into(&g_hidden1, n, h, acc.b1.as_mut_slice());
    }
}

fn column_sums_into(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for i in 0..rows {
        for (o, v) in out.iter_mut().zip(&x[i * cols..(i + 1) * cols]) {
            *o += v;
        }
    }
}

fn add_bias_relu(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            let s = *v + b;
            *v = if s > 0.0 { s } else { 0.0 };
        }
    }
}

/// Encodes one cloud, keeping what the backward pass needs.
pub fn point_encode_traced(cloud: &PointCloud, params: &PointEncoderParams) -> Result<PointTrace> {
    let h = params.hidden_dim();
    let d = params.output_dim();
    let (unique, counts) = cloud.canonical();
    let n = unique.len();
    let total: f64 = counts.iter().sum();
    let coords: Vec<f64> = unique.iter().flatten().copied().collect();

    let mut hidden1 = vec![0.0; n * h];
    gemm_acc(&coords, params.w1.as_slice(), &mut hidden1, n, 3, h);
    add_bias_relu(&mut hidden1, params.b1.as_slice());

    let mut hidden2 = vec![0.0; n * h];
    gemm_acc(&hidden1, params.w2.as_slice(), &mut hidden2, n, h, h);
    add_bias_relu(&mut hidden2, params.b2.as_slice());

    let mut pooled = vec![0.0; 2 * h];
    let mut argmax = vec![0usize; h];
    for i in 0..n {
        let c = counts[i];
        let row = &hidden2[i * h..(i + 1) * h];
        for j in 0..h {
            pooled[j] += c * row[j];
            if i == 0 || row[j] > pooled[h + j] {
                pooled[h + j] = row[j];
                argmax[j] = i;
            }
        }
    }
    for v in &mut pooled[..h] {
        *v /= total;
    }

    let mut out = params.b3.as_slice().to_vec();
    gemm_acc(&pooled, params.w3.as_slice(), &mut out, 1, 2 * h, d);
    let (unit, norm) = l2_normalize(&out)?;
    Ok(PointTrace {
        coords,
        counts,
        total,
        hidden1,
        hidden2,
        argmax,
        pooled,
        unit,
        norm,
    })
}

/// Unit-norm feature of one cloud.
pub fn point_encode(cloud: &PointCloud, params: &PointEncoderParams) -> Result<Vec<f64>> {
    Ok(point_encode_traced(cloud, params)?.unit)
}

/// Features of several clouds as rows.
pub fn point_encode_batch(clouds: &[&PointCloud], params: &PointEncoderParams) -> Result<Matrix> {
    let d = params.output_dim();
    let mut data = Vec::with_capacity(clouds.len() * d);
    for c in clouds {
        data.extend(point_encode(c, params)?);
    }
    Matrix::new(clouds.len(), d, data)
}
