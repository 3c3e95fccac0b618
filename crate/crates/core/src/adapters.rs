//! Two-layer bias-free adapters.
//!
//! The same map `σ(f·W1)·W2` backs all three adapters. The image adapter
//! blends it with its input, `α·A(f) + (1−α)·f`; the dual adapters use the
//! bare map unless `dual_residual_alpha` is configured. Every output is
//! L2-normalized.

use crate::error::{Result, TammError};
use crate::numkit::{
    matmul, matmul_nt, matmul_tn, normalize_rows, normalize_rows_backward, Activation, Matrix,
};
use crate::rng::{seeded, STREAM_INIT};

/// Blend weight shipped for the image adapter.
pub const DEFAULT_ALPHA: f64 = 0.2;

/// Half-width of the uniform init of the image adapter's output layer.
const CIA_W2_INIT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    /// Residual image adapter (ReLU).
    Cia,
    /// Image/text alignment adapters on the point feature (GELU).
    Dual,
}

impl AdapterKind {
    pub fn activation(self) -> Activation {
        match self {
            AdapterKind::Cia => Activation::Relu,
            AdapterKind::Dual => Activation::Gelu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `d × h`
    pub w1: Matrix,
    /// `h × d`
    pub w2: Matrix,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiaConfig {
    alpha: f64,
}

impl CiaConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(TammError::config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(CiaConfig { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for CiaConfig {
    fn default() -> Self {
        CiaConfig {
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Cached forward pass over a batch of row features.
#[derive(Debug, Clone)]
pub struct AdapterTrace {
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
    unit: Matrix,
    norms: Vec<f64>,
    residual: Option<f64>,
}

impl AdapterTrace {
    pub fn output(&self) -> &Matrix {
        &self.unit
    }

    pub fn into_output(self) -> Matrix {
        self.unit
    }

    /// Returns parameter gradients and the gradient w.r.t. the input rows.
    pub fn backward(&self, params: &AdapterParams, grad: &Matrix) -> Result<(AdapterGrads, Matrix)> {
        let g_blend = normalize_rows_backward(&self.unit, &self.norms, grad)?;
        let g_mapped = match self.residual {
            Some(alpha) => g_blend.scale(alpha),
            None => g_blend.clone(),
        };
        let w2 = matmul_tn(&self.hidden, &g_mapped)?;
        let g_hidden = matmul_nt(&g_mapped, &params.w2)?;
        let g_pre = params.activation.backward(&self.pre, &g_hidden)?;
        let w1 = matmul_tn(&self.input, &g_pre)?;
        let mut g_input = matmul_nt(&g_pre, &params.w1)?;
        if let Some(alpha) = self.residual {
            g_input.add_assign(&g_blend.scale(1.0 - alpha))?;
        }
        Ok((AdapterGrads { w1, w2 }, g_input))
    }
}

impl AdapterParams {
    pub fn new(w1: Matrix, w2: Matrix, activation: Activation) -> Result<Self> {
        if w1.cols() != w2.rows() || w1.rows() != w2.cols() {
            return Err(TammError::shape(format!(
                "adapter weights {}x{} and {}x{} do not form a d→h→d map",
                w1.rows(),
                w1.cols(),
                w2.rows(),
                w2.cols()
            )));
        }
        Ok(AdapterParams { w1, w2, activation })
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Adapts every row of `x`. `residual = Some(α)` blends with the input.
    pub fn forward_batch(&self, x: &Matrix, residual: Option<f64>) -> Result<AdapterTrace> {
        if x.cols() != self.feature_dim() {
            return Err(TammError::shape(format!(
                "adapter expects dim {}, got {}",
                self.feature_dim(),
                x.cols()
            )));
        }
        let pre = matmul(x, &self.w1)?;
        let hidden = self.activation.forward(&pre);
        let mapped = matmul(&hidden, &self.w2)?;
        let blended = match residual {
            Some(alpha) => {
                let mut b = mapped.scale(alpha);
                b.add_assign(&x.scale(1.0 - alpha))?;
                b
            }
            None => mapped,
        };
        let (unit, norms) = normalize_rows(&blended)?;
        Ok(AdapterTrace {
            input: x.clone(),
            pre,
            hidden,
            unit,
            norms,
            residual,
        })
    }

    /// Forward pass without caching.
    pub fn apply(&self, x: &Matrix, residual: Option<f64>) -> Result<Matrix> {
        Ok(self.forward_batch(x, residual)?.into_output())
    }
}

/// Image adapter on one unit feature: `normalize(α·A(f) + (1−α)·f)`.
pub fn cia_forward(f: &[f64], params: &AdapterParams, cfg: &CiaConfig) -> Result<Vec<f64>> {
    let out = params.apply(&Matrix::row_vector(f), Some(cfg.alpha))?;
    Ok(out.into_vec())
}

/// Dual adapter on one point feature: `normalize(σ(f·W1)·W2)`.
pub fn dual_forward(f: &[f64], params: &AdapterParams) -> Result<Vec<f64>> {
    let out = params.apply(&Matrix::row_vector(f), None)?;
    Ok(out.into_vec())
}

/// Fan-in scaled uniform init. The image adapter starts with a near-zero
/// output layer so the blend begins close to its input.
pub fn init_adapter(d: usize, h: usize, seed: u64, kind: AdapterKind) -> Result<AdapterParams> {
    if d == 0 || h == 0 {
        return Err(TammError::config(format!("adapter dims must be ≥ 1, got d={d} h={h}")));
    }
    let mut rng = seeded(seed, STREAM_INIT);
    let w1 = Matrix::uniform(d, h, (6.0 / d as f64).sqrt(), &mut rng);
    let w2_bound = match kind {
        AdapterKind::Cia => CIA_W2_INIT,
        AdapterKind::Dual => (6.0 / h as f64).sqrt(),
    };
    let w2 = Matrix::uniform(h, d, w2_bound, &mut rng);
    AdapterParams::new(w1, w2, kind.activation())
}
