//! All trainable state: the image adapter, the point encoder and the two
//! alignment adapters.

use crate::adapters::{init_adapter, AdapterKind, AdapterParams};
use crate::encoders::{point_encode_batch, PointCloud, PointEncoderParams};
use crate::error::{Result, TammError};
use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Cia,
    Point,
    Iaa,
    Taa,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Cia, Module::Point, Module::Iaa, Module::Taa];

    pub fn name(self) -> &'static str {
        match self {
            Module::Cia => "cia",
            Module::Point => "point",
            Module::Iaa => "iaa",
            Module::Taa => "taa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub adapter_hidden: usize,
    pub point_hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TammModel {
    pub cia: AdapterParams,
    pub point: PointEncoderParams,
    pub iaa: AdapterParams,
    pub taa: AdapterParams,
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl TammModel {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let ModelDims {
            feature_dim: d,
            adapter_hidden: h,
            point_hidden: ph,
        } = dims;
        Ok(TammModel {
            cia: init_adapter(d, h, sub_seed(seed, 1), AdapterKind::Cia)?,
            point: PointEncoderParams::init(ph, d, sub_seed(seed, 2))?,
            iaa: init_adapter(d, h, sub_seed(seed, 3), AdapterKind::Dual)?,
            taa: init_adapter(d, h, sub_seed(seed, 4), AdapterKind::Dual)?,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.cia.feature_dim(),
            adapter_hidden: self.cia.hidden_dim(),
            point_hidden: self.point.hidden_dim(),
        }
    }

    /// Same structure, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let za = |a: &AdapterParams| AdapterParams {
            w1: z(&a.w1),
            w2: z(&a.w2),
            activation: a.activation,
        };
        TammModel {
            cia: za(&self.cia),
            point: self.point.zeros_like(),
            iaa: za(&self.iaa),
            taa: za(&self.taa),
        }
    }

    /// Named tensors of `modules`, in a fixed order.
    pub fn tensors(&self, modules: &[Module]) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for &m in modules {
            let prefix = m.name();
            match m {
                Module::Cia | Module::Iaa | Module::Taa => {
                    let a = self.adapter(m);
                    out.push((format!("{prefix}.w1"), &a.w1));
                    out.push((format!("{prefix}.w2"), &a.w2));
                }
                Module::Point => {
                    for (name, t) in self.point.tensors() {
                        out.push((format!("{prefix}.{name}"), t));
                    }
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self, modules: &[Module]) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        let TammModel { cia, point, iaa, taa } = self;
        let (mut cia, mut point, mut iaa, mut taa) = (Some(cia), Some(point), Some(iaa), Some(taa));
        for &m in modules {
            let prefix = m.name();
            let adapter = match m {
                Module::Cia => cia.take(),
                Module::Iaa => iaa.take(),
                Module::Taa => taa.take(),
                Module::Point => {
                    if let Some(p) = point.take() {
                        for (name, t) in p.tensors_mut() {
                            out.push((format!("{prefix}.{name}"), t));
                        }
                    }
                    None
                }
            };
            if let Some(a) = adapter {
                out.push((format!("{prefix}.w1"), &mut a.w1));
                out.push((format!("{prefix}.w2"), &mut a.w2));
            }
        }
        out
    }

    pub fn adapter(&self, m: Module) -> &AdapterParams {
        match m {
            Module::Cia => &self.cia,
            Module::Iaa => &self.iaa,
            Module::Taa => &self.taa,
            Module::Point => panic!("the point encoder is not an adapter"),
        }
    }

    /// Vision-focused and semantics-focused point features, one row per cloud.
    pub fn encode_dual(&self, clouds: &[&PointCloud], dual_residual: Option<f64>) -> Result<DualFeatures> {
        let f = point_encode_batch(clouds, &self.point)?;
        Ok(DualFeatures {
            vision: self.iaa.apply(&f, dual_residual)?,
            semantic: self.taa.apply(&f, dual_residual)?,
        })
    }

    /// Fails unless the model produces features of dimension `d`.
    pub fn check_feature_dim(&self, d: usize) -> Result<()> {
        let ours = self.cia.feature_dim();
        if ours != d {
            return Err(TammError::shape(format!(
                "model feature dim {ours} does not match data feature dim {d}"
            )));
        }
        Ok(())
    }
}

/// The two adapted point features of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFeatures {
    pub vision: Matrix,
    pub semantic: Matrix,
}

impl DualFeatures {
    pub fn len(&self) -> usize {
        self.vision.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[vision | semantic]` per row.
    pub fn concat(&self) -> Matrix {
        let (n, d) = self.vision.shape();
        let mut out = Matrix::zeros(n, 2 * d);
        for i in 0..n {
            let row = out.row_mut(i);
            row[..d].copy_from_slice(self.vision.row(i));
            row[d..].copy_from_slice(self.semantic.row(i));
        }
        out
    }

    pub fn select(&self, idx: &[usize]) -> DualFeatures {
        DualFeatures {
            vision: self.vision.select_rows(idx),
            semantic: self.semantic.select_rows(idx),
        }
    }
}
