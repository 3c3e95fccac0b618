//! Finite-difference audit of every differentiable operation.

use crate::adapters::{init_adapter, AdapterKind, AdapterParams};
use crate::encoders::{point_encode_traced, PointCloud, PointEncoderParams};
use crate::error::Result;
use crate::eval::probe_loss;
use crate::losses::{contrastive_loss, realign_loss, trimodal_loss, LossConfig};
use crate::numkit::{
    activation_traced, dot, finite_diff_check, l2_normalize_traced, logsumexp_traced, matmul_traced,
    normalize_rows, Activation, Matrix, FD_EPS,
};
use crate::rng::{normal_vec, seeded, Rng};
use crate::train::{joint_objective, trimodal_objective, ModelDims, Module, TammModel};

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub op: &'static str,
    pub params: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Names of the audited operations, in run order.
pub const GRADCHECK_OPS: [&str; 14] = [
    "matmul",
    "relu",
    "gelu",
    "l2_normalize",
    "logsumexp_row",
    "cia_adapter",
    "dual_adapter",
    "contrastive_loss",
    "realign_loss",
    "trimodal_loss",
    "point_encoder",
    "probe_layer",
    "stage2_batch",
    "joint_batch",
];

fn mat(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, normal_vec(rng, r * c)).unwrap()
}

fn unit_rows(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    normalize_rows(&mat(rng, r, c)).unwrap().0
}

fn weighted_sum(m: &Matrix, w: &Matrix) -> f64 {
    dot(m.as_slice(), w.as_slice())
}

fn split(p: &[f64], shapes: &[(usize, usize)]) -> Result<Vec<Matrix>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = Matrix::new(r, c, p[off..off + r * c].to_vec());
            off += r * c;
            m
        })
        .collect()
}

fn flat(ms: &[&Matrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.as_slice().to_vec()).collect()
}

struct Suite {
    corrupt: Option<String>,
    rows: Vec<GradcheckRow>,
}

impl Suite {
    fn check<F>(&mut self, op: &'static str, params: &[f64], mut analytic: Vec<f64>, f: F) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        if self.corrupt.as_deref() == Some(op) {
            for a in &mut analytic {
                *a = *a * 1.05 + 1e-3;
            }
        }
        let err = finite_diff_check(f, params, &analytic, FD_EPS)?;
        self.rows.push(GradcheckRow {
            op,
            params: params.len(),
            max_rel_err: err,
            passed: err < GRADCHECK_TOLERANCE,
        });
        Ok(())
    }
}

fn adapter_case(rng: &mut Rng, kind: AdapterKind) -> Result<(AdapterParams, Option<f64>)> {
    let mut p = init_adapter(8, 16, 31, kind)?;
    let residual = match kind {
        AdapterKind::Cia => {
            // move off the near-identity start so both branches matter
            p.w2 = mat(rng, 16, 8).scale(0.3);
            Some(0.2)
        }
        AdapterKind::Dual => None,
    };
    Ok((p, residual))
}

fn small_model() -> Result<TammModel> {
    let mut m = TammModel::init(
        ModelDims {
            feature_dim: 6,
            adapter_hidden: 4,
            point_hidden: 5,
        },
        17,
    )?;
    m.cia.w2 = m.cia.w2.scale(300.0);
    Ok(m)
}

fn model_params(m: &TammModel, modules: &[Module]) -> Vec<f64> {
    flat(&m.tensors(modules).iter().map(|(_, t)| *t).collect::<Vec<_>>())
}

fn with_params(m: &TammModel, modules: &[Module], p: &[f64]) -> TammModel {
    let mut out = m.clone();
    let mut off = 0;
    for (_, t) in out.tensors_mut(modules) {
        let n = t.as_slice().len();
        t.as_mut_slice().copy_from_slice(&p[off..off + n]);
        off += n;
    }
    out
}

/// Runs every check. `corrupt` names an op whose analytic gradient is
/// deliberately perturbed, as a negative control.
pub fn run_gradcheck(corrupt: Option<&str>) -> Result<Vec<GradcheckRow>> {
    let mut s = Suite {
        corrupt: corrupt.map(str::to_string),
        rows: Vec::new(),
    };
    let mut rng = seeded(2024, 0);

    // matmul: L = Σ G ⊙ (A·B)
    let (a, b, g) = (mat(&mut rng, 3, 4), mat(&mut rng, 4, 2), mat(&mut rng, 3, 2));
    let (ga, gb) = matmul_traced(&a, &b)?.vjp(&g)?;
    s.check("matmul", &flat(&[&a, &b]), flat(&[&ga, &gb]), |p| {
        let m = split(p, &[(3, 4), (4, 2)])?;
        Ok(weighted_sum(&matmul_traced(&m[0], &m[1])?.value, &g))
    })?;

    for (op, act) in [("relu", Activation::Relu), ("gelu", Activation::Gelu)] {
        let (x, g) = (mat(&mut rng, 4, 5), mat(&mut rng, 4, 5));
        let gx = activation_traced(act, &x).vjp(&g)?;
        s.check(op, x.as_slice(), gx.into_vec(), |p| {
            let x = Matrix::new(4, 5, p.to_vec())?;
            Ok(weighted_sum(&activation_traced(act, &x).value, &g))
        })?;
    }

    let (v, g) = (normal_vec(&mut rng, 8), normal_vec(&mut rng, 8));
    let gv = l2_normalize_traced(&v)?.vjp(&g)?;
    s.check("l2_normalize", &v, gv, |p| Ok(dot(&l2_normalize_traced(p)?.value, &g)))?;

    let row = normal_vec(&mut rng, 7);
    let gr = logsumexp_traced(&row)?.vjp(&1.0)?;
    s.check("logsumexp_row", &row, gr, |p| Ok(logsumexp_traced(p)?.value))?;

    for (op, kind) in [("cia_adapter", AdapterKind::Cia), ("dual_adapter", AdapterKind::Dual)] {
        let (params, residual) = adapter_case(&mut rng, kind)?;
        let x = unit_rows(&mut rng, 3, 8);
        let g = mat(&mut rng, 3, 8);
        let trace = params.forward_batch(&x, residual)?;
        let (gp, gx) = trace.backward(&params, &g)?;
        let shapes = [(8, 16), (16, 8), (3, 8)];
        let act = params.activation;
        s.check(op, &flat(&[&params.w1, &params.w2, &x]), flat(&[&gp.w1, &gp.w2, &gx]), |p| {
            let m = split(p, &shapes)?;
            let ad = AdapterParams::new(m[0].clone(), m[1].clone(), act)?;
            Ok(weighted_sum(&ad.apply(&m[2], residual)?, &g))
        })?;
    }

    let cfg = LossConfig::new(0.5)?;
    let (fa, fb) = (unit_rows(&mut rng, 5, 6), unit_rows(&mut rng, 5, 6));
    let out = contrastive_loss(&fa, &fb, &cfg)?;
    s.check("contrastive_loss", &flat(&[&fa, &fb]), flat(&[&out.grad_a, &out.grad_b]), |p| {
        let m = split(p, &[(5, 6), (5, 6)])?;
        Ok(contrastive_loss(&m[0], &m[1], &cfg)?.loss)
    })?;

    let out = realign_loss(&fa, &fb, &cfg)?;
    s.check("realign_loss", fa.as_slice(), out.grad_image.into_vec(), |p| {
        Ok(realign_loss(&Matrix::new(5, 6, p.to_vec())?, &fb, &cfg)?.loss)
    })?;

    let (sp, t, vp) = (unit_rows(&mut rng, 4, 6), unit_rows(&mut rng, 4, 6), unit_rows(&mut rng, 4, 6));
    let views = vec![unit_rows(&mut rng, 4, 6), unit_rows(&mut rng, 4, 6)];
    let out = trimodal_loss(&sp, &t, &vp, &views, &cfg)?;
    s.check("trimodal_loss", &flat(&[&sp, &vp]), flat(&[&out.grad_semantic, &out.grad_vision]), |p| {
        let m = split(p, &[(4, 6), (4, 6)])?;
        Ok(trimodal_loss(&m[0], &t, &m[1], &views, &cfg)?.loss)
    })?;

    let enc = PointEncoderParams::init(6, 5, 9)?;
    let cloud = PointCloud::new(normal_vec(&mut rng, 30).chunks(3).map(|c| [c[0], c[1], c[2]]).collect())?;
    let g = normal_vec(&mut rng, 5);
    let mut acc = enc.zeros_like();
    point_encode_traced(&cloud, &enc)?.backward_into(&enc, &enc.w2.transpose(), &g, &mut acc);
    let shapes: Vec<(usize, usize)> = enc.tensors().iter().map(|(_, t)| t.shape()).collect();
    s.check(
        "point_encoder",
        &flat(&enc.tensors().map(|(_, t)| t)),
        flat(&acc.tensors().map(|(_, t)| t)),
        |p| {
            let m = split(p, &shapes)?;
            let e = PointEncoderParams {
                w1: m[0].clone(),
                b1: m[1].clone(),
                w2: m[2].clone(),
                b2: m[3].clone(),
                w3: m[4].clone(),
                b3: m[5].clone(),
            };
            Ok(dot(point_encode_traced(&cloud, &e)?.feature(), &g))
        },
    )?;

    let (x, w, b) = (mat(&mut rng, 6, 4), mat(&mut rng, 4, 3), mat(&mut rng, 1, 3));
    let targets = [0, 1, 2, 2, 1, 0];
    let (_, gw, gb) = probe_loss(&w, &b, &x, &targets)?;
    s.check("probe_layer", &flat(&[&w, &b]), flat(&[&gw, &gb]), |p| {
        let m = split(p, &[(4, 3), (1, 3)])?;
        Ok(probe_loss(&m[0], &m[1], &x, &targets)?.0)
    })?;

    let model = small_model()?;
    let clouds: Vec<PointCloud> = (0..4)
        .map(|_| PointCloud::new(normal_vec(&mut rng, 24).chunks(3).map(|c| [c[0], c[1], c[2]]).collect()))
        .collect::<Result<_>>()?;
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let views = vec![unit_rows(&mut rng, 4, 6), unit_rows(&mut rng, 4, 6)];
    let texts = unit_rows(&mut rng, 4, 6);
    let stage2 = [Module::Point, Module::Iaa, Module::Taa];
    let (_, grads) = trimodal_objective(&model, &refs, &views, &texts, None, &cfg)?;
    s.check("stage2_batch", &model_params(&model, &stage2), model_params(&grads, &stage2), |p| {
        let m = with_params(&model, &stage2, p);
        Ok(trimodal_objective(&m, &refs, &views, &texts, None, &cfg)?.0.total())
    })?;

    let (_, grads) = joint_objective(&model, &refs, &views, &texts, 0.2, None, &cfg)?;
    s.check("joint_batch", &model_params(&model, &Module::ALL), model_params(&grads, &Module::ALL), |p| {
        let m = with_params(&model, &Module::ALL, p);
        Ok(joint_objective(&m, &refs, &views, &texts, 0.2, None, &cfg)?.0.total())
    })?;

    Ok(s.rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let rows = run_gradcheck(None).unwrap();
        assert_eq!(rows.iter().map(|r| r.op).collect::<Vec<_>>(), GRADCHECK_OPS);
        for r in &rows {
            assert!(r.passed, "{} rel err {}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_op_is_named() {
        let rows = run_gradcheck(Some("gelu")).unwrap();
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.op).collect();
        assert_eq!(failed, vec!["gelu"]);
    }
}
