//! Per-batch losses with gradients for every stage.

use crate::encoders::{point_encode_traced, PointCloud};
use crate::error::Result;
use crate::losses::{contrastive_loss, realign_loss, trimodal_loss, LossConfig};
use crate::numkit::Matrix;

use super::model::TammModel;

/// Loss components of one batch. Unused terms stay 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub realign: f64,
    pub text: f64,
    pub image: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.realign + self.text + self.image
    }

    pub(crate) fn to_array(self) -> [f64; 3] {
        [self.realign, self.text, self.image]
    }
}

/// Re-alignment loss of the image adapter on `images` (raw, possibly
/// shifted) against frozen `texts`.
pub fn realign_objective(
    model: &TammModel,
    images: &Matrix,
    texts: &Matrix,
    alpha: f64,
    loss: &LossConfig,
) -> Result<(LossTerms, TammModel)> {
    let trace = model.cia.forward_batch(images, Some(alpha))?;
    let out = realign_loss(trace.output(), texts, loss)?;
    let (g, _) = trace.backward(&model.cia, &out.grad_image)?;
    let mut grads = model.zeros_like();
    grads.cia.w1 = g.w1;
    grads.cia.w2 = g.w2;
    Ok((
        LossTerms {
            realign: out.loss,
            ..LossTerms::default()
        },
        grads,
    ))
}

pub(crate) struct TrimodalPass {
    pub terms: LossTerms,
    pub grads: TammModel,
    pub grad_views: Vec<Matrix>,
}

fn trimodal_pass(
    model: &TammModel,
    clouds: &[&PointCloud],
    views: &[Matrix],
    texts: &Matrix,
    dual_residual: Option<f64>,
    loss: &LossConfig,
) -> Result<TrimodalPass> {
    let d = model.point.output_dim();
    let traces = clouds
        .iter()
        .map(|c| point_encode_traced(c, &model.point))
        .collect::<Result<Vec<_>>>()?;
    let mut feats = Matrix::zeros(clouds.len(), d);
    for (i, t) in traces.iter().enumerate() {
        feats.row_mut(i).copy_from_slice(t.feature());
    }
    let iaa = model.iaa.forward_batch(&feats, dual_residual)?;
    let taa = model.taa.forward_batch(&feats, dual_residual)?;
    let out = trimodal_loss(taa.output(), texts, iaa.output(), views, loss)?;

    let mut grads = model.zeros_like();
    let (g_iaa, mut g_feat) = iaa.backward(&model.iaa, &out.grad_vision)?;
    let (g_taa, g_feat_t) = taa.backward(&model.taa, &out.grad_semantic)?;
    g_feat.add_assign(&g_feat_t)?;
    grads.iaa.w1 = g_iaa.w1;
    grads.iaa.w2 = g_iaa.w2;
    grads.taa.w1 = g_taa.w1;
    grads.taa.w2 = g_taa.w2;
    let w2_t = model.point.w2.transpose();
    for (i, t) in traces.iter().enumerate() {
        t.backward_into(&model.point, &w2_t, g_feat.row(i), &mut grads.point);
    }
    Ok(TrimodalPass {
        terms: LossTerms {
            realign: 0.0,
            text: out.text_term,
            image: out.image_term,
        },
        grads,
        grad_views: out.grad_views,
    })
}

/// Tri-modal loss with frozen image features (`views`, already adapted) and
/// frozen text features.
pub fn trimodal_objective(
    model: &TammModel,
    clouds: &[&PointCloud],
    views: &[Matrix],
    texts: &Matrix,
    dual_residual: Option<f64>,
    loss: &LossConfig,
) -> Result<(LossTerms, TammModel)> {
    let pass = trimodal_pass(model, clouds, views, texts, dual_residual, loss)?;
    Ok((pass.terms, pass.grads))
}

/// Re-alignment plus tri-modal loss with the image adapter trained through
/// both. `raw_views` are the unadapted image features.
pub fn joint_objective(
    model: &TammModel,
    clouds: &[&PointCloud],
    raw_views: &[Matrix],
    texts: &Matrix,
    alpha: f64,
    dual_residual: Option<f64>,
    loss: &LossConfig,
) -> Result<(LossTerms, TammModel)> {
    let m = raw_views.len() as f64;
    let traces = raw_views
        .iter()
        .map(|v| model.cia.forward_batch(v, Some(alpha)))
        .collect::<Result<Vec<_>>>()?;
    let adapted: Vec<Matrix> = traces.iter().map(|t| t.output().clone()).collect();
    let mut pass = trimodal_pass(model, clouds, &adapted, texts, dual_residual, loss)?;
    let mut realign = 0.0;
    for (k, trace) in traces.iter().enumerate() {
        let out = contrastive_loss(trace.output(), texts, loss)?;
        realign += out.loss / m;
        let mut g = out.grad_a.scale(1.0 / m);
        g.add_assign(&pass.grad_views[k])?;
        let (gc, _) = trace.backward(&model.cia, &g)?;
        pass.grads.cia.w1.add_assign(&gc.w1)?;
        pass.grads.cia.w2.add_assign(&gc.w2)?;
    }
    pass.terms.realign = realign;
    Ok((pass.terms, pass.grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, normalize_rows, FD_EPS};
    use crate::rng::{normal_vec, seeded};
    use crate::train::model::{ModelDims, Module};

    fn setup(n: usize, m: usize) -> (TammModel, Vec<PointCloud>, Vec<Matrix>, Matrix) {
        let dims = ModelDims {
            feature_dim: 6,
            adapter_hidden: 4,
            point_hidden: 5,
        };
        let mut model = TammModel::init(dims, 11).unwrap();
        // push the image adapter away from its near-identity start
        model.cia.w2 = model.cia.w2.scale(300.0);
        let mut rng = seeded(5, 0);
        let clouds = (0..n)
            .map(|_| {
                let v = normal_vec(&mut rng, 8 * 3);
                PointCloud::new(v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap()
            })
            .collect();
        let mut unit = |rows| normalize_rows(&Matrix::new(rows, 6, normal_vec(&mut rng, rows * 6)).unwrap()).unwrap().0;
        let views = (0..m).map(|_| unit(n)).collect();
        let texts = unit(n);
        (model, clouds, views, texts)
    }

    fn check<F>(model: &TammModel, modules: &[Module], f: F)
    where
        F: Fn(&TammModel) -> (LossTerms, TammModel),
    {
        let (_, grads) = f(model);
        let flat: Vec<f64> = model
            .tensors(modules)
            .iter()
            .flat_map(|(_, t)| t.as_slice().to_vec())
            .collect();
        let analytic: Vec<f64> = grads
            .tensors(modules)
            .iter()
            .flat_map(|(_, t)| t.as_slice().to_vec())
            .collect();
        let err = finite_diff_check(
            |p| {
                let mut m = model.clone();
                let mut off = 0;
                for (_, t) in m.tensors_mut(modules) {
                    let len = t.as_slice().len();
                    t.as_mut_slice().copy_from_slice(&p[off..off + len]);
                    off += len;
                }
                Ok(f(&m).0.total())
            },
            &flat,
            &analytic,
            FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn realign_gradients() {
        let (model, _, views, texts) = setup(4, 1);
        let cfg = LossConfig::new(0.5).unwrap();
        check(&model, &[Module::Cia], |m| {
            realign_objective(m, &views[0], &texts, 0.2, &cfg).unwrap()
        });
    }

    #[test]
    fn trimodal_gradients_on_four_samples() {
        let (model, clouds, views, texts) = setup(4, 2);
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let cfg = LossConfig::new(0.5).unwrap();
        check(&model, &[Module::Point, Module::Iaa, Module::Taa], |m| {
            trimodal_objective(m, &refs, &views, &texts, None, &cfg).unwrap()
        });
    }

    #[test]
    fn joint_gradients() {
        let (model, clouds, views, texts) = setup(4, 2);
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let cfg = LossConfig::new(0.5).unwrap();
        check(&model, &Module::ALL, |m| {
            joint_objective(m, &refs, &views, &texts, 0.2, Some(0.3), &cfg).unwrap()
        });
    }

    #[test]
    fn single_view_is_two_contrastive_terms() {
        let (model, clouds, views, texts) = setup(5, 1);
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let cfg = LossConfig::default();
        let (terms, _) = trimodal_objective(&model, &refs, &views, &texts, None, &cfg).unwrap();
        let f = crate::encoders::point_encode_batch(&refs, &model.point).unwrap();
        let sp = model.taa.apply(&f, None).unwrap();
        let vp = model.iaa.apply(&f, None).unwrap();
        let a = contrastive_loss(&sp, &texts, &cfg).unwrap().loss;
        let b = contrastive_loss(&vp, &views[0], &cfg).unwrap().loss;
        assert!((terms.total() - (a + b)).abs() < 1e-12);
    }
}
