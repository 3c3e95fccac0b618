//! Step-based, resumable trainer shared by all stages.

use log::info;

use crate::datagen::{heldout_alignment, Split, TripletSet, ACCURACY_CHUNK};
use crate::encoders::PointCloud;
use crate::error::{Result, TammError};
use crate::eval::{zeroshot_topk, CategoryBank, InferenceMode};
use crate::losses::{chunked_contrastive_accuracy, LossConfig};
use crate::numkit::Matrix;
use crate::rng::{hash_f64s, permutation, seeded, STREAM_SHUFFLE};

use super::checkpoint::Checkpoint;
use super::metrics::MetricRow;
use super::model::TammModel;
use super::objective::{joint_objective, realign_objective, trimodal_objective, LossTerms};
use super::optim::{adamw_step, cosine_lr, OptimState};
use super::{Stage, TrainConfig};

/// Held-out samples scored after every epoch of the point-encoder stages.
pub const MONITOR_SAMPLES: usize = 256;

pub struct Trainer<'a> {
    data: &'a TripletSet,
    cfg: TrainConfig,
    stage: Stage,
    model: TammModel,
    optim: OptimState,
    loss: LossConfig,
    views: usize,
    /// `(sample, view)`; the view is only meaningful for stage 1.
    units: Vec<(usize, usize)>,
    steps_per_epoch: u64,
    total_steps: u64,
    warmup_steps: u64,
    /// Image features per used view: adapted by the frozen image adapter in
    /// stage 2, raw otherwise.
    images: Vec<Matrix>,
    heldout: Vec<usize>,
    epoch_sums: [f64; 4],
    order: Option<(u64, Vec<usize>)>,
    last_lr: f64,
    pending: Vec<MetricRow>,
}

impl<'a> Trainer<'a> {
    /// Starts a stage from `model`, logging the untrained state as epoch 0.
    pub fn new(data: &'a TripletSet, model: TammModel, stage: Stage, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::build(data, model, stage, cfg)?;
        t.log_epoch(0, None)?;
        Ok(t)
    }

    /// Continues exactly where `ck` stopped.
    pub fn resume(data: &'a TripletSet, ck: Checkpoint) -> Result<Self> {
        let mut t = Self::build(data, ck.model, ck.stage, ck.config)?;
        if ck.optim.first.len() != t.optim.first.len()
            || ck.optim.first.iter().zip(&t.optim.first).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(TammError::shape("checkpoint optimizer state does not match the model"));
        }
        if ck.optim.step > t.total_steps {
            return Err(TammError::config(format!(
                "checkpoint step {} beyond the schedule's {} steps",
                ck.optim.step, t.total_steps
            )));
        }
        t.optim = ck.optim;
        t.epoch_sums = ck.epoch_sums;
        Ok(t)
    }

    fn build(data: &'a TripletSet, model: TammModel, stage: Stage, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.check_feature_dim(data.feature_dim())?;
        let views = cfg.views.unwrap_or(data.views());
        if views > data.views() {
            return Err(TammError::shape(format!(
                "{views} views requested but the dataset has {}",
                data.views()
            )));
        }
        let train = data.indices(Split::Pretrain);
        let units: Vec<(usize, usize)> = match stage {
            Stage::Realign => train.iter().flat_map(|&i| (0..views).map(move |v| (i, v))).collect(),
            _ => train.iter().map(|&i| (i, 0)).collect(),
        };
        if cfg.batch_size > units.len() {
            return Err(TammError::config(format!(
                "batch size {} exceeds the {} training pairs",
                cfg.batch_size,
                units.len()
            )));
        }
        let steps_per_epoch = (units.len() / cfg.batch_size) as u64;
        let total_steps = steps_per_epoch * cfg.epochs as u64;
        let warmup_steps = steps_per_epoch * cfg.warmup_epochs as u64;
        let images = data.images[..views]
            .iter()
            .map(|v| {
                if stage == Stage::Decoupled && cfg.use_cia {
                    model.cia.apply(v, Some(cfg.alpha))
                } else {
                    Ok(v.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let optim = OptimState::new(
            &model
                .tensors(stage.trainable())
                .iter()
                .map(|(_, t)| *t)
                .collect::<Vec<_>>(),
        );
        Ok(Trainer {
            data,
            loss: LossConfig::new(cfg.tau)?,
            cfg,
            stage,
            model,
            optim,
            views,
            units,
            steps_per_epoch,
            total_steps,
            warmup_steps,
            images,
            heldout: data.indices(Split::EvalHeldout),
            epoch_sums: [0.0; 4],
            order: None,
            last_lr: 0.0,
            pending: Vec::new(),
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.optim.step >= self.total_steps
    }

    pub fn model(&self) -> &TammModel {
        &self.model
    }

    pub fn into_model(self) -> TammModel {
        self.model
    }

    /// Metric rows produced since the last call.
    pub fn take_metrics(&mut self) -> Vec<MetricRow> {
        std::mem::take(&mut self.pending)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            config: self.cfg.clone(),
            model: self.model.clone(),
            optim: self.optim.clone(),
            epoch_sums: self.epoch_sums,
        }
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut rng = seeded(hash_f64s(&[epoch as f64], self.cfg.seed), STREAM_SHUFFLE);
            self.order = Some((epoch, permutation(&mut rng, self.units.len())));
        }
        &self.order.as_ref().unwrap().1
    }

    fn batch_units(&mut self, step: u64) -> Vec<(usize, usize)> {
        let epoch = step / self.steps_per_epoch;
        let b = (step % self.steps_per_epoch) as usize;
        let bs = self.cfg.batch_size;
        let order = self.epoch_order(epoch).to_vec();
        order[b * bs..(b + 1) * bs].iter().map(|&k| self.units[k]).collect()
    }

    fn objective(&self, model: &TammModel, units: &[(usize, usize)]) -> Result<(LossTerms, TammModel)> {
        let idx: Vec<usize> = units.iter().map(|u| u.0).collect();
        let texts = self.data.texts.select_rows(&idx);
        match self.stage {
            Stage::Realign => {
                let d = self.data.feature_dim();
                let mut imgs = Matrix::zeros(units.len(), d);
                for (r, &(i, v)) in units.iter().enumerate() {
                    imgs.row_mut(r).copy_from_slice(self.images[v].row(i));
                }
                realign_objective(model, &imgs, &texts, self.cfg.alpha, &self.loss)
            }
            Stage::Decoupled | Stage::Joint => {
                let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &self.data.clouds[i]).collect();
                let views: Vec<Matrix> = self.images.iter().map(|v| v.select_rows(&idx)).collect();
                if self.stage == Stage::Decoupled {
                    trimodal_objective(model, &clouds, &views, &texts, self.cfg.dual_residual_alpha, &self.loss)
                } else {
                    joint_objective(
                        model,
                        &clouds,
                        &views,
                        &texts,
                        self.cfg.alpha,
                        self.cfg.dual_residual_alpha,
                        &self.loss,
                    )
                }
            }
        }
    }

    /// One optimizer step. Returns false once the schedule is exhausted.
    pub fn step(&mut self) -> Result<bool> {
        let t = self.optim.step;
        if t >= self.total_steps {
            return Ok(false);
        }
        let units = self.batch_units(t);
        let (terms, grads) = self.objective(&self.model, &units)?;
        let lr = cosine_lr(t, self.total_steps, self.warmup_steps, self.cfg.base_lr)?;
        let trainable = self.stage.trainable();
        let g: Vec<&Matrix> = grads.tensors(trainable).into_iter().map(|(_, m)| m).collect();
        let mut p: Vec<&mut Matrix> = self.model.tensors_mut(trainable).into_iter().map(|(_, m)| m).collect();
        adamw_step(&mut p, &g, &mut self.optim, lr, self.cfg.betas, self.cfg.weight_decay)?;
        if !self.model.tensors(trainable).iter().all(|(_, m)| m.is_finite()) {
            return Err(TammError::Numeric(format!("non-finite parameters after step {t}")));
        }
        self.last_lr = lr;
        for (s, v) in self.epoch_sums.iter_mut().zip(terms.to_array()) {
            *s += v;
        }
        self.epoch_sums[3] += 1.0;
        if (t + 1) % self.steps_per_epoch == 0 {
            let n = self.epoch_sums[3];
            let mean = LossTerms {
                realign: self.epoch_sums[0] / n,
                text: self.epoch_sums[1] / n,
                image: self.epoch_sums[2] / n,
            };
            self.epoch_sums = [0.0; 4];
            self.log_epoch(((t + 1) / self.steps_per_epoch) as usize, Some(mean))?;
        }
        Ok(true)
    }

    /// Runs at most `n` steps; returns how many ran.
    pub fn run_steps(&mut self, n: u64) -> Result<u64> {
        let mut done = 0;
        while done < n && self.step()? {
            done += 1;
        }
        Ok(done)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    /// Mean loss terms over the first epoch's batches at the current weights.
    fn untrained_terms(&mut self) -> Result<LossTerms> {
        let mut sum = LossTerms::default();
        for b in 0..self.steps_per_epoch {
            let units = self.batch_units(b);
            let (t, _) = self.objective(&self.model, &units)?;
            sum.realign += t.realign;
            sum.text += t.text;
            sum.image += t.image;
        }
        let n = self.steps_per_epoch as f64;
        Ok(LossTerms {
            realign: sum.realign / n,
            text: sum.text / n,
            image: sum.image / n,
        })
    }

    fn log_epoch(&mut self, epoch: usize, terms: Option<LossTerms>) -> Result<()> {
        let terms = match terms {
            Some(t) => t,
            None => self.untrained_terms()?,
        };
        let mut rows: Vec<(&str, f64)> = vec![("loss", terms.total())];
        match self.stage {
            Stage::Realign => rows.push(("loss_realign", terms.realign)),
            Stage::Decoupled => {
                rows.push(("loss_text", terms.text));
                rows.push(("loss_image", terms.image));
            }
            Stage::Joint => {
                rows.push(("loss_realign", terms.realign));
                rows.push(("loss_text", terms.text));
                rows.push(("loss_image", terms.image));
            }
        }
        rows.push(("lr", self.last_lr));
        if self.heldout.len() >= 2 {
            self.monitor(&mut rows)?;
        }
        let msg: Vec<String> = rows.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        info!("stage {} epoch {epoch}: {}", self.stage.name(), msg.join(" "));
        for (metric, value) in rows {
            self.pending.push(MetricRow {
                run_id: self.cfg.run_id.clone(),
                stage: self.stage.name().to_string(),
                epoch,
                metric: metric.to_string(),
                value,
            });
        }
        Ok(())
    }

    /// Held-out diagnostics at the current weights.
    fn monitor(&self, rows: &mut Vec<(&str, f64)>) -> Result<()> {
        let texts = &self.data.texts;
        if matches!(self.stage, Stage::Realign | Stage::Joint) {
            let adapted = self
                .images
                .iter()
                .map(|v| self.model.cia.apply(&v.select_rows(&self.heldout), Some(self.cfg.alpha)))
                .collect::<Result<Vec<_>>>()?;
            let all: Vec<usize> = (0..self.heldout.len()).collect();
            let acc = heldout_alignment(&adapted, &texts.select_rows(&self.heldout), &all)?;
            rows.push(("heldout_acc", acc));
        }
        if self.stage == Stage::Realign {
            return Ok(());
        }
        let idx: Vec<usize> = self.heldout.iter().copied().take(MONITOR_SAMPLES).collect();
        let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &self.data.clouds[i]).collect();
        let feats = self.model.encode_dual(&clouds, self.cfg.dual_residual_alpha)?;
        let t = texts.select_rows(&idx);
        rows.push((
            "heldout_acc_text",
            chunked_contrastive_accuracy(&feats.semantic, &t, ACCURACY_CHUNK)?,
        ));
        let labels: Vec<u32> = idx.iter().map(|&i| self.data.labels[i]).collect();
        let bank = CategoryBank::from_dataset(self.data, &self.data.classes_in(&self.heldout))?;
        let top1 = zeroshot_topk(&feats, &labels, &bank, InferenceMode::Both, &[1])?[0].1;
        rows.push(("zeroshot_top1", top1));
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.views
    }
}

/// Trains the image adapter of `model`.
pub fn train_stage1(data: &TripletSet, model: TammModel, cfg: &TrainConfig) -> Result<(TammModel, Vec<MetricRow>)> {
    run_stage(data, model, Stage::Realign, cfg)
}

/// Trains the point encoder and dual adapters with the image adapter frozen.
pub fn train_stage2(data: &TripletSet, model: TammModel, cfg: &TrainConfig) -> Result<(TammModel, Vec<MetricRow>)> {
    run_stage(data, model, Stage::Decoupled, cfg)
}

/// Trains every module at once on the summed objectives.
pub fn train_onestage(data: &TripletSet, model: TammModel, cfg: &TrainConfig) -> Result<(TammModel, Vec<MetricRow>)> {
    run_stage(data, model, Stage::Joint, cfg)
}

fn run_stage(data: &TripletSet, model: TammModel, stage: Stage, cfg: &TrainConfig) -> Result<(TammModel, Vec<MetricRow>)> {
    let mut t = Trainer::new(data, model, stage, cfg.clone())?;
    t.run()?;
    let rows = t.take_metrics();
    Ok((t.into_model(), rows))
}
