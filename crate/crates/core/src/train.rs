//! SGD with momentum, cosine learning-rate decay, the epoch loop and
//! ablation runs.

use ndarray::{Axis, Ix4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::config::{Ablation, ModelConfig, TrainConfig};
use crate::data::{augment, make_batch, sample_rng, SegmentationSample};
use crate::error::{Error, Result};
use crate::loss::{segmentation_loss, LossValue};
use crate::metrics::{foreground_classes, predict_masks, MetricsAccumulator, MetricsReport};
use crate::model::{param_count, AffSegNet};
use crate::tensor::{cst, Element, Tensor};

/// `lr_final + ½(lr_init − lr_final)(1 + cos(πt/T))`, held at `lr_final` past `T`.
pub fn cosine_lr(t: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    let total = total.max(1);
    if t >= total {
        return lr_final;
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Element> {
    /// One buffer per parameter, in store order.
    pub velocity: Vec<Tensor<T>>,
    pub step: u64,
    pub current_lr: f64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        Self {
            velocity: store.iter().map(|(_, _, v)| Tensor::zeros(v.raw_dim())).collect(),
            step: 0,
            current_lr: lr,
        }
    }
}

/// `v ← μv + (g + λθ)`, `θ ← θ − lr·v`. A missing gradient counts as zero.
/// Nothing is modified when any gradient is non-finite.
pub fn sgd_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            store.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (id, name, value) in store.iter() {
        if let Some(g) = &grads[id.index()] {
            if g.shape() != value.shape() {
                return Err(Error::shape(format!("gradient for {name} has shape {:?}, expected {:?}", g.shape(), value.shape())));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
    }
    let (mu, wd, lr_t) = (cst::<T>(momentum), cst::<T>(weight_decay), cst::<T>(lr));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let theta = store.get_mut(id);
        let v = &mut state.velocity[i];
        match &grads[i] {
            Some(g) => ndarray::Zip::from(&mut *v).and(&*theta).and(g).for_each(|v, &t, &g| *v = mu * *v + (g + wd * t)),
            None => ndarray::Zip::from(&mut *v).and(&*theta).for_each(|v, &t| *v = mu * *v + wd * t),
        }
        ndarray::Zip::from(theta).and(&*v).for_each(|t, &v| *t = *t - lr_t * v);
    }
    state.step += 1;
    state.current_lr = lr;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_dice: f64,
    pub train_bce: f64,
    pub lr: f64,
    pub val_mean_dsc: f64,
    pub val_mean_iou: f64,
}

/// Scores `samples` with hard predictions.
pub fn evaluate<T: Element>(
    model: &AffSegNet,
    store: &ParamStore<T>,
    samples: &[SegmentationSample],
    batch_size: usize,
    class_names: &[String],
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(foreground_classes(model.config.num_classes));
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = make_batch::<T>(&refs)?;
        let g = Graph::inference(store);
        let logits = model.forward(&g, &g.constant(batch.images))?;
        let lv = logits.value().view().into_dimensionality::<Ix4>().map_err(|e| Error::shape(e.to_string()))?;
        for (pred, s) in predict_masks(lv).iter().zip(chunk) {
            acc.add(pred.view(), s.mask.view())?;
        }
    }
    acc.report(class_names)
}

/// Model, parameters and optimizer for one training run.
pub struct Trainer<T: Element> {
    pub model: AffSegNet,
    pub store: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    pub train_config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Best validation mean DSC so far and its epoch.
    pub best_score: Option<(f64, usize)>,
    /// Parameters at `best_score`, when reached in this process.
    pub best_params: Option<ParamStore<T>>,
    /// Steps per epoch used for the schedule; fixed on the first epoch.
    pub steps_per_epoch: Option<usize>,
}

impl<T: Element> Trainer<T> {
    pub fn new(model_config: &ModelConfig, train_config: &TrainConfig) -> Result<Self> {
        train_config.validate().into_result()?;
        let (model, store) = AffSegNet::build::<T>(model_config, train_config.seed)?;
        let optimizer = OptimizerState::new(&store, train_config.lr_init);
        Ok(Self {
            model,
            store,
            optimizer,
            train_config: train_config.clone(),
            epoch: 0,
            history: Vec::new(),
            best_score: None,
            best_params: None,
            steps_per_epoch: None,
        })
    }

    fn total_steps(&self) -> usize {
        self.train_config.epochs * self.steps_per_epoch.unwrap_or(1)
    }

    /// Forward, loss, backward and one optimizer step at the scheduled rate.
    pub fn step(&mut self, batch: &[&SegmentationSample]) -> Result<LossValue> {
        let batch = make_batch::<T>(batch)?;
        let (value, grads) = {
            let g = Graph::new(&self.store);
            let logits = self.model.forward(&g, &g.constant(batch.images))?;
            let (loss, value) = segmentation_loss(&g, &logits, &batch.masks)?;
            if !value.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {} at step {} (epoch {})",
                    value.total,
                    self.optimizer.step + 1,
                    self.epoch + 1
                )));
            }
            (value, g.backward(&loss).into_param_grads(self.store.len()))
        };
        let tc = &self.train_config;
        let lr = cosine_lr(self.optimizer.step as usize, self.total_steps(), tc.lr_init, tc.lr_final);
        sgd_step(&mut self.store, &grads, &mut self.optimizer, lr, tc.momentum, tc.weight_decay)?;
        Ok(value)
    }

    /// Batches for an epoch: a seeded shuffle, then per-sample augmentation
    /// seeded by (seed, id, epoch).
    pub fn epoch_batches(&self, train: &[SegmentationSample], epoch: usize) -> Vec<Vec<SegmentationSample>> {
        let tc = &self.train_config;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(epoch as u64)));
        let aug_on = tc.augment.hflip_prob > 0.0 || tc.augment.rotate_max_deg > 0.0;
        order
            .chunks(tc.batch_size)
            .map(|idx| {
                idx.iter()
                    .map(|&i| {
                        let s = &train[i];
                        if aug_on {
                            augment(s, &tc.augment, &mut sample_rng(tc.seed, &s.id, epoch as u64 + 1))
                        } else {
                            s.clone()
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// One pass over `train`, then validation on `val`.
    pub fn run_epoch(&mut self, train: &[SegmentationSample], val: &[SegmentationSample]) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training and validation sets must be non-empty".into()));
        }
        let epoch = self.epoch + 1;
        let batches = self.epoch_batches(train, epoch);
        self.steps_per_epoch.get_or_insert(batches.len());
        let (mut total, mut dice, mut bce) = (0.0, 0.0, 0.0);
        for b in &batches {
            let refs: Vec<_> = b.iter().collect();
            let v = self.step(&refs)?;
            let w = b.len() as f64;
            total += v.total * w;
            dice += v.dice_term * w;
            bce += v.bce_term * w;
        }
        let n = train.len() as f64;
        let report = evaluate(&self.model, &self.store, val, self.train_config.batch_size, &[])?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / n,
            train_dice: dice / n,
            train_bce: bce / n,
            lr: self.optimizer.current_lr,
            val_mean_dsc: report.mean_dsc,
            val_mean_iou: report.mean_iou,
        };
        if self.best_score.is_none_or(|(d, _)| rec.val_mean_dsc > d) {
            self.best_score = Some((rec.val_mean_dsc, epoch));
            self.best_params = Some(self.store.clone());
        }
        self.epoch = epoch;
        self.history.push(rec.clone());
        log::info!(
            "epoch {epoch}: loss {:.5} lr {:.3e} val DSC {:.4} mIoU {:.4}",
            rec.train_loss,
            rec.lr,
            rec.val_mean_dsc,
            rec.val_mean_iou
        );
        Ok(rec)
    }

    /// Runs the remaining epochs. `on_epoch` sees the trainer after each
    /// epoch and may stop the run early by returning `false`.
    pub fn fit(
        &mut self,
        train: &[SegmentationSample],
        val: &[SegmentationSample],
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<bool>,
    ) -> Result<()> {
        while self.epoch < self.train_config.epochs {
            let rec = self.run_epoch(train, val)?;
            if !on_epoch(self, &rec)? {
                break;
            }
        }
        Ok(())
    }

    /// Best parameters seen by this process, or the current ones.
    pub fn best_store(&self) -> &ParamStore<T> {
        self.best_params.as_ref().unwrap_or(&self.store)
    }
}

/// Flag rows of the ablation table: each component off once, then all on.
pub fn ablation_rows() -> [Ablation; 5] {
    let on = Ablation::ALL_ON;
    [
        Ablation { effn_enabled: false, ..on },
        Ablation { lrd_enabled: false, ..on },
        Ablation { mff_enabled: false, ..on },
        Ablation { asc_enabled: false, ..on },
        on,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub label: String,
    pub param_count: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub format_version: u32,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        let mut s = format!(
            "{:<5} {:<5} {:<5} {:<5} {:>10} {:>8} {:>8}\n",
            "EFFN", "LRD", "MFF", "ASC", "params", "DSC%", "mIoU%"
        );
        for r in &self.rows {
            let a = r.ablation;
            s += &format!(
                "{:<5} {:<5} {:<5} {:<5} {:>10} {:>8.2} {:>8.2}\n",
                mark(a.effn_enabled),
                mark(a.lrd_enabled),
                mark(a.mff_enabled),
                mark(a.asc_enabled),
                r.param_count,
                100.0 * r.mean_dsc,
                100.0 * r.mean_iou
            );
        }
        s
    }
}

/// Trains every row of [`ablation_rows`] from the same seed and scores the
/// best checkpoint of each on `test`. `on_row` is called as rows complete.
pub fn run_ablation<T: Element>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    test: &[SegmentationSample],
    mut on_row: impl FnMut(&AblationTable) -> Result<()>,
) -> Result<AblationTable> {
    let mut table = AblationTable {
        format_version: 1,
        rows: Vec::new(),
    };
    for ablation in ablation_rows() {
        let cfg = ModelConfig {
            ablation,
            ..model_config.clone()
        };
        let mut t = Trainer::<T>::new(&cfg, train_config)?;
        t.fit(train, val, |_, _| Ok(true))?;
        let report = evaluate(&t.model, t.best_store(), test, train_config.batch_size, &[])?;
        table.rows.push(AblationRow {
            ablation,
            label: ablation.label(),
            param_count: param_count(&cfg)?,
            best_epoch: t.best_score.map_or(0, |b| b.1),
            final_train_loss: t.history.last().map_or(f64::NAN, |r| r.train_loss),
            mean_dsc: report.mean_dsc,
            mean_iou: report.mean_iou,
        });
        on_row(&table)?;
    }
    Ok(table)
}

/// Hard label mask `[H, W]` for a single `[C, H, W]` image.
pub fn predict_one<T: Element>(model: &AffSegNet, store: &ParamStore<T>, image: &ndarray::Array3<f32>) -> Result<ndarray::Array2<u8>> {
    let x: Tensor<T> = image.mapv(|v| cst::<T>(v as f64)).insert_axis(Axis(0)).into_dyn();
    let g = Graph::inference(store);
    let logits = model.forward(&g, &g.constant(x))?;
    let lv = logits.value().view().into_dimensionality::<Ix4>().map_err(|e| Error::shape(e.to_string()))?;
    Ok(predict_masks(lv).remove(0))
}
