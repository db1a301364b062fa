//! Two-stage training: task-aware fine-tuning of the teacher head, then
//! distillation of the teacher into the student head. Backbones stay frozen
//! in both stages.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Frame, Session, Split};
use crate::error::{Error, Result};
use crate::losses::{
    distill_loss, multihead_loss, reduced_focal, soft_distill_loss, DistillConfig, HeadWeights,
    RflConfig,
};
use crate::model::{ArchTag, HeadMask, ModelParams, OVERALL};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::rng::RngStream;
use crate::tensor::{sigmoid_scalar, Tape, Tensor};

/// Binary-only (head 8) or full multi-head training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V1,
    V2,
}

impl Variant {
    pub fn head_mask(self) -> HeadMask {
        match self {
            Variant::V1 => HeadMask::OVERALL_ONLY,
            Variant::V2 => HeadMask::ALL,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaftConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub rfl: RflConfig,
    pub head_weights: HeadWeights,
    pub head_mask: HeadMask,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TaftConfig {
    /// Desk-scale defaults: lr 1e-2, batch 32, 3 epochs, all heads.
    fn default() -> Self {
        Self {
            epochs: 3,
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
            rfl: RflConfig::default(),
            head_weights: HeadWeights::default(),
            head_mask: HeadMask::ALL,
            augment: AugmentConfig::default(),
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TaftConfig {
    pub fn for_variant(variant: Variant, seed: u64) -> Self {
        Self {
            head_mask: variant.head_mask(),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.head_mask.is_empty() {
            return Err(Error::Config("head mask is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.rfl.validate()?;
        self.head_weights.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillRunConfig {
    pub distill: DistillConfig,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Fraction of train sessions whose labels are withheld.
    pub unlabeled_fraction: f64,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillRunConfig {
    fn default() -> Self {
        Self {
            distill: DistillConfig::default(),
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
            epochs: 3,
            unlabeled_fraction: 0.5,
            augment: AugmentConfig::default(),
            batch_size: 32,
            seed: 0,
        }
    }
}

impl DistillRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::Config(format!(
                "unlabeled fraction must be in [0,1), got {}",
                self.unlabeled_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Taft,
    Distill,
}

/// What a run did, enough to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub config: serde_json::Value,
    pub head_mask: HeadMask,
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean head-8 reduced focal loss per epoch, tracked for every variant.
    pub epoch_overall_losses: Vec<f64>,
    /// Mean head-8 reduced focal loss per batch.
    pub batch_overall_losses: Vec<f64>,
    pub checkpoint: Option<String>,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub train_frames: usize,
    /// Final AdamW moments, for resuming; not part of the JSON record.
    #[serde(skip)]
    pub optimizer: Option<OptimizerState>,
}

/// One training frame: session index and frame index within it.
#[derive(Clone, Copy)]
struct FrameRef {
    session: usize,
    frame: usize,
}

struct FrameLoss {
    loss: f64,
    grad: Tensor,
}

struct Curves {
    state: OptimizerState,
    epoch_losses: Vec<f64>,
    epoch_overall: Vec<f64>,
    batch_overall: Vec<f64>,
}

struct LoopSpec<'a> {
    epochs: usize,
    batch_size: usize,
    optimizer: &'a AdamWConfig,
    augment: &'a AugmentConfig,
    seed: u64,
}

fn train_frames(dataset: &[Session]) -> Vec<FrameRef> {
    dataset
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .flat_map(|(i, s)| (0..s.frames.len()).map(move |f| FrameRef { session: i, frame: f }))
        .collect()
}

/// Shared optimisation loop over the head of `model`. `objective` maps an
/// augmented frame and the head logits to a loss and its logit gradient.
fn optimise_head(
    model: &mut ModelParams,
    dataset: &[Session],
    items: &[FrameRef],
    spec: &LoopSpec,
    objective: impl Fn(FrameRef, &Frame, &Tensor) -> Result<FrameLoss> + Sync,
) -> Result<Curves> {
    let backbone_before = model.backbone.to_bytes();
    let clean: Vec<Tensor> = items
        .par_iter()
        .map(|item| model.features(dataset[item.session].frames[item.frame].pixels()))
        .collect::<Result<_>>()?;
    model.head.fit_input_normalization(&clean)?;
    drop(clean);
    let root = RngStream::new(spec.seed, 0);
    let state = OptimizerState::new(&model.head.tensors());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut curves = Curves {
        state,
        epoch_losses: Vec::with_capacity(spec.epochs),
        epoch_overall: Vec::with_capacity(spec.epochs),
        batch_overall: Vec::new(),
    };

    for epoch in 0..spec.epochs {
        order.shuffle(&mut root.derive_named("shuffle").derive(epoch as u64).rng());
        let aug_root = root.derive_named("augment").derive(epoch as u64);
        let (mut loss_sum, mut overall_sum) = (0.0, 0.0);

        for (batch_idx, batch) in order.chunks(spec.batch_size).enumerate() {
            let frozen_model = &*model;
            let per_frame = batch
                .par_iter()
                .map(|&k| {
                    let item = items[k];
                    let key = (item.session as u64) << 16 | item.frame as u64;
                    let src = &dataset[item.session].frames[item.frame];
                    let frame = augment(src, spec.augment, aug_root.derive(key));
                    let features = frozen_model.features(frame.pixels())?;
                    let mut tape = Tape::new();
                    let fv = tape.leaf(features);
                    let head = frozen_model.record_head(&mut tape, fv)?;
                    let logits = tape.value(head.logits)?.clone();
                    let out = objective(item, &frame, &logits)?;
                    let overall = reduced_focal(
                        sigmoid_scalar(logits.data()[OVERALL]),
                        dataset[item.session].labels.is_attack(),
                        &RflConfig::default(),
                    )
                    .0;
                    let grads = tape.backward(head.logits, out.grad)?;
                    let head_grads = head
                        .params
                        .iter()
                        .map(|&v| grads.get(v).cloned())
                        .collect::<Result<Vec<_>>>()?;
                    Ok((out.loss, overall, head_grads))
                })
                .collect::<Result<Vec<_>>>()?;

            let n = per_frame.len() as f64;
            let mut acc: Vec<Tensor> =
                model.head.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let (mut batch_loss, mut batch_overall) = (0.0, 0.0);
            for (loss, overall, grads) in &per_frame {
                batch_loss += loss;
                batch_overall += overall;
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.add_assign(g)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss / n,
                });
            }
            acc.iter_mut().for_each(|g| g.scale(1.0 / n));
            adamw_step(&mut model.head.tensors_mut(), &acc, &mut curves.state, spec.optimizer)?;
            loss_sum += batch_loss;
            overall_sum += batch_overall;
            curves.batch_overall.push(batch_overall / n);
        }
        curves.epoch_losses.push(loss_sum / items.len() as f64);
        curves.epoch_overall.push(overall_sum / items.len() as f64);
    }

    if model.backbone.to_bytes() != backbone_before {
        return Err(Error::State("frozen backbone changed during training".into()));
    }
    Ok(curves)
}

/// Task-aware fine-tuning: train the head of `model` with the multi-head
/// reduced focal loss over `cfg.head_mask`.
pub fn taft(
    dataset: &[Session],
    cfg: &TaftConfig,
    mut model: ModelParams,
) -> Result<(ModelParams, RunRecord)> {
    cfg.validate()?;
    if !model.backbone.frozen {
        return Err(Error::Input("fine-tuning expects a frozen backbone".into()));
    }
    let items = train_frames(dataset);
    if items.is_empty() {
        return Err(Error::Input("dataset has no train split".into()));
    }
    let start = Instant::now();
    model.head.active = cfg.head_mask;
    let spec = LoopSpec {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: &cfg.optimizer,
        augment: &cfg.augment,
        seed: cfg.seed,
    };
    let curves = optimise_head(&mut model, dataset, &items, &spec, |item, _, logits| {
        let labels = &dataset[item.session].labels;
        let (loss, grad) = multihead_loss(logits, labels, cfg.head_mask, &cfg.head_weights, &cfg.rfl)?;
        Ok(FrameLoss { loss, grad })
    })?;
    model.trained = true;
    let record = RunRecord {
        stage: Stage::Taft,
        config: serde_json::to_value(cfg)?,
        head_mask: cfg.head_mask,
        epoch_losses: curves.epoch_losses,
        epoch_overall_losses: curves.epoch_overall,
        batch_overall_losses: curves.batch_overall,
        checkpoint: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        train_frames: items.len(),
        optimizer: Some(curves.state),
    };
    Ok((model, record))
}

/// Whether the label of train session `id` is withheld during distillation.
pub fn is_unlabeled(id: &str, fraction: f64, seed: u64) -> bool {
    if fraction <= 0.0 {
        return false;
    }
    let mut rng = RngStream::new(seed, 0).derive_named("unlabeled").derive_named(id).rng();
    rand::Rng::random::<f64>(&mut rng) < fraction
}

/// Distil `teacher` into `student_init` with the temperature-weighted
/// objective. The teacher is only read.
pub fn distill(
    teacher: &ModelParams,
    dataset: &[Session],
    cfg: &DistillRunConfig,
    student_init: ModelParams,
) -> Result<(ModelParams, RunRecord)> {
    cfg.validate()?;
    if !teacher.trained {
        return Err(Error::Input("teacher has not been trained".into()));
    }
    if student_init.arch != ArchTag::Student {
        return Err(Error::Input("distillation target must be tagged as a student".into()));
    }
    if !student_init.backbone.frozen {
        return Err(Error::Input("student backbone must be frozen".into()));
    }
    let items = train_frames(dataset);
    if items.is_empty() {
        return Err(Error::Input("dataset has no train split".into()));
    }
    let start = Instant::now();
    let unlabeled: Vec<bool> = dataset
        .iter()
        .map(|s| is_unlabeled(&s.id, cfg.unlabeled_fraction, cfg.seed))
        .collect();
    let mut student = student_init;
    student.head.active = cfg.distill.heads;
    let spec = LoopSpec {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: &cfg.optimizer,
        augment: &cfg.augment,
        seed: cfg.seed,
    };
    let curves = optimise_head(&mut student, dataset, &items, &spec, |item, frame, logits| {
        let teacher_logits = teacher.forward(frame.pixels())?.logits;
        let (loss, grad) = if unlabeled[item.session] {
            soft_distill_loss(logits, &teacher_logits, &cfg.distill)?
        } else {
            distill_loss(logits, &teacher_logits, Some(&dataset[item.session].labels), &cfg.distill)?
        };
        Ok(FrameLoss { loss, grad })
    })?;
    student.trained = true;
    let record = RunRecord {
        stage: Stage::Distill,
        config: serde_json::to_value(cfg)?,
        head_mask: cfg.distill.heads,
        epoch_losses: curves.epoch_losses,
        epoch_overall_losses: curves.epoch_overall,
        batch_overall_losses: curves.batch_overall,
        checkpoint: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        train_frames: items.len(),
        optimizer: Some(curves.state),
    };
    Ok((student, record))
}

/// Convergence statistics of one run's head-8 loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    /// First epoch (1-based) whose mean head-8 loss is at or below the threshold.
    pub epochs_to_threshold: Option<usize>,
    pub final_loss: f64,
    /// Sum of per-epoch head-8 losses.
    pub area: f64,
    /// Variance of the per-batch head-8 loss.
    pub batch_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub threshold: f64,
    pub v1: CurveStats,
    pub v2: CurveStats,
    /// V2 reaches the threshold earlier, or at the same epoch with a smaller
    /// area under its loss curve.
    pub v2_faster: bool,
    pub v2_more_stable: bool,
}

fn curve_stats(record: &RunRecord, threshold: f64) -> CurveStats {
    let b = &record.batch_overall_losses;
    let mean = b.iter().sum::<f64>() / b.len().max(1) as f64;
    CurveStats {
        epochs_to_threshold: record
            .epoch_overall_losses
            .iter()
            .position(|&l| l <= threshold)
            .map(|e| e + 1),
        final_loss: record.epoch_overall_losses.last().copied().unwrap_or(f64::NAN),
        area: record.epoch_overall_losses.iter().sum(),
        batch_variance: b.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / b.len().max(1) as f64,
    }
}

fn without_mask(config: &serde_json::Value) -> serde_json::Value {
    let mut c = config.clone();
    if let Some(obj) = c.as_object_mut() {
        obj.remove("head_mask");
    }
    c
}

/// Compare a binary-only and a multi-head run that share everything but the
/// head mask.
pub fn convergence_probe(v1: &RunRecord, v2: &RunRecord, threshold: f64) -> Result<ConvergenceReport> {
    if v1.stage != v2.stage || v1.seed != v2.seed || without_mask(&v1.config) != without_mask(&v2.config)
    {
        return Err(Error::Input("runs differ in more than the head mask".into()));
    }
    let s1 = curve_stats(v1, threshold);
    let s2 = curve_stats(v2, threshold);
    let rank = |s: &CurveStats| s.epochs_to_threshold.unwrap_or(usize::MAX);
    let v2_faster = rank(&s2) < rank(&s1) || (rank(&s2) == rank(&s1) && s2.area < s1.area);
    Ok(ConvergenceReport {
        threshold,
        v2_more_stable: s2.batch_variance < s1.batch_variance,
        v1: s1,
        v2: s2,
        v2_faster,
    })
}
