//! Losses, optimizer and the training loop.

mod optim;
mod targets;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{augment, median_box_area, scale_amplifier, AnnotatedImage};
use crate::error::{Error, Result};
use crate::fpn::LEVELS;
use crate::heads::MASK_SIZE;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{images_to_tensor, DaSNet, ModelOutput};
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::Tensor;

pub use crate::autodiff::focal_loss;
pub use optim::{learning_rate, OptimizerState, BETA1, BETA2, EPSILON};
pub use targets::{
    assign_targets, build_targets, grid_size, mask_target, ImageTargets, LevelTargets, MaskTarget, Positive, Slot, TargetTensors,
    MIN_BOX_SIDE,
};

/// Running-statistic momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.9;

/// Graph nodes of the four loss terms and their weighted total.
#[derive(Copy, Clone, Debug)]
pub struct LossVars {
    pub focal: Var,
    pub box_loss: Var,
    pub mask: Var,
    pub semantic: Var,
    pub total: Var,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub focal: f64,
    pub box_loss: f64,
    pub mask: f64,
    pub semantic: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read(g: &Graph<'_, impl crate::tensor::Float>, v: &LossVars) -> Self {
        let f = |x: Var| g.value(x).item().as_f64();
        Self {
            focal: f(v.focal),
            box_loss: f(v.box_loss),
            mask: f(v.mask),
            semantic: f(v.semantic),
            total: f(v.total),
        }
    }

    fn add(&mut self, o: &Self) {
        self.focal += o.focal;
        self.box_loss += o.box_loss;
        self.mask += o.mask;
        self.semantic += o.semantic;
        self.total += o.total;
    }

    fn scale(&mut self, k: f64) {
        self.focal *= k;
        self.box_loss *= k;
        self.mask *= k;
        self.semantic *= k;
        self.total *= k;
    }
}

fn combine<T: crate::tensor::Float>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return g.input(Tensor::scalar(T::zero()));
    }
    let items: Vec<(Var, f64)> = terms.iter().map(|&v| (v, 1.0)).collect();
    g.weighted_sum(&items)
}

/// Focal loss over objectness/class logits normalized by the positive
/// count, smooth-L1 box loss averaged over positives, per-pixel mask
/// cross-entropy averaged over positive cells and pixels, and semantic
/// cross-entropy averaged over pixels.
pub fn compute_loss<T: crate::tensor::Float>(
    g: &mut Graph<T>,
    model: &DaSNet,
    out: &ModelOutput,
    targets: &TargetTensors,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let pos_norm = targets.positives.max(1) as f64;
    let mut focal_terms = Vec::with_capacity(LEVELS);
    let mut box_terms = Vec::with_capacity(LEVELS);
    let mut mask_terms = Vec::new();
    for (l, lt) in targets.levels.iter().enumerate() {
        let raw = &out.levels[l];
        focal_terms.push(g.focal_loss(raw.cls, lt.cls.clone(), cfg.focal_alpha, cfg.focal_gamma, pos_norm)?);
        box_terms.push(g.smooth_l1(raw.boxes, lt.boxes.clone(), pos_norm)?);
        if !lt.mask_cells.is_empty() {
            let logits = model.decode_masks(g, out, l, &lt.mask_cells)?;
            let norm = (targets.mask_cells * MASK_SIZE * MASK_SIZE) as f64;
            mask_terms.push(g.softmax_cross_entropy(logits, lt.mask_labels.clone(), norm)?);
        }
    }
    let focal = combine(g, &focal_terms)?;
    let box_loss = combine(g, &box_terms)?;
    let mask = combine(g, &mask_terms)?;
    let semantic = g.softmax_cross_entropy(out.semantic_logits, targets.semantic.clone(), targets.semantic.len() as f64)?;
    let w = &cfg.loss_weights;
    let total = g.weighted_sum(&[
        (focal, w.focal),
        (box_loss, w.box_regression),
        (mask, w.mask),
        (semantic, w.semantic),
    ])?;
    Ok(LossVars {
        focal,
        box_loss,
        mask,
        semantic,
        total,
    })
}

/// One optimization step on a prepared batch; returns the loss values
/// measured before the update.
pub fn train_step(
    model: &DaSNet,
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    batch: &[&AnnotatedImage],
    cfg: &TrainConfig,
) -> Result<LossValues> {
    let size = (model.input_size().1, model.input_size().0);
    let x = images_to_tensor(&batch.iter().map(|i| &i.rgb).collect::<Vec<_>>())?;
    let xs = x.shape();
    if (xs.w, xs.h) != size {
        return Err(Error::config(format!(
            "training images are {}x{}, model input is {}x{}",
            xs.w, xs.h, size.0, size.1
        )));
    }
    let targets = build_targets(batch, &model.anchors, size, cfg.ignore_iou);
    let (values, grads, bn) = {
        let mut g = Graph::new(store, Mode::Train);
        let input = g.input(x)?;
        let out = model.forward(&mut g, input)?;
        let loss = compute_loss(&mut g, model, &out, &targets, cfg)?;
        let values = LossValues::read(&g, &loss);
        let grads = g.backward(loss.total)?;
        (values, grads, g.take_bn_updates())
    };
    store.zero_grad();
    grads.accumulate_into(store);
    drop(grads);
    opt.adam_step(store)?;
    for u in bn {
        store.blend_buffer(u.running_mean, &u.mean, BN_MOMENTUM);
        store.blend_buffer(u.running_var, &u.var, BN_MOMENTUM);
    }
    Ok(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub f1: f64,
    pub instance_miou: f64,
    pub semantic_miou_branch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    /// Mean over the epoch's batches.
    pub loss: LossValues,
    pub validation: Option<ValidationSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub parameter_count: usize,
    pub weights_bytes: usize,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub best_validation: Option<EvalReport>,
}

impl TrainingReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
    pub validation_f1: Option<f64>,
}

fn save_checkpoint(dir: &Path, stem: &str, store: &ParamStore, state: &TrainingState) -> Result<()> {
    store.save(&dir.join(format!("{stem}.weights")))?;
    let path = dir.join(format!("{stem}.state.json"));
    fs::write(&path, serde_json::to_string_pretty(state).expect("state serializes")).map_err(|e| Error::io(&path, e))
}

/// Training sample `index` of `epoch` after augmentation.
pub fn prepare_sample(img: &AnnotatedImage, cfg: &TrainConfig, epoch: usize, index: usize, median_area: f64) -> AnnotatedImage {
    let s = seed::derive(seed::derive(cfg.seed, epoch as u64 + 1), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let mut out = augment(img, rng.random(), &cfg.augment);
    let amplify = cfg.augment.scale_amplifier && rng.random_bool(cfg.augment.amplifier_probability);
    if amplify {
        out = scale_amplifier(&out, rng.random(), median_area);
    }
    out
}

/// Run inference over `images` in batches.
pub fn evaluate_model(model: &DaSNet, store: &ParamStore, images: &[AnnotatedImage], cfg: &RunConfig) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(cfg.train.batch) {
        let x = images_to_tensor(&chunk.iter().map(|i| &i.rgb).collect::<Vec<_>>())?;
        preds.extend(model.predict(store, x, &cfg.eval)?);
    }
    evaluate(&preds, images, cfg.eval.match_iou)
}

/// Train `store` in place. With a validation set the best epoch by F1 is
/// restored at the end; otherwise the last weights are kept. When
/// `checkpoint_dir` is given, `last.*` and `best.*` checkpoints are
/// written there after each epoch.
pub fn fit(
    model: &DaSNet,
    store: &mut ParamStore,
    train: &[AnnotatedImage],
    val: &[AnnotatedImage],
    cfg: &RunConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainingReport> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let tc = &cfg.train;
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let median_area = median_box_area(train);
    let mut opt = OptimizerState::new(store, tc.lr, tc.decay);
    let mut report = TrainingReport {
        parameter_count: store.parameter_count(),
        weights_bytes: store.serialized_size(),
        epochs: Vec::with_capacity(tc.epochs),
        best_epoch: None,
        best_validation: None,
    };
    log::info!("{} parameters, {} bytes of weights", report.parameter_count, report.weights_bytes);
    let mut best_store: Option<ParamStore> = None;
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        opt.set_epoch(tc.lr, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(tc.seed, u64::MAX - epoch as u64)));
        let mut sum = LossValues::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(tc.batch).enumerate() {
            let samples: Vec<AnnotatedImage> = chunk
                .iter()
                .map(|&i| prepare_sample(&train[i], tc, epoch, i, median_area))
                .collect();
            let refs: Vec<&AnnotatedImage> = samples.iter().collect();
            let values = train_step(model, store, &mut opt, &refs, tc).map_err(|e| match e {
                Error::Numeric { op } => Error::Diverged {
                    epoch,
                    batch: b,
                    cause: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            sum.add(&values);
            batches += 1;
        }
        sum.scale(1.0 / batches as f64);
        let mut stats = EpochStats {
            epoch,
            lr: opt.lr,
            batches,
            loss: sum,
            validation: None,
        };
        let mut improved = false;
        if !val.is_empty() {
            let ev = evaluate_model(model, store, val, cfg)?;
            stats.validation = Some(ValidationSummary {
                f1: ev.f1,
                instance_miou: ev.instance_miou,
                semantic_miou_branch: ev.semantic_miou_branch,
            });
            if report.best_validation.as_ref().is_none_or(|b| ev.f1 > b.f1) {
                improved = true;
                report.best_epoch = Some(epoch);
                report.best_validation = Some(ev);
                best_store = Some(store.clone());
            }
        }
        log::info!(
            "epoch {epoch}: lr {:.5} loss {:.4} (focal {:.4} box {:.4} mask {:.4} semantic {:.4}){} in {:.1}s",
            stats.lr,
            stats.loss.total,
            stats.loss.focal,
            stats.loss.box_loss,
            stats.loss.mask,
            stats.loss.semantic,
            stats
                .validation
                .as_ref()
                .map(|v| format!(
                    ", val F1 {:.3} inst MIoU {:.3} branch MIoU {:.3}",
                    v.f1, v.instance_miou, v.semantic_miou_branch
                ))
                .unwrap_or_default(),
            started.elapsed().as_secs_f64()
        );
        if let Some(dir) = checkpoint_dir {
            let state = TrainingState {
                epoch,
                lr: stats.lr,
                seed: tc.seed,
                validation_f1: stats.validation.as_ref().map(|v| v.f1),
            };
            save_checkpoint(dir, "last", store, &state)?;
            if improved {
                save_checkpoint(dir, "best", store, &state)?;
            }
        }
        report.epochs.push(stats);
    }
    if let Some(best) = best_store {
        *store = best;
    }
    Ok(report)
}
