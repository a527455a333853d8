//! Optimization: schedules, SGD with LookAhead, captioning pretraining and
//! downstream transfer.

mod optim;
mod task;

pub use optim::{LookAhead, Optimizer, Schedule};
pub use task::{evaluate, stratified_subset, Evaluation, Targets, Task};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{apply_bn_updates, images_to_tensor, BackboneConfig, BnMode, BnUpdate, HeadKind, Model, ModelConfig};
use crate::prelude::*;
use crate::synthdata::{augment, AugmentParams, GrayImage};
use crate::tensor::{log_softmax_row, sigmoid, Tape, Tensor, Var};
use crate::{Error, Result};

/// What a run trains and from where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Bidirectional captioning on image/report pairs.
    Pretrain,
    /// Decision head only, on a pretrained backbone.
    TransferFrozen,
    /// Whole network, starting from a pretrained backbone.
    TransferUnfrozen,
    /// Whole network from random initialization.
    Scratch,
}

impl Mode {
    pub const DOWNSTREAM: [Mode; 3] = [Mode::Scratch, Mode::TransferFrozen, Mode::TransferUnfrozen];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::TransferFrozen => "frozen",
            Mode::TransferUnfrozen => "unfrozen",
            Mode::Scratch => "scratch",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Mode::TransferFrozen | Mode::TransferUnfrozen)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Caption,
    BinaryCe,
    MulticlassCe,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lookahead: Option<LookAhead>,
    pub loss: LossKind,
    pub augment: AugmentParams,
    pub seed: u64,
}

impl RunSpec {
    /// Desk-scale defaults for `mode`. Downstream runs default to the
    /// binary (multi-label) loss.
    pub fn for_mode(mode: Mode) -> Self {
        let base = Self {
            mode,
            epochs: 20,
            batch_size: 16,
            max_lr: 2e-2,
            warmup_fraction: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            lookahead: None,
            loss: LossKind::BinaryCe,
            augment: AugmentParams::NONE,
            seed: 0,
        };
        match mode {
            Mode::Pretrain => Self {
                epochs: 30,
                max_lr: 5e-2,
                weight_decay: 1e-4,
                lookahead: Some(LookAhead::default()),
                loss: LossKind::Caption,
                augment: AugmentParams::default(),
                ..base
            },
            Mode::TransferFrozen => base,
            Mode::TransferUnfrozen => Self { max_lr: 2e-3, ..base },
            Mode::Scratch => Self { epochs: 50, max_lr: 2e-1, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let loss_ok = match self.mode {
            Mode::Pretrain => self.loss == LossKind::Caption,
            _ => self.loss != LossKind::Caption,
        };
        if !loss_ok {
            return Err(Error::Config(format!("loss {:?} does not fit mode {:?}", self.loss, self.mode)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr must be finite and non-negative, got {}", self.max_lr)));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be non-negative".into()));
        }
        if let Some(la) = self.lookahead {
            if la.k == 0 || !(0.0..=1.0).contains(&la.alpha) {
                return Err(Error::Config(format!("lookahead needs k >= 1 and alpha in [0, 1], got {la:?}")));
            }
        }
        if !(self.augment.rotation >= 0.0 && self.augment.translation >= 0.0) {
            return Err(Error::Config("augmentation ranges must be non-negative".into()));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

const SHUFFLE_STREAM: u64 = 10;
const AUGMENT_STREAM: u64 = 11;
const DROPOUT_STREAM: u64 = 12;

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Mean loss of each epoch in a step log.
pub fn epoch_means(log: &[LossRecord]) -> Vec<f64> {
    let epochs = log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); epochs];
    for r in log {
        sums[r.epoch].0 += r.loss;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

/// Shared loop: shuffled mini-batches, one optimizer step each.
struct Loop<'s> {
    spec: &'s RunSpec,
    schedule: Schedule,
    optimizer: Optimizer,
    shuffle: ChaCha8Rng,
    step: usize,
    log: Vec<LossRecord>,
}

impl<'s> Loop<'s> {
    fn new(spec: &'s RunSpec, model: &Model, n: usize) -> Result<Self> {
        spec.validate()?;
        if n == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let total = spec.epochs * spec.steps_per_epoch(n);
        Ok(Self {
            spec,
            schedule: Schedule::new(spec.max_lr, total, spec.warmup_fraction)?,
            optimizer: Optimizer::new(model.store(), spec.momentum, spec.weight_decay, spec.lookahead)?,
            shuffle: spec.rng(SHUFFLE_STREAM),
            step: 0,
            log: Vec::with_capacity(total),
        })
    }

    fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle);
        order.chunks(self.spec.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Applies gradients already accumulated in the store.
    fn update(
        &mut self,
        model: &mut Model,
        epoch: usize,
        loss: f64,
        updates: &[BnUpdate],
        progress: &mut dyn FnMut(&LossRecord),
    ) -> Result<()> {
        let lr = self.schedule.lr_at(self.step)?;
        self.optimizer.step(model.store_mut(), lr)?;
        model.store_mut().zero_grad();
        let momentum = model.config().backbone.bn_momentum;
        apply_bn_updates(model.store_mut(), updates, momentum);
        let record = LossRecord { epoch, step: self.step, lr, loss };
        progress(&record);
        self.log.push(record);
        self.step += 1;
        Ok(())
    }
}

fn batch_images(images: &[&GrayImage], idx: &[usize], params: &AugmentParams, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if *params == AugmentParams::NONE {
        let batch: Vec<&GrayImage> = idx.iter().map(|&i| images[i]).collect();
        return images_to_tensor(&batch);
    }
    let augmented: Vec<GrayImage> = idx.iter().map(|&i| augment(images[i], params, rng)).collect();
    images_to_tensor(&augmented.iter().collect::<Vec<_>>())
}

/// Bidirectional captioning pretraining on `images` paired with token
/// `captions`. Returns the per-step loss log.
pub fn pretrain(
    model: &mut Model,
    spec: &RunSpec,
    images: &[&GrayImage],
    captions: &[Vec<usize>],
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if spec.mode != Mode::Pretrain {
        return Err(Error::Config(format!("pretrain needs mode pretrain, got {:?}", spec.mode)));
    }
    if images.len() != captions.len() {
        return Err(Error::Config(format!("{} images but {} captions", images.len(), captions.len())));
    }
    model.textual()?;
    let mut lp = Loop::new(spec, model, images.len())?;
    let mut aug_rng = spec.rng(AUGMENT_STREAM);
    let mut drop_rng = spec.rng(DROPOUT_STREAM);
    for epoch in 0..spec.epochs {
        for idx in lp.epoch_batches(images.len()) {
            let x = batch_images(images, &idx, &spec.augment, &mut aug_rng)?;
            let caps: Vec<Vec<usize>> = idx.iter().map(|&i| captions[i].clone()).collect();
            let mut updates = Vec::new();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let rng: &mut dyn RngCore = &mut drop_rng;
                let l = model.caption_loss(&mut tape, xv, &caps, BnMode::Train, Some(rng), &mut updates)?;
                let loss = f64::from(tape.value(l).data()[0]);
                (loss, tape.backward(l)?)
            };
            model.store_mut().accumulate(&grads);
            lp.update(model, epoch, loss, &updates, progress)?;
        }
    }
    Ok(lp.log)
}

/// Classifier for a downstream run: a fresh decision head on a backbone
/// either loaded from `checkpoint` or randomly initialized (scratch).
pub fn transfer_model(
    mode: Mode,
    backbone: &BackboneConfig,
    task: &Task,
    checkpoint: Option<&[u8]>,
    seed: u64,
) -> Result<Model> {
    let mut model = Model::new(ModelConfig::classifier(backbone.clone(), task.head()), seed)?;
    match (mode, checkpoint) {
        (Mode::Pretrain, _) => return Err(Error::Config("pretrain is not a downstream mode".into())),
        (Mode::Scratch, Some(_)) => return Err(Error::Config("scratch mode takes no checkpoint".into())),
        (Mode::Scratch, None) => {}
        (m, None) => return Err(Error::Config(format!("{} mode needs an initial checkpoint", m.name()))),
        (_, Some(bytes)) => model.load_backbone(bytes)?,
    }
    model.set_backbone_trainable(mode != Mode::TransferFrozen);
    Ok(model)
}

const EVAL_BATCH: usize = 64;

/// Pooled backbone features `[n, C]` with frozen batch-norm statistics.
pub fn pooled_features(model: &Model, images: &[&GrayImage]) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in images.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let x = tape.constant(images_to_tensor(chunk)?);
        let f = model.pooled_features(&mut tape, x, BnMode::Eval)?;
        width = tape.shape(f)[1];
        rows.extend_from_slice(tape.value(f).data());
    }
    Tensor::new(&[images.len(), width], rows)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(&[idx.len(), w], data)
}

fn head_loss<'a>(tape: &mut Tape<'a>, logits: Var, targets: &Targets, idx: &[usize]) -> Result<Var> {
    match targets {
        Targets::MultiLabel(rows) => {
            let flat: Vec<f64> = idx.iter().flat_map(|&i| rows[i].iter().copied()).collect();
            tape.bce_with_logits(logits, &flat)
        }
        Targets::Classes(classes) => {
            let picked: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
            tape.softmax_cross_entropy(logits, &picked, None)
        }
    }
}

/// Trains a classifier from [`transfer_model`] on `images` and `targets`.
///
/// In frozen mode the backbone (running statistics included) is fixed, so
/// pooled features are computed once and only the head is optimized.
pub fn transfer(
    model: &mut Model,
    spec: &RunSpec,
    images: &[&GrayImage],
    targets: &Targets,
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if spec.mode == Mode::Pretrain {
        return Err(Error::Config("transfer needs a downstream mode".into()));
    }
    let head = model
        .config()
        .classifier
        .clone()
        .ok_or_else(|| Error::Config("model has no decision head".into()))?;
    let expected = match head.kind {
        HeadKind::MultiLabel => LossKind::BinaryCe,
        HeadKind::MultiClass => LossKind::MulticlassCe,
    };
    if spec.loss != expected || targets.loss() != expected {
        return Err(Error::Config(format!("loss {:?} does not fit a {:?} head", spec.loss, head.kind)));
    }
    targets.check(images.len(), head.outputs)?;
    let frozen = spec.mode == Mode::TransferFrozen;
    model.set_backbone_trainable(!frozen);
    let mut lp = Loop::new(spec, model, images.len())?;
    let mut aug_rng = spec.rng(AUGMENT_STREAM);
    let cached = match frozen && spec.augment == AugmentParams::NONE {
        true => Some(pooled_features(model, images)?),
        false => None,
    };
    for epoch in 0..spec.epochs {
        for idx in lp.epoch_batches(images.len()) {
            let mut updates = Vec::new();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let logits = match &cached {
                    Some(features) => {
                        let pooled = tape.constant(gather_rows(features, &idx)?);
                        model.head_logits(&mut tape, pooled)?
                    }
                    None => {
                        let x = tape.constant(batch_images(images, &idx, &spec.augment, &mut aug_rng)?);
                        let mode = if frozen { BnMode::Eval } else { BnMode::Train };
                        model.classify(&mut tape, x, mode, &mut updates)?
                    }
                };
                let l = head_loss(&mut tape, logits, targets, &idx)?;
                let loss = f64::from(tape.value(l).data()[0]);
                (loss, tape.backward(l)?)
            };
            model.store_mut().accumulate(&grads);
            lp.update(model, epoch, loss, &updates, progress)?;
        }
    }
    Ok(lp.log)
}

/// Class scores per image: sigmoid probabilities for multi-label heads,
/// softmax probabilities for multiclass heads.
pub fn predict(model: &Model, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
    let head = model
        .config()
        .classifier
        .clone()
        .ok_or_else(|| Error::Config("model has no decision head".into()))?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let x = tape.constant(images_to_tensor(chunk)?);
        let logits = model.classify(&mut tape, x, BnMode::Eval, &mut Vec::new())?;
        for row in tape.value(logits).data().chunks(head.outputs) {
            let row: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            out.push(match head.kind {
                HeadKind::MultiLabel => row.iter().map(|&z| sigmoid(z)).collect(),
                HeadKind::MultiClass => log_softmax_row(&row).into_iter().map(f64::exp).collect(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
