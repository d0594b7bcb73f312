//! The training loop.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::LabeledImages;
use crate::error::{Result, SagError};
use crate::model::TwoBranchModel;
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::augment::{augment, preprocess, AugmentConfig};
use super::config::{lr_at, TrainConfig};
use super::sgd::{sgd_step, OptimizerState};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Backbone rate; the classifier rate scales identically.
    pub lr: f64,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    pub train_accuracy: f64,
    /// Top-1 identity accuracy on the held-out images (NaN when none are held out).
    pub val_rank1: f64,
}

impl EpochLog {
    /// `epoch, lr, mean loss, train acc, val rank-1`, tab separated.
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.4}\t{:.4}",
            self.epoch, self.lr, self.loss, self.train_accuracy, self.val_rank1
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Snapshot with the highest validation rank-1, earliest on ties.
    pub best: TwoBranchModel<T>,
}

/// RNG for one sample's augmentation, fixed by `(seed, epoch, index)`.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 63 | (epoch as u64) << 32 | index as u64);
    rng
}

/// Training order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn class_labels<T>(set: &LabeledImages<T>, classes: usize) -> Result<Vec<usize>> {
    set.pids
        .iter()
        .map(|&p| {
            usize::try_from(p)
                .ok()
                .filter(|&l| l < classes)
                .ok_or(SagError::LabelOutOfRange { label: p.max(0) as usize, classes })
        })
        .collect()
}

/// Top-1 accuracy of eval-mode predictions.
pub fn classification_accuracy<T: Scalar>(
    model: &mut TwoBranchModel<T>,
    set: &LabeledImages<T>,
    mean: [f64; 3],
) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let labels = class_labels(set, model.config().num_classes)?;
    let (h, w) = (model.config().input_height, model.config().input_width);
    let mut correct = 0;
    for start in (0..set.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(set.len());
        let batch: Vec<Tensor<T>> =
            set.images[start..end].iter().map(|im| preprocess(im, mean, h, w)).collect::<Result<_>>()?;
        let logits = model.predict(&Tensor::stack(&batch)?)?;
        let k = logits.shape()[1];
        for (row, &y) in logits.data().chunks(k).zip(&labels[start..end]) {
            correct += usize::from(argmax(row) == y);
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains `model` in place; `on_epoch` sees each log entry as it is produced.
pub fn train<T: Scalar>(
    model: &mut TwoBranchModel<T>,
    train_set: &LabeledImages<T>,
    val_set: &LabeledImages<T>,
    mean: [f64; 3],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(SagError::EmptyDataset("no training images".into()));
    }
    let classes = model.config().num_classes;
    let labels = class_labels(train_set, classes)?;
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(SagError::EmptyDataset("training needs at least 2 identities".into()));
    }
    let (h, w) = (model.config().input_height, model.config().input_width);
    let aug = AugmentConfig::from(config);
    let mut state = OptimizerState::new(&model.store, config.momentum, config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, TwoBranchModel<T>)> = None;

    for epoch in 0..config.epochs {
        let rates = lr_at(config, epoch);
        let order = epoch_order(config.seed, epoch, train_set.len());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = sample_rng(config.seed, epoch, i);
                images.push(augment(&train_set.images[i], mean, h, w, &aug, &mut rng)?.image);
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(&images)?);
            let out = model.forward(&mut tape, x, Mode::Train)?;
            let ce = tape.cross_entropy(out.logits, &batch_labels)?;
            loss_sum += tape.value(ce).item().as_f64();
            let logits = tape.value(out.logits);
            for (row, &y) in logits.data().chunks(classes).zip(&batch_labels) {
                correct += usize::from(argmax(row) == y);
            }
            let loss = tape.scale(ce, T::lit(1.0 / chunk.len() as f64));
            tape.backward_into(loss, &mut model.store)?;
            sgd_step(&mut model.store, &mut state, rates);
        }
        let val_rank1 = classification_accuracy(model, val_set, mean)?;
        let entry = EpochLog {
            epoch,
            lr: rates.backbone,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_rank1,
        };
        on_epoch(&entry);
        let improved = match &best {
            None => true,
            Some((score, _, _)) => !val_rank1.is_nan() && (score.is_nan() || val_rank1 > *score),
        };
        if improved {
            best = Some((val_rank1, epoch, model.clone()));
        }
        log.push(entry);
    }
    let (best_epoch, best_model) = match best {
        // without validation images the final weights are kept
        Some((score, _, _)) if score.is_nan() => (config.epochs.saturating_sub(1), model.clone()),
        Some((_, e, m)) => (e, m),
        None => (0, model.clone()),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best: best_model,
    })
}
