//! One lifelong training step: identity-balanced batches, augmentation,
//! identity loss over a fresh per-domain classifier, the warmup/decay
//! schedule, and snapshot capture at the end. Only BN affines, adaption
//! kernels, the neck, and the classifier receive updates; conv kernels stay
//! frozen.

pub mod augment;
pub mod config;
pub mod loss;
pub mod sampler;

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneGraph;
use crate::bank::snapshot::{snapshot_capture, DomainSnapshot};
use crate::data::{record_to_tensor, stack_batch, DatasetSpec};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

pub use augment::{augment, augment_traced, sample_erase_rect, AugTrace, EraseRect};
pub use config::{lr_at_epoch, AugmentConfig, TrainConfig};
pub use loss::{id_loss, id_loss_from_logits, ClassifierHead, IdLossResult};
pub use sampler::pk_sample_epoch;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

pub struct TrainOutcome {
    pub snapshot: DomainSnapshot,
    pub epochs: Vec<EpochStats>,
    /// The trained per-domain head; discarded by the lifelong pipeline once
    /// the snapshot is captured.
    pub head: ClassifierHead,
    /// Values the optimizer touched, for the trainable-set invariant.
    pub optimizer_inventory: usize,
}

pub(crate) fn derive_seed(base: u64, tag: &str, extra: u64) -> u64 {
    let mut acc = base ^ 0xD6E8_FEB8_6659_FD93;
    for b in tag.bytes() {
        acc = acc.rotate_left(7) ^ b as u64;
        acc = acc.wrapping_mul(0x100_0000_01B3);
    }
    acc ^ extra.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Pre-decode and resize every train image once.
pub(crate) fn prepare_tensors(
    dataset: &DatasetSpec,
    h: usize,
    w: usize,
) -> Result<Vec<Array3<f32>>> {
    dataset
        .train
        .iter()
        .map(|r| record_to_tensor(r, h, w))
        .collect()
}

/// Train the graph on one domain and capture its snapshot. Forward transfer
/// (or the base-case reset) must already have been applied to the graph.
pub fn train_domain(
    graph: &mut BackboneGraph,
    dataset: &DatasetSpec,
    cfg: &TrainConfig,
    is_first_domain: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyTrainSet(dataset.name.clone()));
    }
    let tensors = prepare_tensors(dataset, cfg.input_height, cfg.input_width)?;
    let labels = dataset.train_labels();
    let d = graph.feature_dim();
    let mut head = ClassifierHead::new(
        dataset.n_train_ids,
        d,
        derive_seed(cfg.seed, "head", dataset.name.len() as u64),
    );
    let mut opt = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay as f32,
        ..AdamConfig::default()
    });
    let mut rng_sampler =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sampler", dataset.name.len() as u64));
    let mut rng_aug =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "augment", dataset.name.len() as u64));

    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg, is_first_domain);
        opt.set_lr(lr as f32);
        let batches =
            pk_sample_epoch(&labels, cfg.batch_size, cfg.instances_per_id, &mut rng_sampler);
        let mut loss_acc = 0.0;
        let mut acc_acc = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let views: Vec<Array3<f32>> = batch
                .iter()
                .map(|&i| {
                    if cfg.augment.any() {
                        augment(&tensors[i], &cfg.augment, &mut rng_aug)
                    } else {
                        tensors[i].clone()
                    }
                })
                .collect();
            let x = stack_batch(&views);
            let batch_labels: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();

            let (features, tape) = graph.forward_train(&x.view(), false)?;
            let logits = head.logits(&features.view());
            let result = id_loss_from_logits(&logits.view(), &batch_labels, cfg.label_smoothing)?;
            if !result.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss: result.loss,
                });
            }
            let grad_w = result.grad_logits.t().dot(&features);
            let grad_features = result.grad_logits.dot(&head.weight);
            let grads = graph.backward(tape, &grad_features.view(), false)?;
            graph.apply_gradients(&mut opt, &grads, false);
            opt.step(
                "classifier.weight",
                head.weight.as_slice_mut().expect("contiguous"),
                grad_w.as_slice().expect("contiguous"),
            );

            loss_acc += result.loss * batch.len() as f64;
            acc_acc += result.accuracy * batch.len() as f64;
            seen += batch.len();
        }
        let denom = seen.max(1) as f64;
        epochs.push(EpochStats {
            epoch,
            lr,
            loss: loss_acc / denom,
            accuracy: acc_acc / denom,
        });
    }

    let snapshot = snapshot_capture(graph, &dataset.name, 0, &dataset.cameras);
    Ok(TrainOutcome {
        snapshot,
        epochs,
        head,
        optimizer_inventory: opt.inventory_size(),
    })
}
