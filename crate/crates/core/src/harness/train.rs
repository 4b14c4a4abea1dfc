//! The training protocol.
//!
//! The lower bound model trains on labeled source patches with the Dice
//! loss for `epochs_lower` epochs. Upper bound models and semi-supervised
//! models both resume from the lower bound checkpoint at `branch_epoch`:
//! the upper bound continues on mixed labeled source+target data, the
//! semi-supervised model continues on labeled source data plus a weighted
//! pairwise embedding loss over pixels sampled from source and target
//! feature maps, with similarity given by a prior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{gather_items, DomainDataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::graph::{sgd_step, Graph};
use crate::harness::config::ExperimentConfig;
use crate::harness::loader::{mixed_batches, supervised_batches, union_batches};
use crate::model::{Model, ModelConfig};
use crate::sampler::{build_adjacency, gather, sample_positions};
use crate::tensor::Tensor4;

const STREAM_MODEL_INIT: u64 = 1;
const STREAM_RFE: u64 = 7;

/// A full lower-bound training run: one checkpoint per epoch (index e holds
/// the model after epoch e+1) and the mean batch loss per epoch.
pub struct TrainRun {
    pub checkpoints: Vec<Model>,
    pub epoch_loss: Vec<f32>,
}

impl TrainRun {
    /// Checkpoint after `epoch` (1-based).
    pub fn at_epoch(&self, epoch: usize) -> Result<&Model> {
        self.checkpoints
            .get(epoch.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("no checkpoint for epoch {epoch}")))
    }

    pub fn final_model(&self) -> &Model {
        self.checkpoints.last().expect("at least one epoch")
    }
}

/// One supervised step: Dice loss on a labeled batch, SGD update.
/// Returns the batch loss.
pub fn dice_training_step(model: &mut Model, batch: Tensor4, labels: &Tensor4, lr: f32, eps: f32) -> Result<f32> {
    let mut graph = Graph::new();
    let nodes = model.forward_on(&mut graph, batch)?;
    let probs = graph.sigmoid(nodes.logits);
    let loss = graph.dice(probs, labels, eps)?;
    let grads = graph.backward(loss)?.params(&graph);
    sgd_step(model.params_mut(), &grads, lr)?;
    Ok(graph.value(loss).data()[0])
}

/// Supervised training on the source domain only, from a fresh model.
pub fn train_lower_bound(cfg: &ExperimentConfig, source: &DomainDataset, seed: u64) -> Result<TrainRun> {
    if source.train_idx.is_empty() {
        return Err(Error::InvalidArgument("source dataset has no training patches".into()));
    }
    let model_cfg = ModelConfig {
        seed: derive_seed(seed, &[STREAM_MODEL_INIT]),
        ..ModelConfig::default()
    };
    let mut model = Model::build(model_cfg)?;
    let eps = cfg.epsilon as f32;
    let mut checkpoints = Vec::with_capacity(cfg.epochs_lower);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs_lower);
    for epoch in 1..=cfg.epochs_lower {
        let mut total = 0.0f32;
        let batches = supervised_batches(source.train_idx.len(), cfg.batch_size, seed, epoch);
        if batches.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "not enough training patches ({}) for one batch of {}",
                source.train_idx.len(),
                cfg.batch_size
            )));
        }
        for batch in &batches {
            let idxs: Vec<usize> = batch.iter().map(|&i| source.train_idx[i]).collect();
            let (x, y) = source.batch(&idxs)?;
            total += dice_training_step(&mut model, x, &y, cfg.lr, eps)?;
        }
        epoch_loss.push(total / batches.len() as f32);
        checkpoints.push(model.clone());
    }
    Ok(TrainRun { checkpoints, epoch_loss })
}

/// Lower bounds for several seeds, in parallel (runs are independent).
pub fn train_lower_bounds(cfg: &ExperimentConfig, source: &DomainDataset, seeds: &[u64]) -> Result<Vec<TrainRun>> {
    seeds
        .par_iter()
        .map(|&seed| train_lower_bound(cfg, source, seed))
        .collect()
}

/// Fine-tunes the branch checkpoint on the union of labeled source and
/// labeled target patches (epochs `branch_epoch+1 ..= epochs_lower`).
pub fn train_upper_bound(
    cfg: &ExperimentConfig,
    branch: &Model,
    source: &DomainDataset,
    target: &DomainDataset,
    seed: u64,
) -> Result<Model> {
    let mut model = branch.clone();
    let eps = cfg.epsilon as f32;
    for epoch in cfg.branch_epoch + 1..=cfg.epochs_lower {
        let batches = union_batches(source.train_idx.len(), target.train_idx.len(), cfg.batch_size, seed, epoch);
        if batches.is_empty() {
            return Err(Error::InvalidArgument("not enough patches for one mixed batch".into()));
        }
        for batch in &batches {
            let mut xs = Vec::with_capacity(batch.len());
            let mut ys = Vec::with_capacity(batch.len());
            for item in batch {
                let (ds, pool) = if item.is_target {
                    (target, &target.train_idx)
                } else {
                    (source, &source.train_idx)
                };
                let idx = pool[item.index];
                xs.push(gather_items(&ds.patches, &[idx])?);
                ys.push(gather_items(&ds.labels, &[idx])?);
            }
            let x = Tensor4::concat_batch(&xs.iter().collect::<Vec<_>>())?;
            let y = Tensor4::concat_batch(&ys.iter().collect::<Vec<_>>())?;
            dice_training_step(&mut model, x, &y, cfg.lr, eps)?;
        }
    }
    Ok(model)
}

/// Which prior labels the sampled target pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    /// Ground-truth labels (proof-of-concept upper limit for the prior).
    Perfect,
    /// Template-matching pseudo-labels; ground truth is never read.
    Ncc,
}

impl PriorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PriorKind::Perfect => "perfect",
            PriorKind::Ncc => "ncc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(PriorKind::Perfect),
            "ncc" => Ok(PriorKind::Ncc),
            other => Err(Error::Config(format!("unknown prior kind {other:?} (expected perfect or ncc)"))),
        }
    }
}

/// Target-domain material for semi-supervised fine-tuning: patches, the
/// prior maps that label them, and the patch indices eligible for training.
/// Ground truth enters only when the caller chooses the perfect prior.
pub struct TargetSet {
    pub patches: Tensor4,
    pub priors: Tensor4,
    pub usable: Vec<usize>,
}

impl TargetSet {
    /// Perfect prior: the target's own labels over its training split.
    pub fn perfect(target: &DomainDataset) -> TargetSet {
        TargetSet {
            patches: target.patches.clone(),
            priors: target.labels.clone(),
            usable: target.train_idx.clone(),
        }
    }

    /// Noisy prior: pseudo-label patches aligned with the target patches,
    /// restricted to the given usable indices (patches from images the
    /// template source was not drawn from).
    pub fn noisy(target: &DomainDataset, prior_patches: Tensor4, usable: Vec<usize>) -> Result<TargetSet> {
        if prior_patches.n() != target.patches.n() {
            return Err(Error::shape(
                "noisy prior patches",
                format!("{} patches", target.patches.n()),
                format!("{}", prior_patches.n()),
            ));
        }
        Ok(TargetSet {
            patches: target.patches.clone(),
            priors: prior_patches,
            usable,
        })
    }
}

/// One semi-supervised step on a mixed batch (first half labeled source,
/// second half unlabeled target): Dice on the source half plus
/// `lambda * embedding loss` over pixels sampled from the whole batch with
/// similarity from the prior. With `lambda = 0` the embedding machinery is
/// skipped entirely and the step reduces to supervised Dice training on
/// the source half.
#[allow(clippy::too_many_arguments)]
pub fn semi_supervised_step(
    model: &mut Model,
    cfg: &ExperimentConfig,
    source_batch: Tensor4,
    source_labels: &Tensor4,
    target_batch: Tensor4,
    target_priors: &Tensor4,
    step_seed: u64,
) -> Result<f32> {
    let half = source_batch.n();
    let x = Tensor4::concat_batch(&[&source_batch, &target_batch])?;
    let mut graph = Graph::new();
    let nodes = model.forward_on(&mut graph, x)?;
    let probs = graph.sigmoid(nodes.logits);
    let source_probs = graph.slice_batch(probs, 0, half)?;
    let eps = cfg.epsilon as f32;
    let dice = graph.dice(source_probs, source_labels, eps)?;
    let loss_cfg = cfg.loss_config();
    let total = if loss_cfg.lambda > 0.0 {
        let prior = Tensor4::concat_batch(&[source_labels, target_priors])?;
        let strategy = cfg.sampling_strategy()?;
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let positions = sample_positions(&prior, &strategy, &mut rng)?;
        let samples = gather(graph.value(nodes.embed), &prior, &positions)?;
        let labels: Vec<u8> = samples.iter().map(|s| s.prior_label).collect();
        let adjacency = build_adjacency(&samples)?;
        let embed_loss = graph.embedding(nodes.embed, positions, labels, &adjacency, &loss_cfg)?;
        let weighted = graph.scale(embed_loss, loss_cfg.lambda as f32);
        graph.add(dice, weighted)?
    } else {
        dice
    };
    let grads = graph.backward(total)?.params(&graph);
    sgd_step(model.params_mut(), &grads, cfg.lr)?;
    Ok(graph.value(total).data()[0])
}

/// Fine-tunes the branch checkpoint with the combined objective
/// (epochs `branch_epoch+1 ..= epochs_lower`).
pub fn finetune_semisupervised(
    cfg: &ExperimentConfig,
    branch: &Model,
    source: &DomainDataset,
    target: &TargetSet,
    seed: u64,
) -> Result<Model> {
    if target.usable.is_empty() {
        return Err(Error::InvalidArgument("target set has no usable patches".into()));
    }
    let mut model = branch.clone();
    for epoch in cfg.branch_epoch + 1..=cfg.epochs_lower {
        let batches = mixed_batches(source.train_idx.len(), target.usable.len(), cfg.batch_size, seed, epoch);
        if batches.is_empty() {
            return Err(Error::InvalidArgument("not enough patches for one mixed batch".into()));
        }
        for (step, batch) in batches.iter().enumerate() {
            let source_idx: Vec<usize> = batch.source.iter().map(|&i| source.train_idx[i]).collect();
            let target_idx: Vec<usize> = batch.target.iter().map(|&i| target.usable[i]).collect();
            let (sx, sy) = source.batch(&source_idx)?;
            let tx = gather_items(&target.patches, &target_idx)?;
            let tp = gather_items(&target.priors, &target_idx)?;
            let step_seed = derive_seed(seed, &[STREAM_RFE, epoch as u64, step as u64]);
            semi_supervised_step(&mut model, cfg, sx, &sy, tx, &tp, step_seed)?;
        }
    }
    Ok(model)
}
