//! Training loop, evaluation and hyperparameter grid search.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::data::Dataset;
use crate::model::{argmax_rows, Input, Model};
use crate::selector::accuracy;
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::cache::FeatureCache;
use crate::train::optim::{cosine_lr, Adam};

pub const DEFAULT_BATCH: usize = 64;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub wd: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Stops early after this many steps; also the schedule horizon.
    pub max_steps: Option<usize>,
}

impl Hyper {
    pub fn new(lr: f64, wd: f64, epochs: usize) -> Self {
        Hyper {
            lr,
            wd,
            epochs,
            batch: DEFAULT_BATCH,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitStats {
    pub steps: usize,
    pub last_loss: f64,
}

fn input<'a>(cache: Option<&'a FeatureCache>, idx: &'a [usize], refs: &'a [&'a Tensor]) -> Input<'a> {
    match cache {
        Some(cache) => Input::Cached { cache, idx },
        None => Input::Images(refs),
    }
}

/// Trains `model` in place with Adam on the samples `idx` of `data`. With a
/// cache, indices refer to cache rows, which must follow `data`'s order.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    idx: &[usize],
    cache: Option<&FeatureCache>,
    hp: &Hyper,
    seed: u64,
) -> Result<FitStats> {
    if idx.is_empty() || hp.batch == 0 {
        return Err(TensorError::Contract("nothing to train on".into()));
    }
    let per_epoch = idx.len().div_ceil(hp.batch);
    let horizon = hp.max_steps.unwrap_or(per_epoch.saturating_mul(hp.epochs));
    let frozen_backbone = !model.strategy().modifies_features();
    let mut adam = Adam::new(&model.trainable_shapes(), hp.wd);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = idx.to_vec();
    let mut stats = FitStats {
        steps: 0,
        last_loss: f64::NAN,
    };
    'outer: for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch) {
            if stats.steps >= horizon {
                break 'outer;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let refs = if cache.is_some() { Vec::new() } else { data.image_refs(chunk) };
            let (g, bound, _, loss) = model.loss_graph(input(cache, chunk, &refs), &labels)?;
            let mut grads = g.backward(loss)?;
            if frozen_backbone {
                check_frozen(&bound.backbone, &grads)?;
            }
            let lr = cosine_lr(hp.lr, stats.steps, horizon);
            let gs: Vec<Option<Tensor>> = bound.trainable.iter().map(|&id| grads.take(id)).collect();
            adam.begin();
            let mut i = 0;
            let mut err = Ok(());
            model.visit_trainable_mut(|p| {
                if err.is_ok() {
                    err = adam.update(i, p, gs[i].as_ref(), lr);
                }
                i += 1;
            });
            err?;
            adam.finish(i)?;
            stats.steps += 1;
            stats.last_loss = g.value(loss).item();
            if !stats.last_loss.is_finite() {
                return Err(TensorError::NonFinite { op: "training loss" });
            }
        }
    }
    let mut finite = true;
    model.visit_trainable_mut(|p| finite &= p.all_finite());
    if !finite {
        return Err(TensorError::NonFinite { op: "parameters" });
    }
    Ok(stats)
}

/// Fails if any backbone leaf received a gradient.
fn check_frozen(backbone: &crate::vit::ViTParams<NodeId>, grads: &crate::autodiff::Gradients) -> Result<()> {
    let mut leaked = None;
    backbone.visit(|name, &id| {
        if leaked.is_none() && grads.contains(id) {
            leaked = Some(name);
        }
    });
    match leaked {
        Some(name) => Err(TensorError::Contract(format!("frozen backbone weight {name} received a gradient"))),
        None => Ok(()),
    }
}

/// Predicted classes for `idx`.
pub fn predict(model: &Model, data: &Dataset, idx: &[usize], cache: Option<&FeatureCache>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let refs = if cache.is_some() { Vec::new() } else { data.image_refs(chunk) };
        out.extend(argmax_rows(&model.logits(input(cache, chunk, &refs))?));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, data: &Dataset, idx: &[usize], cache: Option<&FeatureCache>) -> Result<f64> {
    let pred = predict(model, data, idx, cache)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    Ok(accuracy(&pred, &labels))
}

/// Head inputs of `idx` as an `n x dim` matrix, before any selection.
pub fn head_features(model: &Model, data: &Dataset, idx: &[usize], cache: Option<&FeatureCache>) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut dim = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let refs = if cache.is_some() { Vec::new() } else { data.image_refs(chunk) };
        let h = model.head_features(input(cache, chunk, &refs))?;
        dim = h.cols();
        rows.extend_from_slice(h.data());
    }
    Tensor::new(vec![idx.len(), dim], rows)
}

/// Seeded 80/20 split of `idx` into (train, validation).
pub fn split_80_20(idx: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = idx.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0820));
    let cut = (order.len() * 4).div_ceil(5).min(order.len().saturating_sub(1)).max(1);
    let val = order.split_off(cut);
    (order, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lr: f64,
    pub wd: f64,
    /// `None` when training diverged.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<Cell>,
    pub best_lr: f64,
    pub best_wd: f64,
    pub val_acc: f64,
}

/// Index of the best cell: highest accuracy, then lower lr, then lower wd.
pub fn best_cell(cells: &[Cell]) -> Option<usize> {
    (0..cells.len())
        .filter(|&i| cells[i].val_acc.is_some())
        .min_by(|&a, &b| {
            let (ca, cb) = (&cells[a], &cells[b]);
            cb.val_acc
                .partial_cmp(&ca.val_acc)
                .unwrap()
                .then(ca.lr.total_cmp(&cb.lr))
                .then(ca.wd.total_cmp(&cb.wd))
        })
}

/// Trains one copy of `template` per `(lr, wd)` on the 80 split, picks the
/// best by validation accuracy and retrains it on all of `idx`.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    template: &Model,
    data: &Dataset,
    idx: &[usize],
    cache: Option<&FeatureCache>,
    lrs: &[f64],
    wds: &[f64],
    epochs: usize,
    seed: u64,
) -> Result<(Model, GridResult)> {
    if lrs.is_empty() || wds.is_empty() {
        return Err(TensorError::Contract("empty hyperparameter grid".into()));
    }
    let (tr, val) = split_80_20(idx, seed);
    let grid: Vec<(f64, f64)> = lrs.iter().flat_map(|&lr| wds.iter().map(move |&wd| (lr, wd))).collect();
    let cells: Vec<Cell> = grid
        .par_iter()
        .map(|&(lr, wd)| {
            let mut m = template.clone();
            let val_acc = match fit(&mut m, data, &tr, cache, &Hyper::new(lr, wd, epochs), seed) {
                Ok(_) => Some(evaluate(&m, data, &val, cache)),
                Err(TensorError::NonFinite { .. }) => None,
                Err(e) => Some(Err(e)),
            };
            val_acc.transpose().map(|val_acc| Cell { lr, wd, val_acc })
        })
        .collect::<Result<_>>()?;
    let best = best_cell(&cells).ok_or(TensorError::NonFinite { op: "every grid cell" })?;
    let (lr, wd) = (cells[best].lr, cells[best].wd);
    let mut model = template.clone();
    fit(&mut model, data, idx, cache, &Hyper::new(lr, wd, epochs), seed)?;
    let val_acc = cells[best].val_acc.unwrap_or(0.0);
    Ok((
        model,
        GridResult {
            cells,
            best_lr: lr,
            best_wd: wd,
            val_acc,
        },
    ))
}

/// Distinct dataset indices, for tests on splits.
pub fn as_set(idx: &[usize]) -> BTreeSet<usize> {
    idx.iter().copied().collect()
}
