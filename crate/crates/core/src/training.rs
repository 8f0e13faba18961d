//! Supervised training: stratified splits, class weights, the regularized
//! loss, Adam, plateau scheduling and the epoch loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{ImageSet, Split};
use crate::error::{Error, Result};
use crate::model::{
    apply_bn_stats, build_model, forward_graph, rank_row, tensor_role, Mode, ModelConfig, ParameterSet, TensorRole,
};
use crate::numerics::{softmax_rows, Graph, Tensor, Var, PROB_FLOOR};
use crate::scalogram::{augment, AugmentationSpec, Scalogram};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Mixes `parts` into `base` (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(p.wrapping_mul(0xd6e8_feb8_6659_fd93));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

// ---------------------------------------------------------------------------
// splits

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Labels with fewer than [`MIN_ITEMS_PER_SUBJECT`] items, left out.
    pub rejected_subjects: Vec<usize>,
}

impl SplitAssignment {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub const MIN_ITEMS_PER_SUBJECT: usize = 3;

/// Beat-level split stratified per subject: every subject contributes
/// `round(n·r)` items to validation and test (at least one when the ratio is
/// positive) and the rest to training. Returned indices are sorted.
pub fn split_dataset(labels: &[usize], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut by_subject: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_subject.entry(l).or_default().push(i);
    }
    let mut out = SplitAssignment {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        rejected_subjects: Vec::new(),
    };
    for (subject, mut idx) in by_subject {
        if idx.len() < MIN_ITEMS_PER_SUBJECT {
            out.rejected_subjects.push(subject);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[subject as u64]));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let share = |r: f64| ((n as f64 * r).round() as usize).max(usize::from(r > 0.0));
        let n_val = share(ratios[1]);
        let n_test = share(ratios[2]);
        let n_train = n - n_val - n_test;
        if ratios[0] > 0.0 && n_train == 0 {
            out.rejected_subjects.push(subject);
            continue;
        }
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

// ---------------------------------------------------------------------------
// class weights and loss

/// `w_c = N / (C · n_c)`; every class in `0..n_classes` must occur.
pub fn compute_class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if n_classes < 2 {
        return Err(Error::domain(format!(
            "class weights need at least 2 classes, got {n_classes}"
        )));
    }
    let counts = class_counts(labels, n_classes)?;
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::domain(format!("class {c} has no samples")));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&k| n / (n_classes as f64 * k as f64)).collect())
}

/// Like [`compute_class_weights`] but over the classes that actually occur;
/// absent classes get weight 0.
pub fn present_class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let counts = class_counts(labels, n_classes)?;
    let present = counts.iter().filter(|&&k| k > 0).count() as f64;
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&k| if k == 0 { 0.0 } else { n / (present * k as f64) })
        .collect())
}

fn class_counts(labels: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::domain(format!("label {l} outside {n_classes} classes")))? += 1;
    }
    Ok(counts)
}

/// L2 coefficient of a tensor: kernels only, longest matching scope wins.
/// A scope matches a name equal to it or starting with `scope.`.
pub fn l2_coefficient(name: &str, scopes: &BTreeMap<String, f64>) -> Option<f64> {
    if tensor_role(name) != TensorRole::Kernel {
        return None;
    }
    scopes
        .iter()
        .filter(|(s, _)| name == s.as_str() || name.strip_prefix(s.as_str()).is_some_and(|r| r.starts_with('.')))
        .max_by_key(|(s, _)| s.len())
        .map(|(_, &l)| l)
}

pub fn l2_penalty(params: &ParameterSet, scopes: &BTreeMap<String, f64>) -> f64 {
    params
        .iter()
        .filter_map(|(n, t)| l2_coefficient(n, scopes).map(|l| l * t.sum_squares()))
        .sum()
}

/// Weighted cross-entropy mean over the batch plus the L2 penalty.
/// `probs` is `(b, c)`; zero probabilities are clamped at 1e-12.
pub fn loss(
    probs: &Tensor,
    labels: &[usize],
    weights: Option<&[f64]>,
    params: &ParameterSet,
    scopes: &BTreeMap<String, f64>,
) -> Result<f64> {
    Ok(cross_entropy_value(probs, labels, weights)? + l2_penalty(params, scopes))
}

pub fn cross_entropy_value(probs: &Tensor, labels: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    if probs.rank() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::Shape {
            op: "loss",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let c = probs.shape()[1];
    let mut total = 0.0;
    for (row, &y) in probs.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::domain(format!("label {y} outside {c} classes")));
        }
        let w = weights.map_or(1.0, |w| w[y]);
        total += -w * row[y].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

fn l2_on_graph(
    g: &mut Graph,
    params: &ParameterSet,
    pass_vars: &[(usize, Var)],
    scopes: &BTreeMap<String, f64>,
    mut acc: Var,
) -> Result<Var> {
    for &(idx, v) in pass_vars {
        if let Some(l) = l2_coefficient(params.name(idx), scopes) {
            if l > 0.0 {
                let s = g.sum_squares(v);
                let s = g.scale(s, l);
                acc = g.add(acc, s)?;
            }
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// optimizer and scheduler

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` belongs to tensor `i`;
/// `None` leaves the tensor untouched.
pub fn adam_step(params: &mut ParameterSet, grads: &[Option<Tensor>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    let (b1, b2) = ADAM_BETAS;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params.tensor_mut(i);
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    params.version += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.5,
            min_lr: 1e-6,
        }
    }
}

/// Reduce-on-plateau state machine. Any strict decrease of the validation
/// loss counts as improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    pub wait: usize,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }
}

/// Feeds one epoch's validation loss; returns the learning rate for the next epoch.
pub fn reduce_lr_on_plateau(state: &mut PlateauState, config: &SchedulerConfig, val_loss: f64) -> f64 {
    if val_loss < state.best {
        state.best = val_loss;
        state.wait = 0;
    } else {
        state.wait += 1;
        if state.wait >= config.patience {
            state.lr = (state.lr * config.factor).max(config.min_lr);
            state.wait = 0;
        }
    }
    state.lr
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    ClassWeights,
    /// The dataset was balanced offline; no loss weighting.
    PreBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scheduler: SchedulerConfig,
    pub balance: Balance,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            scheduler: SchedulerConfig::default(),
            balance: Balance::ClassWeights,
            augmentation: AugmentationSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.scheduler;
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && s.patience > 0
            && s.factor > 0.0
            && s.factor < 1.0
            && s.min_lr > 0.0
            && s.min_lr <= self.lr;
        if !ok {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Items that contributed gradients, counted per split.
    pub gradient_items: BTreeMap<Split, usize>,
    pub augment_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: ParameterSet,
    pub last: ParameterSet,
    pub history: TrainHistory,
}

/// Stacks `(3, s, s)` images into a batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::domain("empty batch"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * images.len());
    for t in images {
        if t.shape() != first.shape() {
            return Err(Error::Shape {
                op: "batch",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Eval-mode class probabilities for many images, chunked and spread over
/// threads. Eval mode is per-sample, so the result does not depend on the
/// chunking.
pub fn predict(params: &ParameterSet, config: &ModelConfig, images: &[&Tensor], chunk: usize) -> Result<Tensor> {
    let c = config.n_classes;
    if images.is_empty() {
        return Tensor::new(vec![0, c], Vec::new());
    }
    let chunk = chunk.max(1);
    let chunks: Vec<&[&Tensor]> = images.chunks(chunk).collect();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(chunks.len());
    let mut results: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let slots: Vec<_> = results.chunks_mut(chunks.len().div_ceil(workers)).collect();
        let mut start = 0;
        for slot in slots {
            let my = &chunks[start..start + slot.len()];
            start += slot.len();
            s.spawn(move || {
                for (out, batch) in slot.iter_mut().zip(my) {
                    *out = Some(stack_images(batch).and_then(|b| {
                        let mut g = Graph::new();
                        let x = g.constant(b);
                        let pass = forward_graph(&mut g, params, config, x, Mode::Eval, false, 0)?;
                        Ok(softmax_rows(g.value(pass.logits).data(), c))
                    }));
                }
            });
        }
    });
    let mut data = Vec::with_capacity(images.len() * c);
    for r in results {
        data.extend(r.expect("every chunk evaluated")?);
    }
    Tensor::new(vec![images.len(), c], data)
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let c = probs.shape()[1];
    let hits = probs
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| rank_row(row)[0] == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Unweighted loss and accuracy of `params` on one split.
pub fn evaluate_split(
    params: &ParameterSet,
    config: &ModelConfig,
    data: &ImageSet,
    split: Split,
    chunk: usize,
) -> Result<(f64, f64)> {
    let items: Vec<_> = data.split(split).collect();
    if items.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let images: Vec<&Tensor> = items.iter().map(|i| &i.pixels).collect();
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    let probs = predict(params, config, &images, chunk)?;
    let l = loss(&probs, &labels, None, params, &config.l2_scopes)?;
    Ok((l, accuracy(&probs, &labels)))
}

/// Batches of `batch_size` over `order`; a trailing batch of one joins the
/// previous batch so batch norm never sees a single sample.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &order[start..];
    }
    out
}

/// One gradient step on one batch. Returns `(loss, correct)`.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    params: &mut ParameterSet,
    adam: &mut AdamState,
    model: &ModelConfig,
    inputs: Tensor,
    labels: &[usize],
    weights: Option<&[f64]>,
    lr: f64,
    dropout_seed: u64,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let x = g.constant(inputs);
    let pass = forward_graph(&mut g, params, model, x, Mode::Train, true, dropout_seed)?;
    let ce = g.softmax_cross_entropy(pass.logits, labels, weights)?;
    let total = l2_on_graph(&mut g, params, &pass.param_vars, &model.l2_scopes, ce)?;
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value}")));
    }
    let c = model.n_classes;
    let correct = g
        .value(pass.logits)
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| rank_row(row)[0] == y)
        .count();
    let mut grads_by_var = g.backward(total)?;
    let mut grads: Vec<Option<Tensor>> = vec![None; params.len()];
    for &(idx, v) in &pass.param_vars {
        let gt = grads_by_var.take(v);
        if let Some(t) = &gt {
            if !t.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", params.name(idx))));
            }
        }
        grads[idx] = gt;
    }
    adam_step(params, &grads, adam, lr)?;
    apply_bn_stats(params, &pass.bn_stats);
    Ok((value, correct))
}

/// Trains on the `Train` items of `data`, validating on the `Val` items.
/// Starts from `init` when given, otherwise from `build_model(model, config.seed)`.
pub fn train(
    config: &TrainConfig,
    model: &ModelConfig,
    data: &ImageSet,
    init: Option<ParameterSet>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    let mut params = match init {
        Some(p) => p,
        None => build_model(model, config.seed)?,
    };
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            best: params.clone(),
            last: params,
            history,
        });
    }

    let train_items: Vec<usize> = (0..data.items.len())
        .filter(|&i| data.items[i].split == Split::Train)
        .collect();
    if train_items.is_empty() {
        return Err(Error::domain("training split is empty"));
    }
    let has_val = data.count(Split::Val) > 0;
    let labels: Vec<usize> = train_items.iter().map(|&i| data.items[i].label).collect();
    let weights = match config.balance {
        Balance::ClassWeights => Some(present_class_weights(&labels, model.n_classes)?),
        Balance::PreBalanced => None,
    };

    let mut adam = AdamState::new(&params);
    let mut plateau = PlateauState::new(config.lr);
    let mut best: Option<(f64, ParameterSet)> = None;
    for epoch in 0..config.epochs {
        let lr = plateau.lr;
        let mut order = train_items.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[epoch as u64, 0],
        )));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, chunk) in batches(&order, config.batch_size).into_iter().enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let item = &data.items[i];
                if item.split != Split::Train {
                    return Err(Error::Usage(format!(
                        "item {i} from the {:?} split reached the optimizer",
                        item.split
                    )));
                }
                let pixels = if config.augmentation.enabled {
                    history.augment_calls += 1;
                    let s = Scalogram {
                        pixels: item.pixels.clone(),
                        normalized: true,
                        source_subject: String::new(),
                    };
                    augment(
                        &s,
                        &config.augmentation,
                        derive_seed(config.seed, &[epoch as u64, 1, i as u64]),
                    )?
                    .pixels
                } else {
                    item.pixels.clone()
                };
                images.push(pixels);
                batch_labels.push(item.label);
            }
            let refs: Vec<&Tensor> = images.iter().collect();
            let inputs = stack_images(&refs)?;
            let dropout_seed = derive_seed(config.seed, &[epoch as u64, 2, b as u64]);
            let (l, c) = train_batch(
                &mut params,
                &mut adam,
                model,
                inputs,
                &batch_labels,
                weights.as_deref(),
                lr,
                dropout_seed,
            )?;
            loss_sum += l * chunk.len() as f64;
            correct += c;
            seen += chunk.len();
        }
        *history.gradient_items.entry(Split::Train).or_default() += seen;

        let (val_loss, val_acc) = if has_val {
            evaluate_split(&params, model, data, Split::Val, 64)?
        } else {
            (loss_sum / seen as f64, correct as f64 / seen as f64)
        };
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss became {val_loss} in epoch {epoch}"
            )));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss,
            val_acc,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            history.best_epoch = Some(epoch);
        }
        reduce_lr_on_plateau(&mut plateau, &config.scheduler, val_loss);
    }
    let best = best.map(|(_, p)| p).expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        last: params,
        history,
    })
}
