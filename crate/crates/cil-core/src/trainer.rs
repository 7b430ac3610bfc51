//! Per-task adapter training.
//!
//! Each incremental task trains a fresh bottleneck adapter and the shared
//! classifier under a combined objective: softmax cross-entropy over every
//! class seen so far, plus an orthogonality penalty that pushes the new
//! adapter's projections away from all earlier adapters' subspaces. The
//! penalty weight decays exponentially per epoch. After training, per-class
//! feature statistics are collected under the new adapter, and from the
//! second task on the classifier is recalibrated on Gaussian pseudo-features
//! replayed from the statistics of every seen class.
//!
//! Randomness is drawn from dedicated streams of the crate PRNG, keyed by
//! `(seed, task, phase)`: phase 1 initializes the adapter, phase 2 orders
//! training batches, phase 3 drives replay sampling and ordering. Identical
//! seed and config therefore reproduce identical weights bitwise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::Instance;
use crate::model::{AdapterId, AdapterSet, Backbone, Classifier, ModelState};
use crate::rng::Rng;
use crate::tensor::optim::{cosine_lr, SgdMomentum};
use crate::tensor::Tensor;

/// Every sampled feature variance is at least this large, so replay
/// sampling stays well-posed even for single-instance classes.
pub const VARIANCE_FLOOR: f64 = 1e-4;

/// Classifier recalibration schedule (the replay phase trains only the
/// classification head, briefly and at a fixed rate).
pub const REPLAY_EPOCHS: usize = 5;
pub const REPLAY_LR: f64 = 0.01;

/// RNG stream for adapter initialization, shared by every task: fusion
/// votes coordinate-wise across task vectors, which only compares like
/// with like when all adapters grow from one common starting point.
const ADAPTER_INIT_STREAM: u64 = 1;
const PHASE_BATCH_ORDER: u64 = 2;
const PHASE_REPLAY: u64 = 3;

fn task_stream(task: usize, phase: u64) -> u64 {
    (task as u64) << 8 | phase
}

/// Which projection matrices the orthogonality penalty constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthMode {
    Up,
    Down,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub lambda0: f64,
    pub lambda_decay: f64,
    pub orth_mode: OrthMode,
    pub replay_samples_per_class: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 48,
            lr0: 0.01,
            momentum: 0.9,
            lambda0: 1e-3,
            lambda_decay: 0.9,
            orth_mode: OrthMode::Up,
            replay_samples_per_class: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train batch_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("train lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Config(format!(
                "train lambda0 must be nonnegative, got {}",
                self.lambda0
            )));
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return Err(Error::Config(format!(
                "train lambda_decay must lie in (0, 1], got {}",
                self.lambda_decay
            )));
        }
        Ok(())
    }
}

/// Penalty weight in effect during a given 0-based epoch.
pub fn lambda_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lambda0 * cfg.lambda_decay.powi(epoch as i32)
}

/// Per-class diagonal Gaussian over features, collected under the adapter
/// of the task that introduced the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStatistics {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Mean and floored population variance of a set of feature vectors.
pub fn stats_from_features(features: &[Vec<f64>]) -> ClassStatistics {
    assert!(!features.is_empty(), "statistics need at least one feature");
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for f in features {
        for j in 0..d {
            let dlt = f[j] - mean[j];
            var[j] += dlt * dlt;
        }
    }
    for v in var.iter_mut() {
        *v = (*v / n).max(VARIANCE_FLOOR);
    }
    ClassStatistics { mean, var, count: features.len() }
}

/// Stack instances (by index) into one row-major token matrix.
pub(crate) fn batch_tokens(
    instances: &[Instance],
    idxs: &[usize],
    seq_len: usize,
    token_dim: usize,
) -> Tensor {
    let mut data = Vec::with_capacity(idxs.len() * seq_len * token_dim);
    for &i in idxs {
        data.extend_from_slice(&instances[i].tokens);
    }
    Tensor::matrix(idxs.len() * seq_len, token_dim, data)
}

/// Mean cross-entropy of the classifier over features extracted with the
/// given adapter; labels are classifier column indices.
pub fn cls_loss(
    backbone: &Backbone,
    tokens: &Tensor,
    labels: &[usize],
    adapters: &AdapterSet,
    classifier: &Classifier,
) -> Tensor {
    let features = backbone.forward_batch(tokens, Some(adapters));
    classifier.logits_batch(&features).cross_entropy_mean(labels)
}

/// Cross-adapter orthogonality penalty: per earlier adapter and block, the
/// entrywise L1 norm of the Gram matrix between the new and old projection
/// rows (up mode), columns (down mode), or both.
pub fn orth_loss(current: &AdapterSet, previous: &[AdapterSet], mode: OrthMode) -> Tensor {
    for p in previous {
        assert!(
            current.shapes_match(p),
            "orth_loss: adapter {} shapes differ from {}",
            p.id,
            current.id
        );
    }
    let mut total = Tensor::scalar(0.0);
    for prev in previous {
        for b in 0..current.num_blocks() {
            if matches!(mode, OrthMode::Up | OrthMode::Both) {
                let gram = current.w_up[b].matmul_bt(&prev.w_up[b]);
                total = total.add(&gram.l1_norm());
            }
            if matches!(mode, OrthMode::Down | OrthMode::Both) {
                // ||A^T B||_1 computed as ||B^T A||_1; the transpose of the
                // frozen earlier matrix is materialized as a constant so
                // gradients still reach the current down-projection.
                let pd = prev.w_down[b].data_vec();
                let shape = prev.w_down[b].shape();
                let (d, r) = (shape[0], shape[1]);
                let mut t = vec![0.0; d * r];
                for i in 0..d {
                    for j in 0..r {
                        t[j * d + i] = pd[i * r + j];
                    }
                }
                let prev_t = Tensor::matrix(r, d, t);
                total = total.add(&prev_t.matmul(&current.w_down[b]).l1_norm());
            }
        }
    }
    total
}

/// Combined objective. With no earlier adapters or a zero weight this is
/// the classification loss node itself, so the two coincide exactly.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    backbone: &Backbone,
    tokens: &Tensor,
    labels: &[usize],
    current: &AdapterSet,
    previous: &[AdapterSet],
    classifier: &Classifier,
    lambda: f64,
    mode: OrthMode,
) -> Tensor {
    assert!(lambda >= 0.0, "total_loss: negative lambda {lambda}");
    let cls = cls_loss(backbone, tokens, labels, current, classifier);
    if previous.is_empty() || lambda == 0.0 {
        return cls;
    }
    cls.add(&orth_loss(current, previous, mode).scale(lambda))
}

/// Any parameter beyond this magnitude means training has diverged; the
/// guard fires before downstream products can overflow to infinity.
pub(crate) const MAX_PARAM_ABS: f64 = 1e50;

pub(crate) fn check_step_health(loss: f64, params: &[Tensor]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("training loss became {loss}")));
    }
    for p in params {
        if !p.all_finite() {
            return Err(Error::Numerical(format!(
                "parameter of shape {:?} became non-finite after an update",
                p.shape()
            )));
        }
        let max_abs = p.data_vec().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > MAX_PARAM_ABS {
            return Err(Error::Numerical(format!(
                "parameter of shape {:?} diverged to magnitude {max_abs:.3e}",
                p.shape()
            )));
        }
    }
    Ok(())
}

/// Train the adapter and classifier for one task, then collect feature
/// statistics for its classes and (from the second task on) recalibrate the
/// classifier with Gaussian replay. `class_ids` fixes the column order of
/// the new classes; labels inside `instances` must all belong to it.
pub fn train_task(
    state: &mut ModelState,
    task_id: usize,
    class_ids: &[usize],
    instances: &[Instance],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if task_id != state.num_tasks() + 1 {
        return Err(Error::Data(format!(
            "task {task_id} cannot start: {} tasks trained so far",
            state.num_tasks()
        )));
    }
    if class_ids.is_empty() {
        return Err(Error::Data(format!("task {task_id} introduces no classes")));
    }
    if instances.is_empty() {
        return Err(Error::Data(format!("task {task_id} has no training instances")));
    }
    assert!(state.backbone.is_frozen(), "train_task: backbone must be frozen");

    let bcfg = &state.backbone.config;
    let token_len = bcfg.seq_len * bcfg.token_dim;
    for (i, inst) in instances.iter().enumerate() {
        if inst.tokens.len() != token_len {
            return Err(Error::Data(format!(
                "task {task_id} instance {i} has {} token values, expected {token_len}",
                inst.tokens.len()
            )));
        }
        if !class_ids.contains(&inst.class_id) {
            return Err(Error::Data(format!(
                "task {task_id} instance {i} is labeled {} which is not in this task's class set",
                inst.class_id
            )));
        }
    }
    for &cid in class_ids {
        if !instances.iter().any(|inst| inst.class_id == cid) {
            return Err(Error::Data(format!("task {task_id} class {cid} has no training instances")));
        }
    }

    state.classifier.add_classes(class_ids, task_id)?;
    let labels: Vec<usize> = instances
        .iter()
        .map(|inst| state.classifier.column_of(inst.class_id).expect("label added above"))
        .collect();

    let mut init_rng = Rng::from_seed_stream(cfg.seed, ADAPTER_INIT_STREAM);
    let adapter = AdapterSet::init(bcfg, state.adapter_rank, AdapterId::Task(task_id), &mut init_rng);
    adapter.set_trainable(true);
    state.classifier.set_trainable(true);

    let mut params = adapter.params();
    params.push(state.classifier.weight().clone());
    let mut opt = SgdMomentum::new(params.clone(), cfg.momentum);

    // Earlier tasks' columns stay in the softmax denominator but only the
    // current task's columns receive gradients; replay alone recalibrates
    // the full head afterwards. Earlier columns have no defending data in
    // these batches, so letting the loss update them would only crush them.
    let k = state.classifier.num_classes();
    let d = state.classifier.embed_dim();
    let first_new = k - class_ids.len();
    let column_masks = (first_new > 0).then(|| {
        let mut new_mask = vec![0.0; d * k];
        let mut old_mask = vec![1.0; d * k];
        for row in 0..d {
            for col in first_new..k {
                new_mask[row * k + col] = 1.0;
                old_mask[row * k + col] = 0.0;
            }
        }
        (Tensor::matrix(d, k, new_mask), Tensor::matrix(d, k, old_mask))
    });

    let n = instances.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_rng = Rng::from_seed_stream(cfg.seed, task_stream(task_id, PHASE_BATCH_ORDER));
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lambda = lambda_at(cfg, epoch);
        batch_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let tokens = batch_tokens(instances, chunk, bcfg.seq_len, bcfg.token_dim);
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = match &column_masks {
                None => total_loss(
                    &state.backbone,
                    &tokens,
                    &chunk_labels,
                    &adapter,
                    &state.task_adapters,
                    &state.classifier,
                    lambda,
                    cfg.orth_mode,
                ),
                Some((new_mask, old_mask)) => {
                    let w = state.classifier.weight();
                    let w_eff = w.mul(new_mask).add(&w.detached_copy().mul(old_mask));
                    let features = state.backbone.forward_batch(&tokens, Some(&adapter));
                    let cls = features.matmul(&w_eff).cross_entropy_mean(&chunk_labels);
                    if lambda == 0.0 {
                        cls
                    } else {
                        cls.add(&orth_loss(&adapter, &state.task_adapters, cfg.orth_mode).scale(lambda))
                    }
                }
            };
            let loss_value = loss.item();
            loss.backward();
            opt.step(cosine_lr(cfg.lr0, step, total_steps));
            check_step_health(loss_value, &params)?;
            step += 1;
        }
    }

    adapter.set_trainable(false);
    state.classifier.set_trainable(false);

    let per_class = collect_statistics(&state.backbone, &adapter, instances, class_ids, cfg.batch_size)?;
    for (cid, st) in per_class {
        let col = state.classifier.column_of(cid).expect("stats class was added");
        state.stats.insert(col, st);
    }
    state.task_adapters.push(adapter);

    if task_id > 1 {
        replay_calibrate(state, cfg, task_id)?;
    }
    Ok(())
}

/// Per-class feature statistics of a task's instances under one adapter.
/// Every expected class must appear at least once.
pub fn collect_statistics(
    backbone: &Backbone,
    adapters: &AdapterSet,
    instances: &[Instance],
    class_ids: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<usize, ClassStatistics>> {
    assert!(batch_size > 0, "collect_statistics: zero batch size");
    let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        grouped.entry(inst.class_id).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for &cid in class_ids {
        let idxs = grouped
            .get(&cid)
            .ok_or_else(|| Error::Data(format!("no instances to collect statistics for class {cid}")))?;
        let mut features: Vec<Vec<f64>> = Vec::with_capacity(idxs.len());
        let d = backbone.config.embed_dim;
        for chunk in idxs.chunks(batch_size) {
            let tokens = batch_tokens(instances, chunk, backbone.config.seq_len, backbone.config.token_dim);
            let feats = backbone.forward_batch(&tokens, Some(adapters)).data_vec();
            for row in 0..chunk.len() {
                features.push(feats[row * d..(row + 1) * d].to_vec());
            }
        }
        out.insert(cid, stats_from_features(&features));
    }
    Ok(out)
}

/// Recalibrate the classification head on Gaussian pseudo-features sampled
/// from every seen class's statistics. Feature extractors are untouched;
/// with zero replay samples per class the head is returned unchanged.
pub fn replay_calibrate(state: &mut ModelState, cfg: &TrainConfig, task_id: usize) -> Result<()> {
    let k = state.classifier.num_classes();
    for col in 0..k {
        if !state.stats.contains_key(&col) {
            return Err(Error::Data(format!(
                "replay calibration: no statistics for class column {col}"
            )));
        }
    }
    if cfg.replay_samples_per_class == 0 {
        return Ok(());
    }

    let d = state.classifier.embed_dim();
    let mut rng = Rng::from_seed_stream(cfg.seed, task_stream(task_id, PHASE_REPLAY));
    let mut features: Vec<f64> = Vec::with_capacity(k * cfg.replay_samples_per_class * d);
    let mut labels: Vec<usize> = Vec::with_capacity(k * cfg.replay_samples_per_class);
    for (col, st) in &state.stats {
        let sigma: Vec<f64> = st.var.iter().map(|v| v.sqrt()).collect();
        for _ in 0..cfg.replay_samples_per_class {
            for j in 0..d {
                features.push(st.mean[j] + sigma[j] * rng.next_normal());
            }
            labels.push(*col);
        }
    }

    state.classifier.set_trainable(true);
    let w = state.classifier.weight().clone();
    let mut opt = SgdMomentum::new(vec![w.clone()], cfg.momentum);
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..REPLAY_EPOCHS {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                batch.extend_from_slice(&features[i * d..(i + 1) * d]);
            }
            let feats = Tensor::matrix(chunk.len(), d, batch);
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = state.classifier.logits_batch(&feats).cross_entropy_mean(&chunk_labels);
            let loss_value = loss.item();
            loss.backward();
            opt.step(REPLAY_LR);
            check_step_health(loss_value, std::slice::from_ref(&w))?;
        }
    }
    state.classifier.set_trainable(false);
    Ok(())
}
