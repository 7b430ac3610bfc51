//! End-to-end experiment driver: backbone warm-up, then the incremental
//! train / fuse / evaluate loop.
//!
//! Pretraining happens once on an auxiliary synthetic universe drawn from
//! the pretrain seed, producing the frozen backbone every stage shares.
//! Each stage then trains one task adapter, re-fuses the universal adapter
//! from all adapters so far, and scores every requested strategy on the
//! union of test sets seen to date. Given the same config the whole
//! pipeline is bitwise-reproducible.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::harness::config::{ExperimentConfig, PretrainConfig};
use crate::harness::dataset::{IncrementalStream, Instance};
use crate::harness::report::RunReport;
use crate::harness::synthetic::{make_synthetic_stream, SyntheticConfig};
use crate::inference::{evaluate, StrategyKind};
use crate::model::{AdapterSet, Backbone, BackboneConfig, Classifier, ModelState};
use crate::rng::Rng;
use crate::tensor::optim::{cosine_lr, SgdMomentum};
use crate::trainer::{check_step_health, train_task};

const STREAM_BACKBONE_INIT: u64 = 21;
const STREAM_PRETRAIN_BATCHES: u64 = 22;

/// Everything a finished run leaves in memory: the report and the final
/// model, ready for persistence or further evaluation.
pub struct RunArtifacts {
    pub report: RunReport,
    pub state: ModelState,
}

/// Supervised warm-up on an auxiliary synthetic universe. The universe is
/// generated from the pretrain seed alone, so different experiment seeds
/// share the identical frozen backbone.
pub fn pretrain_backbone(bcfg: &BackboneConfig, pcfg: &PretrainConfig) -> Result<Backbone> {
    bcfg.validate()?;
    let syn = SyntheticConfig {
        num_classes: pcfg.num_classes,
        train_per_class: pcfg.train_per_class,
        test_per_class: 1,
        token_dim: bcfg.token_dim,
        seq_len: bcfg.seq_len,
        noise_std: pcfg.noise_std,
        confusable_pairs: pcfg.confusable_pairs,
        seed: pcfg.seed,
    };
    syn.validate()?;
    let class_ids: Vec<usize> = (0..pcfg.num_classes).collect();
    // Pair placement needs two groups to straddle; the warm-up still trains
    // over the whole universe as a single supervised task.
    let partition: Vec<Vec<usize>> = if pcfg.confusable_pairs == 0 {
        vec![class_ids.clone()]
    } else {
        let half = pcfg.num_classes / 2;
        vec![class_ids[..half].to_vec(), class_ids[half..].to_vec()]
    };
    let stream = make_synthetic_stream(&syn, &partition)?;
    let instances: Vec<Instance> = stream
        .tasks
        .iter()
        .flat_map(|t| t.train.iter().cloned())
        .collect();
    let instances = &instances;

    let mut init_rng = Rng::from_seed_stream(pcfg.seed, STREAM_BACKBONE_INIT);
    let mut backbone = Backbone::init(bcfg.clone(), &mut init_rng)?;
    backbone.unfreeze();
    let mut head = Classifier::new(bcfg.embed_dim);
    head.add_classes(&class_ids, 1)?;
    head.set_trainable(true);

    let mut params = backbone.params();
    params.push(head.weight().clone());
    let mut opt = SgdMomentum::new(params.clone(), pcfg.momentum);

    let labels: Vec<usize> = instances
        .iter()
        .map(|inst| head.column_of(inst.class_id).expect("pretrain class added above"))
        .collect();
    let n = instances.len();
    let total_steps = pcfg.epochs * n.div_ceil(pcfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_rng = Rng::from_seed_stream(pcfg.seed, STREAM_PRETRAIN_BATCHES);
    let mut step = 0;
    for _ in 0..pcfg.epochs {
        batch_rng.shuffle(&mut order);
        for chunk in order.chunks(pcfg.batch_size) {
            let tokens =
                crate::trainer::batch_tokens(instances, chunk, bcfg.seq_len, bcfg.token_dim);
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let features = backbone.forward_batch(&tokens, None);
            let loss = head.logits_batch(&features).cross_entropy_mean(&chunk_labels);
            let loss_value = loss.item();
            loss.backward();
            opt.step(cosine_lr(pcfg.lr0, step, total_steps));
            check_step_health(loss_value, &params)?;
            step += 1;
        }
    }
    head.set_trainable(false);
    backbone.freeze();
    Ok(backbone)
}

/// Top-1 accuracy over the union of test sets 1..=`stage` under one
/// strategy.
pub fn evaluate_stage(
    state: &ModelState,
    stream: &IncrementalStream,
    stage: usize,
    strategy: StrategyKind,
    batch_size: usize,
) -> Result<f64> {
    if stage == 0 || stage > state.num_tasks() {
        return Err(Error::Data(format!(
            "cannot evaluate stage {stage}: model has {} trained tasks",
            state.num_tasks()
        )));
    }
    if stage > stream.num_tasks() {
        return Err(Error::Data(format!(
            "cannot evaluate stage {stage}: stream has {} tasks",
            stream.num_tasks()
        )));
    }
    let test = stream.test_up_to(stage);
    let (scores, _) = evaluate(state, &test, &[strategy], batch_size)?;
    Ok(scores[&strategy])
}

/// Fraction of instances routed to the adapter of their own task.
fn selection_score(state: &ModelState, test: &[crate::harness::dataset::Instance], selections: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    for (inst, &sel) in test.iter().zip(selections) {
        let col = state
            .classifier
            .column_of(inst.class_id)
            .ok_or_else(|| Error::Data(format!("test instance labeled {} was never trained", inst.class_id)))?;
        if sel + 1 == state.classifier.task_of_column(col) {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Run the incremental protocol over a prepared stream: per stage, train
/// the task adapter, re-fuse the universal adapter, and score every
/// requested strategy on all test data seen so far.
pub fn run_incremental(
    cfg: &ExperimentConfig,
    backbone: Backbone,
    stream: &IncrementalStream,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    stream.validate()?;
    if backbone.config != cfg.backbone {
        return Err(Error::Config(
            "the provided backbone was built with different dimensions than the config".into(),
        ));
    }

    let mut state = ModelState::new(backbone, cfg.adapter_rank);
    let mut per_strategy: BTreeMap<StrategyKind, Vec<f64>> =
        cfg.strategies.iter().map(|s| (*s, Vec::new())).collect();
    let mut selection_accuracy = Vec::new();

    for task in &stream.tasks {
        train_task(&mut state, task.task_id, &task.class_ids, &task.train, &cfg.train)?;
        let refs: Vec<&AdapterSet> = state.task_adapters.iter().collect();
        state.universal = Some(fuse(&refs)?);

        let test = stream.test_up_to(task.task_id);
        let (scores, selections) = evaluate(&state, &test, &cfg.strategies, cfg.eval_batch_size)?;
        for s in &cfg.strategies {
            per_strategy.get_mut(s).expect("strategy registered above").push(scores[s]);
        }
        selection_accuracy.push(selection_score(&state, &test, &selections)?);
    }

    let report = RunReport::new(stream.num_tasks(), per_strategy, selection_accuracy, cfg.clone());
    report.validate()?;
    Ok(RunArtifacts { report, state })
}

/// Full pipeline from a config: pretrain (or accept) a backbone, generate
/// the class split and synthetic stream, and run the incremental loop.
pub fn run_from_config(cfg: &ExperimentConfig, pretrained: Option<Backbone>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let backbone = match pretrained {
        Some(b) => {
            if b.config != cfg.backbone {
                return Err(Error::Config(
                    "the pretrained backbone does not match the config's backbone section".into(),
                ));
            }
            b
        }
        None => pretrain_backbone(&cfg.backbone, &cfg.pretrain)?,
    };
    let partition = cfg.protocol.split_classes()?;
    let stream = make_synthetic_stream(&cfg.synthetic, &partition)?;
    run_incremental(cfg, backbone, &stream)
}
