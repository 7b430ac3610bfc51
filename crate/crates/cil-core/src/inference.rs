//! Prediction strategies over a grown model.
//!
//! Every strategy starts from the same raw material: per-adapter logits over
//! all seen classes. Entropy routing softmaxes each task adapter's logits,
//! picks the adapter whose distribution has the lowest entropy (ties go to
//! the earliest task), and reads the prediction from it, optionally blended
//! with the universal adapter's distribution. The max-logit baseline skips
//! routing and takes, per class, the largest raw logit across adapters.
//!
//! Probabilities use the natural logarithm throughout, so entropies live in
//! `[0, ln K]` for `K` seen classes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::harness::dataset::Instance;
use crate::model::{AdapterId, Classifier, ModelState};
use crate::tensor::softmax_row_into;
use crate::trainer::batch_tokens;

/// How a prediction is read out of the adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Entropy-selected task adapter blended with the universal adapter.
    Ensemble,
    /// Entropy-selected task adapter alone.
    EntropyOnly,
    /// Universal adapter alone.
    UniversalOnly,
    /// Per-class maximum raw logit across task adapters, no routing.
    MaxLogit,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Ensemble,
        StrategyKind::EntropyOnly,
        StrategyKind::UniversalOnly,
        StrategyKind::MaxLogit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Ensemble => "ensemble",
            StrategyKind::EntropyOnly => "entropy_only",
            StrategyKind::UniversalOnly => "universal_only",
            StrategyKind::MaxLogit => "max_logit",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<StrategyKind> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?}; expected one of ensemble, entropy_only, \
                     universal_only, max_logit"
                ))
            })
    }
}

/// One classified instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// External label of the winning class.
    pub class_id: usize,
    /// Classifier column of the winning class.
    pub column: usize,
    /// Which adapter the answer was read from.
    pub selected: AdapterId,
    /// Softmax entropy of each task adapter's distribution, in task order.
    pub per_adapter_entropy: Vec<f64>,
    /// The distribution the argmax was taken over.
    pub combined_probs: Vec<f64>,
}

/// Raw logits of a batch of instances under every adapter.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub num_instances: usize,
    pub num_classes: usize,
    /// Per task adapter, row-major `num_instances x num_classes`.
    pub task_logits: Vec<Vec<f64>>,
    pub universal_logits: Option<Vec<f64>>,
}

/// Shannon entropy in nats. Entries must be nonnegative and sum to one;
/// zero entries contribute zero.
pub fn entropy(probs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut h = 0.0;
    for &p in probs {
        assert!(p >= 0.0, "entropy: negative probability {p}");
        sum += p;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    assert!(
        (sum - 1.0).abs() < 1e-6,
        "entropy: probabilities sum to {sum}, not 1"
    );
    h.max(0.0)
}

/// Index of the smallest entropy; ties resolve to the lowest index.
pub fn select_adapter(entropies: &[f64]) -> usize {
    assert!(!entropies.is_empty(), "select_adapter: no candidates");
    let mut best = 0;
    for (i, &h) in entropies.iter().enumerate().skip(1) {
        if h < entropies[best] {
            best = i;
        }
    }
    best
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_row_into(logits, &mut out);
    out
}

/// Run every adapter over the instances and collect logits. Builds no
/// autodiff graph as long as the model was left untrainable after training.
pub fn stage_outputs(
    state: &ModelState,
    instances: &[Instance],
    batch_size: usize,
) -> Result<EvalOutputs> {
    assert!(batch_size > 0, "stage_outputs: zero batch size");
    if state.task_adapters.is_empty() {
        return Err(Error::Data("no trained task adapters to evaluate".into()));
    }
    let k = state.classifier.num_classes();
    if k == 0 {
        return Err(Error::Data("classifier has no classes".into()));
    }
    let bcfg = &state.backbone.config;
    let token_len = bcfg.seq_len * bcfg.token_dim;
    for (i, inst) in instances.iter().enumerate() {
        if inst.tokens.len() != token_len {
            return Err(Error::Data(format!(
                "instance {i} has {} token values, expected {token_len}",
                inst.tokens.len()
            )));
        }
    }

    let n = instances.len();
    let idxs: Vec<usize> = (0..n).collect();
    let mut run = |adapters: &crate::model::AdapterSet| -> Vec<f64> {
        let mut logits = Vec::with_capacity(n * k);
        for chunk in idxs.chunks(batch_size) {
            let tokens = batch_tokens(instances, chunk, bcfg.seq_len, bcfg.token_dim);
            let features = state.backbone.forward_batch(&tokens, Some(adapters));
            logits.extend_from_slice(&state.classifier.logits_batch(&features).data_vec());
        }
        logits
    };

    let task_logits: Vec<Vec<f64>> = state.task_adapters.iter().map(&mut run).collect();
    let universal_logits = state.universal.as_ref().map(&mut run);
    Ok(EvalOutputs {
        num_instances: n,
        num_classes: k,
        task_logits,
        universal_logits,
    })
}

/// The entropy-routing choice for every instance: the 0-based index of the
/// task adapter with the lowest-entropy distribution.
pub fn selected_adapters(outputs: &EvalOutputs) -> Vec<usize> {
    let k = outputs.num_classes;
    (0..outputs.num_instances)
        .map(|row| {
            let entropies: Vec<f64> = outputs
                .task_logits
                .iter()
                .map(|m| entropy(&softmax_vec(&m[row * k..(row + 1) * k])))
                .collect();
            select_adapter(&entropies)
        })
        .collect()
}

/// Decide one instance of precomputed outputs under a strategy.
pub fn predict_from_outputs(
    outputs: &EvalOutputs,
    classifier: &Classifier,
    strategy: StrategyKind,
    row: usize,
) -> Result<Prediction> {
    let k = outputs.num_classes;
    assert!(row < outputs.num_instances, "predict_from_outputs: row {row} out of range");
    assert_eq!(classifier.num_classes(), k, "classifier and outputs disagree on class count");

    let task_probs: Vec<Vec<f64>> = outputs
        .task_logits
        .iter()
        .map(|m| softmax_vec(&m[row * k..(row + 1) * k]))
        .collect();
    let per_adapter_entropy: Vec<f64> = task_probs.iter().map(|p| entropy(p)).collect();
    let universal_probs = || -> Result<Vec<f64>> {
        let logits = outputs.universal_logits.as_deref().ok_or_else(|| {
            Error::Data(format!("strategy {strategy} needs a universal adapter, none is fused"))
        })?;
        Ok(softmax_vec(&logits[row * k..(row + 1) * k]))
    };

    let (selected, combined_probs) = match strategy {
        StrategyKind::EntropyOnly => {
            let sel = select_adapter(&per_adapter_entropy);
            (AdapterId::Task(sel + 1), task_probs[sel].clone())
        }
        StrategyKind::Ensemble => {
            let uni = universal_probs()?;
            let sel = select_adapter(&per_adapter_entropy);
            let blended: Vec<f64> = task_probs[sel]
                .iter()
                .zip(&uni)
                .map(|(a, b)| (a + b) / 2.0)
                .collect();
            (AdapterId::Task(sel + 1), blended)
        }
        StrategyKind::UniversalOnly => (AdapterId::Universal, universal_probs()?),
        StrategyKind::MaxLogit => {
            let mut max_logits = vec![f64::NEG_INFINITY; k];
            let mut source = vec![0usize; k];
            for (i, m) in outputs.task_logits.iter().enumerate() {
                for c in 0..k {
                    let v = m[row * k + c];
                    if v > max_logits[c] {
                        max_logits[c] = v;
                        source[c] = i;
                    }
                }
            }
            let column = argmax(&max_logits);
            (AdapterId::Task(source[column] + 1), softmax_vec(&max_logits))
        }
    };

    let column = argmax(&combined_probs);
    Ok(Prediction {
        class_id: classifier.class_ids()[column],
        column,
        selected,
        per_adapter_entropy,
        combined_probs,
    })
}

/// Classify a single instance's token values.
pub fn predict(state: &ModelState, tokens: &[f64], strategy: StrategyKind) -> Result<Prediction> {
    let instance = Instance { tokens: tokens.to_vec(), class_id: 0 };
    let outputs = stage_outputs(state, std::slice::from_ref(&instance), 1)?;
    predict_from_outputs(&outputs, &state.classifier, strategy, 0)
}

/// Accuracy of each requested strategy over a labeled set, plus the
/// entropy-routing choices, so callers can score routing separately.
pub fn evaluate(
    state: &ModelState,
    instances: &[Instance],
    strategies: &[StrategyKind],
    batch_size: usize,
) -> Result<(BTreeMap<StrategyKind, f64>, Vec<usize>)> {
    if instances.is_empty() {
        return Err(Error::Data("no instances to evaluate".into()));
    }
    let outputs = stage_outputs(state, instances, batch_size)?;
    let mut accuracy = BTreeMap::new();
    for &strategy in strategies {
        let mut correct = 0usize;
        for (row, inst) in instances.iter().enumerate() {
            let p = predict_from_outputs(&outputs, &state.classifier, strategy, row)?;
            if p.class_id == inst.class_id {
                correct += 1;
            }
        }
        accuracy.insert(strategy, correct as f64 / instances.len() as f64);
    }
    Ok((accuracy, selected_adapters(&outputs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterSet, Backbone, BackboneConfig, ModelState};
    use crate::rng::Rng;

    const LN_10: f64 = 2.302585092994046;
    const ENTROPY_09_01: f64 = 0.3250829733914482;

    fn classifier_for(k: usize) -> Classifier {
        let mut c = Classifier::new(4);
        c.add_classes(&(0..k).map(|i| 100 + i).collect::<Vec<_>>(), 1).unwrap();
        c
    }

    #[test]
    fn entropy_oracle_values() {
        assert!((entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((entropy(&vec![0.1; 10]) - LN_10).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert!((entropy(&[0.9, 0.1]) - ENTROPY_09_01).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "negative probability")]
    fn entropy_rejects_negative_entries() {
        entropy(&[1.2, -0.2]);
    }

    #[test]
    #[should_panic(expected = "sum to")]
    fn entropy_rejects_non_distribution() {
        entropy(&[0.5, 0.1]);
    }

    #[test]
    fn adapter_selection_prefers_lowest_entropy_then_lowest_index() {
        assert_eq!(select_adapter(&[0.9, 0.2, 0.5]), 1);
        assert_eq!(select_adapter(&[0.5, 0.3, 0.3]), 1);
        assert_eq!(select_adapter(&[0.4]), 0);
        assert_eq!(select_adapter(&[0.7, 0.7, 0.7]), 0);
    }

    fn outputs_from_logits(task_logits: Vec<Vec<f64>>, universal: Option<Vec<f64>>, k: usize) -> EvalOutputs {
        let n = task_logits[0].len() / k;
        EvalOutputs {
            num_instances: n,
            num_classes: k,
            task_logits,
            universal_logits: universal,
        }
    }

    #[test]
    fn max_logit_takes_per_class_maximum_across_adapters() {
        let outputs = outputs_from_logits(
            vec![vec![2.0, 0.0, 1.0], vec![1.0, 3.0, 0.0]],
            None,
            3,
        );
        let c = classifier_for(3);
        let p = predict_from_outputs(&outputs, &c, StrategyKind::MaxLogit, 0).unwrap();
        assert_eq!(p.column, 1);
        assert_eq!(p.class_id, 101);
        assert_eq!(p.selected, AdapterId::Task(2));
        let want = softmax_vec(&[2.0, 3.0, 1.0]);
        assert_eq!(p.combined_probs, want);
    }

    #[test]
    fn entropy_only_reads_from_the_sharpest_adapter() {
        let outputs = outputs_from_logits(
            vec![vec![0.1, 0.0], vec![6.0, 0.0]],
            None,
            2,
        );
        let c = classifier_for(2);
        let p = predict_from_outputs(&outputs, &c, StrategyKind::EntropyOnly, 0).unwrap();
        assert_eq!(p.selected, AdapterId::Task(2));
        assert_eq!(p.column, 0);
        assert!(p.per_adapter_entropy[1] < p.per_adapter_entropy[0]);
    }

    #[test]
    fn ensemble_blend_can_overrule_the_selected_adapter() {
        // The selected adapter leans weakly toward class 0; the universal
        // adapter is confident about class 1 and flips the blend.
        let outputs = outputs_from_logits(
            vec![vec![0.1, 0.0], vec![0.3, 0.0]],
            Some(vec![-2.0, 2.0]),
            2,
        );
        let c = classifier_for(2);
        let p = predict_from_outputs(&outputs, &c, StrategyKind::Ensemble, 0).unwrap();
        assert_eq!(p.selected, AdapterId::Task(2));
        assert_eq!(p.column, 1);
        let alone = predict_from_outputs(&outputs, &c, StrategyKind::EntropyOnly, 0).unwrap();
        assert_eq!(alone.column, 0);
        let total: f64 = p.combined_probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn universal_only_reports_the_universal_adapter() {
        let outputs = outputs_from_logits(
            vec![vec![3.0, 0.0]],
            Some(vec![0.0, 4.0]),
            2,
        );
        let c = classifier_for(2);
        let p = predict_from_outputs(&outputs, &c, StrategyKind::UniversalOnly, 0).unwrap();
        assert_eq!(p.selected, AdapterId::Universal);
        assert_eq!(p.column, 1);
    }

    #[test]
    fn universal_strategies_require_a_fused_adapter() {
        let outputs = outputs_from_logits(vec![vec![1.0, 0.0]], None, 2);
        let c = classifier_for(2);
        for s in [StrategyKind::Ensemble, StrategyKind::UniversalOnly] {
            let err = predict_from_outputs(&outputs, &c, s, 0).unwrap_err();
            assert!(matches!(err, Error::Data(_)), "{s}: {err}");
        }
    }

    #[test]
    fn argmax_ties_resolve_to_the_lowest_column() {
        let outputs = outputs_from_logits(vec![vec![1.0, 2.5, 2.5]], None, 3);
        let c = classifier_for(3);
        let p = predict_from_outputs(&outputs, &c, StrategyKind::EntropyOnly, 0).unwrap();
        assert_eq!(p.column, 1);
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("tuna".parse::<StrategyKind>().is_err());
    }

    fn tiny_state(num_tasks: usize, with_universal: bool) -> ModelState {
        let cfg = BackboneConfig {
            num_blocks: 1,
            embed_dim: 8,
            num_heads: 2,
            mlp_hidden: 8,
            seq_len: 3,
            token_dim: 4,
            mean_pool: false,
        };
        let mut rng = Rng::new(7);
        let mut backbone = Backbone::init(cfg.clone(), &mut rng).unwrap();
        backbone.freeze();
        let mut state = ModelState::new(backbone, 2);
        for t in 1..=num_tasks {
            state
                .classifier
                .add_classes(&[10 * t, 10 * t + 1], t)
                .unwrap();
            state
                .task_adapters
                .push(AdapterSet::init(&cfg, 2, AdapterId::Task(t), &mut rng));
        }
        if with_universal {
            state.universal = Some(AdapterSet::zeros(&cfg, 2, AdapterId::Universal));
        }
        state
    }

    #[test]
    fn predict_matches_batched_outputs() {
        let state = tiny_state(3, true);
        let mut rng = Rng::new(8);
        let instances: Vec<Instance> = (0..5)
            .map(|i| Instance {
                tokens: rng.normal_vec(12, 1.0),
                class_id: 10 + i % 2,
            })
            .collect();
        let outputs = stage_outputs(&state, &instances, 2).unwrap();
        for strategy in StrategyKind::ALL {
            for (row, inst) in instances.iter().enumerate() {
                let batched =
                    predict_from_outputs(&outputs, &state.classifier, strategy, row).unwrap();
                let single = predict(&state, &inst.tokens, strategy).unwrap();
                assert_eq!(batched.column, single.column, "{strategy} row {row}");
                assert_eq!(batched.selected, single.selected);
                for (a, b) in batched.combined_probs.iter().zip(&single.combined_probs) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn entropies_stay_within_the_theoretical_range() {
        let state = tiny_state(2, true);
        let mut rng = Rng::new(9);
        let instances: Vec<Instance> = (0..8)
            .map(|_| Instance { tokens: rng.normal_vec(12, 2.0), class_id: 10 })
            .collect();
        let outputs = stage_outputs(&state, &instances, 4).unwrap();
        let k = outputs.num_classes as f64;
        for row in 0..outputs.num_instances {
            let p = predict_from_outputs(&outputs, &state.classifier, StrategyKind::Ensemble, row)
                .unwrap();
            for &h in &p.per_adapter_entropy {
                assert!(h >= 0.0 && h <= k.ln() + 1e-12, "entropy {h} outside [0, ln {k}]");
            }
        }
    }

    #[test]
    fn evaluate_scores_every_requested_strategy() {
        let state = tiny_state(2, true);
        let mut rng = Rng::new(10);
        let instances: Vec<Instance> = (0..6)
            .map(|i| Instance {
                tokens: rng.normal_vec(12, 1.0),
                class_id: [10, 11, 20, 21][i % 4],
            })
            .collect();
        let (acc, selections) = evaluate(&state, &instances, &StrategyKind::ALL, 4).unwrap();
        assert_eq!(acc.len(), 4);
        for (&s, &a) in &acc {
            assert!((0.0..=1.0).contains(&a), "{s}: accuracy {a}");
        }
        assert_eq!(selections.len(), instances.len());
        assert!(selections.iter().all(|&s| s < 2));
    }

    #[test]
    fn zero_adapter_on_fresh_state_gives_uniform_distributions() {
        let mut state = tiny_state(1, false);
        state.task_adapters[0] = AdapterSet::zeros(&state.backbone.config, 2, AdapterId::Task(1));
        let p = predict(&state, &vec![0.5; 12], StrategyKind::EntropyOnly).unwrap();
        // A zero-initialized classifier scores every class identically.
        assert_eq!(p.column, 0);
        for &prob in &p.combined_probs {
            assert!((prob - 0.5).abs() < 1e-15);
        }
        assert!((p.per_adapter_entropy[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
