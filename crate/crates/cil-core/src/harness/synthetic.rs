//! Deterministic synthetic classification universe.
//!
//! Each class owns a prototype direction on the unit sphere of the token
//! space; an instance is `seq_len` noisy copies of that prototype. A
//! configurable number of confusable pairs makes the stream genuinely
//! incremental: the second class of a pair reuses the first one's prototype
//! plus a small offset (0.3 times the noise scale), and the two are always
//! placed in different tasks, so telling them apart requires knowledge from
//! more than one stage.
//!
//! All randomness derives from the config seed through fixed stream ids:
//! one stream for prototypes and pair offsets, one per class and split for
//! instance noise. The same config and partition always produce bitwise
//! identical data.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::{IncrementalStream, Instance, TaskData};
use crate::rng::Rng;

/// Scale of a confusable pair's prototype offset, relative to `noise_std`.
pub const PAIR_OFFSET_FACTOR: f64 = 0.3;

const STREAM_PROTOTYPES: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;

fn class_stream(split: u64, class_id: usize) -> u64 {
    (split << 32) | class_id as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub token_dim: usize,
    pub seq_len: usize,
    pub noise_std: f64,
    pub confusable_pairs: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> SyntheticConfig {
        SyntheticConfig {
            num_classes: 50,
            train_per_class: 100,
            test_per_class: 50,
            token_dim: 16,
            seq_len: 8,
            noise_std: 0.3,
            confusable_pairs: 4,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("synthetic: num_classes must be positive".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "synthetic: train_per_class and test_per_class must be positive".into(),
            ));
        }
        if self.token_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("synthetic: token_dim and seq_len must be positive".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "synthetic: noise_std must be finite and nonnegative, got {}",
                self.noise_std
            )));
        }
        if 2 * self.confusable_pairs > self.num_classes {
            return Err(Error::Config(format!(
                "synthetic: {} confusable pairs need {} distinct classes, only {} exist",
                self.confusable_pairs,
                2 * self.confusable_pairs,
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Pick which classes form confusable pairs, each pair straddling two
/// different tasks. Pairs are disjoint; selection walks the tasks round
/// robin so they spread across the whole stream.
pub fn choose_pairs(num_pairs: usize, partition: &[Vec<usize>]) -> Result<Vec<(usize, usize)>> {
    if num_pairs == 0 {
        return Ok(Vec::new());
    }
    if partition.len() < 2 {
        return Err(Error::Config(
            "confusable pairs need at least two tasks to straddle".into(),
        ));
    }
    let t = partition.len();
    let mut cursor = vec![0usize; t];
    let mut take_from = |start: usize, exclude: Option<usize>| -> Option<(usize, usize)> {
        for step in 0..t {
            let task = (start + step) % t;
            if Some(task) == exclude {
                continue;
            }
            if cursor[task] < partition[task].len() {
                let class = partition[task][cursor[task]];
                cursor[task] += 1;
                return Some((task, class));
            }
        }
        None
    };

    let mut pairs = Vec::with_capacity(num_pairs);
    for p in 0..num_pairs {
        let (task_a, a) = take_from(p % t, None).ok_or_else(|| {
            Error::Config(format!("ran out of classes while forming {num_pairs} confusable pairs"))
        })?;
        let (_, b) = take_from((task_a + 1) % t, Some(task_a)).ok_or_else(|| {
            Error::Config(format!(
                "cannot place {num_pairs} confusable pairs across distinct tasks"
            ))
        })?;
        pairs.push((a, b));
    }
    Ok(pairs)
}

/// Per-class prototype tokens. Base prototypes are drawn for every class in
/// id order; pair offsets are applied afterwards, in pair order.
fn prototypes(cfg: &SyntheticConfig, pairs: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let mut rng = Rng::from_seed_stream(cfg.seed, STREAM_PROTOTYPES);
    let mut protos: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| rng.unit_vec(cfg.token_dim))
        .collect();
    for &(a, b) in pairs {
        let offset = rng.unit_vec(cfg.token_dim);
        protos[b] = protos[a]
            .iter()
            .zip(&offset)
            .map(|(p, o)| p + PAIR_OFFSET_FACTOR * cfg.noise_std * o)
            .collect();
    }
    protos
}

fn class_instances(
    cfg: &SyntheticConfig,
    proto: &[f64],
    class_id: usize,
    count: usize,
    split: u64,
) -> Vec<Instance> {
    let mut rng = Rng::from_seed_stream(cfg.seed, class_stream(split, class_id));
    (0..count)
        .map(|_| {
            let mut tokens = Vec::with_capacity(cfg.seq_len * cfg.token_dim);
            for _ in 0..cfg.seq_len {
                for &p in proto {
                    tokens.push(p + cfg.noise_std * rng.next_normal());
                }
            }
            Instance { tokens, class_id }
        })
        .collect()
}

/// Generate the full incremental stream for a class partition (as produced
/// by [`crate::harness::protocol::ProtocolSpec::split_classes`]).
pub fn make_synthetic_stream(
    cfg: &SyntheticConfig,
    partition: &[Vec<usize>],
) -> Result<IncrementalStream> {
    cfg.validate()?;
    let mentioned: BTreeSet<usize> = partition.iter().flatten().copied().collect();
    let expected: BTreeSet<usize> = (0..cfg.num_classes).collect();
    if mentioned != expected || partition.iter().map(Vec::len).sum::<usize>() != cfg.num_classes {
        return Err(Error::Config(format!(
            "partition covers {} class ids, synthetic universe has classes 0..{}",
            mentioned.len(),
            cfg.num_classes
        )));
    }

    let pairs = choose_pairs(cfg.confusable_pairs, partition)?;
    let protos = prototypes(cfg, &pairs);

    let tasks: Vec<TaskData> = partition
        .iter()
        .enumerate()
        .map(|(i, classes)| {
            let mut task = TaskData {
                task_id: i + 1,
                class_ids: classes.clone(),
                train: Vec::new(),
                test: Vec::new(),
            };
            for &c in classes {
                task.train.extend(class_instances(cfg, &protos[c], c, cfg.train_per_class, STREAM_TRAIN));
                task.test.extend(class_instances(cfg, &protos[c], c, cfg.test_per_class, STREAM_TEST));
            }
            task
        })
        .collect();

    let stream = IncrementalStream { tasks };
    stream.validate()?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            num_classes: 6,
            train_per_class: 4,
            test_per_class: 2,
            token_dim: 5,
            seq_len: 3,
            noise_std: 0.2,
            confusable_pairs: 2,
            seed: 11,
        }
    }

    fn partition3() -> Vec<Vec<usize>> {
        vec![vec![0, 1], vec![2, 3], vec![4, 5]]
    }

    #[test]
    fn default_config_is_valid() {
        SyntheticConfig::default().validate().unwrap();
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let cfg = small_cfg();
        let a = make_synthetic_stream(&cfg, &partition3()).unwrap();
        let b = make_synthetic_stream(&cfg, &partition3()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stream_structure_follows_the_partition() {
        let cfg = small_cfg();
        let s = make_synthetic_stream(&cfg, &partition3()).unwrap();
        assert_eq!(s.num_tasks(), 3);
        for (task, classes) in s.tasks.iter().zip(partition3()) {
            assert_eq!(task.class_ids, classes);
            assert_eq!(task.train.len(), 2 * cfg.train_per_class);
            assert_eq!(task.test.len(), 2 * cfg.test_per_class);
            assert!(task.train.iter().all(|i| i.tokens.len() == 15));
        }
    }

    #[test]
    fn pairs_straddle_distinct_tasks_and_are_disjoint() {
        let partition = partition3();
        let pairs = choose_pairs(2, &partition).unwrap();
        assert_eq!(pairs.len(), 2);
        let task_of = |c: usize| partition.iter().position(|t| t.contains(&c)).unwrap();
        let mut used = BTreeSet::new();
        for &(a, b) in &pairs {
            assert_ne!(task_of(a), task_of(b), "pair ({a}, {b}) shares a task");
            assert!(used.insert(a) && used.insert(b), "pair member reused");
        }
    }

    #[test]
    fn pair_prototypes_sit_at_the_documented_offset() {
        let cfg = small_cfg();
        let pairs = choose_pairs(cfg.confusable_pairs, &partition3()).unwrap();
        let protos = prototypes(&cfg, &pairs);
        for &(a, b) in &pairs {
            let dist: f64 = protos[a]
                .iter()
                .zip(&protos[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let want = PAIR_OFFSET_FACTOR * cfg.noise_std;
            assert!((dist - want).abs() < 1e-12, "pair ({a}, {b}) distance {dist}, want {want}");
        }
        // Every class that is not the offset member of a pair keeps its
        // unit-sphere base prototype.
        for (c, p) in protos.iter().enumerate() {
            if pairs.iter().all(|&(_, b)| b != c) {
                let norm: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12, "class {c} prototype norm {norm}");
            }
        }
    }

    #[test]
    fn zero_noise_collapses_a_class_to_its_prototype() {
        let cfg = SyntheticConfig { noise_std: 0.0, ..small_cfg() };
        let s = make_synthetic_stream(&cfg, &partition3()).unwrap();
        let first = &s.tasks[0].train[0];
        for inst in s.tasks[0].train.iter().filter(|i| i.class_id == first.class_id) {
            assert_eq!(inst.tokens, first.tokens);
        }
        let token0 = &first.tokens[..cfg.token_dim];
        let token1 = &first.tokens[cfg.token_dim..2 * cfg.token_dim];
        assert_eq!(token0, token1);
    }

    #[test]
    fn partition_and_universe_must_agree() {
        let cfg = small_cfg();
        let bad = vec![vec![0, 1], vec![2, 3]];
        assert!(make_synthetic_stream(&cfg, &bad).is_err());
        let bad = vec![vec![0, 1, 2], vec![3, 4, 9]];
        assert!(make_synthetic_stream(&cfg, &bad).is_err());
    }

    #[test]
    fn pair_placement_failures_are_reported() {
        assert!(choose_pairs(1, &[vec![0, 1, 2, 3, 4, 5]]).is_err());
        assert!(choose_pairs(4, &[vec![0, 1, 2, 3], vec![4]]).is_err());
        assert_eq!(choose_pairs(0, &[vec![0]]).unwrap(), Vec::new());
        let cfg = SyntheticConfig { confusable_pairs: 4, ..small_cfg() };
        assert!(cfg.validate().is_err());
    }
}
