//! The incremental protocol: how many classes arrive at each stage and in
//! which order.
//!
//! Class ids `0..total_classes` are shuffled once with a fixed seed, then
//! cut into a base task (when `base_classes > 0`) followed by equal-sized
//! increments. The same seed therefore fixes the same class order across
//! runs and machines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// The class-order shuffle seed used throughout unless overridden.
pub const DEFAULT_SHUFFLE_SEED: u64 = 1993;

/// A `base_classes` + `increment`-per-stage split of `total_classes`.
/// `base_classes == 0` means the first stage is an ordinary increment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSpec {
    pub total_classes: usize,
    pub base_classes: usize,
    pub increment: usize,
    pub shuffle_seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> ProtocolSpec {
        ProtocolSpec {
            total_classes: 50,
            base_classes: 0,
            increment: 10,
            shuffle_seed: DEFAULT_SHUFFLE_SEED,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_classes == 0 {
            return Err(Error::Config("protocol: total_classes must be positive".into()));
        }
        if self.base_classes > self.total_classes {
            return Err(Error::Config(format!(
                "protocol: base_classes {} exceeds total_classes {}",
                self.base_classes, self.total_classes
            )));
        }
        let remaining = self.total_classes - self.base_classes;
        if remaining > 0 {
            if self.increment == 0 {
                return Err(Error::Config(
                    "protocol: increment must be positive when classes remain after the base task"
                        .into(),
                ));
            }
            if remaining % self.increment != 0 {
                return Err(Error::Config(format!(
                    "protocol: {remaining} classes after the base task do not divide into \
                     increments of {}",
                    self.increment
                )));
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        let remaining = self.total_classes - self.base_classes;
        let base_tasks = usize::from(self.base_classes > 0);
        base_tasks + if self.increment == 0 { 0 } else { remaining / self.increment }
    }

    /// The shuffled class partition: one inner vector per task.
    pub fn split_classes(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let mut classes: Vec<usize> = (0..self.total_classes).collect();
        Rng::new(self.shuffle_seed).shuffle(&mut classes);

        let mut tasks = Vec::with_capacity(self.num_tasks());
        let mut cursor = 0;
        if self.base_classes > 0 {
            tasks.push(classes[..self.base_classes].to_vec());
            cursor = self.base_classes;
        }
        while cursor < self.total_classes {
            tasks.push(classes[cursor..cursor + self.increment].to_vec());
            cursor += self.increment;
        }
        Ok(tasks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn default_splits_fifty_classes_into_five_tens() {
        let spec = ProtocolSpec::default();
        let tasks = spec.split_classes().unwrap();
        assert_eq!(tasks.len(), 5);
        assert_eq!(spec.num_tasks(), 5);
        assert!(tasks.iter().all(|t| t.len() == 10));
    }

    #[test]
    fn base_task_then_equal_increments() {
        let spec = ProtocolSpec {
            total_classes: 200,
            base_classes: 100,
            increment: 20,
            shuffle_seed: DEFAULT_SHUFFLE_SEED,
        };
        let tasks = spec.split_classes().unwrap();
        assert_eq!(tasks.len(), 6);
        let sizes: Vec<usize> = tasks.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![100, 20, 20, 20, 20, 20]);
    }

    #[test]
    fn split_is_a_bijection_on_class_ids() {
        let spec = ProtocolSpec { total_classes: 37, base_classes: 7, increment: 5, ..Default::default() };
        let tasks = spec.split_classes().unwrap();
        let all: Vec<usize> = tasks.concat();
        let unique: BTreeSet<usize> = all.iter().copied().collect();
        assert_eq!(all.len(), 37);
        assert_eq!(unique, (0..37).collect());
    }

    #[test]
    fn same_seed_same_order_different_seed_different_order() {
        let spec = ProtocolSpec::default();
        assert_eq!(spec.split_classes().unwrap(), spec.split_classes().unwrap());
        let other = ProtocolSpec { shuffle_seed: 1994, ..ProtocolSpec::default() };
        assert_ne!(spec.split_classes().unwrap(), other.split_classes().unwrap());
    }

    #[test]
    fn shuffle_actually_permutes() {
        let tasks = ProtocolSpec::default().split_classes().unwrap();
        assert_ne!(tasks.concat(), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn whole_set_as_single_base_task() {
        let spec = ProtocolSpec { total_classes: 12, base_classes: 12, increment: 4, ..Default::default() };
        let tasks = spec.split_classes().unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].len(), 12);
    }

    #[test]
    fn indivisible_splits_are_rejected() {
        let bad = ProtocolSpec { total_classes: 55, base_classes: 0, increment: 10, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ProtocolSpec { total_classes: 50, base_classes: 30, increment: 7, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ProtocolSpec { total_classes: 10, base_classes: 20, increment: 5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ProtocolSpec { total_classes: 10, base_classes: 5, increment: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ProtocolSpec { total_classes: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
