//! Model assembly: frozen backbone, per-task adapters, universal adapter,
//! shared classifier, and the per-class feature statistics used for replay.

pub mod adapter;
pub mod backbone;
pub mod classifier;

use std::collections::BTreeMap;

pub use adapter::{AdapterId, AdapterSet, ManifestEntry, MatrixKind, TaskVector};
pub use backbone::{Backbone, BackboneConfig, BlockWeights};
pub use classifier::Classifier;

use crate::trainer::ClassStatistics;

/// Everything a trained (or in-training) incremental learner carries.
pub struct ModelState {
    pub backbone: Backbone,
    /// Task-specific adapters in training order; index i holds task i+1.
    pub task_adapters: Vec<AdapterSet>,
    /// Fused adapter, recomputed after each task.
    pub universal: Option<AdapterSet>,
    pub classifier: Classifier,
    /// Per-class feature statistics keyed by classifier column.
    pub stats: BTreeMap<usize, ClassStatistics>,
    /// Bottleneck width used for every adapter.
    pub adapter_rank: usize,
}

impl ModelState {
    pub fn new(backbone: Backbone, adapter_rank: usize) -> ModelState {
        let embed_dim = backbone.config.embed_dim;
        ModelState {
            backbone,
            task_adapters: Vec::new(),
            universal: None,
            classifier: Classifier::new(embed_dim),
            stats: BTreeMap::new(),
            adapter_rank,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.task_adapters.len()
    }

    pub fn seen_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    /// Adapter for 1-based task id.
    pub fn adapter_for_task(&self, task: usize) -> Option<&AdapterSet> {
        match task {
            0 => None,
            t => self.task_adapters.get(t - 1),
        }
    }
}
