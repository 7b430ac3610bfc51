//! Shared growing linear classification head.
//!
//! One weight column per class, appended as tasks introduce classes. The
//! column order defines the label space used everywhere downstream: batch
//! labels, probability vectors, and reports all index classes by column.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Classifier {
    /// `embed_dim x num_classes`; column k scores class k.
    w: Tensor,
    embed_dim: usize,
    /// Column index -> original class id from the stream.
    class_ids: Vec<usize>,
    /// Column index -> task that introduced the class.
    class_to_task: Vec<usize>,
    by_class_id: BTreeMap<usize, usize>,
}

impl Classifier {
    pub fn new(embed_dim: usize) -> Classifier {
        assert!(embed_dim >= 1, "classifier needs a positive feature width");
        Classifier {
            w: Tensor::zeros(vec![embed_dim, 0]),
            embed_dim,
            class_ids: Vec::new(),
            class_to_task: Vec::new(),
            by_class_id: BTreeMap::new(),
        }
    }

    /// Rebuild from checkpoint parts. `w_data` is row-major
    /// `embed_dim x class_ids.len()`.
    pub fn from_parts(
        embed_dim: usize,
        w_data: Vec<f64>,
        class_ids: Vec<usize>,
        class_to_task: Vec<usize>,
    ) -> Result<Classifier> {
        let k = class_ids.len();
        if class_to_task.len() != k {
            return Err(Error::Data(format!(
                "classifier has {k} classes but {} task assignments",
                class_to_task.len()
            )));
        }
        if w_data.len() != embed_dim * k {
            return Err(Error::Data(format!(
                "classifier weight blob holds {} values, expected {embed_dim} x {k}",
                w_data.len()
            )));
        }
        let mut by_class_id = BTreeMap::new();
        for (col, &cid) in class_ids.iter().enumerate() {
            if by_class_id.insert(cid, col).is_some() {
                return Err(Error::Data(format!("classifier lists class {cid} twice")));
            }
        }
        Ok(Classifier {
            w: Tensor::matrix(embed_dim, k, w_data),
            embed_dim,
            class_ids,
            class_to_task,
            by_class_id,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn class_to_task(&self) -> &[usize] {
        &self.class_to_task
    }

    pub fn column_of(&self, class_id: usize) -> Option<usize> {
        self.by_class_id.get(&class_id).copied()
    }

    pub fn task_of_column(&self, column: usize) -> usize {
        self.class_to_task[column]
    }

    /// Append zero-initialized columns for a task's classes. Rejects class
    /// ids already owned by an earlier task (incremental label sets must be
    /// disjoint).
    pub fn add_classes(&mut self, class_ids: &[usize], task: usize) -> Result<()> {
        for &cid in class_ids {
            if let Some(col) = self.by_class_id.get(&cid) {
                return Err(Error::Data(format!(
                    "class {cid} already introduced by task {}",
                    self.class_to_task[*col]
                )));
            }
        }
        let old_k = self.num_classes();
        let new_k = old_k + class_ids.len();
        let old = self.w.data_vec();
        let trainable = self.w.requires_grad();
        let mut data = vec![0.0; self.embed_dim * new_k];
        for row in 0..self.embed_dim {
            data[row * new_k..row * new_k + old_k].copy_from_slice(&old[row * old_k..(row + 1) * old_k]);
        }
        self.w = Tensor::matrix(self.embed_dim, new_k, data);
        self.w.set_requires_grad(trainable);
        for &cid in class_ids {
            self.by_class_id.insert(cid, self.class_ids.len());
            self.class_ids.push(cid);
            self.class_to_task.push(task);
        }
        Ok(())
    }

    /// Scores for a batch of features (`n x embed_dim`), one column per
    /// seen class.
    pub fn logits_batch(&self, features: &Tensor) -> Tensor {
        assert_eq!(
            features.cols(),
            self.embed_dim,
            "classifier: feature width {} does not match embed_dim {}",
            features.cols(),
            self.embed_dim
        );
        features.matmul(&self.w)
    }

    /// Scores for one raw feature vector.
    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        assert_eq!(
            feature.len(),
            self.embed_dim,
            "classifier: feature length {} does not match embed_dim {}",
            feature.len(),
            self.embed_dim
        );
        crate::tensor::mm(feature, &self.w.data_vec(), 1, self.embed_dim, self.num_classes())
    }

    pub fn set_trainable(&self, on: bool) {
        self.w.set_requires_grad(on);
    }

    pub fn detached_copy(&self) -> Classifier {
        Classifier {
            w: self.w.detached_copy(),
            embed_dim: self.embed_dim,
            class_ids: self.class_ids.clone(),
            class_to_task: self.class_to_task.clone(),
            by_class_id: self.by_class_id.clone(),
        }
    }

    /// Overwrite the weights from another head with identical structure.
    pub fn restore_from(&mut self, other: &Classifier) {
        assert_eq!(self.class_ids, other.class_ids, "classifier restore: class layout differs");
        let src = other.w.data_vec();
        self.w.update_data(|d| d.copy_from_slice(&src));
    }
}

impl std::fmt::Debug for Classifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Classifier")
            .field("embed_dim", &self.embed_dim)
            .field("num_classes", &self.num_classes())
            .finish()
    }
}
