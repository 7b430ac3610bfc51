//! Bottleneck adapter sets and their flattened task-vector form.
//!
//! One adapter set holds a down-projection and an up-projection per encoder
//! block. Flattening concatenates all matrices into a single parameter
//! vector in a fixed layout (block order, down before up, row-major), with a
//! manifest describing the layout so the vector can be reshaped back. The
//! fusion stage operates entirely on these flat vectors.

use serde::{Deserialize, Serialize};

use super::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Standard deviation for fresh down-projection weights. Up-projections
/// start at zero so a new adapter's residual is exactly zero until trained.
pub const DOWN_INIT_STD: f64 = 0.02;

/// Identity of an adapter set: one per trained task, or the fused universal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterId {
    Task(usize),
    Universal,
}

impl std::fmt::Display for AdapterId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdapterId::Task(t) => write!(f, "task-{t}"),
            AdapterId::Universal => write!(f, "universal"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    WDown,
    WUp,
}

/// One matrix's slot in a flattened task vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub block: usize,
    pub matrix: MatrixKind,
    pub rows: usize,
    pub cols: usize,
}

/// Flattened adapter parameters plus the layout needed to reshape them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub values: Vec<f64>,
    pub manifest: Vec<ManifestEntry>,
}

impl TaskVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let expect: usize = self.manifest.iter().map(|e| e.rows * e.cols).sum();
        if expect != self.values.len() {
            return Err(Error::Data(format!(
                "task vector holds {} values but its manifest describes {expect}",
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn same_manifest(&self, other: &TaskVector) -> bool {
        self.manifest == other.manifest
    }
}

/// Per-block bottleneck adapter weights for one task (or the fused
/// universal adapter).
pub struct AdapterSet {
    pub id: AdapterId,
    pub r: usize,
    /// Per block: `d x r`.
    pub w_down: Vec<Tensor>,
    /// Per block: `r x d`.
    pub w_up: Vec<Tensor>,
}

impl AdapterSet {
    /// Fresh trainable-shaped adapter: Gaussian down-projections, zero
    /// up-projections, so the initial residual contribution is zero.
    pub fn init(cfg: &BackboneConfig, r: usize, id: AdapterId, rng: &mut Rng) -> AdapterSet {
        assert!(r >= 1, "adapter bottleneck must be positive");
        let d = cfg.embed_dim;
        let w_down = (0..cfg.num_blocks)
            .map(|_| Tensor::gaussian(vec![d, r], DOWN_INIT_STD, rng))
            .collect();
        let w_up = (0..cfg.num_blocks).map(|_| Tensor::zeros(vec![r, d])).collect();
        AdapterSet { id, r, w_down, w_up }
    }

    pub fn zeros(cfg: &BackboneConfig, r: usize, id: AdapterId) -> AdapterSet {
        let d = cfg.embed_dim;
        AdapterSet {
            id,
            r,
            w_down: (0..cfg.num_blocks).map(|_| Tensor::zeros(vec![d, r])).collect(),
            w_up: (0..cfg.num_blocks).map(|_| Tensor::zeros(vec![r, d])).collect(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.w_down.len()
    }

    /// Trainable parameters in a fixed order (per block: down, then up).
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.num_blocks());
        for b in 0..self.num_blocks() {
            out.push(self.w_down[b].clone());
            out.push(self.w_up[b].clone());
        }
        out
    }

    pub fn set_trainable(&self, on: bool) {
        for p in self.params() {
            p.set_requires_grad(on);
        }
    }

    pub fn detached_copy(&self) -> AdapterSet {
        AdapterSet {
            id: self.id,
            r: self.r,
            w_down: self.w_down.iter().map(Tensor::detached_copy).collect(),
            w_up: self.w_up.iter().map(Tensor::detached_copy).collect(),
        }
    }

    pub fn shapes_match(&self, other: &AdapterSet) -> bool {
        self.r == other.r
            && self.num_blocks() == other.num_blocks()
            && self
                .w_down
                .iter()
                .zip(&other.w_down)
                .all(|(a, b)| a.shape() == b.shape())
            && self.w_up.iter().zip(&other.w_up).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn validate_for(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.num_blocks() != cfg.num_blocks {
            return Err(Error::Data(format!(
                "adapter {} spans {} blocks but the backbone has {}",
                self.id,
                self.num_blocks(),
                cfg.num_blocks
            )));
        }
        let d = cfg.embed_dim;
        for b in 0..self.num_blocks() {
            if self.w_down[b].shape() != vec![d, self.r] || self.w_up[b].shape() != vec![self.r, d] {
                return Err(Error::Data(format!(
                    "adapter {} block {b} has shapes {:?}/{:?}, expected [{d}, {}]/[{}, {d}]",
                    self.id,
                    self.w_down[b].shape(),
                    self.w_up[b].shape(),
                    self.r,
                    self.r
                )));
            }
        }
        Ok(())
    }

    /// Deterministic flattening: block order, down-projection before
    /// up-projection, row-major within each matrix.
    pub fn flatten(&self) -> TaskVector {
        let mut values = Vec::new();
        let mut manifest = Vec::with_capacity(2 * self.num_blocks());
        for b in 0..self.num_blocks() {
            for (matrix, t) in [(MatrixKind::WDown, &self.w_down[b]), (MatrixKind::WUp, &self.w_up[b])] {
                let shape = t.shape();
                manifest.push(ManifestEntry {
                    block: b,
                    matrix,
                    rows: shape[0],
                    cols: shape[1],
                });
                values.extend(t.data_vec());
            }
        }
        TaskVector { values, manifest }
    }

    /// Inverse of [`flatten`](Self::flatten). The manifest must describe a
    /// well-formed adapter layout: consecutive blocks 0..L, each a `d x r`
    /// down-projection followed by an `r x d` up-projection.
    pub fn from_task_vector(tv: &TaskVector, id: AdapterId) -> Result<AdapterSet> {
        tv.validate()?;
        if tv.manifest.is_empty() || tv.manifest.len() % 2 != 0 {
            return Err(Error::Data(format!(
                "task vector manifest has {} entries, expected a down/up pair per block",
                tv.manifest.len()
            )));
        }
        let num_blocks = tv.manifest.len() / 2;
        let (d, r) = (tv.manifest[0].rows, tv.manifest[0].cols);
        let mut w_down = Vec::with_capacity(num_blocks);
        let mut w_up = Vec::with_capacity(num_blocks);
        let mut offset = 0;
        for b in 0..num_blocks {
            let down = &tv.manifest[2 * b];
            let up = &tv.manifest[2 * b + 1];
            let ok = down.block == b
                && up.block == b
                && down.matrix == MatrixKind::WDown
                && up.matrix == MatrixKind::WUp
                && down.rows == d
                && down.cols == r
                && up.rows == r
                && up.cols == d;
            if !ok {
                return Err(Error::Data(format!(
                    "task vector manifest is not a well-formed adapter layout at block {b}: {:?}, {:?}",
                    down, up
                )));
            }
            let dn = d * r;
            w_down.push(Tensor::matrix(d, r, tv.values[offset..offset + dn].to_vec()));
            offset += dn;
            w_up.push(Tensor::matrix(r, d, tv.values[offset..offset + dn].to_vec()));
            offset += dn;
        }
        Ok(AdapterSet { id, r, w_down, w_up })
    }
}

impl std::fmt::Debug for AdapterSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdapterSet")
            .field("id", &self.id)
            .field("r", &self.r)
            .field("blocks", &self.num_blocks())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            num_blocks: 1,
            embed_dim: 2,
            num_heads: 1,
            mlp_hidden: 3,
            seq_len: 2,
            token_dim: 2,
            mean_pool: false,
        }
    }

    #[test]
    fn flatten_layout_is_down_then_up_row_major() {
        let cfg = tiny_cfg();
        let a = AdapterSet::zeros(&cfg, 1, AdapterId::Task(1));
        a.w_down[0].update_data(|d| d.copy_from_slice(&[1.0, 2.0]));
        a.w_up[0].update_data(|d| d.copy_from_slice(&[3.0, 4.0]));
        let tv = a.flatten();
        assert_eq!(tv.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tv.manifest.len(), 2);
        assert_eq!(tv.manifest[0].matrix, MatrixKind::WDown);
        assert_eq!((tv.manifest[0].rows, tv.manifest[0].cols), (2, 1));
        assert_eq!(tv.manifest[1].matrix, MatrixKind::WUp);
    }

    #[test]
    fn zero_adapter_flattens_to_zero_vector() {
        let cfg = BackboneConfig::default();
        let a = AdapterSet::zeros(&cfg, 4, AdapterId::Task(1));
        let tv = a.flatten();
        assert!(tv.values.iter().all(|&v| v == 0.0));
        assert_eq!(tv.len(), cfg.num_blocks * 2 * cfg.embed_dim * 4);
    }

    #[test]
    fn flatten_unflatten_round_trip_is_bitwise() {
        let cfg = BackboneConfig::default();
        let mut rng = Rng::new(42);
        let a = AdapterSet::init(&cfg, 16, AdapterId::Task(3), &mut rng);
        a.w_up[1].update_data(|d| d.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64) * 0.25 - 3.0));
        let tv = a.flatten();
        let b = AdapterSet::from_task_vector(&tv, AdapterId::Task(3)).unwrap();
        assert_eq!(b.id, a.id);
        for blk in 0..cfg.num_blocks {
            assert_eq!(a.w_down[blk].data_vec(), b.w_down[blk].data_vec());
            assert_eq!(a.w_up[blk].data_vec(), b.w_up[blk].data_vec());
        }
        assert_eq!(b.flatten(), tv);
    }

    #[test]
    fn unflatten_reads_layout_positionally() {
        let cfg = tiny_cfg();
        let tv = TaskVector {
            values: vec![3.0, -2.0, 0.0, 7.0],
            manifest: AdapterSet::zeros(&cfg, 1, AdapterId::Universal).flatten().manifest,
        };
        let a = AdapterSet::from_task_vector(&tv, AdapterId::Universal).unwrap();
        assert_eq!(a.w_down[0].data_vec(), vec![3.0, -2.0]);
        assert_eq!(a.w_up[0].data_vec(), vec![0.0, 7.0]);
    }

    #[test]
    fn truncated_values_are_rejected() {
        let cfg = tiny_cfg();
        let mut tv = AdapterSet::zeros(&cfg, 1, AdapterId::Task(1)).flatten();
        tv.values.pop();
        let err = AdapterSet::from_task_vector(&tv, AdapterId::Task(1)).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err}");
    }

    #[test]
    fn malformed_manifest_order_is_rejected() {
        let cfg = tiny_cfg();
        let mut tv = AdapterSet::zeros(&cfg, 1, AdapterId::Task(1)).flatten();
        tv.manifest.swap(0, 1);
        assert!(AdapterSet::from_task_vector(&tv, AdapterId::Task(1)).is_err());
    }

    #[test]
    fn fresh_adapter_has_zero_up_projection() {
        let cfg = BackboneConfig::default();
        let mut rng = Rng::new(1);
        let a = AdapterSet::init(&cfg, 16, AdapterId::Task(1), &mut rng);
        for b in 0..cfg.num_blocks {
            assert!(a.w_up[b].data_vec().iter().all(|&v| v == 0.0));
            assert!(a.w_down[b].data_vec().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn validate_for_rejects_wrong_width() {
        let cfg = BackboneConfig::default();
        let narrow = BackboneConfig { embed_dim: 16, ..cfg.clone() };
        let a = AdapterSet::zeros(&narrow, 4, AdapterId::Task(1));
        assert!(a.validate_for(&cfg).is_err());
        assert!(a.validate_for(&narrow).is_ok());
    }
}
