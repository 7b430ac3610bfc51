//! Weight persistence: a JSON manifest next to a little-endian binary blob.
//!
//! A checkpoint is a pair of files: the manifest at the given path and a
//! blob named like the manifest with `.bin` appended, holding every value
//! as a little-endian 64-bit float. The manifest lists each parameter's
//! name, shape, and position in the blob, plus the structural metadata
//! needed to rebuild the object (backbone dimensions, classifier columns,
//! statistics counts). Loading rebuilds weights bit for bit, and saving the
//! loaded object again reproduces both files byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AdapterId, AdapterSet, Backbone, BackboneConfig, Classifier, ModelState,
};
use crate::rng::Rng;
use crate::trainer::ClassStatistics;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Backbone,
    Adapter,
    Model,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    kind: CheckpointKind,
    blob: String,
    total_values: usize,
    backbone: BackboneConfig,
    #[serde(default)]
    adapter_rank: usize,
    #[serde(default)]
    adapter_id: Option<String>,
    #[serde(default)]
    num_tasks: usize,
    #[serde(default)]
    has_universal: bool,
    #[serde(default)]
    class_ids: Vec<usize>,
    #[serde(default)]
    class_to_task: Vec<usize>,
    #[serde(default)]
    stats_counts: BTreeMap<usize, usize>,
    entries: Vec<BlobEntry>,
}

fn blob_path_for(manifest_path: &Path, blob_name: &str) -> PathBuf {
    manifest_path.with_file_name(blob_name)
}

fn blob_name_for(manifest_path: &Path) -> Result<String> {
    let name = manifest_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Data(format!("checkpoint path {} has no file name", manifest_path.display())))?;
    Ok(format!("{name}.bin"))
}

fn adapter_id_string(id: AdapterId) -> String {
    id.to_string()
}

fn parse_adapter_id(s: &str) -> Result<AdapterId> {
    if s == "universal" {
        return Ok(AdapterId::Universal);
    }
    if let Some(num) = s.strip_prefix("task-") {
        if let Ok(t) = num.parse::<usize>() {
            return Ok(AdapterId::Task(t));
        }
    }
    Err(Error::Data(format!("unrecognized adapter id {s:?} in checkpoint")))
}

struct BlobBuilder {
    entries: Vec<BlobEntry>,
    values: Vec<f64>,
}

impl BlobBuilder {
    fn new() -> BlobBuilder {
        BlobBuilder { entries: Vec::new(), values: Vec::new() }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "blob entry {name}: shape does not match data length"
        );
        self.entries.push(BlobEntry {
            name,
            shape,
            offset: self.values.len(),
            len: data.len(),
        });
        self.values.extend(data);
    }

    fn push_adapter(&mut self, prefix: &str, adapter: &AdapterSet) {
        for b in 0..adapter.num_blocks() {
            self.push(
                format!("{prefix}.block{b}.w_down"),
                adapter.w_down[b].shape().to_vec(),
                adapter.w_down[b].data_vec(),
            );
            self.push(
                format!("{prefix}.block{b}.w_up"),
                adapter.w_up[b].shape().to_vec(),
                adapter.w_up[b].data_vec(),
            );
        }
    }

    fn push_backbone(&mut self, backbone: &Backbone) {
        for (name, t) in backbone.named_params() {
            self.push(format!("backbone.{name}"), t.shape().to_vec(), t.data_vec());
        }
    }

    fn write(self, manifest_path: &Path, mut manifest: Manifest) -> Result<()> {
        manifest.total_values = self.values.len();
        manifest.entries = self.entries;
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("cannot serialize checkpoint manifest: {e}")))?;
        fs::write(manifest_path, json + "\n")?;
        fs::write(blob_path_for(manifest_path, &manifest.blob), bytes)?;
        Ok(())
    }
}

fn empty_manifest(kind: CheckpointKind, blob: String, backbone: BackboneConfig) -> Manifest {
    Manifest {
        version: FORMAT_VERSION,
        kind,
        blob,
        total_values: 0,
        backbone,
        adapter_rank: 0,
        adapter_id: None,
        num_tasks: 0,
        has_universal: false,
        class_ids: Vec::new(),
        class_to_task: Vec::new(),
        stats_counts: BTreeMap::new(),
        entries: Vec::new(),
    }
}

pub fn save_backbone(backbone: &Backbone, path: &Path) -> Result<()> {
    let mut blob = BlobBuilder::new();
    blob.push_backbone(backbone);
    let manifest = empty_manifest(CheckpointKind::Backbone, blob_name_for(path)?, backbone.config.clone());
    blob.write(path, manifest)
}

pub fn save_adapter(adapter: &AdapterSet, backbone: &BackboneConfig, path: &Path) -> Result<()> {
    adapter.validate_for(backbone)?;
    let mut blob = BlobBuilder::new();
    blob.push_adapter("adapter", adapter);
    let mut manifest = empty_manifest(CheckpointKind::Adapter, blob_name_for(path)?, backbone.clone());
    manifest.adapter_rank = adapter.r;
    manifest.adapter_id = Some(adapter_id_string(adapter.id));
    blob.write(path, manifest)
}

pub fn save_model(state: &ModelState, path: &Path) -> Result<()> {
    let mut blob = BlobBuilder::new();
    blob.push_backbone(&state.backbone);
    for (i, adapter) in state.task_adapters.iter().enumerate() {
        blob.push_adapter(&format!("task{}", i + 1), adapter);
    }
    if let Some(universal) = &state.universal {
        blob.push_adapter("universal", universal);
    }
    blob.push(
        "classifier.w".into(),
        state.classifier.weight().shape().to_vec(),
        state.classifier.weight().data_vec(),
    );
    let mut stats_counts = BTreeMap::new();
    for (col, st) in &state.stats {
        blob.push(format!("stats.{col}.mean"), vec![st.mean.len()], st.mean.clone());
        blob.push(format!("stats.{col}.var"), vec![st.var.len()], st.var.clone());
        stats_counts.insert(*col, st.count);
    }

    let mut manifest = empty_manifest(CheckpointKind::Model, blob_name_for(path)?, state.backbone.config.clone());
    manifest.adapter_rank = state.adapter_rank;
    manifest.num_tasks = state.task_adapters.len();
    manifest.has_universal = state.universal.is_some();
    manifest.class_ids = state.classifier.class_ids().to_vec();
    manifest.class_to_task = state.classifier.class_to_task().to_vec();
    manifest.stats_counts = stats_counts;
    blob.write(path, manifest)
}

struct Loaded {
    manifest: Manifest,
    values: Vec<f64>,
    index: BTreeMap<String, (Vec<usize>, Range<usize>)>,
}

impl Loaded {
    fn take(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let (shape, range) = self
            .index
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing entry {name:?}")))?;
        Ok((shape, &self.values[range.clone()]))
    }

    fn fill(&self, name: &str, tensor: &crate::tensor::Tensor) -> Result<()> {
        let (shape, data) = self.take(name)?;
        if shape != tensor.shape() {
            return Err(Error::Data(format!(
                "checkpoint entry {name:?} has shape {shape:?}, expected {:?}",
                tensor.shape()
            )));
        }
        tensor.update_data(|d| d.copy_from_slice(data));
        Ok(())
    }
}

fn read_files(path: &Path) -> Result<Loaded> {
    let json = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint manifest {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Data(format!("malformed checkpoint manifest {}: {e}", path.display())))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }

    let blob_path = blob_path_for(path, &manifest.blob);
    let bytes = fs::read(&blob_path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint blob {}: {e}", blob_path.display())))?;
    if bytes.len() != manifest.total_values * 8 {
        return Err(Error::Data(format!(
            "checkpoint blob {} holds {} bytes, manifest expects {}",
            blob_path.display(),
            bytes.len(),
            manifest.total_values * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8 bytes")))
        .collect();

    let mut index = BTreeMap::new();
    let mut cursor = 0;
    for entry in &manifest.entries {
        if entry.offset != cursor || entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Data(format!(
                "checkpoint entry {:?} has inconsistent layout",
                entry.name
            )));
        }
        cursor += entry.len;
        if index
            .insert(entry.name.clone(), (entry.shape.clone(), entry.offset..entry.offset + entry.len))
            .is_some()
        {
            return Err(Error::Data(format!("checkpoint lists entry {:?} twice", entry.name)));
        }
    }
    if cursor != manifest.total_values {
        return Err(Error::Data(format!(
            "checkpoint entries cover {cursor} values, manifest expects {}",
            manifest.total_values
        )));
    }
    Ok(Loaded { manifest, values, index })
}

fn expect_kind(loaded: &Loaded, want: CheckpointKind, path: &Path) -> Result<()> {
    if loaded.manifest.kind != want {
        return Err(Error::Data(format!(
            "checkpoint {} holds a {:?}, expected {:?}",
            path.display(),
            loaded.manifest.kind,
            want
        )));
    }
    Ok(())
}

fn rebuild_backbone(loaded: &Loaded) -> Result<Backbone> {
    let mut rng = Rng::new(0);
    let mut backbone = Backbone::init(loaded.manifest.backbone.clone(), &mut rng)?;
    for (name, t) in backbone.named_params() {
        loaded.fill(&format!("backbone.{name}"), &t)?;
    }
    backbone.freeze();
    Ok(backbone)
}

fn rebuild_adapter(loaded: &Loaded, prefix: &str, rank: usize, id: AdapterId) -> Result<AdapterSet> {
    let adapter = AdapterSet::zeros(&loaded.manifest.backbone, rank, id);
    for b in 0..adapter.num_blocks() {
        loaded.fill(&format!("{prefix}.block{b}.w_down"), &adapter.w_down[b])?;
        loaded.fill(&format!("{prefix}.block{b}.w_up"), &adapter.w_up[b])?;
    }
    Ok(adapter)
}

/// Load a backbone checkpoint. The result comes back frozen.
pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let loaded = read_files(path)?;
    expect_kind(&loaded, CheckpointKind::Backbone, path)?;
    rebuild_backbone(&loaded)
}

/// Load a single adapter checkpoint, verifying it was trained against the
/// same backbone dimensions.
pub fn load_adapter(path: &Path, backbone: &BackboneConfig) -> Result<AdapterSet> {
    let loaded = read_files(path)?;
    expect_kind(&loaded, CheckpointKind::Adapter, path)?;
    if loaded.manifest.backbone != *backbone {
        return Err(Error::Data(format!(
            "adapter checkpoint was saved for backbone {:?}, current backbone is {:?}",
            loaded.manifest.backbone, backbone
        )));
    }
    let id = match &loaded.manifest.adapter_id {
        Some(s) => parse_adapter_id(s)?,
        None => return Err(Error::Data("adapter checkpoint is missing its adapter id".into())),
    };
    let adapter = rebuild_adapter(&loaded, "adapter", loaded.manifest.adapter_rank, id)?;
    adapter.validate_for(backbone)?;
    Ok(adapter)
}

/// Load a full model checkpoint: backbone, all task adapters, the universal
/// adapter if fused, the classifier, and per-class statistics.
pub fn load_model(path: &Path) -> Result<ModelState> {
    let loaded = read_files(path)?;
    expect_kind(&loaded, CheckpointKind::Model, path)?;
    let manifest = &loaded.manifest;

    let backbone = rebuild_backbone(&loaded)?;
    let mut state = ModelState::new(backbone, manifest.adapter_rank);

    for t in 1..=manifest.num_tasks {
        let adapter = rebuild_adapter(
            &loaded,
            &format!("task{t}"),
            manifest.adapter_rank,
            AdapterId::Task(t),
        )?;
        adapter.validate_for(&state.backbone.config)?;
        state.task_adapters.push(adapter);
    }
    if manifest.has_universal {
        let universal = rebuild_adapter(&loaded, "universal", manifest.adapter_rank, AdapterId::Universal)?;
        universal.validate_for(&state.backbone.config)?;
        state.universal = Some(universal);
    }

    let (w_shape, w_data) = loaded.take("classifier.w")?;
    let d = state.backbone.config.embed_dim;
    if w_shape != [d, manifest.class_ids.len()] {
        return Err(Error::Data(format!(
            "classifier weight has shape {w_shape:?}, expected [{d}, {}]",
            manifest.class_ids.len()
        )));
    }
    for &task in &manifest.class_to_task {
        if task == 0 || task > manifest.num_tasks {
            return Err(Error::Data(format!(
                "classifier column belongs to task {task}, checkpoint has {} tasks",
                manifest.num_tasks
            )));
        }
    }
    state.classifier = Classifier::from_parts(
        d,
        w_data.to_vec(),
        manifest.class_ids.clone(),
        manifest.class_to_task.clone(),
    )?;

    for (&col, &count) in &manifest.stats_counts {
        let (_, mean) = loaded.take(&format!("stats.{col}.mean"))?;
        let (_, var) = loaded.take(&format!("stats.{col}.var"))?;
        if mean.len() != d || var.len() != d {
            return Err(Error::Data(format!(
                "statistics for column {col} have {} / {} values, expected {d}",
                mean.len(),
                var.len()
            )));
        }
        state.stats.insert(col, ClassStatistics { mean: mean.to_vec(), var: var.to_vec(), count });
    }
    Ok(state)
}
