//! Checkpoint directories: `manifest.json` plus raw little-endian `weights.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::seg_network::Architecture;
use crate::tensor::{Float, Tensor};
use crate::uni_encoder::UniEncoderConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    /// Evaluation stub that returns the ground truth.
    Oracle,
}

/// Where a tensor's initial value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    /// Initialized from a stage-1 checkpoint.
    Pretrained,
    /// Randomly initialized in this stage.
    Scratch,
    /// Optimizer state, not a network weight.
    Optimizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub stage: Stage,
    pub step: u64,
    pub arch: Option<Architecture>,
    pub encoder: Option<UniEncoderConfig>,
    pub input_dims: [usize; 3],
    /// Resolved experiment configuration at save time.
    pub config: serde_json::Value,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

/// Header fields of a checkpoint about to be written.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: u64,
    pub arch: Option<Architecture>,
    pub encoder: Option<UniEncoderConfig>,
    pub input_dims: [usize; 3],
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
}

impl Checkpoint {
    /// Assemble from a parameter store plus extra (optimizer) tensors.
    pub fn build<T: Float>(
        meta: CheckpointMeta,
        store: &ParamStore<T>,
        origin: impl Fn(&str) -> Origin,
        extra: Vec<(String, Tensor<T>)>,
    ) -> Self {
        let mut records = Vec::new();
        let mut tensors = BTreeMap::new();
        let mut offset = 0u64;
        let params = store.ids().map(|id| (store.name(id).to_string(), store.get(id).clone(), None));
        let extra = extra.into_iter().map(|(n, t)| (n, t, Some(Origin::Optimizer)));
        for (name, t, fixed) in params.chain(extra) {
            let t32: Tensor<f32> = t.cast();
            records.push(TensorRecord {
                name: name.clone(),
                shape: t32.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                origin: fixed.unwrap_or_else(|| origin(&name)),
            });
            offset += 4 * t32.numel() as u64;
            tensors.insert(name, t32);
        }
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_FORMAT_VERSION,
                stage: meta.stage,
                step: meta.step,
                arch: meta.arch,
                encoder: meta.encoder,
                input_dims: meta.input_dims,
                config: meta.config,
                metrics: meta.metrics,
                tensors: records,
            },
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    /// Names of network weights (optimizer state excluded).
    pub fn weight_names(&self) -> Vec<&str> {
        self.manifest
            .tensors
            .iter()
            .filter(|r| r.origin != Origin::Optimizer)
            .map(|r| r.name.as_str())
            .collect()
    }

    pub fn optimizer_state<T: Float>(&self) -> Vec<(String, Tensor<T>)> {
        self.manifest
            .tensors
            .iter()
            .filter(|r| r.origin == Origin::Optimizer)
            .map(|r| (r.name.clone(), self.tensors[&r.name].cast()))
            .collect()
    }

    /// Copy every weight whose name passes `select` into `store`, bit-exactly.
    /// Returns the transferred names.
    pub fn load_into<T: Float>(&self, store: &mut ParamStore<T>, select: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let mut done = Vec::new();
        for name in self.weight_names() {
            if !select(name) {
                continue;
            }
            store.assign(name, self.tensors[name].cast())?;
            done.push(name.to_string());
        }
        Ok(done)
    }

    /// Atomic save: write into a sibling temp directory, then rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let file_name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        let tmp = parent.join(format!(".{file_name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let weights = tmp.join(WEIGHTS_FILE);
        {
            let file = fs::File::create(&weights).map_err(|e| Error::io(&weights, e))?;
            let mut w = std::io::BufWriter::new(file);
            for rec in &self.manifest.tensors {
                for v in self.tensors[&rec.name].data() {
                    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&weights, e))?;
                }
            }
            w.flush().map_err(|e| Error::io(&weights, e))?;
        }
        let manifest = tmp.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("serializable manifest");
        fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))?;
        let old = parent.join(format!(".{file_name}.old-{}", std::process::id()));
        if dir.exists() {
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unknown checkpoint version {}", manifest.format_version),
            ));
        }
        let weights_path = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        let mut tensors = BTreeMap::new();
        for rec in &manifest.tensors {
            if rec.dtype != "f32" {
                return Err(Error::format(&manifest_path, format!("{}: dtype {}", rec.name, rec.dtype)));
            }
            let n: usize = rec.shape.iter().product();
            let start = rec.offset as usize;
            let end = start + 4 * n;
            let chunk = bytes.get(start..end).ok_or_else(|| {
                Error::format(&weights_path, format!("{} extends past the end of the file", rec.name))
            })?;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(rec.name.clone(), Tensor::from_vec(&rec.shape, data)?);
        }
        Ok(Checkpoint { manifest, tensors })
    }
}
