//! Experiment configuration: TOML files layered over named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_synth::PhantomParams;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::finetune::FinetuneConfig;
use crate::masking::MaskConfig;
use crate::optimization::ScheduleConfig;
use crate::pretrain::PretrainConfig;
use crate::seg_network::Architecture;
use crate::uni_encoder::{ScalePreset, UniEncoderConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const PRESETS: [&str; 3] = ["desk", "paper", "tiny"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_cases: usize,
    /// Size of the generated volumes.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub phantom: PhantomParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Skip stage-1 weights and initialize the encoder randomly.
    pub from_scratch: bool,
    /// Network input crop; every augmentation crop is set to this.
    pub input_dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Any of `csv`, `markdown`.
    pub formats: Vec<String>,
    /// Also write per-case metrics as JSON lines.
    pub per_case_jsonl: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub preset: String,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
    pub device: String,
    /// Progress line every this many steps (0 = quiet).
    pub log_every: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub encoder: UniEncoderConfig,
    pub mask: MaskConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

fn schedule(total_steps: usize) -> ScheduleConfig {
    ScheduleConfig {
        total_steps,
        ..ScheduleConfig::default()
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            preset: name.to_string(),
            seed: 0,
            out: None,
            deterministic: true,
            device: "cpu".into(),
            log_every: 50,
            data: DataConfig {
                n_cases: 8,
                dims: [16; 3],
                spacing: [1.0; 3],
                phantom: PhantomParams::default(),
            },
            model: ModelConfig {
                arch: Architecture::Full,
                from_scratch: false,
                input_dims: [16; 3],
            },
            encoder: UniEncoderConfig {
                patch: 8,
                d_embed: 96,
                layers: 4,
                heads: 6,
                registers: 4,
                rope_base: 10000.0,
            },
            mask: MaskConfig::default(),
            pretrain: PretrainConfig {
                optim: schedule(500),
                batch_size: 4,
                val_every: 100,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                optim: schedule(2000),
                batch_size: 1,
                val_every: 200,
                ..FinetuneConfig::default()
            },
            eval: EvalConfig::default(),
            report: ReportConfig {
                formats: vec!["csv".into(), "markdown".into()],
                per_case_jsonl: false,
            },
        };
        match name {
            "desk" => {}
            "paper" => {
                // 600 epochs of 250 iterations per stage, BraTS-sized cohort
                cfg.data.n_cases = 1251;
                cfg.data.dims = [128; 3];
                cfg.model.input_dims = [96; 3];
                cfg.encoder = UniEncoderConfig::preset(ScalePreset::Base);
                cfg.pretrain.optim = schedule(150_000);
                cfg.pretrain.batch_size = 4;
                cfg.pretrain.val_every = 250;
                cfg.finetune.optim = schedule(150_000);
                cfg.finetune.batch_size = 4;
                cfg.finetune.val_every = 250;
                cfg.log_every = 250;
            }
            "tiny" => {
                cfg.data.n_cases = 4;
                cfg.encoder.d_embed = 24;
                cfg.encoder.layers = 1;
                cfg.encoder.heads = 2;
                cfg.encoder.registers = 1;
                cfg.pretrain.optim = schedule(4);
                cfg.pretrain.batch_size = 2;
                cfg.pretrain.val_every = 2;
                cfg.finetune.optim = schedule(2);
                cfg.finetune.val_every = 1;
                cfg.log_every = 0;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        cfg.sync_crops();
        Ok(cfg)
    }

    /// Preset (from `preset_override`, the file's `preset` key, or `desk`)
    /// overlaid with the file's keys. Unknown keys are rejected.
    pub fn from_toml_str(text: &str, preset_override: Option<&str>) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let name = match (preset_override, file.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(Error::config("preset must be a string")),
            (None, None) => "desk".to_string(),
        };
        if let Some(v) = file.get("schema_version") {
            if v.as_integer() != Some(SCHEMA_VERSION as i64) {
                return Err(Error::config(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )));
            }
        }
        let base = Self::preset(&name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, file);
        merged.insert("preset".into(), toml::Value::String(name));
        let mut cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.sync_crops();
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, preset_override).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    /// Augmentation crops follow the model input size.
    pub fn sync_crops(&mut self) {
        self.pretrain.augment.crop = self.model.input_dims;
        self.finetune.augment.crop = self.model.input_dims;
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!("schema_version must be {SCHEMA_VERSION}")));
        }
        if self.device != "cpu" {
            return Err(Error::config(format!("device {:?} is not available (cpu only)", self.device)));
        }
        self.data.phantom.validate()?;
        if self.data.dims.iter().any(|&d| d == 0) || self.data.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("data.dims and data.spacing must be positive"));
        }
        let input = self.model.input_dims;
        if (0..3).any(|k| input[k] > self.data.dims[k] || input[k] % 8 != 0 || input[k] == 0) {
            return Err(Error::config(format!(
                "model.input_dims {input:?} must be positive multiples of 8 within data.dims {:?}",
                self.data.dims
            )));
        }
        self.encoder.validate()?;
        self.mask.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        for f in &self.report.formats {
            crate::evaluation::ReportFormat::parse(f)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
