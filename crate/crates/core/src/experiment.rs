//! End-to-end commands: dataset generation, both training stages, and
//! protocol evaluation, each writing into an output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointMeta, Origin, Stage};
use crate::config::ExperimentConfig;
use crate::data_synth::{
    derive_seed, generate_case, split_sizes, write_case, DatasetManifest, ManifestEntry, MultimodalCase, Split,
    CASE_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_protocol, write_jsonl, write_report, OracleSegmenter, ProtocolReport, ReportFormat, Segmenter};
use crate::finetune::{run_finetuning, FinetuneModel, FinetuneSummary};
use crate::pretrain::{run_pretraining, PretrainModel, PretrainSummary};
use crate::training::RunOptions;

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

fn is_nonempty_dir(path: &Path) -> bool {
    std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(RESOLVED_CONFIG);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

fn run_options(cfg: &ExperimentConfig, out: &Path) -> RunOptions {
    RunOptions {
        seed: cfg.seed,
        out_dir: Some(out.to_path_buf()),
        config_echo: cfg.to_json(),
        log_every: cfg.log_every,
    }
}

/// Generate `data.n_cases` phantoms under `out` with a train/val/test manifest.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    if is_nonempty_dir(out) {
        if !force {
            return Err(Error::config(format!(
                "{} exists and is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let n = cfg.data.n_cases;
    let (train, val, _) = split_sizes(n)?;
    prepare_out(out, cfg)?;
    let patch = cfg.encoder.patch;
    let entries: Vec<Result<ManifestEntry>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut case = generate_case(derive_seed(cfg.seed, i as u64), cfg.data.dims, &cfg.data.phantom, patch)?;
            case.spacing = cfg.data.spacing;
            let dir = format!("case_{i:04}");
            write_case(&case, &out.join(&dir))?;
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            Ok(ManifestEntry { dir, split })
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: CASE_FORMAT_VERSION,
        seed: cfg.seed,
        dims: cfg.data.dims,
        cases: entries.into_iter().collect::<Result<_>>()?,
    };
    manifest.save(&out.join(MANIFEST))?;
    Ok(manifest)
}

pub struct Dataset {
    pub train: Vec<MultimodalCase>,
    pub val: Vec<MultimodalCase>,
    pub test: Vec<MultimodalCase>,
}

pub fn load_dataset(root: &Path, patch: usize) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(Error::data(format!("no dataset manifest at {}", path.display())));
    }
    let manifest = DatasetManifest::load(&path)?;
    let load = |split| -> Result<Vec<MultimodalCase>> {
        let cases = manifest.load_split(root, split)?;
        for c in &cases {
            c.validate(patch)?;
        }
        Ok(cases)
    };
    Ok(Dataset {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    })
}

/// Stage 1. With `resume`, weights, optimizer state and step come from that checkpoint.
pub fn pretrain(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<PretrainSummary> {
    cfg.validate()?;
    let ds = load_dataset(data, cfg.encoder.patch)?;
    let mut model = match resume {
        Some(dir) => {
            let model = PretrainModel::<f32>::from_checkpoint(&Checkpoint::load(dir)?)?;
            if model.encoder.config != cfg.encoder || model.input_dims() != cfg.model.input_dims {
                return Err(Error::Incompatible(format!(
                    "{} was trained with a different encoder or input size",
                    dir.display()
                )));
            }
            model
        }
        None => PretrainModel::<f32>::new(&cfg.encoder, cfg.model.input_dims, cfg.seed)?,
    };
    prepare_out(out, cfg)?;
    run_pretraining(&mut model, &ds.train, &ds.val, &cfg.pretrain, &cfg.mask, &run_options(cfg, out))
}

/// Stage 2. A stage-1 checkpoint is required unless the run is from scratch
/// or has no transformer branch.
pub fn finetune(
    cfg: &ExperimentConfig,
    data: &Path,
    stage1: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let ds = load_dataset(data, cfg.encoder.patch)?;
    let arch = cfg.model.arch;
    let dims = cfg.model.input_dims;
    let mut model = match resume {
        Some(dir) => {
            let model = FinetuneModel::<f32>::from_checkpoint(&Checkpoint::load(dir)?)?;
            if model.arch() != arch || model.encoder != cfg.encoder || model.net.input_dims != dims {
                return Err(Error::Incompatible(format!(
                    "{} was trained with a different architecture, encoder or input size",
                    dir.display()
                )));
            }
            model
        }
        None if cfg.model.from_scratch || !arch.has_uni() => {
            FinetuneModel::<f32>::new(arch, &cfg.encoder, dims, cfg.seed)?
        }
        None => {
            let dir = stage1.ok_or_else(|| {
                Error::config("fine-tuning needs a stage-1 checkpoint (--stage1) unless --from-scratch is set")
            })?;
            FinetuneModel::<f32>::from_stage1(&Checkpoint::load(dir)?, arch, &cfg.encoder, dims, cfg.seed)?
        }
    };
    prepare_out(out, cfg)?;
    run_finetuning(&mut model, &ds.train, &ds.val, &cfg.finetune, &cfg.mask, &run_options(cfg, out))
}

/// A checkpoint that makes `evaluate` return the ground truth.
pub fn oracle_checkpoint(input_dims: [usize; 3]) -> Checkpoint {
    let meta = CheckpointMeta {
        stage: Stage::Oracle,
        step: 0,
        arch: None,
        encoder: None,
        input_dims,
        config: serde_json::Value::Null,
        metrics: BTreeMap::new(),
    };
    Checkpoint::build(meta, &crate::params::ParamStore::<f32>::new(), |_| Origin::Scratch, vec![])
}

pub struct EvalOutput {
    pub report: ProtocolReport,
    pub files: Vec<PathBuf>,
}

/// Run the 15-subset protocol on the test split and write the report files.
pub fn evaluate(cfg: &ExperimentConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<EvalOutput> {
    cfg.validate()?;
    if !ckpt.join(crate::checkpoint::MANIFEST_FILE).exists() {
        return Err(Error::data(format!("no checkpoint at {}", ckpt.display())));
    }
    let ck = Checkpoint::load(ckpt)?;
    let ds = load_dataset(data, cfg.encoder.patch)?;
    let model;
    let seg: &dyn Segmenter = match ck.manifest.stage {
        Stage::Oracle => &OracleSegmenter,
        _ => {
            model = FinetuneModel::<f32>::from_checkpoint(&ck)?;
            &model
        }
    };
    let (report, records) = evaluate_protocol(seg, &ds.test, &cfg.eval)?;
    prepare_out(out, cfg)?;
    let mut files = Vec::new();
    for f in &cfg.report.formats {
        let format = ReportFormat::parse(f)?;
        let path = out.join(format!("report.{}", format.extension()));
        write_report(&report, format, &path)?;
        files.push(path);
    }
    if cfg.report.per_case_jsonl {
        let path = out.join("cases.jsonl");
        write_jsonl(&records, &path)?;
        files.push(path);
    }
    Ok(EvalOutput { report, files })
}
