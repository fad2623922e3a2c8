//! Stage 2: supervised training of the segmentation network, optionally
//! starting from a stage-1 encoder.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Gradients, Tape};
use crate::checkpoint::{Checkpoint, CheckpointMeta, Origin, Stage};
use crate::data_synth::{augment, AugmentConfig, MultimodalCase};
use crate::error::{Error, Result};
use crate::evaluation::{mean_region_dsc, Segmenter};
use crate::masking::{sample_stage2_delta, Delta, MaskConfig};
use crate::optimization::{lr_scales, total_loss, AdamW, LossConfig, ScheduleConfig};
use crate::params::ParamStore;
use crate::pretrain::AUX_PREFIX;
use crate::seg_network::{argmax_labels, Architecture, Mode, SegNetwork};
use crate::tensor::{Float, Tensor};
use crate::training::{apply_update, batch_gradients, step_rng, MetricsLog, RunOptions};
use crate::uni_encoder::{UniEncoderConfig, PREFIX as UNI_PREFIX};

const STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub optim: ScheduleConfig,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub checkpoint_every: usize,
    pub val_every: usize,
    pub augment: AugmentConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optim: ScheduleConfig::default(),
            batch_size: 4,
            loss: LossConfig::default(),
            checkpoint_every: 0,
            val_every: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("finetune.batch_size must be positive"));
        }
        Ok(())
    }
}

pub struct FinetuneModel<T: Float> {
    pub store: ParamStore<T>,
    pub net: SegNetwork,
    pub encoder: UniEncoderConfig,
    pub optimizer: AdamW<T>,
    pub step: u64,
    /// Tensors copied from a stage-1 checkpoint.
    pub pretrained: BTreeSet<String>,
}

/// Differences between the encoder a run expects and the one a checkpoint holds.
pub fn compatibility_report(
    expected: &UniEncoderConfig,
    expected_dims: [usize; 3],
    found: &UniEncoderConfig,
    found_dims: [usize; 3],
) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |field: &str, a: String, b: String| {
        if a != b {
            out.push(format!("{field}: run has {a}, checkpoint has {b}"));
        }
    };
    check("encoder.patch", expected.patch.to_string(), found.patch.to_string());
    check("encoder.d_embed", expected.d_embed.to_string(), found.d_embed.to_string());
    check("encoder.layers", expected.layers.to_string(), found.layers.to_string());
    check("encoder.heads", expected.heads.to_string(), found.heads.to_string());
    check("encoder.registers", expected.registers.to_string(), found.registers.to_string());
    check("encoder.rope_base", expected.rope_base.to_string(), found.rope_base.to_string());
    check("input_dims", format!("{expected_dims:?}"), format!("{found_dims:?}"));
    out
}

impl<T: Float> FinetuneModel<T> {
    /// Every parameter randomly initialized.
    pub fn new(arch: Architecture, encoder: &UniEncoderConfig, input_dims: [usize; 3], seed: u64) -> Result<Self> {
        encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = SegNetwork::new(&mut store, arch, encoder, input_dims, &mut rng)?;
        let optimizer = AdamW::new(store.len());
        Ok(FinetuneModel {
            store,
            net,
            encoder: encoder.clone(),
            optimizer,
            step: 0,
            pretrained: BTreeSet::new(),
        })
    }

    /// Fresh network whose transformer encoder (tokenizer, embeddings,
    /// registers, mask tokens, layers) is copied from a stage-1 checkpoint.
    /// The auxiliary decoder is dropped.
    pub fn from_stage1(
        stage1: &Checkpoint,
        arch: Architecture,
        encoder: &UniEncoderConfig,
        input_dims: [usize; 3],
        seed: u64,
    ) -> Result<Self> {
        let m = &stage1.manifest;
        if m.stage != Stage::Pretrain {
            return Err(Error::Incompatible(format!("expected a pretraining checkpoint, found {:?}", m.stage)));
        }
        let found = m
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Incompatible("stage-1 checkpoint has no encoder configuration".into()))?;
        let diffs = compatibility_report(encoder, input_dims, found, m.input_dims);
        if !diffs.is_empty() {
            return Err(Error::Incompatible(diffs.join("; ")));
        }
        let mut model = Self::new(arch, encoder, input_dims, seed)?;
        if arch.has_uni() {
            let prefix = format!("{UNI_PREFIX}.");
            let moved = stage1.load_into(&mut model.store, |n| n.starts_with(&prefix))?;
            let expected = model.store.names().filter(|n| n.starts_with(&prefix)).count();
            if moved.len() != expected {
                return Err(Error::Incompatible(format!(
                    "stage-1 checkpoint provides {} of {expected} encoder tensors",
                    moved.len()
                )));
            }
            model.pretrained = moved.into_iter().collect();
        }
        Ok(model)
    }

    /// Resume or evaluate a stage-2 checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        if m.stage != Stage::Finetune {
            return Err(Error::Incompatible(format!("expected a fine-tuning checkpoint, found {:?}", m.stage)));
        }
        let arch = m.arch.ok_or_else(|| Error::Incompatible("checkpoint has no architecture".into()))?;
        let encoder = m
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Incompatible("checkpoint has no encoder configuration".into()))?;
        let mut model = Self::new(arch, encoder, m.input_dims, 0)?;
        let loaded = ck.load_into(&mut model.store, |_| true)?;
        if loaded.len() != model.store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint provides {} of {} tensors",
                loaded.len(),
                model.store.len()
            )));
        }
        model.optimizer = AdamW::from_named_state(&model.store, m.step, ck.optimizer_state())?;
        model.step = m.step;
        model.pretrained = m
            .tensors
            .iter()
            .filter(|r| r.origin == Origin::Pretrained)
            .map(|r| r.name.clone())
            .collect();
        Ok(model)
    }

    pub fn arch(&self) -> Architecture {
        self.net.arch
    }

    pub fn checkpoint(&self, options: &RunOptions, metrics: BTreeMap<String, f64>) -> Checkpoint {
        let meta = CheckpointMeta {
            stage: Stage::Finetune,
            step: self.step,
            arch: Some(self.net.arch),
            encoder: Some(self.encoder.clone()),
            input_dims: self.net.input_dims,
            config: options.config_echo.clone(),
            metrics,
        };
        let origin = |name: &str| {
            if self.pretrained.contains(name) {
                Origin::Pretrained
            } else {
                Origin::Scratch
            }
        };
        Checkpoint::build(meta, &self.store, origin, self.optimizer.named_state(&self.store))
    }

    /// Training loss of one case; returns the scalar and its gradients.
    pub fn loss_and_grads(&self, x: &Tensor<T>, labels: &[u8], delta: Delta, loss: &LossConfig) -> Result<(f64, Gradients<T>)> {
        let tape = Tape::training();
        let cx = Ctx::new(&tape, &self.store);
        let out = self.net.segment(cx, cx.constant(x.clone()), delta, Mode::Train)?;
        let l = total_loss(cx, &out, labels, loss)?.total;
        let value = l.item().to_f64_lossy();
        Ok((value, tape.backward(l)))
    }

    /// Main-path logits without recording gradients.
    pub fn logits(&self, x: &Tensor<T>, delta: Delta) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.store);
        let out = self.net.segment(cx, cx.constant(x.clone()), delta, Mode::Eval)?;
        Ok((*out.main_logits.value()).clone())
    }
}

impl<T: Float> Segmenter for FinetuneModel<T> {
    fn input_dims(&self) -> Option<[usize; 3]> {
        Some(self.net.input_dims)
    }

    fn predict(&self, case: &MultimodalCase, delta: Delta) -> Result<Vec<u8>> {
        let logits = self.logits(&case.volumes.cast(), delta)?;
        Ok(argmax_labels(&logits))
    }
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneSummary {
    pub losses: Vec<f64>,
    pub final_step: u64,
    /// Best validation mean DSC (fraction) with every modality available.
    pub best_val_dsc: Option<f64>,
}

/// Mean over WT/TC/ET of the DSC with all modalities available.
pub fn full_modality_dsc(seg: &dyn Segmenter, cases: &[MultimodalCase]) -> Result<f64> {
    Ok(mean_region_dsc(seg, cases, [true; 4])?.iter().sum::<f64>() / 3.0)
}

pub fn run_finetuning<T: Float>(
    model: &mut FinetuneModel<T>,
    train: &[MultimodalCase],
    val: &[MultimodalCase],
    config: &FinetuneConfig,
    mask: &MaskConfig,
    options: &RunOptions,
) -> Result<FinetuneSummary> {
    let total = config.optim.total_steps as u64;
    run_finetuning_until(model, train, val, config, mask, options, total)
}

/// Train until `model.step` reaches `stop` (capped at the schedule length).
///
/// Each step samples one availability pattern per batch item and
/// minimizes the sum of main, auxiliary and deep-supervision losses.
pub fn run_finetuning_until<T: Float>(
    model: &mut FinetuneModel<T>,
    train: &[MultimodalCase],
    val: &[MultimodalCase],
    config: &FinetuneConfig,
    mask: &MaskConfig,
    options: &RunOptions,
    stop: u64,
) -> Result<FinetuneSummary> {
    config.validate()?;
    mask.validate()?;
    if train.is_empty() {
        return Err(Error::data("fine-tuning needs at least one training case"));
    }
    if config.augment.crop != model.net.input_dims {
        return Err(Error::config(format!(
            "augment crop {:?} differs from the network input {:?}",
            config.augment.crop, model.net.input_dims
        )));
    }
    let scales = lr_scales(&model.store, &config.optim, model.encoder.layers)?;
    let log = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsLog::open(&dir.join("metrics.csv"), "step,loss,lr")?)
        }
        None => None,
    };
    let mut summary = FinetuneSummary::default();
    let mut best = f64::NEG_INFINITY;
    let stop = stop.min(config.optim.total_steps as u64);
    while model.step < stop {
        let step = model.step;
        let mut rng = step_rng(options.seed, STREAM, step);
        let items: Vec<(usize, u64, Delta)> = (0..config.batch_size)
            .map(|_| {
                let idx = rng.random_range(0..train.len());
                let aug_seed = rng.random();
                let delta = sample_stage2_delta(mask.stage2_subset_distribution, &mask.p, &mut rng)?;
                Ok((idx, aug_seed, delta))
            })
            .collect::<Result<_>>()?;
        let this = &*model;
        let (loss, mut grads) = batch_gradients(items.len(), |i| {
            let (idx, aug_seed, delta) = items[i];
            let case = augment(&train[idx], aug_seed, &config.augment)?;
            this.loss_and_grads(&case.volumes.cast(), &case.labels, delta, &config.loss)
        })?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("fine-tuning loss at step {step}")));
        }
        let lr = apply_update(&mut model.store, &mut model.optimizer, &mut grads, &scales, &config.optim, step as usize)?;
        model.step += 1;
        summary.losses.push(loss);
        if let Some(log) = &log {
            log.append(&[step.to_string(), format!("{loss:.8e}"), format!("{lr:.8e}")])?;
        }
        if options.log_every > 0 && step % options.log_every as u64 == 0 {
            log::info!("finetune step {step} loss {loss:.5} lr {lr:.3e}");
        }
        let done = model.step == stop;
        let validate = !val.is_empty() && (done || (config.val_every > 0 && model.step % config.val_every as u64 == 0));
        if validate {
            let v = full_modality_dsc(&*model, val)?;
            log::info!("finetune step {} validation DSC {v:.4}", model.step);
            if v > best {
                best = v;
                summary.best_val_dsc = Some(v);
                if let Some(dir) = &options.out_dir {
                    let metrics = BTreeMap::from([("val_dsc".to_string(), v)]);
                    model.checkpoint(options, metrics).save(&dir.join("best"))?;
                }
            }
        }
        let periodic = config.checkpoint_every > 0 && model.step % config.checkpoint_every as u64 == 0;
        if let (Some(dir), true) = (&options.out_dir, done || periodic) {
            let metrics = BTreeMap::from([("train_loss".to_string(), loss)]);
            model.checkpoint(options, metrics).save(&dir.join("last"))?;
        }
    }
    summary.final_step = model.step;
    Ok(summary)
}

/// Names of auxiliary-decoder tensors in a checkpoint (none expected after stage 1).
pub fn aux_decoder_tensors(ck: &Checkpoint) -> Vec<&str> {
    let prefix = format!("{AUX_PREFIX}.");
    ck.weight_names().into_iter().filter(|n| n.starts_with(&prefix)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_case, PhantomParams};
    use crate::pretrain::PretrainModel;

    fn tiny() -> UniEncoderConfig {
        UniEncoderConfig {
            patch: 8,
            d_embed: 24,
            layers: 2,
            heads: 2,
            registers: 1,
            rope_base: 10000.0,
        }
    }

    fn config(steps: usize) -> FinetuneConfig {
        FinetuneConfig {
            optim: ScheduleConfig {
                total_steps: steps,
                ..Default::default()
            },
            batch_size: 1,
            augment: AugmentConfig::identity([16; 3]),
            ..Default::default()
        }
    }

    #[test]
    fn stage1_transfer_is_bit_exact_and_drops_aux_decoder() {
        let stage1 = PretrainModel::<f32>::new(&tiny(), [16; 3], 5).unwrap();
        let ck1 = stage1.checkpoint(&RunOptions::new(0), BTreeMap::new());
        let model = FinetuneModel::<f32>::from_stage1(&ck1, Architecture::Full, &tiny(), [16; 3], 1).unwrap();
        assert!(!model.pretrained.is_empty());
        for name in &model.pretrained {
            let id = model.store.id(name).unwrap();
            assert_eq!(model.store.get(id), &ck1.get(name).unwrap().cast::<f32>());
        }
        let ck2 = model.checkpoint(&RunOptions::new(0), BTreeMap::new());
        assert!(aux_decoder_tensors(&ck2).is_empty());
        let pre: Vec<_> = ck2.manifest.tensors.iter().filter(|r| r.origin == Origin::Pretrained).collect();
        assert_eq!(pre.len(), model.pretrained.len());
        assert!(pre.iter().all(|r| r.name.starts_with("uni_encoder.")));
    }

    #[test]
    fn mismatched_encoder_is_reported() {
        let stage1 = PretrainModel::<f32>::new(&tiny(), [16; 3], 5).unwrap();
        let ck1 = stage1.checkpoint(&RunOptions::new(0), BTreeMap::new());
        let mut other = tiny();
        other.layers = 3;
        let err = FinetuneModel::<f32>::from_stage1(&ck1, Architecture::Full, &other, [16; 3], 1).err().unwrap();
        match err {
            Error::Incompatible(msg) => assert!(msg.contains("encoder.layers")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn frozen_encoder_does_not_move() {
        let case = generate_case(0, [16; 3], &PhantomParams::default(), 8).unwrap();
        let mut model = FinetuneModel::<f32>::new(Architecture::Full, &tiny(), [16; 3], 2).unwrap();
        let enc_before: Vec<_> = model
            .store
            .ids()
            .filter(|&id| model.store.name(id).starts_with("uni_encoder."))
            .map(|id| model.store.get(id).clone())
            .collect();
        let mut cfg = config(2);
        cfg.optim.freeze_uni_encoder = true;
        run_finetuning(&mut model, &[case], &[], &cfg, &MaskConfig::default(), &RunOptions::new(3)).unwrap();
        let enc_after: Vec<_> = model
            .store
            .ids()
            .filter(|&id| model.store.name(id).starts_with("uni_encoder."))
            .map(|id| model.store.get(id).clone())
            .collect();
        assert_eq!(enc_before, enc_after);
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let cases: Vec<_> = (0..2).map(|s| generate_case(s, [16; 3], &PhantomParams::default(), 8).unwrap()).collect();
        let cfg = config(3);
        let mask = MaskConfig::default();
        let mut full = FinetuneModel::<f32>::new(Architecture::MultiOnly, &tiny(), [16; 3], 2).unwrap();
        let a = run_finetuning(&mut full, &cases, &[], &cfg, &mask, &RunOptions::new(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut opts = RunOptions::new(4);
        opts.out_dir = Some(dir.path().to_path_buf());
        let mut part = FinetuneModel::<f32>::new(Architecture::MultiOnly, &tiny(), [16; 3], 2).unwrap();
        let b1 = run_finetuning_until(&mut part, &cases, &[], &cfg, &mask, &opts, 1).unwrap();
        let mut resumed = FinetuneModel::<f32>::from_checkpoint(&Checkpoint::load(&dir.path().join("last")).unwrap()).unwrap();
        assert_eq!(resumed.step, 1);
        let b2 = run_finetuning(&mut resumed, &cases, &[], &cfg, &mask, &RunOptions::new(4)).unwrap();
        let joined: Vec<f64> = b1.losses.into_iter().chain(b2.losses).collect();
        assert_eq!(joined, a.losses);
    }
}
