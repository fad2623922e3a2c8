//! Stage 1: masked reconstruction pretraining of the transformer encoder.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Gradients, Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta, Origin, Stage};
use crate::data_synth::{augment, center_crop, AugmentConfig, MultimodalCase, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskConfig, MaskSpec};
use crate::nn::{Conv3d, LayerNorm, UpConv3d};
use crate::optimization::{AdamW, ScheduleConfig};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};
use crate::training::{apply_update, batch_gradients, step_rng, MetricsLog, RunOptions};
use crate::uni_encoder::{UniEncoder, UniEncoderConfig};

pub const AUX_PREFIX: &str = "aux_decoder";
const STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

/// Three ×2 upsampling blocks (transposed conv → channel LN → GELU) and a
/// 1×1×1 projection to the modality channels. Only used during pretraining.
#[derive(Clone, Debug)]
pub struct AuxDecoder {
    pub ups: Vec<UpConv3d>,
    pub norms: Vec<LayerNorm>,
    pub proj: Conv3d,
}

impl AuxDecoder {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &UniEncoderConfig, rng: &mut R) -> Result<Self> {
        if config.patch != 8 {
            return Err(Error::config(format!(
                "the auxiliary decoder upsamples by 8 and needs patch size 8, got {}",
                config.patch
            )));
        }
        let mut width = config.d_embed;
        let mut ups = Vec::new();
        let mut norms = Vec::new();
        for i in 0..3 {
            let next = (width / 2).max(1);
            ups.push(UpConv3d::new(store, &format!("{AUX_PREFIX}.up{i}"), width, next, 2, rng));
            norms.push(LayerNorm::new(store, &format!("{AUX_PREFIX}.norm{i}"), next));
            width = next;
        }
        let proj = Conv3d::new(store, &format!("{AUX_PREFIX}.proj"), width, NUM_MODALITIES, 1, 1, true, rng);
        Ok(AuxDecoder { ups, norms, proj })
    }

    /// `N×d` tokens on `grid` → `K×(8·grid)` reconstruction.
    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, f_uni: Var<'t, T>, grid: [usize; 3]) -> Result<Var<'t, T>> {
        let shape = f_uni.shape();
        if shape.len() != 2 || shape[0] != grid.iter().product::<usize>() {
            return Err(Error::contract(format!("{shape:?} tokens do not fill grid {grid:?}")));
        }
        let mut h = f_uni.transpose().reshape(&[shape[1], grid[0], grid[1], grid[2]]);
        for (up, norm) in self.ups.iter().zip(&self.norms) {
            h = norm.forward_channels(cx, up.forward(cx, h)).gelu();
        }
        Ok(self.proj.forward(cx, h))
    }
}

/// Mean squared error over every voxel of every modality plus
/// `weight · ‖mask tokens‖₂`.
pub fn reconstruction_loss<'t, T: Float>(
    x: Var<'t, T>,
    x_hat: Var<'t, T>,
    mask_tokens: Var<'t, T>,
    weight: f64,
) -> Result<Var<'t, T>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::contract(format!(
            "reconstruction shape {:?} vs target {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let diff = x_hat.sub(x);
    Ok(diff.mul(diff).mean_all().add(mask_tokens.l2_norm().scale(T::c(weight))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub optim: ScheduleConfig,
    pub batch_size: usize,
    /// Weight of the mask-token norm penalty.
    pub mask_reg_weight: f64,
    /// Save the `last` checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Validate every this many steps (0 = only at the end).
    pub val_every: usize,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            optim: ScheduleConfig::default(),
            batch_size: 4,
            mask_reg_weight: 0.005,
            checkpoint_every: 0,
            val_every: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size must be positive"));
        }
        if !(self.mask_reg_weight >= 0.0 && self.mask_reg_weight.is_finite()) {
            return Err(Error::config("pretrain.mask_reg_weight must be non-negative"));
        }
        Ok(())
    }
}

/// Encoder, auxiliary decoder and optimizer state of a pretraining run.
pub struct PretrainModel<T: Float> {
    pub store: ParamStore<T>,
    pub encoder: UniEncoder,
    pub decoder: AuxDecoder,
    pub optimizer: AdamW<T>,
    /// Number of completed optimizer steps.
    pub step: u64,
}

impl<T: Float> PretrainModel<T> {
    pub fn new(config: &UniEncoderConfig, input_dims: [usize; 3], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = UniEncoder::new(&mut store, config, input_dims, &mut rng)?;
        let decoder = AuxDecoder::new(&mut store, config, &mut rng)?;
        let optimizer = AdamW::new(store.len());
        Ok(PretrainModel {
            store,
            encoder,
            decoder,
            optimizer,
            step: 0,
        })
    }

    /// Restore weights, optimizer moments and the step counter.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        if m.stage != Stage::Pretrain {
            return Err(Error::Incompatible(format!("expected a pretraining checkpoint, found {:?}", m.stage)));
        }
        let config = m
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Incompatible("checkpoint has no encoder configuration".into()))?;
        let mut model = Self::new(config, m.input_dims, 0)?;
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
        Ok(model)
    }

    /// Reconstruction loss of one (already augmented) case under `spec`.
    pub fn loss<'t>(&self, cx: Ctx<'t, T>, x: &Tensor<T>, spec: &MaskSpec, weight: f64) -> Result<Var<'t, T>> {
        let target = cx.constant(x.clone());
        let masked = apply_mask(cx, target, spec, &self.encoder.mask_tokens)?;
        let f = self.encoder.forward(cx, masked)?;
        let x_hat = self.decoder.forward(cx, f, self.encoder.grid)?;
        reconstruction_loss(target, x_hat, cx.param(self.encoder.mask_tokens.id), weight)
    }

    /// Loss without recording gradients.
    pub fn eval_loss(&self, x: &Tensor<T>, spec: &MaskSpec, weight: f64) -> Result<f64> {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.store);
        Ok(self.loss(cx, x, spec, weight)?.item().to_f64_lossy())
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.encoder.grid.map(|g| g * self.encoder.config.patch)
    }

    pub fn checkpoint(&self, options: &RunOptions, metrics: BTreeMap<String, f64>) -> Checkpoint {
        let meta = CheckpointMeta {
            stage: Stage::Pretrain,
            step: self.step,
            arch: None,
            encoder: Some(self.encoder.config.clone()),
            input_dims: self.input_dims(),
            config: options.config_echo.clone(),
            metrics,
        };
        Checkpoint::build(meta, &self.store, |_| Origin::Scratch, self.optimizer.named_state(&self.store))
    }
}

/// Fixed validation masks: one spec per case, independent of training progress.
pub fn validation_specs(n_cases: usize, num_patches: usize, mask: &MaskConfig, seed: u64) -> Result<Vec<MaskSpec>> {
    (0..n_cases)
        .map(|i| {
            let mut rng = step_rng(seed, VAL_STREAM, i as u64);
            MaskSpec::sample(mask.p, mask.q, num_patches, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct PretrainSummary {
    /// Mean training loss of every step run, in order.
    pub losses: Vec<f64>,
    pub final_step: u64,
    pub best_val_loss: Option<f64>,
}

/// Mean reconstruction loss on centre-cropped cases with fixed masks.
pub fn validation_loss<T: Float>(
    model: &PretrainModel<T>,
    cases: &[MultimodalCase],
    specs: &[MaskSpec],
    weight: f64,
) -> Result<f64> {
    let dims = model.input_dims();
    let mut total = 0.0;
    for (case, spec) in cases.iter().zip(specs) {
        let x = center_crop(case, dims)?.volumes.cast();
        total += model.eval_loss(&x, spec, weight)?;
    }
    Ok(total / cases.len().max(1) as f64)
}

/// Pretrain until `config.optim.total_steps`, starting from `model.step`.
///
/// Each step draws a case, augments it, samples a joint mask and takes one
/// AdamW step on the reconstruction loss.
pub fn run_pretraining<T: Float>(
    model: &mut PretrainModel<T>,
    train: &[MultimodalCase],
    val: &[MultimodalCase],
    config: &PretrainConfig,
    mask: &MaskConfig,
    options: &RunOptions,
) -> Result<PretrainSummary> {
    let total = config.optim.total_steps as u64;
    run_pretraining_until(model, train, val, config, mask, options, total)
}

/// Like [`run_pretraining`] but stops once `model.step` reaches `stop`
/// (capped at the schedule length). The `last` checkpoint is written on exit.
pub fn run_pretraining_until<T: Float>(
    model: &mut PretrainModel<T>,
    train: &[MultimodalCase],
    val: &[MultimodalCase],
    config: &PretrainConfig,
    mask: &MaskConfig,
    options: &RunOptions,
    stop: u64,
) -> Result<PretrainSummary> {
    config.validate()?;
    mask.validate()?;
    if train.is_empty() {
        return Err(Error::data("pretraining needs at least one training case"));
    }
    let dims = model.input_dims();
    if config.augment.crop != dims {
        return Err(Error::config(format!(
            "augment crop {:?} differs from the encoder input {:?}",
            config.augment.crop, dims
        )));
    }
    let n_patches = model.encoder.num_patches();
    let val_specs = validation_specs(val.len(), n_patches, mask, options.seed)?;
    let scales = vec![1.0; model.store.len()];
    let log = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsLog::open(&dir.join("metrics.csv"), "step,loss,lr")?)
        }
        None => None,
    };
    let mut summary = PretrainSummary::default();
    let mut best = f64::INFINITY;
    let total = config.optim.total_steps as u64;
    let stop = stop.min(total);
    let weight = config.mask_reg_weight;
    while model.step < stop {
        let step = model.step;
        let mut rng = step_rng(options.seed, STREAM, step);
        let items: Vec<(usize, u64, MaskSpec)> = (0..config.batch_size)
            .map(|_| {
                let idx = rng.random_range(0..train.len());
                let aug_seed = rng.random();
                let spec = MaskSpec::sample(mask.p, mask.q, n_patches, &mut rng)?;
                Ok((idx, aug_seed, spec))
            })
            .collect::<Result<_>>()?;
        let this = &*model;
        let (loss, mut grads): (f64, Gradients<T>) = batch_gradients(items.len(), |i| {
            let (idx, aug_seed, spec) = &items[i];
            let x = augment(&train[*idx], *aug_seed, &config.augment)?.volumes.cast();
            let tape = Tape::training();
            let cx = Ctx::new(&tape, &this.store);
            let l = this.loss(cx, &x, spec, weight)?;
            let value = l.item().to_f64_lossy();
            Ok((value, tape.backward(l)))
        })?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("pretraining loss at step {step}")));
        }
        let lr = apply_update(&mut model.store, &mut model.optimizer, &mut grads, &scales, &config.optim, step as usize)?;
        model.step += 1;
        summary.losses.push(loss);
        if let Some(log) = &log {
            log.append(&[step.to_string(), format!("{loss:.8e}"), format!("{lr:.8e}")])?;
        }
        if options.log_every > 0 && step % options.log_every as u64 == 0 {
            log::info!("pretrain step {step} loss {loss:.5} lr {lr:.3e}");
        }
        let done = model.step == stop;
        let validate = !val.is_empty() && (done || (config.val_every > 0 && model.step % config.val_every as u64 == 0));
        if validate {
            let v = validation_loss(model, val, &val_specs, weight)?;
            log::info!("pretrain step {} validation loss {v:.5}", model.step);
            if v < best {
                best = v;
                summary.best_val_loss = Some(v);
                if let Some(dir) = &options.out_dir {
                    let metrics = BTreeMap::from([("val_loss".to_string(), v)]);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_case, PhantomParams};

    fn tiny() -> UniEncoderConfig {
        UniEncoderConfig {
            patch: 8,
            d_embed: 24,
            layers: 1,
            heads: 2,
            registers: 1,
            rope_base: 10000.0,
        }
    }

    #[test]
    fn decoder_upsamples_by_eight_to_four_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = AuxDecoder::new(&mut store, &tiny(), &mut rng).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let f = cx.constant(Tensor::full(&[8, 24], 0.3));
        assert_eq!(dec.forward(cx, f, [2, 2, 2]).unwrap().shape(), vec![4, 16, 16, 16]);
        assert!(matches!(dec.forward(cx, f, [2, 2, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_projection_outputs_its_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = AuxDecoder::new(&mut store, &tiny(), &mut rng).unwrap();
        let wshape = store.get(dec.proj.weight).shape().to_vec();
        *store.get_mut(dec.proj.weight) = Tensor::zeros(&wshape);
        *store.get_mut(dec.proj.bias.unwrap()) = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let y = dec.forward(cx, cx.constant(Tensor::full(&[1, 24], 1.0)), [1, 1, 1]).unwrap().value();
        for (c, chunk) in y.data().chunks(512).enumerate() {
            assert!(chunk.iter().all(|&v| (v - 0.1 * (c + 1) as f64).abs() < 1e-12));
        }
    }

    fn loss_of(x: Tensor<f64>, xh: Tensor<f64>, tokens: Tensor<f64>) -> f64 {
        let store = ParamStore::<f64>::new();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        reconstruction_loss(cx.constant(x), cx.constant(xh), cx.constant(tokens), 0.005).unwrap().item()
    }

    #[test]
    fn reconstruction_loss_values() {
        let x = Tensor::from_vec(&[4, 2, 2, 2], (0..32).map(|i| i as f64 / 32.0).collect()).unwrap();
        assert_eq!(loss_of(x.clone(), x.clone(), Tensor::zeros(&[4, 8])), 0.0);
        let mut tokens = Tensor::zeros(&[4, 8]);
        tokens.data_mut()[3] = 2.0;
        assert!((loss_of(x.clone(), x.clone(), tokens) - 0.01).abs() < 1e-15);
        assert!((loss_of(x.clone(), x.map(|v| v + 1.0), Tensor::zeros(&[4, 8])) - 1.0).abs() < 1e-12);
    }

    fn cases() -> Vec<MultimodalCase> {
        (0..2).map(|s| generate_case(s, [16; 3], &PhantomParams::default(), 8).unwrap()).collect()
    }

    fn config(steps: usize, lr: f64) -> PretrainConfig {
        PretrainConfig {
            optim: ScheduleConfig {
                total_steps: steps,
                base_lr: lr,
                start_lr: lr,
                end_lr: lr,
                ..Default::default()
            },
            batch_size: 2,
            augment: AugmentConfig::identity([16; 3]),
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut model = PretrainModel::<f32>::new(&tiny(), [16; 3], 4).unwrap();
        let before: Vec<Tensor<f32>> = model.store.ids().map(|id| model.store.get(id).clone()).collect();
        run_pretraining(&mut model, &cases(), &[], &config(1, 0.0), &MaskConfig::default(), &RunOptions::new(1)).unwrap();
        let after: Vec<Tensor<f32>> = model.store.ids().map(|id| model.store.get(id).clone()).collect();
        assert_eq!(before, after);
        assert_eq!(model.step, 1);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = cases();
        let mask = MaskConfig::default();
        let cfg = config(4, 1e-3);
        let mut full = PretrainModel::<f32>::new(&tiny(), [16; 3], 4).unwrap();
        let a = run_pretraining(&mut full, &data, &[], &cfg, &mask, &RunOptions::new(9)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut opts = RunOptions::new(9);
        opts.out_dir = Some(dir.path().to_path_buf());
        let mut first = PretrainModel::<f32>::new(&tiny(), [16; 3], 4).unwrap();
        let b1 = run_pretraining_until(&mut first, &data, &[], &cfg, &mask, &opts, 2).unwrap();
        let ck = Checkpoint::load(&dir.path().join("last")).unwrap();
        assert_eq!(ck.manifest.step, 2);
        let mut resumed = PretrainModel::<f32>::from_checkpoint(&ck).unwrap();
        let b2 = run_pretraining(&mut resumed, &data, &[], &cfg, &mask, &RunOptions::new(9)).unwrap();

        let joined: Vec<f64> = b1.losses.into_iter().chain(b2.losses).collect();
        assert_eq!(joined, a.losses);
        for id in full.store.ids() {
            let other = resumed.store.id(full.store.name(id)).unwrap();
            assert_eq!(full.store.get(id), resumed.store.get(other));
        }
    }

    #[test]
    fn best_checkpoint_tracks_validation_loss() {
        let data = cases();
        let dir = tempfile::tempdir().unwrap();
        let mut opts = RunOptions::new(3);
        opts.out_dir = Some(dir.path().to_path_buf());
        let mut cfg = config(2, 1e-3);
        cfg.val_every = 1;
        let mut model = PretrainModel::<f32>::new(&tiny(), [16; 3], 4).unwrap();
        let s = run_pretraining(&mut model, &data[..1], &data[1..], &cfg, &MaskConfig::default(), &opts).unwrap();
        let best = Checkpoint::load(&dir.path().join("best")).unwrap();
        assert_eq!(best.manifest.metrics["val_loss"], s.best_val_loss.unwrap());
        let log = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
    }
}
