//! Segmentation losses, layer-wise lr decay, the warmup-cosine schedule and AdamW.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Gradients, Var};
use crate::data_synth::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::seg_network::SegOutputs;
use crate::tensor::{spatial_dims, Float, Tensor};
use crate::uni_encoder::PREFIX as UNI_PREFIX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub class_weights: [f64; NUM_CLASSES],
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            class_weights: [1.0, 2.0, 1.0, 2.0],
            dice_smooth: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("loss.class_weights must be finite and positive"));
        }
        if !(self.dice_smooth.is_finite() && self.dice_smooth >= 0.0) {
            return Err(Error::config("loss.dice_smooth must be non-negative"));
        }
        Ok(())
    }
}

fn check_labels(labels: &[u8], voxels: usize) -> Result<()> {
    if labels.len() != voxels {
        return Err(Error::contract(format!(
            "{} labels for {voxels} voxels",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::data(format!("label {l} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

/// Soft Dice (mean over classes) plus class-weighted cross-entropy (mean over voxels).
pub fn dice_wce_loss<'t, T: Float>(
    cx: Ctx<'t, T>,
    logits: Var<'t, T>,
    labels: &[u8],
    config: &LossConfig,
) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    spatial_dims(&shape)?;
    let c = shape[0];
    if c != NUM_CLASSES {
        return Err(Error::contract(format!("expected {NUM_CLASSES} logit channels, got {c}")));
    }
    let s: usize = shape[1..].iter().product();
    check_labels(labels, s)?;
    let mut onehot = Tensor::<T>::zeros(&[c, s]);
    let mut weighted = Tensor::<T>::zeros(&[c, s]);
    let mut counts = vec![T::zero(); c];
    for (v, &l) in labels.iter().enumerate() {
        let l = l as usize;
        onehot.data_mut()[l * s + v] = T::one();
        weighted.data_mut()[l * s + v] = T::c(config.class_weights[l]);
        counts[l] += T::one();
    }
    let flat = logits.reshape(&[c, s]);
    let probs = flat.softmax_first();
    let eps = T::c(config.dice_smooth);
    let inter = probs.mul(cx.constant(onehot)).sum_rest();
    let denom = probs.sum_rest().add(cx.constant(Tensor::from_vec(&[c], counts)?)).add_scalar(eps);
    let dice = inter.scale(T::c(2.0)).add_scalar(eps).div(denom).mean_all();
    let wce = flat
        .log_softmax_first()
        .mul(cx.constant(weighted))
        .sum_all()
        .scale(T::c(-1.0 / s as f64));
    Ok(dice.scale(-T::one()).add_scalar(T::one()).add(wce))
}

/// Nearest-neighbour downsampling: sample `i·f + f/2` along every axis.
pub fn downsample_labels(labels: &[u8], dims: [usize; 3], factor: usize) -> Result<(Vec<u8>, [usize; 3])> {
    if factor == 0 || dims.iter().any(|&d| d % factor != 0) {
        return Err(Error::contract(format!("dims {dims:?} not divisible by {factor}")));
    }
    let out = dims.map(|d| d / factor);
    let [_, h, w] = dims;
    let off = factor / 2;
    let mut v = Vec::with_capacity(out.iter().product());
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                v.push(labels[((z * factor + off) * h + y * factor + off) * w + x * factor + off]);
            }
        }
    }
    Ok((v, out))
}

pub struct LossBreakdown<'t, T: Float> {
    pub total: Var<'t, T>,
    pub main: Var<'t, T>,
    pub aux: Option<Var<'t, T>>,
    pub deep: Option<Var<'t, T>>,
}

fn sum_vars<'t, T: Float>(vars: Vec<Var<'t, T>>) -> Option<Var<'t, T>> {
    vars.into_iter().reduce(|a, b| a.add(b))
}

/// `L_main + L_aux + L_deep`, each a sum of Dice+WCE terms.
pub fn total_loss<'t, T: Float>(
    cx: Ctx<'t, T>,
    outputs: &SegOutputs<'t, T>,
    labels: &[u8],
    config: &LossConfig,
) -> Result<LossBreakdown<'t, T>> {
    let dims = spatial_dims(&outputs.main_logits.shape())?;
    let main = dice_wce_loss(cx, outputs.main_logits, labels, config)?;
    let aux = outputs
        .aux_logits
        .iter()
        .map(|(_, l)| dice_wce_loss(cx, *l, labels, config))
        .collect::<Result<Vec<_>>>()?;
    let mut deep = Vec::with_capacity(outputs.deep_logits.len());
    for l in &outputs.deep_logits {
        let ld = spatial_dims(&l.shape())?;
        let factor = dims[0] / ld[0];
        let (small, sdims) = downsample_labels(labels, dims, factor)?;
        if sdims != ld {
            return Err(Error::contract(format!("deep head dims {ld:?} vs labels {sdims:?}")));
        }
        deep.push(dice_wce_loss(cx, *l, &small, config)?);
    }
    let aux = sum_vars(aux);
    let deep = sum_vars(deep);
    let mut total = main;
    for extra in [aux, deep].into_iter().flatten() {
        total = total.add(extra);
    }
    Ok(LossBreakdown { total, main, aux, deep })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub start_lr: f64,
    pub end_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub weight_decay: f64,
    /// Layer-wise decay rate ω.
    pub llrd: f64,
    pub freeze_uni_encoder: bool,
    /// Global gradient-norm clip; off when absent.
    pub max_grad_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 3e-4,
            start_lr: 1e-5,
            end_lr: 1e-6,
            warmup_fraction: 0.05,
            total_steps: 150_000,
            weight_decay: 1e-4,
            llrd: 0.75,
            freeze_uni_encoder: false,
            max_grad_norm: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.base_lr, self.start_lr, self.end_lr];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("optim learning rates must be finite and non-negative"));
        }
        if self.start_lr > self.base_lr {
            return Err(Error::config("optim.start_lr must not exceed optim.base_lr"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config("optim.warmup_fraction must lie in (0,1)"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("optim.total_steps must be positive"));
        }
        if !(self.llrd > 0.0 && self.llrd <= 1.0) {
            return Err(Error::config("optim.llrd must lie in (0,1]"));
        }
        if !(self.weight_decay >= 0.0) || self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::config("optim.weight_decay and max_grad_norm must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("optim Adam constants out of range"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }
}

/// Global learning rate: linear warmup, cosine decay, clamped past the end.
pub fn lr_at_step(step: usize, cfg: &ScheduleConfig) -> f64 {
    let total = cfg.total_steps as f64;
    let s = step as f64;
    let warm = cfg.warmup_steps();
    if step >= cfg.total_steps {
        cfg.end_lr
    } else if s <= warm {
        cfg.start_lr + (cfg.base_lr - cfg.start_lr) * (s / warm)
    } else {
        let progress = (s - warm) / (total - warm);
        cfg.end_lr + 0.5 * (cfg.base_lr - cfg.end_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Depth index of an encoder parameter: `Some(l)` for `uni_encoder.layer{l}.*`,
/// `Some(0)` for the stem (tokenizer, embeddings, registers, mask tokens),
/// `None` outside the encoder.
pub fn encoder_layer_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix(UNI_PREFIX)?.strip_prefix('.')?;
    match rest.strip_prefix("layer") {
        Some(tail) => {
            let digits: String = tail.chars().take_while(|c| c.is_ascii_digit()).collect();
            digits.parse().ok().or(Some(0))
        }
        None => Some(0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    /// Encoder depth, or `None` for non-encoder parameters.
    pub layer: Option<usize>,
    /// Multiplier on the scheduled global learning rate.
    pub scale: f64,
    pub lr: f64,
    pub names: Vec<String>,
}

/// `lr_l = base_lr · ω^(L−l)`; the stem counts as layer 0, everything else
/// outside the encoder trains at `base_lr`.
pub fn llrd_groups<'a>(
    names: impl IntoIterator<Item = &'a str>,
    base_lr: f64,
    omega: f64,
    layers: usize,
) -> Result<Vec<ParamGroup>> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::config(format!("llrd rate {omega} outside (0,1]")));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<String>> = BTreeMap::new();
    for name in names {
        let layer = encoder_layer_index(name);
        if let Some(l) = layer {
            if l > layers {
                return Err(Error::config(format!("{name}: layer {l} beyond depth {layers}")));
            }
        }
        groups.entry(layer).or_default().push(name.to_string());
    }
    Ok(groups
        .into_iter()
        .map(|(layer, names)| {
            let scale = layer.map_or(1.0, |l| omega.powi((layers - l) as i32));
            ParamGroup {
                layer,
                scale,
                lr: base_lr * scale,
                names,
            }
        })
        .collect())
}

/// Per-parameter multiplier on the global lr, honouring encoder freezing.
pub fn lr_scales<T: Float>(store: &ParamStore<T>, cfg: &ScheduleConfig, layers: usize) -> Result<Vec<f64>> {
    let groups = llrd_groups(store.names(), 1.0, cfg.llrd, layers)?;
    let mut scales = vec![1.0; store.len()];
    for g in groups {
        let scale = if g.layer.is_some() && cfg.freeze_uni_encoder { 0.0 } else { g.scale };
        for n in &g.names {
            let id = store.id(n).expect("name from store");
            scales[id.index()] = scale;
        }
    }
    Ok(scales)
}

/// Scale gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Float>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64_lossy();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::c(max_norm / norm));
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(num_params: usize) -> Self {
        AdamW {
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    /// One update; `lr[i]` is the effective rate of parameter `i`.
    /// Parameters with a zero rate keep their values (moments still advance);
    /// parameters without a gradient are skipped entirely.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: &[f64], cfg: &ScheduleConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((mm, vv), &gg) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mm = b1 * *mm + (T::one() - b1) * gg;
                *vv = b2 * *vv + (T::one() - b2) * gg * gg;
            }
            if lr[i] == 0.0 {
                continue;
            }
            let decay = store.entry(id).decay;
            let step = T::c(lr[i] / bc1);
            let shrink = T::c(1.0 - lr[i] * cfg.weight_decay);
            let inv_bc2 = T::c(1.0 / bc2);
            let eps = T::c(cfg.adam_eps);
            let (m, v) = (self.m[i].as_ref().unwrap(), self.v[i].as_ref().unwrap());
            let p = store.get_mut(id);
            for ((pp, &mm), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                if decay {
                    *pp *= shrink;
                }
                *pp -= step * mm / ((vv * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Moments as named tensors (`adam.m.<param>`, `adam.v.<param>`).
    pub fn named_state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for id in store.ids() {
            let i = id.index();
            if let (Some(m), Some(v)) = (&self.m[i], &self.v[i]) {
                out.push((format!("adam.m.{}", store.name(id)), m.clone()));
                out.push((format!("adam.v.{}", store.name(id)), v.clone()));
            }
        }
        out
    }

    pub fn from_named_state(
        store: &ParamStore<T>,
        step: u64,
        tensors: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<Self> {
        let mut opt = AdamW::new(store.len());
        opt.step = step;
        for (name, t) in tensors {
            let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
                (0, p)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (1, p)
            } else {
                continue;
            };
            let id = store
                .id(pname)
                .ok_or_else(|| Error::Incompatible(format!("optimizer state for unknown tensor {pname}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Incompatible(format!("optimizer state shape for {pname}")));
            }
            let target = if slot == 0 { &mut opt.m } else { &mut opt.v };
            target[id.index()] = Some(t);
        }
        Ok(opt)
    }
}
