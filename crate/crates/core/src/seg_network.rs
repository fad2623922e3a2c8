//! Stage-2 heterogeneous segmentation network.
//!
//! Four modality-specific CNN encoders are masked by availability and fused
//! per scale; the transformer encoder sees the δ-masked channel stack and
//! provides the bottleneck. A U-Net decoder with deep supervision produces
//! the main logits, and one shared decoder segments each available modality
//! from its own features during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Var};
use crate::data_synth::{NUM_CLASSES, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::masking::{Delta, MaskSpec};
use crate::nn::{Conv3d, ConvBlock, UpConv3d};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::{spatial_dims, Float, Tensor};
use crate::uni_encoder::{UniEncoder, UniEncoderConfig};

pub const WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const STRIDES: [usize; 4] = [1, 2, 2, 2];
pub const PREFIX: &str = "seg";

/// Which branches the network contains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Transformer bottleneck plus modality-specific encoders.
    #[default]
    Full,
    /// Modality-specific encoders only; the deepest masked features are fused
    /// into the bottleneck.
    MultiOnly,
    /// Transformer encoder only, decoded without skip connections.
    UniOnly,
}

impl Architecture {
    pub fn has_uni(self) -> bool {
        self != Architecture::MultiOnly
    }

    pub fn has_multi(self) -> bool {
        self != Architecture::UniOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Full => "full",
            Architecture::MultiOnly => "multi-only",
            Architecture::UniOnly => "uni-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Architecture::Full),
            "multi-only" => Some(Architecture::MultiOnly),
            "uni-only" => Some(Architecture::UniOnly),
            _ => None,
        }
    }
}

/// Odd 1-D kernel size for channel attention over `channels` channels.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = (((channels as f64).log2() + 1.0) / 2.0).abs() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Channel gating from a 1-D convolution over globally pooled channels.
#[derive(Clone, Debug)]
pub struct Eca {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Eca {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let k = eca_kernel_size(channels);
        Eca {
            weight: store.register(format!("{name}.weight"), fan_in_uniform(&[k], k, rng), false),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[1]), false),
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let gate = x
            .mean_rest()
            .channel_conv1d(cx.param(self.weight), cx.param(self.bias))
            .sigmoid();
        x.mul_first(gate)
    }
}

/// Two conv blocks followed by channel attention.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    pub eca: Eca,
}

impl FusionBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        FusionBlock {
            block1: ConvBlock::new(store, &format!("{name}.block1"), cin, cout, 1, rng),
            block2: ConvBlock::new(store, &format!("{name}.block2"), cout, cout, 1, rng),
            eca: Eca::new(store, &format!("{name}.eca"), cout, rng),
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = self.block2.forward(cx, self.block1.forward(cx, x));
        self.eca.forward(cx, y)
    }
}

/// Four stages of three conv blocks; stage output = block3 + block1.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub stages: Vec<[ConvBlock; 3]>,
}

impl ModalityEncoder {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Self {
        let mut cin = 1;
        let stages = (0..4)
            .map(|s| {
                let w = WIDTHS[s];
                let blocks = [0, 1, 2].map(|b| {
                    let (ci, stride) = if b == 0 { (cin, STRIDES[s]) } else { (w, 1) };
                    ConvBlock::new(store, &format!("{name}.stage{s}.block{b}"), ci, w, stride, rng)
                });
                cin = w;
                blocks
            })
            .collect();
        ModalityEncoder { stages }
    }

    /// `1×D×H×W` → features at full, 1/2, 1/4 and 1/8 resolution.
    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let shape = x.shape();
        let dims = spatial_dims(&shape)?;
        if shape[0] != 1 || dims.iter().any(|&d| d % 8 != 0) {
            return Err(Error::contract(format!(
                "modality encoder expects 1×D×H×W with dims divisible by 8, got {shape:?}"
            )));
        }
        let mut feats = Vec::with_capacity(4);
        let mut h = x;
        for [b0, b1, b2] in &self.stages {
            let first = b0.forward(cx, h);
            h = b2.forward(cx, b1.forward(cx, first)).add(first);
            feats.push(h);
        }
        Ok(feats)
    }
}

/// Zero the features of unavailable modalities.
pub fn mask_unavailable<'t, T: Float>(features: &[Vec<Var<'t, T>>], delta: &Delta) -> Vec<Vec<Var<'t, T>>> {
    features
        .iter()
        .zip(delta)
        .map(|(f, &keep)| f.iter().map(|v| v.gate(keep)).collect())
        .collect()
}

/// Upsampling decoder 128 → 64 → 32 → 16 with optional skips and deep heads.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub ups: Vec<UpConv3d>,
    pub blocks: Vec<[ConvBlock; 2]>,
    pub deep_heads: Vec<Conv3d>,
    pub head: Conv3d,
    pub skips: bool,
}

impl Decoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        skips: bool,
        deep_supervision: bool,
        rng: &mut R,
    ) -> Self {
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        let mut deep_heads = Vec::new();
        for (i, s) in [2usize, 1, 0].into_iter().enumerate() {
            let (cin, w) = (WIDTHS[s + 1], WIDTHS[s]);
            ups.push(UpConv3d::new(store, &format!("{name}.up{i}"), cin, w, 2, rng));
            let merged = if skips { 2 * w } else { w };
            blocks.push([
                ConvBlock::new(store, &format!("{name}.stage{i}.block0"), merged, w, 1, rng),
                ConvBlock::new(store, &format!("{name}.stage{i}.block1"), w, w, 1, rng),
            ]);
            if deep_supervision && i < 2 {
                deep_heads.push(Conv3d::new(store, &format!("{name}.deep{i}"), w, NUM_CLASSES, 1, 1, true, rng));
            }
        }
        let head = Conv3d::new(store, &format!("{name}.head"), WIDTHS[0], NUM_CLASSES, 1, 1, true, rng);
        Decoder {
            ups,
            blocks,
            deep_heads,
            head,
            skips,
        }
    }

    /// `bottom` at 1/8 resolution; `skips` = features at full, 1/2, 1/4.
    /// Returns the full-resolution logits and deep logits at 1/4 then 1/2.
    pub fn forward<'t, T: Float>(
        &self,
        cx: Ctx<'t, T>,
        bottom: Var<'t, T>,
        skips: Option<[Var<'t, T>; 3]>,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        if self.skips != skips.is_some() {
            return Err(Error::contract("decoder skip configuration mismatch"));
        }
        let mut h = bottom;
        let mut deep = Vec::new();
        for (i, s) in [2usize, 1, 0].into_iter().enumerate() {
            h = self.ups[i].forward(cx, h);
            if let Some(sk) = &skips {
                if sk[s].shape()[1..] != h.shape()[1..] {
                    return Err(Error::contract(format!(
                        "skip {s} has shape {:?}, decoder expects {:?}",
                        sk[s].shape(),
                        h.shape()
                    )));
                }
                h = Var::concat(&[h, sk[s]]);
            }
            let [b0, b1] = &self.blocks[i];
            h = b1.forward(cx, b0.forward(cx, h));
            if let Some(dh) = self.deep_heads.get(i) {
                deep.push(dh.forward(cx, h));
            }
        }
        Ok((self.head.forward(cx, h), deep))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct SegOutputs<'t, T: Float> {
    pub main_logits: Var<'t, T>,
    /// Deep-supervision logits at 1/4 and 1/2 resolution.
    pub deep_logits: Vec<Var<'t, T>>,
    /// `(modality, logits)` from the shared decoder, available modalities only.
    pub aux_logits: Vec<(usize, Var<'t, T>)>,
    pub availability: Delta,
}

#[derive(Clone, Debug)]
pub struct SegNetwork {
    pub arch: Architecture,
    pub input_dims: [usize; 3],
    pub uni: Option<UniEncoder>,
    pub encoders: Vec<ModalityEncoder>,
    pub fuse: Vec<FusionBlock>,
    /// Bottleneck fusion of the deepest CNN features (multi-only).
    pub fuse_deep: Option<FusionBlock>,
    pub uni_fuse: Option<FusionBlock>,
    pub decoder: Decoder,
    pub shared_decoder: Option<Decoder>,
}

impl SegNetwork {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        arch: Architecture,
        encoder: &UniEncoderConfig,
        input_dims: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        if input_dims.iter().any(|&d| d == 0 || d % 8 != 0) {
            return Err(Error::config(format!("input dims {input_dims:?} must be multiples of 8")));
        }
        if arch.has_uni() && encoder.patch != 8 {
            return Err(Error::config(format!(
                "the transformer bottleneck needs patch size 8 to align with the 1/8 CNN scale, got {}",
                encoder.patch
            )));
        }
        let uni = if arch.has_uni() {
            Some(UniEncoder::new(store, encoder, input_dims, rng)?)
        } else {
            None
        };
        let (mut encoders, mut fuse) = (Vec::new(), Vec::new());
        let mut fuse_deep = None;
        if arch.has_multi() {
            encoders = (0..NUM_MODALITIES)
                .map(|m| ModalityEncoder::new(store, &format!("{PREFIX}.modality_enc{m}"), rng))
                .collect();
            fuse = (0..3)
                .map(|s| FusionBlock::new(store, &format!("{PREFIX}.fuse{s}"), NUM_MODALITIES * WIDTHS[s], WIDTHS[s], rng))
                .collect();
            if !arch.has_uni() {
                fuse_deep = Some(FusionBlock::new(store, &format!("{PREFIX}.fuse3"), NUM_MODALITIES * WIDTHS[3], WIDTHS[3], rng));
            }
        }
        let uni_fuse = arch
            .has_uni()
            .then(|| FusionBlock::new(store, &format!("{PREFIX}.uni_fuse"), encoder.d_embed, WIDTHS[3], rng));
        let decoder = Decoder::new(store, &format!("{PREFIX}.decoder"), arch.has_multi(), true, rng);
        let shared_decoder = arch
            .has_multi()
            .then(|| Decoder::new(store, &format!("{PREFIX}.shared_decoder"), true, false, rng));
        Ok(SegNetwork {
            arch,
            input_dims,
            uni,
            encoders,
            fuse,
            fuse_deep,
            uni_fuse,
            decoder,
            shared_decoder,
        })
    }

    /// Tokens `N×d` → `d×grid` → fusion to 128 channels at 1/8 resolution.
    pub fn fuse_uni<'t, T: Float>(&self, cx: Ctx<'t, T>, f_uni: Var<'t, T>, grid: [usize; 3]) -> Result<Var<'t, T>> {
        let fusion = self.uni_fuse.as_ref().ok_or_else(|| Error::contract("network has no transformer branch"))?;
        let shape = f_uni.shape();
        if shape[0] != grid.iter().product::<usize>() {
            return Err(Error::contract(format!("{} tokens for grid {grid:?}", shape[0])));
        }
        let map = f_uni.transpose().reshape(&[shape[1], grid[0], grid[1], grid[2]]);
        Ok(fusion.forward(cx, map))
    }

    /// Fuse scale `s` from channel-concatenated (already masked) features.
    pub fn fuse_scale<'t, T: Float>(&self, cx: Ctx<'t, T>, s: usize, masked: &[Vec<Var<'t, T>>]) -> Var<'t, T> {
        let parts: Vec<Var<'t, T>> = masked.iter().map(|f| f[s]).collect();
        let block = if s < 3 { &self.fuse[s] } else { self.fuse_deep.as_ref().expect("deep fusion") };
        block.forward(cx, Var::concat(&parts))
    }

    /// Full forward pass. The shared decoder only runs in training mode.
    pub fn segment<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>, delta: Delta, mode: Mode) -> Result<SegOutputs<'t, T>> {
        let shape = x.shape();
        let dims = spatial_dims(&shape)?;
        if shape[0] != NUM_MODALITIES || dims != self.input_dims {
            return Err(Error::contract(format!(
                "network built for {NUM_MODALITIES}×{:?}, got {shape:?}",
                self.input_dims
            )));
        }
        if !delta.iter().any(|&d| d) {
            return Err(Error::protocol("at least one modality must be available"));
        }
        let bottleneck_uni = match &self.uni {
            Some(uni) => {
                let spec = MaskSpec::from_delta(delta, uni.num_patches())?;
                let f = uni.forward_masked(cx, x, &spec)?;
                Some(self.fuse_uni(cx, f, uni.grid)?)
            }
            None => None,
        };
        let mut aux_logits = Vec::new();
        let (bottom, skips) = if self.arch.has_multi() {
            // a missing modality's features are multiplied by zero, so its
            // encoder is never evaluated
            let mut masked = Vec::with_capacity(NUM_MODALITIES);
            let mut own = Vec::with_capacity(NUM_MODALITIES);
            for (m, enc) in self.encoders.iter().enumerate() {
                if delta[m] {
                    let f = enc.forward(cx, x.slice_leading(m, 1))?;
                    own.push(Some(f.clone()));
                    masked.push(f);
                } else {
                    own.push(None);
                    masked.push(self.zero_features(cx));
                }
            }
            let fused = [0, 1, 2].map(|s| self.fuse_scale(cx, s, &masked));
            let bottom = match bottleneck_uni {
                Some(b) => b,
                None => self.fuse_scale(cx, 3, &masked),
            };
            if mode == Mode::Train {
                let shared = self.shared_decoder.as_ref().expect("multi branch has a shared decoder");
                for (m, f) in own.into_iter().enumerate() {
                    if let Some(f) = f {
                        let (logits, _) = shared.forward(cx, f[3], Some([f[0], f[1], f[2]]))?;
                        aux_logits.push((m, logits));
                    }
                }
            }
            (bottom, Some(fused))
        } else {
            (bottleneck_uni.expect("uni branch"), None)
        };
        let (main_logits, deep_logits) = self.decoder.forward(cx, bottom, skips)?;
        Ok(SegOutputs {
            main_logits,
            deep_logits,
            aux_logits,
            availability: delta,
        })
    }

    fn zero_features<'t, T: Float>(&self, cx: Ctx<'t, T>) -> Vec<Var<'t, T>> {
        let mut dims = self.input_dims;
        (0..4)
            .map(|s| {
                if s > 0 {
                    dims = dims.map(|d| d / 2);
                }
                cx.constant(Tensor::zeros(&[WIDTHS[s], dims[0], dims[1], dims[2]]))
            })
            .collect()
    }
}

/// Voxel-wise argmax over classes of `C×D×H×W` logits.
pub fn argmax_labels<T: Float>(logits: &Tensor<T>) -> Vec<u8> {
    let c = logits.shape()[0];
    let s = logits.numel() / c;
    let d = logits.data();
    (0..s)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if d[k * s + v] > d[best * s + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> UniEncoderConfig {
        UniEncoderConfig {
            patch: 8,
            d_embed: 24,
            layers: 1,
            heads: 2,
            registers: 1,
            rope_base: 10000.0,
        }
    }

    fn input(seed: f64) -> Tensor<f32> {
        let n = 4 * 16 * 16 * 16;
        Tensor::from_vec(&[4, 16, 16, 16], (0..n).map(|i| (((i as f64) * 0.011 + seed).sin() * 0.5 + 0.5) as f32).collect()).unwrap()
    }

    #[test]
    fn eca_kernel_sizes() {
        assert_eq!([16, 32, 64, 128].map(eca_kernel_size), [3, 3, 3, 5]);
    }

    #[test]
    fn encoder_scales() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ModalityEncoder::new(&mut store, "e", &mut rng);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let f = enc.forward(cx, cx.constant(input(0.0).slice_leading(0, 1))).unwrap();
        let shapes: Vec<Vec<usize>> = f.iter().map(|v| v.shape()).collect();
        assert_eq!(shapes, vec![vec![16, 16, 16, 16], vec![32, 8, 8, 8], vec![64, 4, 4, 4], vec![128, 2, 2, 2]]);
    }

    #[test]
    fn zero_eca_weights_halve_the_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eca = Eca::new(&mut store, "eca", 16, &mut rng);
        *store.get_mut(eca.weight) = Tensor::zeros(&[3]);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let x = Tensor::from_vec(&[16, 2, 1, 1], (0..32).map(|i| i as f64).collect()).unwrap();
        let y = eca.forward(cx, cx.constant(x.clone())).value();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b * 0.5);
        }
    }

    #[test]
    fn output_shapes_and_aux_counts() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = SegNetwork::new(&mut store, Architecture::Full, &small_cfg(), [16; 3], &mut rng).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let x = cx.constant(input(0.3));
        let out = net.segment(cx, x, [true; 4], Mode::Train).unwrap();
        assert_eq!(out.main_logits.shape(), vec![4, 16, 16, 16]);
        let deep: Vec<Vec<usize>> = out.deep_logits.iter().map(|v| v.shape()).collect();
        assert_eq!(deep, vec![vec![4, 4, 4, 4], vec![4, 8, 8, 8]]);
        assert_eq!(out.aux_logits.len(), 4);
        let one = net.segment(cx, x, [true, false, false, false], Mode::Train).unwrap();
        assert_eq!(one.aux_logits.len(), 1);
        assert!(net.segment(cx, x, [true; 4], Mode::Eval).unwrap().aux_logits.is_empty());
    }

    #[test]
    fn missing_modality_content_does_not_reach_main_logits() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = SegNetwork::new(&mut store, Architecture::Full, &small_cfg(), [16; 3], &mut rng).unwrap();
        let a = input(0.1);
        let mut b = a.clone();
        for v in &mut b.data_mut()[2 * 4096..3 * 4096] {
            *v = 1.0 - *v;
        }
        let delta = [true, true, false, true];
        let run = |x: &Tensor<f32>| {
            let tape = Tape::inference();
            let cx = Ctx::new(&tape, &store);
            (*net.segment(cx, cx.constant(x.clone()), delta, Mode::Eval).unwrap().main_logits.value()).clone()
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn shared_decoder_is_one_function() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = SegNetwork::new(&mut store, Architecture::Full, &small_cfg(), [16; 3], &mut rng).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let out = net.segment(cx, cx.constant(input(0.2)), [true, false, true, false], Mode::Train).unwrap();
        assert_eq!(out.aux_logits[0].0, 0);
        assert_eq!(out.aux_logits[1].0, 2);
        let f = net.encoders[0].forward(cx, cx.constant(input(0.2).slice_leading(0, 1))).unwrap();
        let dec = net.shared_decoder.as_ref().unwrap();
        let (a, _) = dec.forward(cx, f[3], Some([f[0], f[1], f[2]])).unwrap();
        let (b, _) = dec.forward(cx, f[3], Some([f[0], f[1], f[2]])).unwrap();
        assert_eq!(*a.value(), *b.value());
        let shared: Vec<&str> = store.names().filter(|n| n.starts_with("seg.shared_decoder.")).collect();
        assert!(shared.iter().all(|n| !n.contains("modality")));
    }

    #[test]
    fn architecture_parameter_sets() {
        let names = |arch| {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            SegNetwork::new(&mut store, arch, &small_cfg(), [16; 3], &mut rng).unwrap();
            store.names().map(String::from).collect::<Vec<_>>()
        };
        let multi = names(Architecture::MultiOnly);
        assert!(multi.iter().all(|n| !n.starts_with("uni_encoder.") && !n.starts_with("seg.uni_fuse")));
        assert!(multi.iter().any(|n| n.starts_with("seg.fuse3.")));
        let uni = names(Architecture::UniOnly);
        assert!(uni.iter().all(|n| !n.starts_with("seg.modality_enc") && !n.starts_with("seg.shared_decoder")));
        let full = names(Architecture::Full);
        assert!(full.iter().any(|n| n.starts_with("uni_encoder.layer1.")));
        assert!(full.iter().all(|n| !n.starts_with("seg.fuse3.")));
    }
}
