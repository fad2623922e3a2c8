//! Volumetric transformer encoder over the channel-stacked modalities.
//!
//! Patch tokenizer (strided conv, kernel = stride = P), learnable positional
//! embeddings, register tokens, attention with rotary embeddings factorized
//! over depth/height/width, and a SwiGLU feed-forward wrapped in layer norms.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Var};
use crate::data_synth::NUM_MODALITIES;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskSpec, MaskTokens};
use crate::nn::{Conv3d, LayerNorm, Linear};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{spatial_dims, Float, Tensor};

/// Encoder scale presets (heads, layers, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    Small,
    Base,
    Large,
}

impl ScalePreset {
    pub fn heads_layers_width(self) -> (usize, usize, usize) {
        match self {
            ScalePreset::Small => (12, 12, 864),
            ScalePreset::Base => (12, 16, 864),
            ScalePreset::Large => (16, 24, 1056),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniEncoderConfig {
    pub patch: usize,
    pub d_embed: usize,
    pub layers: usize,
    pub heads: usize,
    pub registers: usize,
    pub rope_base: f64,
}

impl Default for UniEncoderConfig {
    fn default() -> Self {
        Self::preset(ScalePreset::Base)
    }
}

impl UniEncoderConfig {
    pub fn preset(scale: ScalePreset) -> Self {
        let (heads, layers, d_embed) = scale.heads_layers_width();
        UniEncoderConfig {
            patch: 8,
            d_embed,
            layers,
            heads,
            registers: 4,
            rope_base: 10000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.heads.max(1)
    }

    /// SwiGLU hidden width: (8/3)·d rounded to a multiple of 64.
    pub fn ffn_hidden(&self) -> usize {
        let raw = 8.0 * self.d_embed as f64 / 3.0;
        (((raw / 64.0).round() as usize).max(1)) * 64
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.heads == 0 || self.d_embed == 0 {
            return Err(Error::config("encoder patch, heads and d_embed must be positive"));
        }
        if self.d_embed % self.heads != 0 {
            return Err(Error::config(format!(
                "d_embed {} not divisible by heads {}",
                self.d_embed, self.heads
            )));
        }
        let hd = self.head_dim();
        if hd % 2 != 0 || hd < 6 {
            return Err(Error::config(format!(
                "head width {hd} must be even and hold at least one rotary pair per axis"
            )));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::config("rope_base must exceed 1"));
        }
        Ok(())
    }
}

/// Rotary pairs assigned to each axis: as even as possible, earlier axes first.
pub fn rope_axis_pairs(head_dim: usize) -> [usize; 3] {
    let pairs = head_dim / 2;
    [0, 1, 2].map(|a| pairs / 3 + usize::from(a < pairs % 3))
}

/// Per-pair `(axis, frequency)` for one head, in channel order.
fn rope_frequencies(head_dim: usize, base: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(head_dim / 2);
    for (axis, &n) in rope_axis_pairs(head_dim).iter().enumerate() {
        // group width 2n, θ_j = base^(−2j / 2n)
        out.extend((0..n).map(|j| (axis, base.powf(-(j as f64) / n as f64))));
    }
    out
}

/// `cos`/`sin` tables `[rows, head_dim/2]` for the given grid positions.
pub fn rope_tables<T: Float>(positions: &[[f64; 3]], head_dim: usize, base: f64) -> (Tensor<T>, Tensor<T>) {
    let freqs = rope_frequencies(head_dim, base);
    let half = freqs.len();
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for p in positions {
        for &(axis, f) in &freqs {
            let angle = p[axis] * f;
            cos.push(T::c(angle.cos()));
            sin.push(T::c(angle.sin()));
        }
    }
    (
        Tensor::from_vec(&[positions.len(), half], cos).expect("sized"),
        Tensor::from_vec(&[positions.len(), half], sin).expect("sized"),
    )
}

/// Rotate `heads×seq×d_head` vectors by their 3-D positions.
pub fn rope_rotate<T: Float>(x: &Tensor<T>, positions: &[[f64; 3]], base: f64) -> Result<Tensor<T>> {
    let &[heads, seq, hd] = x.shape() else {
        return Err(Error::contract(format!("rope expects heads×seq×d_head, got {:?}", x.shape())));
    };
    if hd % 2 != 0 || hd < 6 {
        return Err(Error::config(format!("head width {hd} cannot be split over three axes")));
    }
    if positions.len() != seq {
        return Err(Error::contract("one position per sequence row required"));
    }
    let freqs = rope_frequencies(hd, base);
    let mut out = x.clone();
    let od = out.data_mut();
    for h in 0..heads {
        for (s, p) in positions.iter().enumerate() {
            let row = &mut od[(h * seq + s) * hd..(h * seq + s + 1) * hd];
            for (j, &(axis, f)) in freqs.iter().enumerate() {
                let (sn, cs) = (p[axis] * f).sin_cos();
                let (a, b) = (row[2 * j].to_f64_lossy(), row[2 * j + 1].to_f64_lossy());
                row[2 * j] = T::c(a * cs - b * sn);
                row[2 * j + 1] = T::c(a * sn + b * cs);
            }
        }
    }
    Ok(out)
}

/// Grid coordinates of the patch tokens (raster order, depth-major) followed
/// by zero positions for the registers.
pub fn token_positions(grid: [usize; 3], registers: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(grid.iter().product::<usize>() + registers);
    for z in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                out.push([z as f64, y as f64, x as f64]);
            }
        }
    }
    out.extend(std::iter::repeat_n([0.0; 3], registers));
    out
}

/// Token rows flowing through the encoder: `N` patches then `N_reg` registers.
#[derive(Clone, Copy)]
pub struct TokenSequence<'t, T: Float> {
    pub tokens: Var<'t, T>,
    pub grid_dims: [usize; 3],
    pub register_count: usize,
}

impl<T: Float> TokenSequence<'_, T> {
    pub fn num_patches(&self) -> usize {
        self.grid_dims.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln_ffn_pre: LayerNorm,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
    pub ln_ffn_post: LayerNorm,
    heads: usize,
}

impl TransformerLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &UniEncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.d_embed;
        let hidden = config.ffn_hidden();
        TransformerLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, true, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, true, rng),
            ln_ffn_pre: LayerNorm::new(store, &format!("{name}.ln_ffn_pre"), d),
            w_gate: Linear::new(store, &format!("{name}.ffn.w_gate"), d, hidden, true, rng),
            w_up: Linear::new(store, &format!("{name}.ffn.w_up"), d, hidden, true, rng),
            w_down: Linear::new(store, &format!("{name}.ffn.w_down"), hidden, d, true, rng),
            ln_ffn_post: LayerNorm::new(store, &format!("{name}.ln_ffn_post"), d),
            heads: config.heads,
        }
    }

    /// `Ŝ = S + MHSA(LN S)`, `S_out = Ŝ + LN(SwiGLU(LN Ŝ))`.
    pub fn forward<'t, T: Float>(
        &self,
        cx: Ctx<'t, T>,
        s: Var<'t, T>,
        cos: &Arc<Tensor<T>>,
        sin: &Arc<Tensor<T>>,
    ) -> Var<'t, T> {
        let d = s.shape()[1];
        let hd = d / self.heads;
        let qkv = self.qkv.forward(cx, self.ln_attn.forward(cx, s));
        let q = qkv.slice_cols(0, d).rotate_pairs(Arc::clone(cos), Arc::clone(sin), self.heads);
        let k = qkv.slice_cols(d, d).rotate_pairs(Arc::clone(cos), Arc::clone(sin), self.heads);
        let v = qkv.slice_cols(2 * d, d);
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let heads: Vec<Var<'t, T>> = (0..self.heads)
            .map(|h| {
                let (qh, kh, vh) = (q.slice_cols(h * hd, hd), k.slice_cols(h * hd, hd), v.slice_cols(h * hd, hd));
                qh.matmul(kh, false, true).scale(scale).softmax_last().matmul(vh, false, false)
            })
            .collect();
        let s_hat = s.add(self.proj.forward(cx, Var::concat_cols(&heads)));
        let h = self.ln_ffn_pre.forward(cx, s_hat);
        let gate = self.w_gate.forward(cx, h);
        let up = self.w_up.forward(cx, h);
        let ffn = self.w_down.forward(cx, gate.silu().mul(up));
        s_hat.add(self.ln_ffn_post.forward(cx, ffn))
    }
}

#[derive(Clone, Debug)]
pub struct UniEncoder {
    pub config: UniEncoderConfig,
    pub grid: [usize; 3],
    pub tokenizer: Conv3d,
    pub pos_embed: ParamId,
    pub registers: Option<ParamId>,
    pub mask_tokens: MaskTokens,
    pub layers: Vec<TransformerLayer>,
}

pub const PREFIX: &str = "uni_encoder";

impl UniEncoder {
    /// Build for volumes of `input_dims`; the positional table is fixed to that grid.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &UniEncoderConfig,
        input_dims: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let p = config.patch;
        if input_dims.iter().any(|&d| d == 0 || d % p != 0) {
            return Err(Error::config(format!(
                "input dims {input_dims:?} not divisible by patch size {p}"
            )));
        }
        let grid = input_dims.map(|d| d / p);
        let n: usize = grid.iter().product();
        let d = config.d_embed;
        let mut tokenizer = Conv3d::new(store, &format!("{PREFIX}.tokenizer"), NUM_MODALITIES, d, p, p, true, rng);
        tokenizer.pad = 0;
        let pos_embed = store.register(format!("{PREFIX}.pos_embed"), trunc_normal(&[n, d], 0.02, rng), false);
        let registers = (config.registers > 0).then(|| {
            store.register(
                format!("{PREFIX}.registers"),
                trunc_normal(&[config.registers, d], 0.02, rng),
                false,
            )
        });
        let mask_tokens = MaskTokens::new(store, &format!("{PREFIX}.mask_tokens"), p, rng);
        let layers = (1..=config.layers)
            .map(|l| TransformerLayer::new(store, &format!("{PREFIX}.layer{l}"), config, rng))
            .collect();
        Ok(UniEncoder {
            config: config.clone(),
            grid,
            tokenizer,
            pos_embed,
            registers,
            mask_tokens,
            layers,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid.iter().product()
    }

    /// Strided patch embedding: `K×D×H×W` → `N×d`.
    pub fn tokenize<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let dims = spatial_dims(&shape)?;
        let p = self.config.patch;
        if shape[0] != NUM_MODALITIES || dims.iter().any(|&v| v % p != 0) {
            return Err(Error::contract(format!(
                "tokenizer expects {NUM_MODALITIES}×D×H×W divisible by {p}, got {shape:?}"
            )));
        }
        let t = self.tokenizer.forward(cx, x);
        let n: usize = dims.iter().map(|v| v / p).product();
        Ok(t.reshape(&[self.config.d_embed, n]).transpose())
    }

    /// `S⁽⁰⁾ = [S + E_LPe, E_Reg]`.
    pub fn add_positional_and_registers<'t, T: Float>(
        &self,
        cx: Ctx<'t, T>,
        tokens: Var<'t, T>,
    ) -> Result<TokenSequence<'t, T>> {
        let n = tokens.shape()[0];
        if n != self.num_patches() {
            return Err(Error::contract(format!(
                "{n} tokens but the positional table holds {} (grid {:?})",
                self.num_patches(),
                self.grid
            )));
        }
        let s = tokens.add(cx.param(self.pos_embed));
        let s = match self.registers {
            Some(r) => Var::concat(&[s, cx.param(r)]),
            None => s,
        };
        Ok(TokenSequence {
            tokens: s,
            grid_dims: self.grid,
            register_count: self.config.registers,
        })
    }

    /// Run every layer and drop the register rows: `F_Uni` is `N×d`.
    pub fn encode<'t, T: Float>(&self, cx: Ctx<'t, T>, seq: TokenSequence<'t, T>) -> Result<Var<'t, T>> {
        let positions = token_positions(seq.grid_dims, seq.register_count);
        let (cos, sin) = rope_tables::<T>(&positions, self.config.head_dim(), self.config.rope_base);
        let (cos, sin) = (Arc::new(cos), Arc::new(sin));
        let mut s = seq.tokens;
        for (l, layer) in self.layers.iter().enumerate() {
            s = layer.forward(cx, s, &cos, &sin);
            if !s.value().all_finite() {
                return Err(Error::numerical(format!("{PREFIX} layer {}", l + 1)));
            }
        }
        Ok(s.slice_leading(0, seq.num_patches()))
    }

    /// Tokenize, embed and encode an already masked volume.
    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tokens = self.tokenize(cx, x)?;
        let seq = self.add_positional_and_registers(cx, tokens)?;
        self.encode(cx, seq)
    }

    /// Mask with `spec` (using this encoder's mask tokens), then encode.
    pub fn forward_masked<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>, spec: &MaskSpec) -> Result<Var<'t, T>> {
        let masked = apply_mask(cx, x, spec, &self.mask_tokens)?;
        self.forward(cx, masked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize, registers: usize) -> UniEncoderConfig {
        UniEncoderConfig {
            patch: 4,
            d_embed: 24,
            layers,
            heads: 2,
            registers,
            rope_base: 10000.0,
        }
    }

    fn volume(dims: [usize; 3]) -> Tensor<f64> {
        let n = 4 * dims.iter().product::<usize>();
        Tensor::from_vec(&[4, dims[0], dims[1], dims[2]], (0..n).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap()
    }

    #[test]
    fn presets_and_widths() {
        assert_eq!(UniEncoderConfig::preset(ScalePreset::Small).layers, 12);
        assert_eq!(UniEncoderConfig::preset(ScalePreset::Large).d_embed, 1056);
        for s in [ScalePreset::Small, ScalePreset::Base, ScalePreset::Large] {
            let c = UniEncoderConfig::preset(s);
            c.validate().unwrap();
            assert_eq!(c.head_dim() % 6, 0);
        }
        assert_eq!(UniEncoderConfig::preset(ScalePreset::Base).ffn_hidden(), 2304);
        assert_eq!(tiny(1, 0).ffn_hidden(), 64);
        assert_eq!(rope_axis_pairs(16), [3, 3, 2]);
        assert_eq!(rope_axis_pairs(72), [12, 12, 12]);
        assert!(UniEncoderConfig { heads: 5, ..tiny(1, 0) }.validate().is_err());
        assert!(UniEncoderConfig { d_embed: 8, heads: 2, ..tiny(1, 0) }.validate().is_err());
    }

    #[test]
    fn divisible_head_width_uses_equal_groups_and_standard_frequencies() {
        let f = rope_frequencies(12, 100.0);
        assert_eq!(f.iter().filter(|(a, _)| *a == 2).count(), 2);
        // θ_j = base^(−2j/(d_head/3)) with d_head/3 = 4
        assert!((f[1].1 - 100f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn sequence_lengths() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = UniEncoder::new(&mut store, &tiny(1, 3), [8, 8, 8], &mut rng).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let tokens = enc.tokenize(cx, cx.constant(volume([8, 8, 8]))).unwrap();
        assert_eq!(tokens.shape(), vec![8, 24]);
        let seq = enc.add_positional_and_registers(cx, tokens).unwrap();
        assert_eq!(seq.tokens.shape(), vec![11, 24]);
        let f = enc.encode(cx, seq).unwrap();
        assert_eq!(f.shape(), vec![8, 24]);
        let wrong = enc.tokenize(cx, cx.constant(volume([8, 8, 16]))).unwrap();
        assert!(matches!(enc.add_positional_and_registers(cx, wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_tokenizer_weights_give_bias_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = UniEncoder::new(&mut store, &tiny(0, 0), [8, 4, 4], &mut rng).unwrap();
        *store.get_mut(enc.tokenizer.weight) = Tensor::zeros(&[24, 4, 4, 4, 4]);
        let b: Vec<f64> = (0..24).map(|i| i as f64).collect();
        *store.get_mut(enc.tokenizer.bias.unwrap()) = Tensor::from_vec(&[24], b.clone()).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let t = enc.tokenize(cx, cx.constant(volume([8, 4, 4]))).unwrap().value();
        for row in t.data().chunks(24) {
            assert_eq!(row, &b[..]);
        }
    }

    #[test]
    fn zero_layers_return_embedded_patches() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = UniEncoder::new(&mut store, &tiny(0, 2), [8, 8, 8], &mut rng).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let seq = enc
            .add_positional_and_registers(cx, enc.tokenize(cx, cx.constant(volume([8, 8, 8]))).unwrap())
            .unwrap();
        let want = seq.tokens.value().slice_leading(0, 8);
        assert_eq!(*enc.encode(cx, seq).unwrap().value(), want);
    }

    #[test]
    fn zero_residual_branches_make_the_layer_an_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = tiny(1, 0);
        let layer = TransformerLayer::new(&mut store, "layer", &cfg, &mut rng);
        for lin in [&layer.proj, &layer.w_down] {
            let shape = store.get(lin.weight).shape().to_vec();
            *store.get_mut(lin.weight) = Tensor::zeros(&shape);
        }
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let s = Tensor::from_vec(&[5, 24], (0..120).map(|i| (i as f64).cos()).collect()).unwrap();
        let pos = token_positions([5, 1, 1], 0);
        let (c, sn) = rope_tables::<f64>(&pos, 12, 10000.0);
        let out = layer.forward(cx, cx.constant(s.clone()), &Arc::new(c), &Arc::new(sn));
        assert_eq!(*out.value(), s);
    }

    #[test]
    fn rope_matches_tape_rotation_and_is_identity_at_origin() {
        let hd = 12;
        let x = Tensor::from_vec(&[2, 3, hd], (0..72).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let pos = vec![[0.0; 3], [1.0, 2.0, 3.0], [4.0, 0.0, 1.0]];
        let rotated = rope_rotate(&x, &pos, 10000.0).unwrap();
        assert_eq!(&rotated.data()[..hd], &x.data()[..hd]);
        // tape layout is [seq, heads·hd]
        let mut flat = vec![0.0; 72];
        for h in 0..2 {
            for s in 0..3 {
                for c in 0..hd {
                    flat[s * 2 * hd + h * hd + c] = x.data()[(h * 3 + s) * hd + c];
                }
            }
        }
        let store = ParamStore::<f64>::new();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store);
        let (c, sn) = rope_tables::<f64>(&pos, hd, 10000.0);
        let y = cx
            .constant(Tensor::from_vec(&[3, 2 * hd], flat).unwrap())
            .rotate_pairs(Arc::new(c), Arc::new(sn), 2)
            .value();
        for h in 0..2 {
            for s in 0..3 {
                for ch in 0..hd {
                    let a = y.data()[s * 2 * hd + h * hd + ch];
                    let b = rotated.data()[(h * 3 + s) * hd + ch];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
