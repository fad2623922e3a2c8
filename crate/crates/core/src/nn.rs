//! Layer building blocks shared by the encoder, decoders and fusion blocks.

use rand::Rng;

use crate::autograd::{Ctx, Var};
use crate::params::{fan_in_uniform, trunc_normal, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Epsilon of instance and layer normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Affine map on the last axis: `x · Wᵀ + b`, weight stored `out×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            trunc_normal(&[out_features, in_features], 0.02, rng),
            true,
        );
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[out_features]), false));
        Linear { weight, bias }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = x.matmul(cx.param(self.weight), false, true);
        match self.bias {
            Some(b) => y.add_last(cx.param(b)),
            None => y,
        }
    }
}

/// Normalization over the last axis with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.register(format!("{name}.weight"), Tensor::full(&[width], T::one()), false),
            offset: store.register(format!("{name}.bias"), Tensor::zeros(&[width]), false),
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.normalize_last(NORM_EPS)
            .mul_last(cx.param(self.gain))
            .add_last(cx.param(self.offset))
    }

    /// Normalize across channels at every voxel of a `C×D×H×W` map.
    pub fn forward_channels<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let shape = x.shape();
        let spatial: usize = shape[1..].iter().product();
        let t = x.reshape(&[shape[0], spatial]).transpose();
        self.forward(cx, t).transpose().reshape(&shape)
    }
}

/// Per-channel normalization over the spatial extent, then per-channel affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl InstanceNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        InstanceNorm {
            gain: store.register(format!("{name}.weight"), Tensor::full(&[channels], T::one()), false),
            offset: store.register(format!("{name}.bias"), Tensor::zeros(&[channels]), false),
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let shape = x.shape();
        let spatial: usize = shape[1..].iter().product();
        x.reshape(&[shape[0], spatial])
            .normalize_last(NORM_EPS)
            .reshape(&shape)
            .mul_first(cx.param(self.gain))
            .add_first(cx.param(self.offset))
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            fan_in_uniform(&[cout, cin, kernel, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[cout]), false));
        Conv3d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = x.conv3d(cx.param(self.weight), self.stride, self.pad);
        match self.bias {
            Some(b) => y.add_first(cx.param(b)),
            None => y,
        }
    }
}

/// Transposed convolution with kernel = stride (exact ×stride upsampling).
#[derive(Clone, Debug)]
pub struct UpConv3d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv3d {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            fan_in_uniform(&[cin, cout, factor, factor, factor], cin, rng),
            true,
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[cout]), false);
        UpConv3d { weight, bias }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv_transpose3d(cx.param(self.weight)).add_first(cx.param(self.bias))
    }
}

/// 3×3×3 convolution → instance normalization → GELU.
///
/// The convolution carries no bias: instance normalization removes it.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

impl ConvBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvBlock {
            conv: Conv3d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, false, rng),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward<'t, T: Float>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.norm.forward(cx, self.conv.forward(cx, x)).gelu()
    }
}
