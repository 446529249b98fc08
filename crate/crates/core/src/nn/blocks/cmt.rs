//! CMT blocks: a stacked 3x3 convolutional stem, local perception units,
//! attention with depthwise spatial reduction of keys/values, and the
//! inverted-residual feed-forward network.

use super::super::init::{Init, ParamBuilder};
use super::super::layers::{BatchNorm2d, Conv2dLayer, DepthwiseConv2d, LayerNorm, Linear};
use super::super::tensor::{Elem, NnError, NnResult, Tensor};

/// Stem of stacked 3x3 convolutions: one stride-2 reduction followed by two
/// stride-1 refinements, each with BN and GELU. No large-kernel flattening.
pub struct CmtStem<E: Elem> {
    conv1: Conv2dLayer<E>,
    bn1: BatchNorm2d<E>,
    conv2: Conv2dLayer<E>,
    bn2: BatchNorm2d<E>,
    conv3: Conv2dLayer<E>,
    bn3: BatchNorm2d<E>,
}

impl<E: Elem> CmtStem<E> {
    pub fn new(b: &mut ParamBuilder<E>, out_ch: usize) -> Self {
        CmtStem {
            conv1: Conv2dLayer::new(b, 3, out_ch, 3, 2, 1, false),
            bn1: BatchNorm2d::new(b, out_ch),
            conv2: Conv2dLayer::new(b, out_ch, out_ch, 3, 1, 1, false),
            bn2: BatchNorm2d::new(b, out_ch),
            conv3: Conv2dLayer::new(b, out_ch, out_ch, 3, 1, 1, false),
            bn3: BatchNorm2d::new(b, out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let x = self.bn1.forward(&self.conv1.forward(x)?, training)?.gelu();
        let x = self.bn2.forward(&self.conv2.forward(&x)?, training)?.gelu();
        Ok(self.bn3.forward(&self.conv3.forward(&x)?, training)?.gelu())
    }
}

/// Attention whose keys/values come from a depthwise-reduced feature map
/// (kernel = stride = `sr`), with a learned additive position bias of shape
/// (heads, N, N/sr²).
pub struct ReducedAttention<E: Elem> {
    q: Linear<E>,
    k: Linear<E>,
    v: Linear<E>,
    proj: Linear<E>,
    sr: Option<(DepthwiseConv2d<E>, LayerNorm<E>)>,
    rel_pos: Tensor<E>,
    heads: usize,
    sr_ratio: usize,
}

impl<E: Elem> ReducedAttention<E> {
    pub fn new(
        b: &mut ParamBuilder<E>,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        tokens: usize,
    ) -> Self {
        let reduced = tokens / (sr_ratio * sr_ratio);
        ReducedAttention {
            q: Linear::new(b, dim, dim, true),
            k: Linear::new(b, dim, dim, true),
            v: Linear::new(b, dim, dim, true),
            proj: Linear::new(b, dim, dim, true),
            sr: (sr_ratio > 1).then(|| {
                (
                    DepthwiseConv2d::new(b, dim, sr_ratio, sr_ratio, 0, true),
                    LayerNorm::new(b, dim),
                )
            }),
            rel_pos: b.param(&[heads, tokens * reduced], Init::TruncNormal(0.02)),
            heads,
            sr_ratio,
        }
    }

    /// `x` is the normalized feature map in (B, H, W, C) layout.
    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (bsz, h, w, c) = match x.shape() {
            [b, h, w, c] => (*b, *h, *w, *c),
            other => {
                return Err(NnError::ShapeMismatch(format!(
                    "reduced attention expects (B,H,W,C), got {other:?}"
                )))
            }
        };
        let n = h * w;
        let heads = self.heads;
        let dh = c / heads;
        let tokens = x.reshape(&[bsz, n, c])?;
        let q = self.q.forward(&tokens)?;

        let reduced_tokens = match &self.sr {
            Some((conv, norm)) => {
                let nchw = x.permute(&[0, 3, 1, 2])?;
                let red = conv.forward(&nchw)?; // (B, C, H/sr, W/sr)
                let (rh, rw) = (red.shape()[2], red.shape()[3]);
                let t = red
                    .reshape(&[bsz, c, rh * rw])?
                    .permute(&[0, 2, 1])?;
                norm.forward(&t)?
            }
            None => tokens.clone(),
        };
        let nr = reduced_tokens.shape()[1];
        let k = self.k.forward(&reduced_tokens)?;
        let v = self.v.forward(&reduced_tokens)?;

        let split = |t: Tensor<E>, len: usize| -> NnResult<Tensor<E>> {
            t.reshape(&[bsz, len, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[bsz * heads, len, dh])
        };
        let q = split(q, n)?;
        let k = split(k, nr)?;
        let v = split(v, nr)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let scores = q.bmm(&k.permute(&[0, 2, 1])?)?.scale(scale); // (B·h, N, Nr)
        let bias = self.rel_pos.reshape(&[heads, n, nr])?;
        let scores = scores
            .reshape(&[bsz, heads, n, nr])?
            .add(&bias)?
            .reshape(&[bsz * heads, n, nr])?;
        let ctx = scores.softmax_last().bmm(&v)?;
        let merged = ctx
            .reshape(&[bsz, heads, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bsz, n, c])?;
        self.proj.forward(&merged)?.reshape(&[bsz, h, w, c])
    }

    pub fn sr_ratio(&self) -> usize {
        self.sr_ratio
    }
}

/// Inverted-residual FFN in NCHW: 1x1 expand, depthwise 3x3, 1x1 project,
/// BN after each stage.
pub struct Irffn<E: Elem> {
    conv1: Conv2dLayer<E>,
    bn1: BatchNorm2d<E>,
    dw: DepthwiseConv2d<E>,
    bn_dw: BatchNorm2d<E>,
    conv2: Conv2dLayer<E>,
    bn2: BatchNorm2d<E>,
}

impl<E: Elem> Irffn<E> {
    pub fn new(b: &mut ParamBuilder<E>, dim: usize, hidden: usize) -> Self {
        Irffn {
            conv1: Conv2dLayer::new(b, dim, hidden, 1, 1, 0, true),
            bn1: BatchNorm2d::new(b, hidden),
            dw: DepthwiseConv2d::new(b, hidden, 3, 1, 1, true),
            bn_dw: BatchNorm2d::new(b, hidden),
            conv2: Conv2dLayer::new(b, hidden, dim, 1, 1, 0, true),
            bn2: BatchNorm2d::new(b, dim),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, training)?.gelu();
        let h = self.bn_dw.forward(&self.dw.forward(&h)?, training)?.gelu();
        self.bn2.forward(&self.conv2.forward(&h)?, training)
    }
}

/// One CMT block: local perception unit, reduced attention, IRFFN, all with
/// residual paths. Operates in NCHW.
pub struct CmtBlock<E: Elem> {
    lpu: DepthwiseConv2d<E>,
    norm1: LayerNorm<E>,
    pub attn: ReducedAttention<E>,
    norm2: LayerNorm<E>,
    ffn: Irffn<E>,
}

impl<E: Elem> CmtBlock<E> {
    pub fn new(
        b: &mut ParamBuilder<E>,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        tokens: usize,
        ffn_ratio: f64,
    ) -> Self {
        let hidden = (dim as f64 * ffn_ratio) as usize;
        CmtBlock {
            lpu: DepthwiseConv2d::new(b, dim, 3, 1, 1, true),
            norm1: LayerNorm::new(b, dim),
            attn: ReducedAttention::new(b, dim, heads, sr_ratio, tokens),
            norm2: LayerNorm::new(b, dim),
            ffn: Irffn::new(b, dim, hidden),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        // LPU: x + DWConv(x)
        let x = x.add(&self.lpu.forward(x)?)?;
        // Attention in (B,H,W,C) token layout.
        let spatial = x.permute(&[0, 2, 3, 1])?;
        let attended = self.attn.forward(&self.norm1.forward(&spatial)?)?;
        let spatial = spatial.add(&attended)?;
        // IRFFN back in NCHW.
        let normed = self.norm2.forward(&spatial)?.permute(&[0, 3, 1, 2])?;
        let x = spatial.permute(&[0, 3, 1, 2])?;
        x.add(&self.ffn.forward(&normed, training)?)
    }
}
