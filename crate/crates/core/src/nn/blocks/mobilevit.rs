//! MobileViT block: local convolution, order-preserving unfold into patch
//! sequences, a transformer over patches, fold back, and convolutional
//! fusion with the input.

use super::super::init::ParamBuilder;
use super::super::layers::{BatchNorm2d, Conv2dLayer, LayerNorm};
use super::super::tensor::{Elem, NnError, NnResult, Tensor};
use super::attention::TransformerBlock;

/// (N, C, H, W) -> (N·p², (H/p)·(W/p), C): pixels at the same intra-patch
/// offset form one sequence over patches. Exact inverse of
/// [`mobilevit_fold`]; the order of patches and of pixels in each patch is
/// preserved.
pub fn mobilevit_unfold<E: Elem>(x: &Tensor<E>, patch: usize) -> NnResult<Tensor<E>> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(NnError::ShapeMismatch(format!(
                "unfold expects (N,C,H,W), got {other:?}"
            )))
        }
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(NnError::ShapeMismatch(format!(
            "spatial dims {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (hp, wp) = (h / patch, w / patch);
    x.reshape(&[n, c, hp, patch, wp, patch])?
        .permute(&[0, 3, 5, 2, 4, 1])? // (N, pi, pj, Hp, Wp, C)
        .reshape(&[n * patch * patch, hp * wp, c])
}

/// Inverse of [`mobilevit_unfold`].
pub fn mobilevit_fold<E: Elem>(
    tokens: &Tensor<E>,
    patch: usize,
    h: usize,
    w: usize,
) -> NnResult<Tensor<E>> {
    let (npp, seq, c) = match tokens.shape() {
        [a, b, c] => (*a, *b, *c),
        other => {
            return Err(NnError::ShapeMismatch(format!(
                "fold expects (N·p², seq, C), got {other:?}"
            )))
        }
    };
    let (hp, wp) = (h / patch, w / patch);
    if seq != hp * wp || npp % (patch * patch) != 0 {
        return Err(NnError::ShapeMismatch(format!(
            "fold geometry mismatch: {npp}x{seq}x{c} for {h}x{w} patch {patch}"
        )));
    }
    let n = npp / (patch * patch);
    tokens
        .reshape(&[n, patch, patch, hp, wp, c])?
        .permute(&[0, 5, 3, 1, 4, 2])? // (N, C, Hp, pi, Wp, pj)
        .reshape(&[n, c, h, w])
}

fn silu<E: Elem>(x: &Tensor<E>) -> NnResult<Tensor<E>> {
    x.mul(&x.sigmoid())
}

pub struct MobileVitBlock<E: Elem> {
    local_conv: Conv2dLayer<E>,
    local_bn: BatchNorm2d<E>,
    to_tokens: Conv2dLayer<E>,
    transformer: Vec<TransformerBlock<E>>,
    token_norm: LayerNorm<E>,
    from_tokens: Conv2dLayer<E>,
    from_bn: BatchNorm2d<E>,
    fusion: Conv2dLayer<E>,
    fusion_bn: BatchNorm2d<E>,
    patch: usize,
}

impl<E: Elem> MobileVitBlock<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder<E>,
        channels: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        patch: usize,
    ) -> Self {
        MobileVitBlock {
            local_conv: Conv2dLayer::new(b, channels, channels, 3, 1, 1, false),
            local_bn: BatchNorm2d::new(b, channels),
            to_tokens: Conv2dLayer::new(b, channels, dim, 1, 1, 0, false),
            transformer: (0..depth)
                .map(|_| TransformerBlock::new(b, dim, heads, 2 * dim))
                .collect(),
            token_norm: LayerNorm::new(b, dim),
            from_tokens: Conv2dLayer::new(b, dim, channels, 1, 1, 0, false),
            from_bn: BatchNorm2d::new(b, channels),
            fusion: Conv2dLayer::new(b, 2 * channels, channels, 3, 1, 1, false),
            fusion_bn: BatchNorm2d::new(b, channels),
            patch,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let local = silu(&self.local_bn.forward(&self.local_conv.forward(x)?, training)?)?;
        let projected = self.to_tokens.forward(&local)?;
        let mut tokens = mobilevit_unfold(&projected, self.patch)?;
        for block in &self.transformer {
            tokens = block.forward(&tokens, None)?;
        }
        tokens = self.token_norm.forward(&tokens)?;
        let folded = mobilevit_fold(&tokens, self.patch, h, w)?;
        let back = silu(&self.from_bn.forward(&self.from_tokens.forward(&folded)?, training)?)?;
        let cat = Tensor::concat(&[x.clone(), back], 1)?;
        silu(&self.fusion_bn.forward(&self.fusion.forward(&cat)?, training)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn unfold_fold_round_trip_is_exact() {
        let mut rng = crate::seed::rng(1, &["mvit"]);
        let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::constant(&[2, 3, 8, 8], data);
        let tokens = mobilevit_unfold(&x, 2).unwrap();
        assert_eq!(tokens.shape(), &[8, 16, 3]);
        let back = mobilevit_fold(&tokens, 2, 8, 8).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn block_preserves_shape() {
        let mut b = ParamBuilder::<f32>::new(2, &["mvit-block"]);
        let block = MobileVitBlock::new(&mut b, 8, 12, 2, 2, 2);
        let x = Tensor::constant(&[1, 8, 8, 8], vec![0.25; 8 * 64]);
        let y = block.forward(&x, true).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}
