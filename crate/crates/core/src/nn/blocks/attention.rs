//! Multi-head self-attention, transformer blocks, and the ViT encoder.

use super::super::init::{Init, ParamBuilder};
use super::super::layers::{LayerNorm, Linear, Mlp};
use super::super::tensor::{Elem, NnError, NnResult, Tensor};

/// Multi-head self-attention over (B, N, D) token tensors.
///
/// `extra` is an optional additive score term broadcastable to
/// (B, heads, N, N) — relative position biases or shifted-window masks.
pub struct MultiHeadAttention<E: Elem> {
    pub qkv: Linear<E>,
    pub proj: Linear<E>,
    pub heads: usize,
    pub dim: usize,
}

impl<E: Elem> MultiHeadAttention<E> {
    pub fn new(b: &mut ParamBuilder<E>, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            qkv: Linear::new(b, dim, 3 * dim, true),
            proj: Linear::new(b, dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, extra: Option<&Tensor<E>>) -> NnResult<Tensor<E>> {
        let (bsz, n, d) = match x.shape() {
            [b, n, d] => (*b, *n, *d),
            other => {
                return Err(NnError::ShapeMismatch(format!(
                    "attention expects (B,N,D), got {other:?}"
                )))
            }
        };
        if d != self.dim {
            return Err(NnError::ShapeMismatch(format!(
                "attention dim {d} != configured {}",
                self.dim
            )));
        }
        let h = self.heads;
        let dh = d / h;

        let qkv = self.qkv.forward(x)?; // (B, N, 3D)
        let to_heads = |t: Tensor<E>| -> NnResult<Tensor<E>> {
            // (B, N, D) -> (B*h, N, dh)
            t.reshape(&[bsz, n, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[bsz * h, n, dh])
        };
        let q = to_heads(qkv.narrow(2, 0, d)?)?;
        let k = to_heads(qkv.narrow(2, d, d)?)?;
        let v = to_heads(qkv.narrow(2, 2 * d, d)?)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let k_t = k.permute(&[0, 2, 1])?; // (B*h, dh, N)
        let mut scores = q.bmm(&k_t)?.scale(scale); // (B*h, N, N)
        if let Some(extra) = extra {
            scores = scores
                .reshape(&[bsz, h, n, n])?
                .add(extra)?
                .reshape(&[bsz * h, n, n])?;
        }
        let attn = scores.softmax_last();
        let ctx = attn.bmm(&v)?; // (B*h, N, dh)
        let merged = ctx
            .reshape(&[bsz, h, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bsz, n, d])?;
        self.proj.forward(&merged)
    }
}

/// Pre-norm transformer block: attention and MLP, each with a residual path.
pub struct TransformerBlock<E: Elem> {
    pub norm1: LayerNorm<E>,
    pub attn: MultiHeadAttention<E>,
    pub norm2: LayerNorm<E>,
    pub mlp: Mlp<E>,
}

impl<E: Elem> TransformerBlock<E> {
    pub fn new(b: &mut ParamBuilder<E>, dim: usize, heads: usize, mlp_hidden: usize) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(b, dim),
            attn: MultiHeadAttention::new(b, dim, heads),
            norm2: LayerNorm::new(b, dim),
            mlp: Mlp::new(b, dim, mlp_hidden),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, extra: Option<&Tensor<E>>) -> NnResult<Tensor<E>> {
        let x = x.add(&self.attn.forward(&self.norm1.forward(x)?, extra)?)?;
        x.add(&self.mlp.forward(&self.norm2.forward(&x)?)?)
    }
}

/// ViT classifier: patch embedding, class token, learned position embedding,
/// a pre-norm transformer stack, and a class-token head.
pub struct VitEncoder<E: Elem> {
    pub patch_embed: super::super::layers::Conv2dLayer<E>,
    pub cls_token: Tensor<E>,
    pub pos_embed: Tensor<E>,
    pub blocks: Vec<TransformerBlock<E>>,
    pub norm: LayerNorm<E>,
    pub head: Linear<E>,
    pub patch: usize,
}

impl<E: Elem> VitEncoder<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder<E>,
        input_px: usize,
        patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_hidden: usize,
        num_classes: usize,
    ) -> Self {
        assert!(input_px % patch == 0, "input {input_px} not divisible by patch {patch}");
        let tokens = (input_px / patch) * (input_px / patch) + 1;
        VitEncoder {
            patch_embed: super::super::layers::Conv2dLayer::new(b, 3, dim, patch, patch, 0, true),
            cls_token: b.param(&[1, 1, dim], Init::TruncNormal(0.02)),
            pos_embed: b.param(&[1, tokens, dim], Init::TruncNormal(0.02)),
            blocks: (0..depth)
                .map(|_| TransformerBlock::new(b, dim, heads, mlp_hidden))
                .collect(),
            norm: LayerNorm::new(b, dim),
            head: Linear::new(b, dim, num_classes, true),
            patch,
        }
    }

    /// Patch tokens for an image batch, before the class token is prepended.
    pub fn patch_tokens(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let fm = self.patch_embed.forward(x)?; // (B, D, H/p, W/p)
        let (bsz, d, gh, gw) = match fm.shape() {
            [b, d, h, w] => (*b, *d, *h, *w),
            _ => unreachable!(),
        };
        fm.reshape(&[bsz, d, gh * gw])?.permute(&[0, 2, 1]) // (B, N, D)
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let tokens = self.patch_tokens(x)?;
        let bsz = tokens.shape()[0];
        let d = tokens.shape()[2];
        // Tile the class token over the batch through broadcast-add.
        let cls = Tensor::zeros(&[bsz, 1, d]).add(&self.cls_token)?;
        let with_cls = Tensor::concat(&[cls, tokens], 1)?;
        let mut t = with_cls.add(&self.pos_embed)?;
        for block in &self.blocks {
            t = block.forward(&t, None)?;
        }
        let t = self.norm.forward(&t)?;
        let cls_out = t.narrow(1, 0, 1)?.reshape(&[bsz, d])?;
        self.head.forward(&cls_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn vit_token_count_is_grid_plus_class() {
        let mut b = ParamBuilder::<f32>::new(1, &["vit"]);
        let vit = VitEncoder::new(&mut b, 224, 16, 16, 1, 2, 32, 2);
        assert_eq!(vit.pos_embed.shape(), &[1, 197, 16]);
        let x = Tensor::zeros(&[1, 3, 224, 224]);
        let tokens = vit.patch_tokens(&x).unwrap();
        assert_eq!(tokens.shape(), &[1, 196, 16]);
    }

    #[test]
    fn attention_without_positions_is_permutation_equivariant() {
        let mut b = ParamBuilder::<f64>::new(2, &["attn-perm"]);
        let attn = MultiHeadAttention::new(&mut b, 8, 2);
        let mut rng = crate::seed::rng(3, &["attn-input"]);
        let n = 6;
        let data: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::constant(&[1, n, 8], data.clone());
        let y = attn.forward(&x, None).unwrap().to_vec();

        // Rotate tokens by two positions.
        let rot = 2;
        let mut perm_data = vec![0.0; n * 8];
        for t in 0..n {
            let src = (t + rot) % n;
            perm_data[t * 8..(t + 1) * 8].copy_from_slice(&data[src * 8..(src + 1) * 8]);
        }
        let xp = Tensor::constant(&[1, n, 8], perm_data);
        let yp = attn.forward(&xp, None).unwrap().to_vec();
        for t in 0..n {
            let src = (t + rot) % n;
            for c in 0..8 {
                assert!(
                    (yp[t * 8 + c] - y[src * 8 + c]).abs() < 1e-6,
                    "token outputs must permute with inputs"
                );
            }
        }
    }

    #[test]
    fn vit_forward_shape_and_finite() {
        let mut b = ParamBuilder::<f32>::new(4, &["vit-fwd"]);
        let vit = VitEncoder::new(&mut b, 32, 16, 16, 2, 2, 32, 2);
        let mut rng = crate::seed::rng(5, &["vit-x"]);
        let data: Vec<f32> = (0..2 * 3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::constant(&[2, 3, 32, 32], data);
        let y = vit.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!(y.to_vec().iter().all(|v| v.is_finite()));
    }
}
