//! Sequencer2D mixing: bidirectional LSTMs along the vertical and horizontal
//! axes of a feature map, fused channel-wise by a pointwise linear map.

use super::super::init::ParamBuilder;
use super::super::layers::{BiLstm, LayerNorm, Linear, Mlp};
use super::super::tensor::{Elem, NnError, NnResult, Tensor};

/// BiLSTM2D cell on (B, H, W, C) maps: a vertical BiLSTM over each column,
/// a horizontal BiLSTM over each row, outputs concatenated channel-wise and
/// projected to `out_dim`.
pub struct BiLstm2d<E: Elem> {
    pub vertical: BiLstm<E>,
    pub horizontal: BiLstm<E>,
    pub fuse: Linear<E>,
    pub hidden: usize,
}

impl<E: Elem> BiLstm2d<E> {
    pub fn new(b: &mut ParamBuilder<E>, channels: usize, hidden: usize, out_dim: usize) -> Self {
        BiLstm2d {
            vertical: BiLstm::new(b, channels, hidden),
            horizontal: BiLstm::new(b, channels, hidden),
            fuse: Linear::new(b, 4 * hidden, out_dim, true),
            hidden,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (b, h, w, c) = match x.shape() {
            [b, h, w, c] => (*b, *h, *w, *c),
            other => {
                return Err(NnError::ShapeMismatch(format!(
                    "bilstm2d expects (B,H,W,C), got {other:?}"
                )))
            }
        };
        let hid = self.hidden;
        // Columns as sequences: (B, H, W, C) -> (B·W, H, C).
        let cols = x
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * w, h, c])?;
        let v_out = self
            .vertical
            .forward(&cols)? // (B·W, H, 2hid)
            .reshape(&[b, w, h, 2 * hid])?
            .permute(&[0, 2, 1, 3])?; // (B, H, W, 2hid)
        // Rows as sequences: (B·H, W, C).
        let rows = x.reshape(&[b * h, w, c])?;
        let h_out = self
            .horizontal
            .forward(&rows)?
            .reshape(&[b, h, w, 2 * hid])?;
        let cat = Tensor::concat(&[v_out, h_out], 3)?; // (B, H, W, 4hid)
        self.fuse.forward(&cat)
    }
}

/// Sequencer block: BiLSTM2D mixing and an MLP, each pre-normed with a
/// residual path.
pub struct SequencerBlock<E: Elem> {
    pub norm1: LayerNorm<E>,
    pub mixer: BiLstm2d<E>,
    pub norm2: LayerNorm<E>,
    pub mlp: Mlp<E>,
}

impl<E: Elem> SequencerBlock<E> {
    pub fn new(b: &mut ParamBuilder<E>, dim: usize, hidden: usize, mlp_ratio: usize) -> Self {
        SequencerBlock {
            norm1: LayerNorm::new(b, dim),
            mixer: BiLstm2d::new(b, dim, hidden, dim),
            norm2: LayerNorm::new(b, dim),
            mlp: Mlp::new(b, dim, dim * mlp_ratio),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let x = x.add(&self.mixer.forward(&self.norm1.forward(x)?)?)?;
        x.add(&self.mlp.forward(&self.norm2.forward(&x)?)?)
    }
}
