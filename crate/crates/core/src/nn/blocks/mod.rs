//! Distinguishing blocks of the nine architecture families.

mod attention;
mod cmt;
mod mobile;
mod mobilevit;
mod residual;
mod sequencer;
mod swin;

pub use attention::{MultiHeadAttention, TransformerBlock, VitEncoder};
pub use cmt::{CmtBlock, CmtStem, Irffn, ReducedAttention};
pub use mobile::{InvertedResidual, MbConv, SqueezeExcite};
pub use mobilevit::{mobilevit_fold, mobilevit_unfold, MobileVitBlock};
pub use residual::{Bottleneck, ResidualBlock, BOTTLENECK_EXPANSION};
pub use sequencer::{BiLstm2d, SequencerBlock};
pub use swin::{
    cyclic_shift, cyclic_unshift, shifted_window_mask, window_merge, window_partition,
    PatchMerging, RelativePositionBias, SwinBlock, SwinStage,
};
