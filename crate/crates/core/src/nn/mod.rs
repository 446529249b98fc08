//! Micro tensor engine and the nine architecture families.
//!
//! The engine is a dynamic (define-by-run) reverse-mode autodiff over dense
//! row-major buffers, generic over `f32` (training) and `f64` (gradient
//! checks). Heavy math lives in fused ops (matmul, conv, norms, softmax);
//! everything else is composed from elementwise and shape primitives.

mod arch;
mod blocks;
mod build;
mod checkpoint;
mod conv;
mod count;
pub mod gradcheck;
mod init;
mod layers;
mod linalg;
mod norm;
mod tensor;

pub use arch::{ArchSpecError, ArchitectureSpec, Family, Scale};
pub use blocks::{
    cyclic_shift, cyclic_unshift, mobilevit_fold, mobilevit_unfold, shifted_window_mask,
    window_merge, window_partition, BiLstm2d, Bottleneck, CmtBlock, CmtStem, InvertedResidual, Irffn,
    MbConv, MobileVitBlock, MultiHeadAttention, PatchMerging, ReducedAttention, RelativePositionBias,
    ResidualBlock, SequencerBlock, SqueezeExcite, SwinBlock, SwinStage, TransformerBlock,
    VitEncoder,
};
pub use build::{build_model, Model, Network};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use count::count_parameters;
pub use init::{Init, ParamBuilder};
pub use layers::{BatchNorm2d, BiLstm, Conv2dLayer, DepthwiseConv2d, LayerNorm, Linear, Lstm, Mlp};
pub use tensor::{Elem, NnError, NnResult, Tensor};
