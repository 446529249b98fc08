//! Assembles runnable classifiers from architecture specs.
//!
//! Only toy-scale specs build; reference specs exist for parameter counting.
//! Parameter order is construction order, which fixes the optimizer and
//! checkpoint layout.

use super::arch::{
    ArchitectureSpec, CmtConfig, FamilyConfig, MobileNetConfig, MobileVitConfig, ResBlockKind,
    ResNetConfig, Scale, SequencerConfig, SwinConfig, VitConfig,
};
use super::blocks::{
    Bottleneck, CmtBlock, CmtStem, InvertedResidual, MbConv, MobileVitBlock, ResidualBlock,
    SequencerBlock, SwinStage, VitEncoder,
};
use super::init::ParamBuilder;
use super::layers::{BatchNorm2d, Conv2dLayer, LayerNorm, Linear};
use super::tensor::{Elem, NnError, NnResult, Tensor};

pub trait Network<E: Elem> {
    fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>>;
}

/// A built classifier: the network, its spec, and every parameter in
/// declaration order.
pub struct Model<E: Elem> {
    pub spec: ArchitectureSpec,
    params: Vec<Tensor<E>>,
    net: Box<dyn Network<E>>,
}

impl<E: Elem> Model<E> {
    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        self.net.forward(x, training)
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    /// Brute-force parameter total over allocated tensors.
    pub fn parameter_count(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Copies of all parameter buffers, for best-epoch checkpointing.
    pub fn snapshot(&self) -> Vec<Vec<E>> {
        self.params.iter().map(|p| p.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<E>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot layout mismatch");
        for (p, s) in self.params.iter().zip(snapshot) {
            p.set_value(s.clone());
        }
    }
}

/// Builds a toy-scale model with seeded initialization.
pub fn build_model<E: Elem>(spec: &ArchitectureSpec, seed: u64) -> NnResult<Model<E>> {
    if spec.scale != Scale::Toy {
        return Err(NnError::UnsupportedSpec(format!(
            "only toy-scale models build; {} reference is count-only",
            spec.family
        )));
    }
    let mut b = ParamBuilder::new(seed, &["model", spec.family.as_str()]);
    let net: Box<dyn Network<E>> = match spec.config() {
        FamilyConfig::ResNet(cfg) => Box::new(ResNetNet::new(&mut b, &cfg, spec.num_classes)),
        FamilyConfig::MobileNet(cfg) => Box::new(MobileNetNet::new(&mut b, &cfg, spec.num_classes)),
        FamilyConfig::Vit(cfg) => Box::new(VitNet::new(
            &mut b,
            &cfg,
            spec.input_px(),
            spec.num_classes,
        )),
        FamilyConfig::Swin(cfg) => Box::new(SwinNet::new(&mut b, &cfg, spec.num_classes)),
        FamilyConfig::MobileVit(cfg) => Box::new(MobileVitNet::new(&mut b, &cfg, spec.num_classes)),
        FamilyConfig::Cmt(cfg) => Box::new(CmtNet::new(&mut b, &cfg, spec.num_classes)),
        FamilyConfig::Sequencer(cfg) => Box::new(SequencerNet::new(&mut b, &cfg, spec.num_classes)),
    };
    Ok(Model {
        spec: *spec,
        params: b.into_params(),
        net,
    })
}

// ---------------------------------------------------------------------------
// ResNet
// ---------------------------------------------------------------------------

enum ResUnit<E: Elem> {
    Basic(ResidualBlock<E>),
    Bottle(Bottleneck<E>),
}

impl<E: Elem> ResUnit<E> {
    fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        match self {
            ResUnit::Basic(b) => b.forward(x, training),
            ResUnit::Bottle(b) => b.forward(x, training),
        }
    }
}

struct ResNetNet<E: Elem> {
    stem: Conv2dLayer<E>,
    stem_bn: BatchNorm2d<E>,
    pool: Option<(usize, usize)>,
    blocks: Vec<ResUnit<E>>,
    head: Linear<E>,
}

impl<E: Elem> ResNetNet<E> {
    fn new(b: &mut ParamBuilder<E>, cfg: &ResNetConfig, classes: usize) -> Self {
        let stem = Conv2dLayer::new(
            b,
            3,
            cfg.stem_width,
            cfg.stem_kernel,
            cfg.stem_stride,
            cfg.stem_kernel / 2,
            false,
        );
        let stem_bn = BatchNorm2d::new(b, cfg.stem_width);
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_width;
        for &(width, depth, stride) in &cfg.stages {
            for i in 0..depth {
                let s = if i == 0 { stride } else { 1 };
                match cfg.block {
                    ResBlockKind::Basic => {
                        blocks.push(ResUnit::Basic(ResidualBlock::new(b, cin, width, s)));
                        cin = width;
                    }
                    ResBlockKind::Bottleneck => {
                        blocks.push(ResUnit::Bottle(Bottleneck::new(b, cin, width, s)));
                        cin = width * super::blocks::BOTTLENECK_EXPANSION;
                    }
                }
            }
        }
        let head = Linear::new(b, cin, classes, true);
        ResNetNet {
            stem,
            stem_bn,
            pool: cfg.pool,
            blocks,
            head,
        }
    }
}

impl<E: Elem> Network<E> for ResNetNet<E> {
    fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let mut h = self.stem_bn.forward(&self.stem.forward(x)?, training)?.relu();
        if let Some((k, s)) = self.pool {
            h = h.avg_pool2d(k, s)?;
        }
        for block in &self.blocks {
            h = block.forward(&h, training)?;
        }
        self.head.forward(&h.global_avg_pool()?)
    }
}

// ---------------------------------------------------------------------------
// MobileNetV2 / EfficientNet
// ---------------------------------------------------------------------------

enum MobileUnit<E: Elem> {
    Plain(InvertedResidual<E>),
    Se(MbConv<E>),
}

impl<E: Elem> MobileUnit<E> {
    fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        match self {
            MobileUnit::Plain(b) => b.forward(x, training),
            MobileUnit::Se(b) => b.forward(x, training),
        }
    }
}

struct MobileNetNet<E: Elem> {
    stem: Conv2dLayer<E>,
    stem_bn: BatchNorm2d<E>,
    blocks: Vec<MobileUnit<E>>,
    last: Conv2dLayer<E>,
    last_bn: BatchNorm2d<E>,
    head: Linear<E>,
    silu: bool,
}

impl<E: Elem> MobileNetNet<E> {
    fn new(b: &mut ParamBuilder<E>, cfg: &MobileNetConfig, classes: usize) -> Self {
        let stem = Conv2dLayer::new(b, 3, cfg.stem_width, 3, cfg.stem_stride, 1, false);
        let stem_bn = BatchNorm2d::new(b, cfg.stem_width);
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_width;
        for &(expand, out, repeats, stride, kernel) in &cfg.settings {
            for i in 0..repeats {
                let s = if i == 0 { stride } else { 1 };
                blocks.push(if cfg.squeeze_excite {
                    MobileUnit::Se(MbConv::new(b, cin, out, s, expand, kernel))
                } else {
                    MobileUnit::Plain(InvertedResidual::new(b, cin, out, s, expand, kernel))
                });
                cin = out;
            }
        }
        let last = Conv2dLayer::new(b, cin, cfg.last_width, 1, 1, 0, false);
        let last_bn = BatchNorm2d::new(b, cfg.last_width);
        let head = Linear::new(b, cfg.last_width, classes, true);
        MobileNetNet {
            stem,
            stem_bn,
            blocks,
            last,
            last_bn,
            head,
            silu: cfg.squeeze_excite,
        }
    }

    fn act(&self, x: Tensor<E>) -> NnResult<Tensor<E>> {
        if self.silu {
            x.mul(&x.sigmoid())
        } else {
            Ok(x.relu())
        }
    }
}

impl<E: Elem> Network<E> for MobileNetNet<E> {
    fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let mut h = self.act(self.stem_bn.forward(&self.stem.forward(x)?, training)?)?;
        for block in &self.blocks {
            h = block.forward(&h, training)?;
        }
        h = self.act(self.last_bn.forward(&self.last.forward(&h)?, training)?)?;
        self.head.forward(&h.global_avg_pool()?)
    }
}

// ---------------------------------------------------------------------------
// ViT
// ---------------------------------------------------------------------------

struct VitNet<E: Elem> {
    encoder: VitEncoder<E>,
}

impl<E: Elem> VitNet<E> {
    fn new(b: &mut ParamBuilder<E>, cfg: &VitConfig, input_px: usize, classes: usize) -> Self {
        VitNet {
            encoder: VitEncoder::new(
                b,
                input_px,
                cfg.patch,
                cfg.dim,
                cfg.depth,
                cfg.heads,
                cfg.mlp_hidden,
                classes,
            ),
        }
    }
}

impl<E: Elem> Network<E> for VitNet<E> {
    fn forward(&self, x: &Tensor<E>, _training: bool) -> NnResult<Tensor<E>> {
        self.encoder.forward(x)
    }
}

// ---------------------------------------------------------------------------
// Swin
// ---------------------------------------------------------------------------

struct SwinNet<E: Elem> {
    embed: Conv2dLayer<E>,
    embed_norm: LayerNorm<E>,
    stages: Vec<SwinStage<E>>,
    norm: LayerNorm<E>,
    head: Linear<E>,
}

impl<E: Elem> SwinNet<E> {
    fn new(b: &mut ParamBuilder<E>, cfg: &SwinConfig, classes: usize) -> Self {
        let embed = Conv2dLayer::new(b, 3, cfg.embed, cfg.patch, cfg.patch, 0, true);
        let embed_norm = LayerNorm::new(b, cfg.embed);
        let mut stages = Vec::new();
        let mut dim = cfg.embed;
        let n_stages = cfg.depths.len();
        for i in 0..n_stages {
            stages.push(SwinStage::new(
                b,
                dim,
                cfg.depths[i],
                cfg.heads[i],
                cfg.window,
                cfg.mlp_ratio,
                i < n_stages - 1,
            ));
            if i < n_stages - 1 {
                dim *= 2;
            }
        }
        let norm = LayerNorm::new(b, dim);
        let head = Linear::new(b, dim, classes, true);
        SwinNet {
            embed,
            embed_norm,
            stages,
            norm,
            head,
        }
    }
}

impl<E: Elem> Network<E> for SwinNet<E> {
    fn forward(&self, x: &Tensor<E>, _training: bool) -> NnResult<Tensor<E>> {
        let fm = self.embed.forward(x)?; // (B, C, H, W)
        let (bsz, c, h, w) = match fm.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => unreachable!(),
        };
        let mut t = self.embed_norm.forward(&fm.permute(&[0, 2, 3, 1])?)?;
        for stage in &self.stages {
            t = stage.forward(&t)?;
        }
        let dim = *t.shape().last().unwrap();
        let tokens = t.numel() / (bsz * dim);
        let pooled = t
            .reshape(&[bsz, tokens, dim])?
            .mean_axis(1)?
            .reshape(&[bsz, dim])?;
        let _ = (c, h, w);
        self.head.forward(&self.norm.forward(&pooled)?)
    }
}

// ---------------------------------------------------------------------------
// MobileViT
// ---------------------------------------------------------------------------

struct MobileVitNet<E: Elem> {
    stem: Conv2dLayer<E>,
    stem_bn: BatchNorm2d<E>,
    mv2_head: Vec<InvertedResidual<E>>,
    vit_stages: Vec<(InvertedResidual<E>, MobileVitBlock<E>)>,
    last: Conv2dLayer<E>,
    last_bn: BatchNorm2d<E>,
    head: Linear<E>,
}

impl<E: Elem> MobileVitNet<E> {
    fn new(b: &mut ParamBuilder<E>, cfg: &MobileVitConfig, classes: usize) -> Self {
        let stem = Conv2dLayer::new(b, 3, cfg.stem, 3, 2, 1, false);
        let stem_bn = BatchNorm2d::new(b, cfg.stem);
        let mut mv2_head = Vec::new();
        let mut cin = cfg.stem;
        mv2_head.push(InvertedResidual::new(b, cin, cfg.l1_out, 1, cfg.expand, 3));
        cin = cfg.l1_out;
        for i in 0..cfg.l2_repeats {
            let s = if i == 0 { 2 } else { 1 };
            mv2_head.push(InvertedResidual::new(b, cin, cfg.l2_out, s, cfg.expand, 3));
            cin = cfg.l2_out;
        }
        let mut vit_stages = Vec::new();
        for &(out, dim, depth) in &cfg.vit_layers {
            let mv2 = InvertedResidual::new(b, cin, out, 2, cfg.expand, 3);
            cin = out;
            let block = MobileVitBlock::new(b, cin, dim, depth, cfg.heads, cfg.patch);
            vit_stages.push((mv2, block));
        }
        let last = Conv2dLayer::new(b, cin, cfg.last, 1, 1, 0, false);
        let last_bn = BatchNorm2d::new(b, cfg.last);
        let head = Linear::new(b, cfg.last, classes, true);
        MobileVitNet {
            stem,
            stem_bn,
            mv2_head,
            vit_stages,
            last,
            last_bn,
            head,
        }
    }
}

impl<E: Elem> Network<E> for MobileVitNet<E> {
    fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let h = self.stem_bn.forward(&self.stem.forward(x)?, training)?;
        let mut h = h.mul(&h.sigmoid())?;
        for block in &self.mv2_head {
            h = block.forward(&h, training)?;
        }
        for (mv2, block) in &self.vit_stages {
            h = mv2.forward(&h, training)?;
            h = block.forward(&h, training)?;
        }
        let h = self.last_bn.forward(&self.last.forward(&h)?, training)?;
        let h = h.mul(&h.sigmoid())?;
        self.head.forward(&h.global_avg_pool()?)
    }
}

// ---------------------------------------------------------------------------
// CMT
// ---------------------------------------------------------------------------

struct CmtPatchEmbed<E: Elem> {
    conv: Conv2dLayer<E>,
    norm: LayerNorm<E>,
}

impl<E: Elem> CmtPatchEmbed<E> {
    fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let fm = self.conv.forward(x)?;
        let normed = self.norm.forward(&fm.permute(&[0, 2, 3, 1])?)?;
        normed.permute(&[0, 3, 1, 2])
    }
}

struct CmtNet<E: Elem> {
    stem: CmtStem<E>,
    stages: Vec<(CmtPatchEmbed<E>, Vec<CmtBlock<E>>)>,
    proj: Conv2dLayer<E>,
    proj_bn: BatchNorm2d<E>,
    head: Linear<E>,
}

impl<E: Elem> CmtNet<E> {
    fn new(b: &mut ParamBuilder<E>, cfg: &CmtConfig, classes: usize) -> Self {
        let stem = CmtStem::new(b, cfg.stem);
        let tokens = cfg.stage_tokens();
        let mut stages = Vec::new();
        let mut cin = cfg.stem;
        for i in 0..cfg.dims.len() {
            let dim = cfg.dims[i];
            let embed = CmtPatchEmbed {
                conv: Conv2dLayer::new(
                    b,
                    cin,
                    dim,
                    cfg.patch_strides[i],
                    cfg.patch_strides[i],
                    0,
                    true,
                ),
                norm: LayerNorm::new(b, dim),
            };
            let blocks = (0..cfg.depths[i])
                .map(|_| {
                    CmtBlock::new(
                        b,
                        dim,
                        cfg.heads[i],
                        cfg.sr_ratios[i],
                        tokens[i],
                        cfg.ffn_ratio,
                    )
                })
                .collect();
            stages.push((embed, blocks));
            cin = dim;
        }
        let proj = Conv2dLayer::new(b, cin, cfg.proj, 1, 1, 0, true);
        let proj_bn = BatchNorm2d::new(b, cfg.proj);
        let head = Linear::new(b, cfg.proj, classes, true);
        CmtNet {
            stem,
            stages,
            proj,
            proj_bn,
            head,
        }
    }
}

impl<E: Elem> Network<E> for CmtNet<E> {
    fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let mut h = self.stem.forward(x, training)?;
        for (embed, blocks) in &self.stages {
            h = embed.forward(&h)?;
            for block in blocks {
                h = block.forward(&h, training)?;
            }
        }
        let h = self
            .proj_bn
            .forward(&self.proj.forward(&h)?, training)?
            .gelu();
        self.head.forward(&h.global_avg_pool()?)
    }
}

// ---------------------------------------------------------------------------
// Sequencer2D
// ---------------------------------------------------------------------------

struct SequencerNet<E: Elem> {
    stages: Vec<(Conv2dLayer<E>, Vec<SequencerBlock<E>>)>,
    norm: LayerNorm<E>,
    head: Linear<E>,
}

impl<E: Elem> SequencerNet<E> {
    fn new(b: &mut ParamBuilder<E>, cfg: &SequencerConfig, classes: usize) -> Self {
        let mut stages = Vec::new();
        let mut cin = 3;
        for i in 0..cfg.dims.len() {
            let dim = cfg.dims[i];
            let down = Conv2dLayer::new(b, cin, dim, cfg.patches[i], cfg.patches[i], 0, true);
            let blocks = (0..cfg.depths[i])
                .map(|_| SequencerBlock::new(b, dim, cfg.hiddens[i], cfg.mlp_ratio))
                .collect();
            stages.push((down, blocks));
            cin = dim;
        }
        let norm = LayerNorm::new(b, cin);
        let head = Linear::new(b, cin, classes, true);
        SequencerNet { stages, norm, head }
    }
}

impl<E: Elem> Network<E> for SequencerNet<E> {
    fn forward(&self, x: &Tensor<E>, _training: bool) -> NnResult<Tensor<E>> {
        let mut nchw = x.clone();
        for (down, blocks) in &self.stages {
            let fm = down.forward(&nchw)?;
            let mut t = fm.permute(&[0, 2, 3, 1])?; // (B, H, W, C)
            for block in blocks {
                t = block.forward(&t)?;
            }
            nchw = t.permute(&[0, 3, 1, 2])?;
        }
        let t = nchw.permute(&[0, 2, 3, 1])?;
        let (bsz, h, w, c) = match t.shape() {
            [b, h, w, c] => (*b, *h, *w, *c),
            _ => unreachable!(),
        };
        let pooled = t
            .reshape(&[bsz, h * w, c])?
            .mean_axis(1)?
            .reshape(&[bsz, c])?;
        self.head.forward(&self.norm.forward(&pooled)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::Family;
    use crate::nn::count::count_parameters;

    #[test]
    fn reference_specs_do_not_build() {
        let spec = ArchitectureSpec::reference(Family::ResNet18, 2);
        assert!(matches!(
            build_model::<f32>(&spec, 1),
            Err(NnError::UnsupportedSpec(_))
        ));
    }

    #[test]
    fn toy_counts_match_allocated_models_exactly() {
        for family in Family::ALL {
            let spec = ArchitectureSpec::toy(family, 2);
            let model = build_model::<f32>(&spec, 7).unwrap();
            assert_eq!(
                model.parameter_count(),
                count_parameters(&spec),
                "{family}: analytic count must equal allocated parameter total"
            );
        }
    }
}
