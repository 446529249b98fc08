//! Declarative architecture specs for the nine families.
//!
//! Each family has two scales. `Toy` builds and trains on CPU in seconds:
//! two stages, widths capped at 64, inputs 224 (256 for MobileViT).
//! `Reference` is count-only and mirrors the published variants matched to
//! the reported parameter totals: ResNet18/50, MobileNetV2 (width 1.0),
//! EfficientNet-B0, ViT-B/16, Swin-S, MobileViT-S, CMT-S, and Sequencer2D-S.
//! Both the model builder and the analytic parameter counter read the same
//! stage tables, so geometry has a single source of truth.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    ResNet18,
    ResNet50,
    MobileNetV2,
    EfficientNet,
    ViT,
    SwinT,
    MobileViT,
    Cmt,
    Sequencer2d,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::ResNet18,
        Family::ResNet50,
        Family::MobileNetV2,
        Family::EfficientNet,
        Family::ViT,
        Family::SwinT,
        Family::MobileViT,
        Family::Cmt,
        Family::Sequencer2d,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::ResNet18 => "ResNet18",
            Family::ResNet50 => "ResNet50",
            Family::MobileNetV2 => "MobileNetV2",
            Family::EfficientNet => "EfficientNet",
            Family::ViT => "ViT",
            Family::SwinT => "Swin-T",
            Family::MobileViT => "MobileViT",
            Family::Cmt => "CMT",
            Family::Sequencer2d => "Sequencer2D",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "");
        Some(match norm.as_str() {
            "resnet18" => Family::ResNet18,
            "resnet50" => Family::ResNet50,
            "mobilenetv2" => Family::MobileNetV2,
            "efficientnet" => Family::EfficientNet,
            "vit" => Family::ViT,
            "swint" | "swin" => Family::SwinT,
            "mobilevit" => Family::MobileViT,
            "cmt" => Family::Cmt,
            "sequencer2d" | "sequencer" => Family::Sequencer2d,
            _ => return None,
        })
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Toy,
    Reference,
}

#[derive(Debug, thiserror::Error)]
pub enum ArchSpecError {
    #[error("unknown family: {0}")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub scale: Scale,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    pub fn toy(family: Family, num_classes: usize) -> Self {
        ArchitectureSpec {
            family,
            scale: Scale::Toy,
            num_classes,
        }
    }

    pub fn reference(family: Family, num_classes: usize) -> Self {
        ArchitectureSpec {
            family,
            scale: Scale::Reference,
            num_classes,
        }
    }

    /// Network input side length; MobileViT takes 256, everything else 224.
    pub fn input_px(&self) -> usize {
        match self.family {
            Family::MobileViT => 256,
            _ => 224,
        }
    }

    pub(crate) fn config(&self) -> FamilyConfig {
        family_config(self.family, self.scale)
    }
}

// ---------------------------------------------------------------------------
// Per-family stage tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) enum ResBlockKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone)]
pub(crate) struct ResNetConfig {
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Post-stem average pool (kernel, stride); None to skip.
    pub pool: Option<(usize, usize)>,
    pub block: ResBlockKind,
    /// (width, depth, first-block stride); width is the 3x3 width for
    /// bottlenecks (output is 4x).
    pub stages: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub(crate) struct MobileNetConfig {
    pub stem_width: usize,
    pub stem_stride: usize,
    /// (expand, out, repeats, first stride, kernel)
    pub settings: Vec<(usize, usize, usize, usize, usize)>,
    pub last_width: usize,
    /// MBConv adds squeeze-excitation; plain inverted residuals do not.
    pub squeeze_excite: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct VitConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct SwinConfig {
    pub patch: usize,
    pub embed: usize,
    pub window: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct MobileVitConfig {
    pub expand: usize,
    pub stem: usize,
    pub l1_out: usize,
    pub l2_out: usize,
    pub l2_repeats: usize,
    /// (mv2 out channels, transformer dim, transformer depth) for layers 3-5.
    pub vit_layers: [(usize, usize, usize); 3],
    pub last: usize,
    pub heads: usize,
    pub patch: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct CmtConfig {
    pub stem: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    /// Patch-embedding conv kernel == stride per stage.
    pub patch_strides: Vec<usize>,
    pub ffn_ratio: f64,
    pub proj: usize,
    pub input_px: usize,
}

impl CmtConfig {
    /// Token counts per stage, fixed by the input size and stride plan.
    pub fn stage_tokens(&self) -> Vec<usize> {
        let mut res = self.input_px / 2; // stem stride
        let mut tokens = Vec::with_capacity(self.dims.len());
        for s in &self.patch_strides {
            res /= s;
            tokens.push(res * res);
        }
        tokens
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SequencerConfig {
    /// Downsample factor per stage (the first is the stem patch size).
    pub patches: Vec<usize>,
    pub dims: Vec<usize>,
    pub hiddens: Vec<usize>,
    pub depths: Vec<usize>,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum FamilyConfig {
    ResNet(ResNetConfig),
    MobileNet(MobileNetConfig),
    Vit(VitConfig),
    Swin(SwinConfig),
    MobileVit(MobileVitConfig),
    Cmt(CmtConfig),
    Sequencer(SequencerConfig),
}

pub(crate) fn family_config(family: Family, scale: Scale) -> FamilyConfig {
    match (family, scale) {
        (Family::ResNet18, Scale::Reference) => FamilyConfig::ResNet(ResNetConfig {
            stem_width: 64,
            stem_kernel: 7,
            stem_stride: 2,
            pool: Some((2, 2)),
            block: ResBlockKind::Basic,
            stages: vec![(64, 2, 1), (128, 2, 2), (256, 2, 2), (512, 2, 2)],
        }),
        (Family::ResNet18, Scale::Toy) => FamilyConfig::ResNet(ResNetConfig {
            stem_width: 16,
            stem_kernel: 7,
            stem_stride: 4,
            pool: Some((2, 2)),
            block: ResBlockKind::Basic,
            stages: vec![(16, 2, 1), (32, 2, 2)],
        }),
        (Family::ResNet50, Scale::Reference) => FamilyConfig::ResNet(ResNetConfig {
            stem_width: 64,
            stem_kernel: 7,
            stem_stride: 2,
            pool: Some((2, 2)),
            block: ResBlockKind::Bottleneck,
            stages: vec![(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)],
        }),
        (Family::ResNet50, Scale::Toy) => FamilyConfig::ResNet(ResNetConfig {
            stem_width: 16,
            stem_kernel: 7,
            stem_stride: 4,
            pool: Some((2, 2)),
            block: ResBlockKind::Bottleneck,
            stages: vec![(8, 1, 1), (16, 2, 2)],
        }),
        (Family::MobileNetV2, Scale::Reference) => FamilyConfig::MobileNet(MobileNetConfig {
            stem_width: 32,
            stem_stride: 2,
            settings: vec![
                (1, 16, 1, 1, 3),
                (6, 24, 2, 2, 3),
                (6, 32, 3, 2, 3),
                (6, 64, 4, 2, 3),
                (6, 96, 3, 1, 3),
                (6, 160, 3, 2, 3),
                (6, 320, 1, 1, 3),
            ],
            last_width: 1280,
            squeeze_excite: false,
        }),
        (Family::MobileNetV2, Scale::Toy) => FamilyConfig::MobileNet(MobileNetConfig {
            stem_width: 16,
            stem_stride: 2,
            settings: vec![(1, 16, 1, 2, 3), (4, 24, 2, 2, 3), (4, 32, 2, 2, 3)],
            last_width: 64,
            squeeze_excite: false,
        }),
        (Family::EfficientNet, Scale::Reference) => FamilyConfig::MobileNet(MobileNetConfig {
            stem_width: 32,
            stem_stride: 2,
            settings: vec![
                (1, 16, 1, 1, 3),
                (6, 24, 2, 2, 3),
                (6, 40, 2, 2, 5),
                (6, 80, 3, 2, 3),
                (6, 112, 3, 1, 5),
                (6, 192, 4, 2, 5),
                (6, 320, 1, 1, 3),
            ],
            last_width: 1280,
            squeeze_excite: true,
        }),
        (Family::EfficientNet, Scale::Toy) => FamilyConfig::MobileNet(MobileNetConfig {
            stem_width: 16,
            stem_stride: 2,
            settings: vec![(1, 16, 1, 2, 3), (4, 24, 2, 2, 3), (4, 32, 2, 2, 5)],
            last_width: 64,
            squeeze_excite: true,
        }),
        (Family::ViT, Scale::Reference) => FamilyConfig::Vit(VitConfig {
            patch: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_hidden: 3072,
        }),
        (Family::ViT, Scale::Toy) => FamilyConfig::Vit(VitConfig {
            patch: 16,
            dim: 32,
            depth: 2,
            heads: 2,
            mlp_hidden: 64,
        }),
        (Family::SwinT, Scale::Reference) => FamilyConfig::Swin(SwinConfig {
            patch: 4,
            embed: 96,
            window: 7,
            depths: vec![2, 2, 18, 2],
            heads: vec![3, 6, 12, 24],
            mlp_ratio: 4,
        }),
        (Family::SwinT, Scale::Toy) => FamilyConfig::Swin(SwinConfig {
            patch: 4,
            embed: 16,
            window: 7,
            depths: vec![2, 2],
            heads: vec![2, 4],
            mlp_ratio: 2,
        }),
        (Family::MobileViT, Scale::Reference) => FamilyConfig::MobileVit(MobileVitConfig {
            expand: 4,
            stem: 16,
            l1_out: 32,
            l2_out: 64,
            l2_repeats: 3,
            vit_layers: [(96, 144, 2), (128, 192, 4), (160, 240, 3)],
            last: 640,
            heads: 4,
            patch: 2,
        }),
        (Family::MobileViT, Scale::Toy) => FamilyConfig::MobileVit(MobileVitConfig {
            expand: 2,
            stem: 16,
            l1_out: 16,
            l2_out: 24,
            l2_repeats: 2,
            vit_layers: [(32, 48, 2), (48, 64, 2), (64, 80, 2)],
            last: 64,
            heads: 2,
            patch: 2,
        }),
        (Family::Cmt, Scale::Reference) => FamilyConfig::Cmt(CmtConfig {
            stem: 32,
            dims: vec![64, 128, 256, 512],
            depths: vec![3, 3, 16, 3],
            heads: vec![1, 2, 4, 8],
            sr_ratios: vec![8, 4, 2, 1],
            patch_strides: vec![2, 2, 2, 2],
            ffn_ratio: 3.6,
            proj: 1280,
            input_px: 224,
        }),
        (Family::Cmt, Scale::Toy) => FamilyConfig::Cmt(CmtConfig {
            stem: 16,
            dims: vec![24, 48],
            depths: vec![1, 1],
            heads: vec![2, 4],
            sr_ratios: vec![2, 1],
            patch_strides: vec![4, 2],
            ffn_ratio: 3.6,
            proj: 64,
            input_px: 224,
        }),
        (Family::Sequencer2d, Scale::Reference) => FamilyConfig::Sequencer(SequencerConfig {
            patches: vec![7, 2, 1, 1],
            dims: vec![192, 384, 384, 384],
            hiddens: vec![48, 96, 96, 96],
            depths: vec![4, 3, 8, 3],
            mlp_ratio: 3,
        }),
        (Family::Sequencer2d, Scale::Toy) => FamilyConfig::Sequencer(SequencerConfig {
            patches: vec![7, 2],
            dims: vec![24, 48],
            hiddens: vec![8, 16],
            depths: vec![2, 2],
            mlp_ratio: 3,
        }),
    }
}
