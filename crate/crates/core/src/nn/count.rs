//! Analytic parameter counting: walks a family's stage table and sums
//! weight, bias, and norm-affine terms without allocating anything. For toy
//! specs the result must equal brute-force enumeration of an allocated
//! model's parameters exactly; reference specs are count-only.

use super::arch::{
    ArchitectureSpec, CmtConfig, FamilyConfig, MobileNetConfig, MobileVitConfig, ResBlockKind,
    ResNetConfig, SequencerConfig, SwinConfig, VitConfig,
};
use super::blocks::BOTTLENECK_EXPANSION;

pub fn count_parameters(spec: &ArchitectureSpec) -> u64 {
    let classes = spec.num_classes as u64;
    match spec.config() {
        FamilyConfig::ResNet(cfg) => count_resnet(&cfg, classes),
        FamilyConfig::MobileNet(cfg) => count_mobilenet(&cfg, classes),
        FamilyConfig::Vit(cfg) => count_vit(&cfg, spec.input_px() as u64, classes),
        FamilyConfig::Swin(cfg) => count_swin(&cfg, classes),
        FamilyConfig::MobileVit(cfg) => count_mobilevit(&cfg, classes),
        FamilyConfig::Cmt(cfg) => count_cmt(&cfg, classes),
        FamilyConfig::Sequencer(cfg) => count_sequencer(&cfg, classes),
    }
}

fn conv_bn(cin: u64, cout: u64, k: u64) -> u64 {
    cin * cout * k * k + 2 * cout
}

fn linear(cin: u64, cout: u64) -> u64 {
    cin * cout + cout
}

fn layer_norm(dim: u64) -> u64 {
    2 * dim
}

fn count_resnet(cfg: &ResNetConfig, classes: u64) -> u64 {
    let mut p = conv_bn(3, cfg.stem_width as u64, cfg.stem_kernel as u64);
    let mut cin = cfg.stem_width as u64;
    for &(width, depth, stride) in &cfg.stages {
        let width = width as u64;
        for i in 0..depth {
            let s = if i == 0 { stride } else { 1 } as u64;
            match cfg.block {
                ResBlockKind::Basic => {
                    p += conv_bn(cin, width, 3) + conv_bn(width, width, 3);
                    if s != 1 || cin != width {
                        p += conv_bn(cin, width, 1);
                    }
                    cin = width;
                }
                ResBlockKind::Bottleneck => {
                    let out = width * BOTTLENECK_EXPANSION as u64;
                    p += conv_bn(cin, width, 1) + conv_bn(width, width, 3) + conv_bn(width, out, 1);
                    if s != 1 || cin != out {
                        p += conv_bn(cin, out, 1);
                    }
                    cin = out;
                }
            }
        }
    }
    p + linear(cin, classes)
}

fn count_mobilenet(cfg: &MobileNetConfig, classes: u64) -> u64 {
    let mut p = conv_bn(3, cfg.stem_width as u64, 3);
    let mut cin = cfg.stem_width as u64;
    for &(expand, out, repeats, _stride, kernel) in &cfg.settings {
        let (expand, out, kernel) = (expand as u64, out as u64, kernel as u64);
        for _ in 0..repeats {
            let mid = cin * expand;
            if expand != 1 {
                p += conv_bn(cin, mid, 1);
            }
            p += mid * kernel * kernel + 2 * mid; // depthwise + BN
            if cfg.squeeze_excite {
                let squeeze = (cin / 4).max(1);
                p += linear(mid, squeeze) + linear(squeeze, mid);
            }
            p += conv_bn(mid, out, 1);
            cin = out;
        }
    }
    p += conv_bn(cin, cfg.last_width as u64, 1);
    p + linear(cfg.last_width as u64, classes)
}

fn transformer_block(dim: u64, mlp_hidden: u64) -> u64 {
    layer_norm(dim)
        + linear(dim, 3 * dim)      // qkv
        + linear(dim, dim)          // proj
        + layer_norm(dim)
        + linear(dim, mlp_hidden)
        + linear(mlp_hidden, dim)
}

fn count_vit(cfg: &VitConfig, input_px: u64, classes: u64) -> u64 {
    let dim = cfg.dim as u64;
    let grid = input_px / cfg.patch as u64;
    let tokens = grid * grid + 1;
    let mut p = 3 * (cfg.patch * cfg.patch) as u64 * dim + dim; // patch embed conv
    p += dim; // class token
    p += tokens * dim; // position embedding
    p += cfg.depth as u64 * transformer_block(dim, cfg.mlp_hidden as u64);
    p += layer_norm(dim);
    p + linear(dim, classes)
}

fn count_swin(cfg: &SwinConfig, classes: u64) -> u64 {
    let mut dim = cfg.embed as u64;
    let window = cfg.window as u64;
    let rel_table = (2 * window - 1) * (2 * window - 1);
    let mut p = 3 * (cfg.patch * cfg.patch) as u64 * dim + dim + layer_norm(dim);
    for (i, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
        if i > 0 {
            // Patch merging: LN(4C) + Linear(4C -> 2C, no bias).
            p += layer_norm(4 * dim) + 4 * dim * 2 * dim;
            dim *= 2;
        }
        for _ in 0..depth {
            p += transformer_block(dim, dim * cfg.mlp_ratio as u64);
            p += rel_table * heads as u64;
        }
    }
    p += layer_norm(dim);
    p + linear(dim, classes)
}

fn count_mobilevit(cfg: &MobileVitConfig, classes: u64) -> u64 {
    let expand = cfg.expand as u64;
    let mv2 = |cin: u64, cout: u64| -> u64 {
        let mid = cin * expand;
        let mut p = 0;
        if expand != 1 {
            p += conv_bn(cin, mid, 1);
        }
        p += mid * 9 + 2 * mid;
        p + conv_bn(mid, cout, 1)
    };
    let mvit_block = |c: u64, d: u64, depth: u64| -> u64 {
        let mut p = conv_bn(c, c, 3); // local 3x3
        p += c * d; // projection, no bias or norm
        p += depth * transformer_block(d, 2 * d);
        p += layer_norm(d);
        p += conv_bn(d, c, 1);
        p + conv_bn(2 * c, c, 3) // fusion
    };

    let stem = cfg.stem as u64;
    let mut p = conv_bn(3, stem, 3);
    let mut cin = stem;
    p += mv2(cin, cfg.l1_out as u64);
    cin = cfg.l1_out as u64;
    for _ in 0..cfg.l2_repeats {
        p += mv2(cin, cfg.l2_out as u64);
        cin = cfg.l2_out as u64;
    }
    for &(out, dim, depth) in &cfg.vit_layers {
        p += mv2(cin, out as u64);
        cin = out as u64;
        p += mvit_block(cin, dim as u64, depth as u64);
    }
    p += conv_bn(cin, cfg.last as u64, 1);
    p + linear(cfg.last as u64, classes)
}

fn count_cmt(cfg: &CmtConfig, classes: u64) -> u64 {
    let stem = cfg.stem as u64;
    let mut p = conv_bn(3, stem, 3) + 2 * conv_bn(stem, stem, 3);
    let tokens = cfg.stage_tokens();
    let mut cin = stem;
    for i in 0..cfg.dims.len() {
        let dim = cfg.dims[i] as u64;
        let heads = cfg.heads[i] as u64;
        let sr = cfg.sr_ratios[i] as u64;
        let n = tokens[i] as u64;
        let hidden = (cfg.dims[i] as f64 * cfg.ffn_ratio) as u64;
        // Patch embedding: conv k=s (with bias) + LN.
        let k = cfg.patch_strides[i] as u64;
        p += cin * dim * k * k + dim + layer_norm(dim);
        for _ in 0..cfg.depths[i] {
            p += dim * 9 + dim; // LPU depthwise + bias
            p += layer_norm(dim);
            p += linear(dim, dim); // q
            if sr > 1 {
                p += dim * sr * sr + dim + layer_norm(dim); // sr depthwise + LN
            }
            p += 2 * linear(dim, dim); // k, v
            p += linear(dim, dim); // out proj
            p += heads * n * (n / (sr * sr)); // relative position bias
            p += layer_norm(dim);
            // IRFFN: 1x1 + BN, dw 3x3 + BN, 1x1 + BN (convs with bias).
            p += dim * hidden + hidden + 2 * hidden;
            p += hidden * 9 + hidden + 2 * hidden;
            p += hidden * dim + dim + 2 * dim;
        }
        cin = dim;
    }
    let proj = cfg.proj as u64;
    p += cin * proj + proj + 2 * proj; // 1x1 projection + BN
    p + linear(proj, classes)
}

fn count_sequencer(cfg: &SequencerConfig, classes: u64) -> u64 {
    let lstm = |cin: u64, h: u64| -> u64 { 2 * (4 * h * cin + 4 * h * h + 8 * h) };
    let mut p = 0u64;
    let mut cin = 3u64;
    for i in 0..cfg.dims.len() {
        let dim = cfg.dims[i] as u64;
        let hidden = cfg.hiddens[i] as u64;
        let patch = cfg.patches[i] as u64;
        // Downsample conv (kernel = stride = patch) with bias.
        p += cin * dim * patch * patch + dim;
        for _ in 0..cfg.depths[i] {
            p += layer_norm(dim);
            p += 2 * lstm(dim, hidden); // vertical + horizontal BiLSTMs
            p += linear(4 * hidden, dim); // channel fusion
            p += layer_norm(dim);
            p += linear(dim, dim * cfg.mlp_ratio as u64)
                + linear(dim * cfg.mlp_ratio as u64, dim);
        }
        cin = dim;
    }
    p += layer_norm(cin);
    p + linear(cin, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{Family, Scale};

    /// Reference counts with two-class heads, checked against the published
    /// per-family totals.
    #[test]
    fn reference_counts_match_published_totals() {
        let cases: [(Family, u64, f64); 9] = [
            (Family::ResNet18, 11_180_000, 0.01),
            (Family::ResNet50, 23_510_000, 0.01),
            (Family::MobileNetV2, 2_230_000, 0.01),
            (Family::ViT, 85_800_000, 0.01),
            (Family::EfficientNet, 4_010_000, 0.02),
            (Family::MobileViT, 4_940_000, 0.02),
            (Family::Cmt, 24_980_000, 0.02),
            (Family::SwinT, 48_840_000, 0.02),
            (Family::Sequencer2d, 27_270_000, 0.02),
        ];
        for (family, target, tol) in cases {
            let spec = ArchitectureSpec::reference(family, 2);
            let count = count_parameters(&spec);
            let rel = (count as f64 - target as f64).abs() / target as f64;
            assert!(
                rel <= tol,
                "{family}: counted {count}, target {target}, rel {rel:.4}"
            );
        }
    }

    /// Exact values for the four variants that are not inference-dependent.
    #[test]
    fn exact_reference_values_for_torchvision_variants() {
        let expect = [
            (Family::ResNet18, 11_177_538),
            (Family::ResNet50, 23_512_130),
            (Family::MobileNetV2, 2_226_434),
            (Family::EfficientNet, 4_010_110),
            (Family::ViT, 85_800_194),
            (Family::SwinT, 48_838_796),
        ];
        for (family, value) in expect {
            assert_eq!(
                count_parameters(&ArchitectureSpec::reference(family, 2)),
                value,
                "{family}"
            );
        }
    }

    #[test]
    fn counting_is_fast() {
        let started = std::time::Instant::now();
        for family in Family::ALL {
            let _ = count_parameters(&ArchitectureSpec::reference(family, 2));
        }
        assert!(started.elapsed().as_millis() < 1000);
    }

    #[test]
    fn scales_differ_by_orders_of_magnitude() {
        for family in Family::ALL {
            let toy = count_parameters(&ArchitectureSpec::toy(family, 2));
            let reference = count_parameters(&ArchitectureSpec::reference(family, 2));
            assert!(toy * 10 < reference, "{family}: toy {toy} vs ref {reference}");
        }
    }
}
