//! Central finite-difference verification of every differentiable op and
//! every architecture block, at 64-bit over multiple random draws.

use histobench::nn::gradcheck::check_gradients;
use histobench::nn::{
    BiLstm2d, CmtBlock, CmtStem, InvertedResidual, Init, Lstm, MbConv, MobileVitBlock,
    MultiHeadAttention, ParamBuilder, ResidualBlock, SwinBlock, Tensor, VitEncoder,
};

const DRAWS: usize = 5;
const TOL: f64 = 1e-4;

/// Random constant with the same element count as `shape`, used to weight
/// outputs into a scalar loss so no gradient path cancels by symmetry.
fn loss_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut b = ParamBuilder::<f64>::new(seed, &["loss-weights"]);
    let w = b.param(shape, Init::TruncNormal(1.0));
    w.detach()
}

/// Re-draws every parameter at a generic point. Layer defaults put norm
/// offsets at exactly zero, which parks ReLU kinks on the batch-norm mean
/// where finite differences are invalid; random offsets move them off.
fn randomize(params: &[Tensor<f64>], seed: u64) {
    let mut b = ParamBuilder::<f64>::new(seed, &["randomize"]);
    for p in params {
        let noise = b.param(&[p.numel()], Init::TruncNormal(0.25));
        let nv = noise.to_vec();
        p.update_value(|v| {
            for (x, n) in v.iter_mut().zip(&nv) {
                *x += *n;
            }
        });
    }
}

fn check<F>(name: &str, params: &[Tensor<f64>], forward: F)
where
    F: Fn() -> histobench::nn::NnResult<Tensor<f64>>,
{
    let report = check_gradients(params, forward).expect("forward failed");
    assert!(
        report.max_rel_err < TOL,
        "{name}: max rel err {} over {} elements",
        report.max_rel_err,
        report.checked_elements
    );
}

// ---------------------------------------------------------------------------
// Core ops
// ---------------------------------------------------------------------------

#[test]
fn elementwise_and_broadcast_ops() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(100 + draw, &["ops"]);
        let x = b.param(&[2, 3, 4], Init::TruncNormal(0.8));
        let y = b.param(&[2, 3, 4], Init::TruncNormal(0.8));
        let bias = b.param(&[4], Init::TruncNormal(0.8));
        let w = loss_weights(&[2, 3, 4], 900 + draw);
        let (xc, yc, bc, wc) = (x.clone(), y.clone(), bias.clone(), w.clone());
        check("elementwise", &[x, y, bias], move || {
            let sum = xc.add(&bc)?; // broadcast add
            let prod = sum.mul(&yc)?;
            let mix = prod.sub(&xc.mul(&yc)?.scale(0.5))?;
            // Keep the divisor away from zero.
            let denom = yc.square().affine(1.0, 1.5);
            let quot = mix.div(&denom)?;
            let acts = quot.relu().add(&quot.gelu())?.add(&quot.sigmoid())?;
            let acts = acts.add(&quot.tanh_act())?.add(&quot.square().affine(1.0, 0.1).sqrt_t())?;
            Ok(acts.mul(&wc)?.sum_all().exp_t().ln_t().mean_all())
        });
    }
}

#[test]
fn reduction_and_shape_ops() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(200 + draw, &["shape"]);
        let x = b.param(&[2, 4, 6], Init::TruncNormal(0.8));
        let w = loss_weights(&[4, 6, 2], 910 + draw);
        let xc = x.clone();
        let wc = w.clone();
        check("shape-ops", &[x], move || {
            let t = xc.permute(&[1, 2, 0])?; // (4, 6, 2)
            let left = t.narrow(1, 0, 3)?;
            let right = t.narrow(1, 3, 3)?;
            let joined = Tensor::concat(&[right, left], 1)?; // swapped halves
            let rolled = joined.roll(0, 2)?.roll(2, -1)?;
            let picked = rolled
                .reshape(&[4, 12])?
                .gather_rows(&[3, 0, 1, 1])?
                .reshape(&[4, 6, 2])?;
            let scaled = picked.mul(&wc)?;
            let reduced = scaled.sum_axis(1)?.mean_axis(0)?;
            Ok(reduced.sum_all())
        });
    }
}

#[test]
fn matmul_and_bmm() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(300 + draw, &["matmul"]);
        let a = b.param(&[3, 5], Init::TruncNormal(0.7));
        let m = b.param(&[5, 4], Init::TruncNormal(0.7));
        let batched = b.param(&[2, 4, 3], Init::TruncNormal(0.7));
        let w = loss_weights(&[2, 3, 3], 920 + draw);
        let (ac, mc, bc, wc) = (a.clone(), m.clone(), batched.clone(), w.clone());
        check("matmul", &[a, m, batched], move || {
            let prod = ac.matmul(&mc)?; // (3, 4)
            let lifted = Tensor::concat(&[prod.reshape(&[1, 3, 4])?, prod.reshape(&[1, 3, 4])?], 0)?;
            let out = lifted.bmm(&bc)?; // (2, 3, 3)
            Ok(out.mul(&wc)?.sum_all())
        });
    }
}

#[test]
fn convolutions_and_pooling() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(400 + draw, &["conv"]);
        let x = b.param(&[2, 3, 8, 8], Init::TruncNormal(0.6));
        let w1 = b.param(&[4, 3, 3, 3], Init::TruncNormal(0.4));
        let bias1 = b.param(&[4], Init::TruncNormal(0.4));
        let dw = b.param(&[4, 1, 3, 3], Init::TruncNormal(0.4));
        let dwb = b.param(&[4], Init::TruncNormal(0.4));
        let lw = loss_weights(&[2, 4], 930 + draw);
        let (xc, w1c, b1c, dwc, dwbc, lwc) =
            (x.clone(), w1.clone(), bias1.clone(), dw.clone(), dwb.clone(), lw.clone());
        check("conv", &[x, w1, bias1, dw, dwb], move || {
            let c1 = xc.conv2d(&w1c, Some(&b1c), 2, 1)?; // (2,4,4,4)
            let c2 = c1.depthwise_conv2d(&dwc, Some(&dwbc), 1, 1)?;
            let pooled = c2.avg_pool2d(2, 2)?; // (2,4,2,2)
            let flat = pooled.global_avg_pool()?; // (2,4)
            Ok(flat.mul(&lwc)?.sum_all())
        });
    }
}

#[test]
fn norms_and_softmax() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(500 + draw, &["norms"]);
        let x = b.param(&[3, 2, 4, 4], Init::TruncNormal(0.9));
        let gamma = b.param(&[2], Init::Ones);
        let beta = b.param(&[2], Init::TruncNormal(0.2));
        let lg = b.param(&[8], Init::Ones);
        let lb = b.param(&[8], Init::TruncNormal(0.2));
        let w = loss_weights(&[3, 4, 8], 940 + draw);
        let (xc, gc, bc, lgc, lbc, wc) =
            (x.clone(), gamma.clone(), beta.clone(), lg.clone(), lb.clone(), w.clone());
        check("norms", &[x, gamma, beta, lg, lb], move || {
            let (bn, _, _) = xc.batch_norm2d(&gc, &bc, 1e-5)?;
            let tokens = bn.reshape(&[3, 4, 8])?;
            let ln = tokens.layer_norm(&lgc, &lbc, 1e-6)?;
            let sm = ln.softmax_last();
            let lsm = ln.log_softmax_last();
            Ok(sm.add(&lsm.scale(0.3))?.mul(&wc)?.sum_all())
        });
    }
}

// ---------------------------------------------------------------------------
// Architecture blocks
// ---------------------------------------------------------------------------

#[test]
fn residual_block_gradients() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(600 + draw, &["res"]);
        let x = b.param(&[2, 3, 6, 6], Init::TruncNormal(0.6));
        let block = ResidualBlock::new(&mut b, 3, 4, 2);
        let params = b.into_params();
        randomize(&params, 7001 + draw);
        let w = loss_weights(&[2, 4, 3, 3], 950 + draw);
        let (xc, wc) = (x, w);
        check("residual", &params, move || {
            Ok(block.forward(&xc, true)?.mul(&wc)?.sum_all())
        });
    }
}

#[test]
fn inverted_residual_gradients() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(700 + draw, &["ir"]);
        let x = b.param(&[2, 4, 6, 6], Init::TruncNormal(0.6));
        let block = InvertedResidual::new(&mut b, 4, 4, 1, 2, 3);
        let params = b.into_params();
        randomize(&params, 7002 + draw);
        let w = loss_weights(&[2, 4, 6, 6], 960 + draw);
        let (xc, wc) = (x, w);
        check("inverted-residual", &params, move || {
            Ok(block.forward(&xc, true)?.mul(&wc)?.sum_all())
        });
    }
}

#[test]
fn mbconv_gradients() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(800 + draw, &["mbconv"]);
        let x = b.param(&[2, 4, 6, 6], Init::TruncNormal(0.6));
        let block = MbConv::new(&mut b, 4, 6, 2, 2, 3);
        let params = b.into_params();
        randomize(&params, 7003 + draw);
        let w = loss_weights(&[2, 6, 3, 3], 970 + draw);
        let (xc, wc) = (x, w);
        check("mbconv", &params, move || {
            Ok(block.forward(&xc, true)?.mul(&wc)?.sum_all())
        });
    }
}

#[test]
fn vit_stack_gradients() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(1000 + draw, &["vit"]);
        let x = b.param(&[1, 3, 16, 16], Init::TruncNormal(0.5));
        let vit = VitEncoder::new(&mut b, 16, 8, 8, 2, 2, 16, 2);
        let params = b.into_params();
        randomize(&params, 7004 + draw);
        let w = loss_weights(&[1, 2], 980 + draw);
        let (xc, wc) = (x, w);
        check("vit", &params, move || {
            Ok(vit.forward(&xc)?.mul(&wc)?.sum_all())
        });
    }
}

#[test]
fn attention_alone_gradients() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(1100 + draw, &["attn"]);
        let x = b.param(&[2, 5, 8], Init::TruncNormal(0.7));
        let attn = MultiHeadAttention::new(&mut b, 8, 2);
        let params = b.into_params();
        randomize(&params, 7005 + draw);
        let w = loss_weights(&[2, 5, 8], 990 + draw);
        let (xc, wc) = (x, w);
        check("attention", &params, move || {
            Ok(attn.forward(&xc, None)?.mul(&wc)?.sum_all())
        });
    }
}

#[test]
fn swin_block_gradients_plain_and_shifted() {
    for draw in 0..DRAWS as u64 {
        for shift in [0usize, 2] {
            let mut b = ParamBuilder::<f64>::new(1200 + draw * 2 + shift as u64, &["swin"]);
            let x = b.param(&[1, 8, 8, 6], Init::TruncNormal(0.6));
            let block = SwinBlock::new(&mut b, 6, 2, 4, shift, 12);
            let params = b.into_params();
        randomize(&params, 7006 + draw);
            let w = loss_weights(&[1, 8, 8, 6], 1990 + draw);
            let (xc, wc) = (x, w);
            check("swin", &params, move || {
                Ok(block.forward(&xc)?.mul(&wc)?.sum_all())
            });
        }
    }
}

#[test]
fn bilstm2d_gradients() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(1300 + draw, &["bilstm2d"]);
        let x = b.param(&[1, 4, 5, 4], Init::TruncNormal(0.7));
        let cell = BiLstm2d::new(&mut b, 4, 3, 4);
        let params = b.into_params();
        randomize(&params, 7007 + draw);
        let w = loss_weights(&[1, 4, 5, 4], 2990 + draw);
        let (xc, wc) = (x, w);
        check("bilstm2d", &params, move || {
            Ok(cell.forward(&xc)?.mul(&wc)?.sum_all())
        });
    }
}

#[test]
fn lstm_layer_gradients() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(1400 + draw, &["lstm"]);
        let x = b.param(&[2, 4, 3], Init::TruncNormal(0.7));
        let lstm = Lstm::new(&mut b, 3, 4);
        let params = b.into_params();
        randomize(&params, 7008 + draw);
        let w = loss_weights(&[2, 4, 4], 3990 + draw);
        let (xc, wc) = (x, w);
        check("lstm", &params, move || {
            Ok(lstm.forward_dir(&xc, true)?.mul(&wc)?.sum_all())
        });
    }
}

#[test]
fn mobilevit_block_gradients() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(1500 + draw, &["mvit"]);
        let x = b.param(&[1, 4, 4, 4], Init::TruncNormal(0.6));
        let block = MobileVitBlock::new(&mut b, 4, 6, 1, 2, 2);
        let params = b.into_params();
        randomize(&params, 7009 + draw);
        let w = loss_weights(&[1, 4, 4, 4], 4990 + draw);
        let (xc, wc) = (x, w);
        check("mobilevit", &params, move || {
            Ok(block.forward(&xc, true)?.mul(&wc)?.sum_all())
        });
    }
}

#[test]
fn cmt_stem_and_block_gradients() {
    for draw in 0..DRAWS as u64 {
        let mut b = ParamBuilder::<f64>::new(1600 + draw, &["cmt"]);
        let x = b.param(&[1, 3, 8, 8], Init::TruncNormal(0.6));
        let stem = CmtStem::new(&mut b, 4);
        let block = CmtBlock::new(&mut b, 4, 2, 2, 16, 2.0);
        let params = b.into_params();
        randomize(&params, 7010 + draw);
        let w = loss_weights(&[1, 4, 4, 4], 5990 + draw);
        let (xc, wc) = (x, w);
        check("cmt", &params, move || {
            let fm = stem.forward(&xc, true)?; // (1, 4, 4, 4)
            Ok(block.forward(&fm, true)?.mul(&wc)?.sum_all())
        });
    }
}
