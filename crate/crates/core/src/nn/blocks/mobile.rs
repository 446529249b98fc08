//! Mobile convolution blocks: the inverted residual (expand, depthwise,
//! project) and the MBConv variant with squeeze-excitation gating.

use super::super::init::ParamBuilder;
use super::super::layers::{BatchNorm2d, Conv2dLayer, DepthwiseConv2d, Linear};
use super::super::tensor::{Elem, NnResult, Tensor};

/// Inverted residual: thin in/out bottlenecks around a wide depthwise layer.
/// With `expand_ratio == 1` the expansion convolution is omitted. The
/// residual add applies when stride is 1 and channels match.
pub struct InvertedResidual<E: Elem> {
    expand: Option<(Conv2dLayer<E>, BatchNorm2d<E>)>,
    depthwise: DepthwiseConv2d<E>,
    bn_dw: BatchNorm2d<E>,
    project: Conv2dLayer<E>,
    bn_proj: BatchNorm2d<E>,
    use_residual: bool,
}

impl<E: Elem> InvertedResidual<E> {
    pub fn new(
        b: &mut ParamBuilder<E>,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        expand_ratio: usize,
        kernel: usize,
    ) -> Self {
        let mid = in_ch * expand_ratio;
        InvertedResidual {
            expand: (expand_ratio != 1).then(|| {
                (
                    Conv2dLayer::new(b, in_ch, mid, 1, 1, 0, false),
                    BatchNorm2d::new(b, mid),
                )
            }),
            depthwise: DepthwiseConv2d::new(b, mid, kernel, stride, kernel / 2, false),
            bn_dw: BatchNorm2d::new(b, mid),
            project: Conv2dLayer::new(b, mid, out_ch, 1, 1, 0, false),
            bn_proj: BatchNorm2d::new(b, out_ch),
            use_residual: stride == 1 && in_ch == out_ch,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let mut h = match &self.expand {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, training)?.relu(),
            None => x.clone(),
        };
        h = self.bn_dw.forward(&self.depthwise.forward(&h)?, training)?.relu();
        // Linear projection: no activation on the output bottleneck.
        h = self.bn_proj.forward(&self.project.forward(&h)?, training)?;
        if self.use_residual {
            h = h.add(x)?;
        }
        Ok(h)
    }
}

/// Squeeze-excitation gate: global pool, reduce, expand, sigmoid scale.
pub struct SqueezeExcite<E: Elem> {
    fc1: Linear<E>,
    fc2: Linear<E>,
}

impl<E: Elem> SqueezeExcite<E> {
    pub fn new(b: &mut ParamBuilder<E>, channels: usize, squeeze: usize) -> Self {
        SqueezeExcite {
            fc1: Linear::new(b, channels, squeeze, true),
            fc2: Linear::new(b, squeeze, channels, true),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let pooled = x.global_avg_pool()?; // (N, C)
        let gate = self
            .fc2
            .forward(&silu(&self.fc1.forward(&pooled)?)?)?
            .sigmoid()
            .reshape(&[n, c, 1, 1])?;
        x.mul(&gate)
    }
}

fn silu<E: Elem>(x: &Tensor<E>) -> NnResult<Tensor<E>> {
    x.mul(&x.sigmoid())
}

/// MBConv: inverted residual with squeeze-excitation between the depthwise
/// stage and the projection. Squeeze width derives from the block's input
/// channels (quarter, floored, at least one).
pub struct MbConv<E: Elem> {
    expand: Option<(Conv2dLayer<E>, BatchNorm2d<E>)>,
    depthwise: DepthwiseConv2d<E>,
    bn_dw: BatchNorm2d<E>,
    pub se: SqueezeExcite<E>,
    project: Conv2dLayer<E>,
    bn_proj: BatchNorm2d<E>,
    use_residual: bool,
}

impl<E: Elem> MbConv<E> {
    pub fn new(
        b: &mut ParamBuilder<E>,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        expand_ratio: usize,
        kernel: usize,
    ) -> Self {
        let mid = in_ch * expand_ratio;
        let squeeze = (in_ch / 4).max(1);
        MbConv {
            expand: (expand_ratio != 1).then(|| {
                (
                    Conv2dLayer::new(b, in_ch, mid, 1, 1, 0, false),
                    BatchNorm2d::new(b, mid),
                )
            }),
            depthwise: DepthwiseConv2d::new(b, mid, kernel, stride, kernel / 2, false),
            bn_dw: BatchNorm2d::new(b, mid),
            se: SqueezeExcite::new(b, mid, squeeze),
            project: Conv2dLayer::new(b, mid, out_ch, 1, 1, 0, false),
            bn_proj: BatchNorm2d::new(b, out_ch),
            use_residual: stride == 1 && in_ch == out_ch,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let mut h = match &self.expand {
            Some((conv, bn)) => silu(&bn.forward(&conv.forward(x)?, training)?)?,
            None => x.clone(),
        };
        h = silu(&self.bn_dw.forward(&self.depthwise.forward(&h)?, training)?)?;
        h = self.se.forward(&h)?;
        h = self.bn_proj.forward(&self.project.forward(&h)?, training)?;
        if self.use_residual {
            h = h.add(x)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expand_ratio_one_omits_expansion() {
        let mut b = ParamBuilder::<f32>::new(1, &["ir"]);
        let block = InvertedResidual::new(&mut b, 8, 8, 1, 1, 3);
        assert!(block.expand.is_none());
        let x = Tensor::constant(&[1, 8, 6, 6], vec![0.5; 8 * 36]);
        let y = block.forward(&x, true).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut b = ParamBuilder::<f32>::new(2, &["ir2"]);
        let block = InvertedResidual::new(&mut b, 8, 12, 2, 4, 3);
        let x = Tensor::constant(&[2, 8, 8, 8], vec![0.2; 2 * 8 * 64]);
        let y = block.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[2, 12, 4, 4]);
    }

    #[test]
    fn se_gate_of_one_is_identity_on_features() {
        let mut b = ParamBuilder::<f64>::new(3, &["se"]);
        let se = SqueezeExcite::new(&mut b, 4, 2);
        // Saturate the gate: large positive fc2 bias drives sigmoid to ~1.
        if let Some(bias) = &se.fc2.bias {
            bias.update_value(|v| v.fill(50.0));
        }
        se.fc2.weight.update_value(|v| v.fill(0.0));
        let x = Tensor::constant(&[1, 4, 3, 3], (0..36).map(|i| i as f64 / 7.0).collect());
        let y = se.forward(&x).unwrap();
        for (a, b) in y.to_vec().iter().zip(&x.to_vec()) {
            assert!((a - b).abs() < 1e-9, "gate at 1 must pass features through");
        }
    }
}
