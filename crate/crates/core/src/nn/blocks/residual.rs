//! ResNet building blocks: basic and bottleneck residual units.

use super::super::init::ParamBuilder;
use super::super::layers::{BatchNorm2d, Conv2dLayer};
use super::super::tensor::{Elem, NnResult, Tensor};

/// Projection shortcut used when the residual path changes shape.
pub struct Shortcut<E: Elem> {
    conv: Option<(Conv2dLayer<E>, BatchNorm2d<E>)>,
}

impl<E: Elem> Shortcut<E> {
    fn new(b: &mut ParamBuilder<E>, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let conv = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2dLayer::new(b, in_ch, out_ch, 1, stride, 0, false),
                BatchNorm2d::new(b, out_ch),
            )
        });
        Shortcut { conv }
    }

    fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        match &self.conv {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, training),
            None => Ok(x.clone()),
        }
    }
}

/// Two 3x3 convolutions with a shortcut connection:
/// `out = relu(F(x) + shortcut(x))`.
pub struct ResidualBlock<E: Elem> {
    conv1: Conv2dLayer<E>,
    bn1: BatchNorm2d<E>,
    conv2: Conv2dLayer<E>,
    bn2: BatchNorm2d<E>,
    shortcut: Shortcut<E>,
}

impl<E: Elem> ResidualBlock<E> {
    pub fn new(b: &mut ParamBuilder<E>, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ResidualBlock {
            conv1: Conv2dLayer::new(b, in_ch, out_ch, 3, stride, 1, false),
            bn1: BatchNorm2d::new(b, out_ch),
            conv2: Conv2dLayer::new(b, out_ch, out_ch, 3, 1, 1, false),
            bn2: BatchNorm2d::new(b, out_ch),
            shortcut: Shortcut::new(b, in_ch, out_ch, stride),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let main = self.bn1.forward(&self.conv1.forward(x)?, training)?.relu();
        let main = self.bn2.forward(&self.conv2.forward(&main)?, training)?;
        Ok(main.add(&self.shortcut.forward(x, training)?)?.relu())
    }
}

/// 1x1 reduce, 3x3, 1x1 expand (x4) bottleneck with a shortcut connection.
pub struct Bottleneck<E: Elem> {
    conv1: Conv2dLayer<E>,
    bn1: BatchNorm2d<E>,
    conv2: Conv2dLayer<E>,
    bn2: BatchNorm2d<E>,
    conv3: Conv2dLayer<E>,
    bn3: BatchNorm2d<E>,
    shortcut: Shortcut<E>,
}

pub const BOTTLENECK_EXPANSION: usize = 4;

impl<E: Elem> Bottleneck<E> {
    pub fn new(b: &mut ParamBuilder<E>, in_ch: usize, mid_ch: usize, stride: usize) -> Self {
        let out_ch = mid_ch * BOTTLENECK_EXPANSION;
        Bottleneck {
            conv1: Conv2dLayer::new(b, in_ch, mid_ch, 1, 1, 0, false),
            bn1: BatchNorm2d::new(b, mid_ch),
            conv2: Conv2dLayer::new(b, mid_ch, mid_ch, 3, stride, 1, false),
            bn2: BatchNorm2d::new(b, mid_ch),
            conv3: Conv2dLayer::new(b, mid_ch, out_ch, 1, 1, 0, false),
            bn3: BatchNorm2d::new(b, out_ch),
            shortcut: Shortcut::new(b, in_ch, out_ch, stride),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        let m = self.bn1.forward(&self.conv1.forward(x)?, training)?.relu();
        let m = self.bn2.forward(&self.conv2.forward(&m)?, training)?.relu();
        let m = self.bn3.forward(&self.conv3.forward(&m)?, training)?;
        Ok(m.add(&self.shortcut.forward(x, training)?)?.relu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_one_block_preserves_shape() {
        let mut b = ParamBuilder::<f32>::new(1, &["res"]);
        let block = ResidualBlock::new(&mut b, 8, 8, 1);
        let x = Tensor::constant(&[2, 8, 6, 6], vec![0.3; 2 * 8 * 36]);
        let y = block.forward(&x, true).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn zero_residual_path_reduces_to_shortcut_activation() {
        let mut b = ParamBuilder::<f64>::new(2, &["res-zero"]);
        let block = ResidualBlock::new(&mut b, 4, 4, 1);
        // Zero out the residual branch; identity shortcut then dominates.
        block.conv1.weight.update_value(|v| v.fill(0.0));
        block.conv2.weight.update_value(|v| v.fill(0.0));
        let x = Tensor::constant(&[1, 4, 4, 4], (0..64).map(|i| i as f64 / 32.0 - 1.0).collect());
        let y = block.forward(&x, true).unwrap();
        // BN of a zero tensor stays zero, so out = relu(x).
        let expect: Vec<f64> = x.to_vec().iter().map(|v| v.max(0.0)).collect();
        for (a, b) in y.to_vec().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bottleneck_expands_channels() {
        let mut b = ParamBuilder::<f32>::new(3, &["btl"]);
        let block = Bottleneck::new(&mut b, 8, 4, 2);
        let x = Tensor::constant(&[1, 8, 8, 8], vec![0.1; 8 * 64]);
        let y = block.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[1, 16, 4, 4]);
    }
}
