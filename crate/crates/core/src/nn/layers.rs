//! Parameterized layers shared by the architecture families.

use std::cell::RefCell;

use super::init::{Init, ParamBuilder};
use super::tensor::{Elem, NnResult, Tensor};

/// Fully connected layer; weight stored (in, out) so `forward` is `x · W + b`.
pub struct Linear<E: Elem> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Elem> Linear<E> {
    pub fn new(b: &mut ParamBuilder<E>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: b.param(&[in_dim, out_dim], Init::TruncNormal(0.02)),
            bias: bias.then(|| b.param(&[out_dim], Init::Zeros)),
        }
    }

    /// Applies to the last axis of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let shape = x.shape().to_vec();
        let in_dim = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, in_dim])?;
        let mut y = flat.matmul(&self.weight)?;
        if let Some(bias) = &self.bias {
            y = y.add(bias)?;
        }
        let out_dim = self.weight.shape()[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_dim;
        y.reshape(&out_shape)
    }
}

pub struct Conv2dLayer<E: Elem> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Elem> Conv2dLayer<E> {
    pub fn new(
        b: &mut ParamBuilder<E>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Conv2dLayer {
            weight: b.param(&[out_ch, in_ch, kernel, kernel], Init::TruncNormal(0.02)),
            bias: bias.then(|| b.param(&[out_ch], Init::Zeros)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

/// Depthwise convolution with one filter per channel.
pub struct DepthwiseConv2d<E: Elem> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Elem> DepthwiseConv2d<E> {
    pub fn new(
        b: &mut ParamBuilder<E>,
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        DepthwiseConv2d {
            weight: b.param(&[channels, 1, kernel, kernel], Init::TruncNormal(0.02)),
            bias: bias.then(|| b.param(&[channels], Init::Zeros)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        x.depthwise_conv2d(&self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

/// Batch normalization with affine parameters and running statistics.
/// Running stats are buffers, not trainable parameters.
pub struct BatchNorm2d<E: Elem> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    running_mean: RefCell<Vec<E>>,
    running_var: RefCell<Vec<E>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Elem> BatchNorm2d<E> {
    pub fn new(b: &mut ParamBuilder<E>, channels: usize) -> Self {
        BatchNorm2d {
            gamma: b.param(&[channels], Init::Ones),
            beta: b.param(&[channels], Init::Zeros),
            running_mean: RefCell::new(vec![E::zero(); channels]),
            running_var: RefCell::new(vec![E::one(); channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, training: bool) -> NnResult<Tensor<E>> {
        if training {
            let (y, mean, var) = x.batch_norm2d(&self.gamma, &self.beta, self.eps)?;
            let m = (x.numel() / x.shape()[1]) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = E::from_f64(self.momentum);
            let keep = E::from_f64(1.0 - self.momentum);
            let unbias_e = E::from_f64(unbias);
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for c in 0..mean.len() {
                rm[c] = keep * rm[c] + mom * mean[c];
                rv[c] = keep * rv[c] + mom * var[c] * unbias_e;
            }
            Ok(y)
        } else {
            let mean = self.running_mean.borrow().clone();
            let var = self.running_var.borrow().clone();
            x.batch_norm2d_eval(&self.gamma, &self.beta, &mean, &var, self.eps)
        }
    }
}

pub struct LayerNorm<E: Elem> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: f64,
}

impl<E: Elem> LayerNorm<E> {
    pub fn new(b: &mut ParamBuilder<E>, dim: usize) -> Self {
        LayerNorm {
            gamma: b.param(&[dim], Init::Ones),
            beta: b.param(&[dim], Init::Zeros),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

/// Two-layer MLP with GELU, applied over the last axis.
pub struct Mlp<E: Elem> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Elem> Mlp<E> {
    pub fn new(b: &mut ParamBuilder<E>, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(b, dim, hidden, true),
            fc2: Linear::new(b, hidden, dim, true),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

/// Single-direction LSTM over (B, T, C) sequences.
///
/// Parameter layout mirrors the usual two-bias convention (input and hidden
/// biases kept separate), with gates ordered input, forget, cell, output.
pub struct Lstm<E: Elem> {
    pub w_ih: Tensor<E>, // (C, 4H)
    pub w_hh: Tensor<E>, // (H, 4H)
    pub b_ih: Tensor<E>,
    pub b_hh: Tensor<E>,
    pub hidden: usize,
}

impl<E: Elem> Lstm<E> {
    pub fn new(b: &mut ParamBuilder<E>, input: usize, hidden: usize) -> Self {
        Lstm {
            w_ih: b.param(&[input, 4 * hidden], Init::TruncNormal(0.02)),
            w_hh: b.param(&[hidden, 4 * hidden], Init::TruncNormal(0.02)),
            b_ih: b.param(&[4 * hidden], Init::Zeros),
            b_hh: b.param(&[4 * hidden], Init::Zeros),
            hidden,
        }
    }

    /// Runs over the time axis, optionally right-to-left; output keeps the
    /// input's time order either way.
    pub fn forward_dir(&self, x: &Tensor<E>, reverse: bool) -> NnResult<Tensor<E>> {
        let (bsz, steps, _c) = match x.shape() {
            [b, t, c] => (*b, *t, *c),
            other => {
                return Err(super::tensor::NnError::ShapeMismatch(format!(
                    "lstm expects (B,T,C), got {other:?}"
                )))
            }
        };
        let h_dim = self.hidden;
        let mut h = Tensor::zeros(&[bsz, h_dim]);
        let mut c = Tensor::zeros(&[bsz, h_dim]);
        let mut outputs: Vec<Option<Tensor<E>>> = vec![None; steps];
        for step in 0..steps {
            let t = if reverse { steps - 1 - step } else { step };
            let x_t = x.narrow(1, t, 1)?.reshape(&[bsz, x.shape()[2]])?;
            let gates = x_t
                .matmul(&self.w_ih)?
                .add(&h.matmul(&self.w_hh)?)?
                .add(&self.b_ih)?
                .add(&self.b_hh)?;
            let i_gate = gates.narrow(1, 0, h_dim)?.sigmoid();
            let f_gate = gates.narrow(1, h_dim, h_dim)?.sigmoid();
            let g_gate = gates.narrow(1, 2 * h_dim, h_dim)?.tanh_act();
            let o_gate = gates.narrow(1, 3 * h_dim, h_dim)?.sigmoid();
            c = f_gate.mul(&c)?.add(&i_gate.mul(&g_gate)?)?;
            h = o_gate.mul(&c.tanh_act())?;
            outputs[t] = Some(h.reshape(&[bsz, 1, h_dim])?);
        }
        let seq: Vec<Tensor<E>> = outputs.into_iter().map(|o| o.unwrap()).collect();
        Tensor::concat(&seq, 1)
    }
}

/// Bidirectional LSTM; outputs the two directions concatenated channel-wise.
pub struct BiLstm<E: Elem> {
    pub fwd: Lstm<E>,
    pub bwd: Lstm<E>,
}

impl<E: Elem> BiLstm<E> {
    pub fn new(b: &mut ParamBuilder<E>, input: usize, hidden: usize) -> Self {
        BiLstm {
            fwd: Lstm::new(b, input, hidden),
            bwd: Lstm::new(b, input, hidden),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> NnResult<Tensor<E>> {
        let f = self.fwd.forward_dir(x, false)?;
        let r = self.bwd.forward_dir(x, true)?;
        Tensor::concat(&[f, r], 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_applies_to_token_tensors() {
        let mut b = ParamBuilder::<f64>::new(1, &["linear"]);
        let layer = Linear::new(&mut b, 4, 6, true);
        let x = Tensor::constant(&[2, 3, 4], vec![0.1; 24]);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 6]);
    }

    #[test]
    fn lstm_zero_input_zero_bias_is_fixed_point() {
        let mut b = ParamBuilder::<f64>::new(2, &["lstm"]);
        let lstm = Lstm::new(&mut b, 3, 5);
        let x = Tensor::zeros(&[2, 4, 3]);
        let y = lstm.forward_dir(&x, false).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5]);
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilstm_concatenates_directions() {
        let mut b = ParamBuilder::<f64>::new(3, &["bilstm"]);
        let bi = BiLstm::new(&mut b, 3, 4);
        let x = Tensor::constant(&[1, 5, 3], vec![0.2; 15]);
        let y = bi.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 5, 8]);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut b = ParamBuilder::<f64>::new(4, &["bn"]);
        let bn = BatchNorm2d::new(&mut b, 2);
        let x = Tensor::constant(&[4, 2, 3, 3], (0..72).map(|i| i as f64 / 10.0).collect());
        let _ = bn.forward(&x, true).unwrap();
        let y = bn.forward(&x, false).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.to_vec().iter().all(|v| v.is_finite()));
    }
}
