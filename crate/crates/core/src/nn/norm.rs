//! Softmax and normalization ops, fused with their backward passes.

use super::tensor::{Elem, NnError, NnResult, Tensor};

impl<E: Elem> Tensor<E> {
    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let d = *shape.last().expect("softmax needs rank >= 1");
        let rows = self.numel() / d;
        let xv = self.value();
        let mut out = vec![E::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let max = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x));
            let mut sum = E::zero();
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in &mut out[r * d..(r + 1) * d] {
                *o = *o / sum;
            }
        }
        drop(xv);
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.out_grad();
                let y = node.value();
                let mut dx = vec![E::zero(); g.len()];
                for r in 0..rows {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mut dot = E::zero();
                    for (yi, gi) in ys.iter().zip(gs) {
                        dot += *yi * *gi;
                    }
                    for i in 0..d {
                        dx[r * d + i] = ys[i] * (gs[i] - dot);
                    }
                }
                drop(y);
                node.parent(0).accumulate_grad(&dx);
            }),
        )
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let d = *shape.last().expect("log_softmax needs rank >= 1");
        let rows = self.numel() / d;
        let xv = self.value();
        let mut out = vec![E::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let max = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x));
            let mut sum = E::zero();
            for &x in row {
                sum += (x - max).exp();
            }
            let log_z = max + sum.ln();
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = x - log_z;
            }
        }
        drop(xv);
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.out_grad();
                let y = node.value();
                let mut dx = vec![E::zero(); g.len()];
                for r in 0..rows {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mut gsum = E::zero();
                    for gi in gs {
                        gsum += *gi;
                    }
                    for i in 0..d {
                        dx[r * d + i] = gs[i] - ys[i].exp() * gsum;
                    }
                }
                drop(y);
                node.parent(0).accumulate_grad(&dx);
            }),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> NnResult<Tensor<E>> {
        let shape = self.shape().to_vec();
        let d = *shape.last().expect("layer_norm needs rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(NnError::ShapeMismatch(format!(
                "layer_norm affine params must be [{d}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let epe = E::from_f64(eps);
        let xv = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let mut out = vec![E::zero(); xv.len()];
        let mut xhat = vec![E::zero(); xv.len()];
        let mut inv_std = vec![E::zero(); rows];
        let inv_d = E::from_f64(1.0 / d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = E::zero();
            for &x in row {
                mean += x;
            }
            mean = mean * inv_d;
            let mut var = E::zero();
            for &x in row {
                let c = x - mean;
                var += c * c;
            }
            var = var * inv_d;
            let istd = E::one() / (var + epe).sqrt();
            inv_std[r] = istd;
            for i in 0..d {
                let xh = (row[i] - mean) * istd;
                xhat[r * d + i] = xh;
                out[r * d + i] = gv[i] * xh + bv[i];
            }
        }
        drop(xv);
        drop(gv);
        drop(bv);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node| {
                let g = node.out_grad();
                let x = node.parent(0);
                let gamma = node.parent(1);
                let beta = node.parent(2);
                let gv = gamma.value();
                let mut dx = vec![E::zero(); g.len()];
                let mut dgamma = vec![E::zero(); d];
                let mut dbeta = vec![E::zero(); d];
                for r in 0..rows {
                    let gs = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let istd = inv_std[r];
                    let mut sum_dy = E::zero();
                    let mut sum_dy_xhat = E::zero();
                    for i in 0..d {
                        let dy = gs[i] * gv[i];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xh[i];
                        dgamma[i] += gs[i] * xh[i];
                        dbeta[i] += gs[i];
                    }
                    for i in 0..d {
                        let dy = gs[i] * gv[i];
                        dx[r * d + i] =
                            istd * (dy - sum_dy * inv_d - xh[i] * sum_dy_xhat * inv_d);
                    }
                }
                drop(gv);
                x.accumulate_grad(&dx);
                gamma.accumulate_grad(&dgamma);
                beta.accumulate_grad(&dbeta);
            }),
        ))
    }

    /// Batch normalization over (N,H,W) per channel with batch statistics.
    /// Returns the normalized tensor plus the biased batch mean and variance
    /// per channel for running-stat upkeep.
    pub fn batch_norm2d(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> NnResult<(Tensor<E>, Vec<E>, Vec<E>)> {
        let shape = self.shape().to_vec();
        if shape.len() != 4 {
            return Err(NnError::ShapeMismatch(format!(
                "batch_norm2d expects NCHW, got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(NnError::ShapeMismatch(format!(
                "batch_norm2d affine params must be [{c}]"
            )));
        }
        let m = (n * h * w) as f64;
        let inv_m = E::from_f64(1.0 / m);
        let epe = E::from_f64(eps);
        let plane = h * w;
        let xv = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * plane;
                for &x in &xv[base..base + plane] {
                    mean[ci] += x;
                }
            }
        }
        for mu in &mut mean {
            *mu = *mu * inv_m;
        }
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * plane;
                let mu = mean[ci];
                for &x in &xv[base..base + plane] {
                    let d = x - mu;
                    var[ci] += d * d;
                }
            }
        }
        for v in &mut var {
            *v = *v * inv_m;
        }
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + epe).sqrt()).collect();
        let mut out = vec![E::zero(); xv.len()];
        let mut xhat = vec![E::zero(); xv.len()];
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * plane;
                let mu = mean[ci];
                let istd = inv_std[ci];
                let ga = gv[ci];
                let be = bv[ci];
                for off in 0..plane {
                    let xh = (xv[base + off] - mu) * istd;
                    xhat[base + off] = xh;
                    out[base + off] = ga * xh + be;
                }
            }
        }
        drop(xv);
        drop(gv);
        drop(bv);
        let mean_out = mean.clone();
        let var_out = var.clone();
        let tensor = Tensor::from_op(
            shape,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node| {
                let g = node.out_grad();
                let x = node.parent(0);
                let gamma = node.parent(1);
                let beta = node.parent(2);
                let gv = gamma.value();
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                let mut sum_dy = vec![E::zero(); c];
                let mut sum_dy_xhat = vec![E::zero(); c];
                for i in 0..n {
                    for ci in 0..c {
                        let base = (i * c + ci) * plane;
                        for off in 0..plane {
                            let gs = g[base + off];
                            let xh = xhat[base + off];
                            dgamma[ci] += gs * xh;
                            dbeta[ci] += gs;
                            let dy = gs * gv[ci];
                            sum_dy[ci] += dy;
                            sum_dy_xhat[ci] += dy * xh;
                        }
                    }
                }
                let mut dx = vec![E::zero(); g.len()];
                for i in 0..n {
                    for ci in 0..c {
                        let base = (i * c + ci) * plane;
                        let istd = inv_std[ci];
                        for off in 0..plane {
                            let dy = g[base + off] * gv[ci];
                            dx[base + off] = istd
                                * (dy
                                    - sum_dy[ci] * inv_m
                                    - xhat[base + off] * sum_dy_xhat[ci] * inv_m);
                        }
                    }
                }
                drop(gv);
                x.accumulate_grad(&dx);
                gamma.accumulate_grad(&dgamma);
                beta.accumulate_grad(&dbeta);
            }),
        );
        Ok((tensor, mean_out, var_out))
    }

    /// Batch normalization with given (running) statistics; inference path.
    pub fn batch_norm2d_eval(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        mean: &[E],
        var: &[E],
        eps: f64,
    ) -> NnResult<Tensor<E>> {
        let shape = self.shape();
        if shape.len() != 4 || shape[1] != mean.len() || mean.len() != var.len() {
            return Err(NnError::ShapeMismatch(format!(
                "batch_norm2d_eval stats len {} on {shape:?}",
                mean.len()
            )));
        }
        let c = shape[1];
        let epe = E::from_f64(eps);
        // y = x * (gamma/std) + (beta - gamma*mean/std), folded per channel.
        let gv = gamma.value();
        let bv = beta.value();
        let mut scale = vec![E::zero(); c];
        let mut shift = vec![E::zero(); c];
        for ci in 0..c {
            let istd = E::one() / (var[ci] + epe).sqrt();
            scale[ci] = gv[ci] * istd;
            shift[ci] = bv[ci] - gv[ci] * mean[ci] * istd;
        }
        drop(gv);
        drop(bv);
        let scale_t = Tensor::constant(&[1, c, 1, 1], scale);
        let shift_t = Tensor::constant(&[1, c, 1, 1], shift);
        self.mul(&scale_t)?.add(&shift_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn softmax_rows_are_simplex() {
        let mut rng = crate::seed::rng(1, &["softmax"]);
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let x = Tensor::<f64>::constant(&[5, 8], data);
        let y = x.softmax_last();
        let v = y.to_vec();
        for r in 0..5 {
            let sum: f64 = v[r * 8..(r + 1) * 8].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(v[r * 8..(r + 1) * 8].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = crate::seed::rng(2, &["layernorm"]);
        let d = 64;
        let data: Vec<f64> = (0..d * 16).map(|_| rng.gen_range(-2.0..5.0)).collect();
        let x = Tensor::<f64>::constant(&[16, d], data);
        let gamma = Tensor::<f64>::constant(&[d], vec![1.0; d]);
        let beta = Tensor::<f64>::zeros(&[d]);
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        let v = y.to_vec();
        for r in 0..16 {
            let row = &v[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-2);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn batch_norm_normalizes_channels() {
        let mut rng = crate::seed::rng(3, &["batchnorm"]);
        let (n, c, h, w) = (8, 3, 6, 6);
        let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(0.0..9.0)).collect();
        let x = Tensor::<f64>::constant(&[n, c, h, w], data);
        let gamma = Tensor::<f64>::constant(&[c], vec![1.0; c]);
        let beta = Tensor::<f64>::zeros(&[c]);
        let (y, mean, var) = x.batch_norm2d(&gamma, &beta, 1e-5).unwrap();
        assert!(mean.iter().all(|m| m.is_finite()));
        assert!(var.iter().all(|v| *v > 0.0));
        let v = y.to_vec();
        // Channel 0 mean over (N,H,W) should be ~0 after normalization.
        let mut acc = 0.0;
        for i in 0..n {
            for off in 0..h * w {
                acc += v[(i * c) * h * w + off];
            }
        }
        assert!((acc / (n * h * w) as f64).abs() < 1e-2);
    }
}
