//! Convolutions and pooling over NCHW feature maps.
//!
//! `conv2d` goes through im2col + gemm; the column buffer is rebuilt in the
//! backward pass instead of being captured, trading a little compute for
//! memory. Depthwise convolution and pooling use direct loops.

use rayon::prelude::*;

use super::linalg::{gemm, transpose};
use super::tensor::{Elem, NnError, NnResult, Tensor};

fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Gathers conv patches of one sample into a (C·kh·kw, OH·OW) column buffer.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [E],
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                        {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            E::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a (C·kh·kw, OH·OW) column gradient back onto the input plane.
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Elem>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x_grad: &mut [E],
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x_grad[(ci * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl<E: Elem> Tensor<E> {
    /// 2-D convolution: x (N,Cin,H,W) · w (Cout,Cin,kh,kw) [+ bias (Cout)].
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> NnResult<Tensor<E>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d x {xs:?} w {ws:?}"
            )));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}+{pad}"
            )));
        }
        let oh = conv_out_size(h, kh, stride, pad);
        let ow = conv_out_size(w, kw, stride, pad);
        let ckk = cin * kh * kw;
        let plane = oh * ow;

        let xv_guard = self.value();
        let xv: &[E] = &xv_guard;
        let wv_guard = weight.value();
        let wv: &[E] = &wv_guard;
        let bv = bias.map(|b| b.to_vec());
        let mut out = vec![E::zero(); n * cout * plane];
        out.par_chunks_mut(cout * plane)
            .enumerate()
            .for_each(|(i, out_i)| {
                let mut col = vec![E::zero(); ckk * plane];
                im2col(
                    &xv[i * cin * h * w..(i + 1) * cin * h * w],
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                    &mut col,
                );
                gemm(cout, ckk, plane, wv, &col, out_i);
                if let Some(b) = &bv {
                    for co in 0..cout {
                        let bias_v = b[co];
                        for v in &mut out_i[co * plane..(co + 1) * plane] {
                            *v += bias_v;
                        }
                    }
                }
            });
        drop(xv_guard);
        drop(wv_guard);

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            vec![n, cout, oh, ow],
            out,
            parents,
            Box::new(move |node| {
                let g = node.out_grad();
                let x = node.parent(0);
                let wt = node.parent(1);
                let xv_guard = x.value();
                let xv: &[E] = &xv_guard;
                let wv_guard = wt.value();
                let wv: &[E] = &wv_guard;
                let g_ref: &[E] = &g;

                // Per-sample partials, summed in index order afterwards.
                let partials: Vec<(Vec<E>, Vec<E>)> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let mut col = vec![E::zero(); ckk * plane];
                        im2col(
                            &xv[i * cin * h * w..(i + 1) * cin * h * w],
                            cin,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            pad,
                            &mut col,
                        );
                        let g_i = &g_ref[i * cout * plane..(i + 1) * cout * plane];
                        // dW_i = g_i (cout, plane) · colᵀ (plane, ckk)
                        let col_t = transpose(&col, ckk, plane);
                        let mut dw = vec![E::zero(); cout * ckk];
                        gemm(cout, plane, ckk, g_i, &col_t, &mut dw);
                        // dcol = Wᵀ (ckk, cout) · g_i
                        let w_t = transpose(wv, cout, ckk);
                        let mut dcol = vec![E::zero(); ckk * plane];
                        gemm(ckk, cout, plane, &w_t, g_i, &mut dcol);
                        let mut dx = vec![E::zero(); cin * h * w];
                        col2im_add(&dcol, cin, h, w, kh, kw, stride, pad, &mut dx);
                        (dx, dw)
                    })
                    .collect();
                drop(xv_guard);
                drop(wv_guard);

                let mut dx_full = vec![E::zero(); n * cin * h * w];
                let mut dw_full = vec![E::zero(); cout * ckk];
                for (i, (dx, dw)) in partials.iter().enumerate() {
                    dx_full[i * cin * h * w..(i + 1) * cin * h * w].copy_from_slice(dx);
                    for (acc, v) in dw_full.iter_mut().zip(dw) {
                        *acc += *v;
                    }
                }
                x.accumulate_grad(&dx_full);
                wt.accumulate_grad(&dw_full);
                if has_bias {
                    let mut db = vec![E::zero(); cout];
                    for i in 0..n {
                        for (co, acc) in db.iter_mut().enumerate() {
                            let base = (i * cout + co) * plane;
                            for v in &g[base..base + plane] {
                                *acc += *v;
                            }
                        }
                    }
                    node.parent(2).accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Depthwise 2-D convolution: x (N,C,H,W) · w (C,1,kh,kw) [+ bias (C)].
    pub fn depthwise_conv2d(
        &self,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> NnResult<Tensor<E>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "depthwise_conv2d x {xs:?} w {ws:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        let oh = conv_out_size(h, kh, stride, pad);
        let ow = conv_out_size(w, kw, stride, pad);
        let plane = oh * ow;

        let xv_guard = self.value();
        let xv: &[E] = &xv_guard;
        let wv_guard = weight.value();
        let wv: &[E] = &wv_guard;
        let bv = bias.map(|b| b.to_vec());
        let mut out = vec![E::zero(); n * c * plane];
        out.par_chunks_mut(c * plane)
            .enumerate()
            .for_each(|(i, out_i)| {
                for ci in 0..c {
                    let x_plane = &xv[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                    let kernel = &wv[ci * kh * kw..(ci + 1) * kh * kw];
                    let dst = &mut out_i[ci * plane..(ci + 1) * plane];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = E::zero();
                            for ki in 0..kh {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x_plane[iy as usize * w + ix as usize]
                                        * kernel[ki * kw + kj];
                                }
                            }
                            if let Some(b) = &bv {
                                acc += b[ci];
                            }
                            dst[oy * ow + ox] = acc;
                        }
                    }
                }
            });
        drop(xv_guard);
        drop(wv_guard);

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            parents,
            Box::new(move |node| {
                let g = node.out_grad();
                let x = node.parent(0);
                let wt = node.parent(1);
                let xv = x.value();
                let wv = wt.value();
                let mut dx = vec![E::zero(); n * c * h * w];
                let mut dw = vec![E::zero(); c * kh * kw];
                let mut db = vec![E::zero(); c];
                for i in 0..n {
                    for ci in 0..c {
                        let x_plane = &xv[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                        let g_plane = &g[(i * c + ci) * plane..(i * c + ci + 1) * plane];
                        let kernel = &wv[ci * kh * kw..(ci + 1) * kh * kw];
                        let dx_plane = &mut dx[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g_plane[oy * ow + ox];
                                if has_bias {
                                    db[ci] += gv;
                                }
                                for ki in 0..kh {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let ix = (ox * stride + kj) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = iy as usize * w + ix as usize;
                                        dx_plane[xi] += gv * kernel[ki * kw + kj];
                                        dw[ci * kh * kw + ki * kw + kj] += gv * x_plane[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                drop(xv);
                drop(wv);
                x.accumulate_grad(&dx);
                wt.accumulate_grad(&dw);
                if has_bias {
                    node.parent(2).accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Average pooling with square window  and stride, no padding.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> NnResult<Tensor<E>> {
        let xs = self.shape();
        if xs.len() != 4 || xs[2] < kernel || xs[3] < kernel {
            return Err(NnError::ShapeMismatch(format!(
                "avg_pool2d kernel {kernel} on {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let scale = E::from_f64(1.0 / (kernel * kernel) as f64);
        let xv = self.value();
        let mut out = vec![E::zero(); n * c * oh * ow];
        for i in 0..n * c {
            let plane = &xv[i * h * w..(i + 1) * h * w];
            let dst = &mut out[i * oh * ow..(i + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::zero();
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            acc += plane[(oy * stride + ki) * w + ox * stride + kj];
                        }
                    }
                    dst[oy * ow + ox] = acc * scale;
                }
            }
        }
        drop(xv);
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.out_grad();
                let x = node.parent(0);
                let mut dx = vec![E::zero(); x.numel()];
                for i in 0..n * c {
                    let g_plane = &g[i * oh * ow..(i + 1) * oh * ow];
                    let dx_plane = &mut dx[i * h * w..(i + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g_plane[oy * ow + ox] * scale;
                            for ki in 0..kernel {
                                for kj in 0..kernel {
                                    dx_plane[(oy * stride + ki) * w + ox * stride + kj] += gv;
                                }
                            }
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }),
        ))
    }

    /// Global average pooling (N,C,H,W) -> (N,C).
    pub fn global_avg_pool(&self) -> NnResult<Tensor<E>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(NnError::ShapeMismatch(format!(
                "global_avg_pool expects NCHW, got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let scale = E::from_f64(1.0 / (h * w) as f64);
        let xv = self.value();
        let mut out = vec![E::zero(); n * c];
        for i in 0..n * c {
            let mut acc = E::zero();
            for v in &xv[i * h * w..(i + 1) * h * w] {
                acc += *v;
            }
            out[i] = acc * scale;
        }
        drop(xv);
        Ok(Tensor::from_op(
            vec![n, c],
            out,
            vec![self.clone()],
            Box::new(move |node| {
                let g = node.out_grad();
                let x = node.parent(0);
                let mut dx = vec![E::zero(); x.numel()];
                for i in 0..n * c {
                    let gv = g[i] * scale;
                    for v in &mut dx[i * h * w..(i + 1) * h * w] {
                        *v = gv;
                    }
                }
                x.accumulate_grad(&dx);
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Tensor::<f64>::constant(&[1, 1, 3, 3], (0..9).map(|i| i as f64).collect());
        let w = Tensor::<f64>::constant(&[1, 1, 1, 1], vec![1.0]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_shapes_with_stride_and_pad() {
        let x = Tensor::<f64>::zeros(&[2, 3, 8, 8]);
        let w = Tensor::<f64>::zeros(&[5, 3, 3, 3]);
        let y = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn depthwise_known_answer() {
        // One channel, 2x2 mean-like kernel.
        let x = Tensor::<f64>::constant(&[1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let w = Tensor::<f64>::constant(&[1, 1, 2, 2], vec![0.25; 4]);
        let y = x.depthwise_conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![2.5]);
    }

    #[test]
    fn avg_pool_matches_mean() {
        let x = Tensor::<f64>::constant(&[1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let y = x.avg_pool2d(2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![2.5]);
        let g = x.global_avg_pool().unwrap();
        assert_eq!(g.to_vec(), vec![2.5]);
    }
}
