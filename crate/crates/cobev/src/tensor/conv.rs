//! 2-D convolutions over `[C, H, W]` feature maps.
//!
//! Single-sample layout (no batch axis): callers loop over samples. Inner
//! loops are row-contiguous so the compiler can vectorize them.

use super::{BackwardCtx, Tensor};
use crate::{Error, Result};

/// Output extent for one spatial dimension.
fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return Err(Error::shape(
            "conv extent",
            "kernel fitting padded input with positive stride",
            format!("input {input}, kernel {kernel}, stride {stride}, padding {padding}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Valid output-column range `[lo, hi)` such that `ow * stride + k - padding`
/// stays inside `[0, input_w)`.
fn col_bounds(out_w: usize, input_w: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let shift = k as isize - padding as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(stride) };
    let max_i = input_w as isize - 1 - shift;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize / stride + 1).min(out_w);
    (lo.min(hi), hi)
}

impl Tensor {
    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, KH, KW]` plus a
    /// `[C_out]` bias. Padding is zero-filled.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.rank() != 3 || weight.rank() != 4 || self.shape()[0] != weight.shape()[1] {
            return Err(Error::shape(
                "conv2d",
                "[C_in, H, W] with [C_out, C_in, KH, KW]",
                format!("{:?} with {:?}", self.shape(), weight.shape()),
            ));
        }
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (c_out, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if bias.shape() != [c_out] {
            return Err(Error::shape("conv2d", format!("bias [{c_out}]"), format!("{:?}", bias.shape())));
        }
        let h_out = conv_extent(h, kh, stride, padding)?;
        let w_out = conv_extent(w, kw, stride, padding)?;

        let x = self.data();
        let wt = weight.data();
        let b = bias.data();
        let mut data = vec![0.0; c_out * h_out * w_out];
        for co in 0..c_out {
            let plane = &mut data[co * h_out * w_out..(co + 1) * h_out * w_out];
            plane.fill(b[co]);
            for ci in 0..c_in {
                let in_plane = &x[ci * h * w..(ci + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wt[((co * c_in + ci) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = col_bounds(w_out, w, kj, stride, padding);
                        for oh in 0..h_out {
                            let ih = (oh * stride + ki) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[ih as usize * w..(ih as usize + 1) * w];
                            let out_row = &mut plane[oh * w_out..(oh + 1) * w_out];
                            let shift = kj as isize - padding as isize;
                            for ow in lo..hi {
                                let iw = (ow * stride) as isize + shift;
                                out_row[ow] += wv * in_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(wt);
        drop(b);

        let backward = move |ctx: &BackwardCtx| {
            let (px, pw, pb) = (&ctx.parents[0], &ctx.parents[1], &ctx.parents[2]);
            let g = ctx.grad;
            if pb.requires_grad() {
                let mut gb = vec![0.0; c_out];
                for co in 0..c_out {
                    gb[co] = g[co * h_out * w_out..(co + 1) * h_out * w_out].iter().sum();
                }
                pb.accumulate_grad(&gb);
            }
            if px.requires_grad() {
                let wt = pw.data();
                let mut gx = vec![0.0; c_in * h * w];
                for co in 0..c_out {
                    let g_plane = &g[co * h_out * w_out..(co + 1) * h_out * w_out];
                    for ci in 0..c_in {
                        let gx_plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let wv = wt[((co * c_in + ci) * kh + ki) * kw + kj];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (lo, hi) = col_bounds(w_out, w, kj, stride, padding);
                                let shift = kj as isize - padding as isize;
                                for oh in 0..h_out {
                                    let ih = (oh * stride + ki) as isize - padding as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let g_row = &g_plane[oh * w_out..(oh + 1) * w_out];
                                    let gx_row = &mut gx_plane[ih as usize * w..(ih as usize + 1) * w];
                                    for ow in lo..hi {
                                        let iw = (ow * stride) as isize + shift;
                                        gx_row[iw as usize] += wv * g_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
                drop(wt);
                px.accumulate_grad(&gx);
            }
            if pw.requires_grad() {
                let x = px.data();
                let mut gw = vec![0.0; c_out * c_in * kh * kw];
                for co in 0..c_out {
                    let g_plane = &g[co * h_out * w_out..(co + 1) * h_out * w_out];
                    for ci in 0..c_in {
                        let in_plane = &x[ci * h * w..(ci + 1) * h * w];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let (lo, hi) = col_bounds(w_out, w, kj, stride, padding);
                                let shift = kj as isize - padding as isize;
                                let mut acc = 0.0;
                                for oh in 0..h_out {
                                    let ih = (oh * stride + ki) as isize - padding as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let g_row = &g_plane[oh * w_out..(oh + 1) * w_out];
                                    let in_row = &in_plane[ih as usize * w..(ih as usize + 1) * w];
                                    for ow in lo..hi {
                                        let iw = (ow * stride) as isize + shift;
                                        acc += g_row[ow] * in_row[iw as usize];
                                    }
                                }
                                gw[((co * c_in + ci) * kh + ki) * kw + kj] = acc;
                            }
                        }
                    }
                }
                drop(x);
                pw.accumulate_grad(&gw);
            }
        };
        Ok(Tensor::from_op(
            vec![c_out, h_out, w_out],
            data,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(backward),
        ))
    }

    /// Per-channel (grouped, groups = C) convolution: `[C, H, W]` with a
    /// `[C, KH, KW]` filter bank and `[C]` bias.
    pub fn depthwise_conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.rank() != 3 || weight.rank() != 3 || self.shape()[0] != weight.shape()[0] {
            return Err(Error::shape(
                "depthwise conv2d",
                "[C, H, W] with [C, KH, KW]",
                format!("{:?} with {:?}", self.shape(), weight.shape()),
            ));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (kh, kw) = (weight.shape()[1], weight.shape()[2]);
        if bias.shape() != [c] {
            return Err(Error::shape("depthwise conv2d", format!("bias [{c}]"), format!("{:?}", bias.shape())));
        }
        let h_out = conv_extent(h, kh, stride, padding)?;
        let w_out = conv_extent(w, kw, stride, padding)?;

        let x = self.data();
        let wt = weight.data();
        let b = bias.data();
        let mut data = vec![0.0; c * h_out * w_out];
        for ci in 0..c {
            let in_plane = &x[ci * h * w..(ci + 1) * h * w];
            let plane = &mut data[ci * h_out * w_out..(ci + 1) * h_out * w_out];
            plane.fill(b[ci]);
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = wt[(ci * kh + ki) * kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = col_bounds(w_out, w, kj, stride, padding);
                    let shift = kj as isize - padding as isize;
                    for oh in 0..h_out {
                        let ih = (oh * stride + ki) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[ih as usize * w..(ih as usize + 1) * w];
                        let out_row = &mut plane[oh * w_out..(oh + 1) * w_out];
                        for ow in lo..hi {
                            let iw = (ow * stride) as isize + shift;
                            out_row[ow] += wv * in_row[iw as usize];
                        }
                    }
                }
            }
        }
        drop(x);
        drop(wt);
        drop(b);

        let backward = move |ctx: &BackwardCtx| {
            let (px, pw, pb) = (&ctx.parents[0], &ctx.parents[1], &ctx.parents[2]);
            let g = ctx.grad;
            if pb.requires_grad() {
                let mut gb = vec![0.0; c];
                for ci in 0..c {
                    gb[ci] = g[ci * h_out * w_out..(ci + 1) * h_out * w_out].iter().sum();
                }
                pb.accumulate_grad(&gb);
            }
            if px.requires_grad() {
                let wt = pw.data();
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    let g_plane = &g[ci * h_out * w_out..(ci + 1) * h_out * w_out];
                    let gx_plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = wt[(ci * kh + ki) * kw + kj];
                            if wv == 0.0 {
                                continue;
                            }
                            let (lo, hi) = col_bounds(w_out, w, kj, stride, padding);
                            let shift = kj as isize - padding as isize;
                            for oh in 0..h_out {
                                let ih = (oh * stride + ki) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let g_row = &g_plane[oh * w_out..(oh + 1) * w_out];
                                let gx_row = &mut gx_plane[ih as usize * w..(ih as usize + 1) * w];
                                for ow in lo..hi {
                                    let iw = (ow * stride) as isize + shift;
                                    gx_row[iw as usize] += wv * g_row[ow];
                                }
                            }
                        }
                    }
                }
                drop(wt);
                px.accumulate_grad(&gx);
            }
            if pw.requires_grad() {
                let x = px.data();
                let mut gw = vec![0.0; c * kh * kw];
                for ci in 0..c {
                    let g_plane = &g[ci * h_out * w_out..(ci + 1) * h_out * w_out];
                    let in_plane = &x[ci * h * w..(ci + 1) * h * w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let (lo, hi) = col_bounds(w_out, w, kj, stride, padding);
                            let shift = kj as isize - padding as isize;
                            let mut acc = 0.0;
                            for oh in 0..h_out {
                                let ih = (oh * stride + ki) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let g_row = &g_plane[oh * w_out..(oh + 1) * w_out];
                                let in_row = &in_plane[ih as usize * w..(ih as usize + 1) * w];
                                for ow in lo..hi {
                                    let iw = (ow * stride) as isize + shift;
                                    acc += g_row[ow] * in_row[iw as usize];
                                }
                            }
                            gw[(ci * kh + ki) * kw + kj] = acc;
                        }
                    }
                }
                drop(x);
                pw.accumulate_grad(&gw);
            }
        };
        Ok(Tensor::from_op(
            vec![c, h_out, w_out],
            data,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(backward),
        ))
    }

    /// Channel-mixing 1x1 convolution: `[C_in, H, W]` with `[C_out, C_in]`
    /// plus a `[C_out]` bias, expressed through the matmul path.
    pub fn conv1x1(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || weight.rank() != 2 || weight.shape()[1] != self.shape()[0] {
            return Err(Error::shape(
                "conv1x1",
                "[C_in, H, W] with [C_out, C_in]",
                format!("{:?} with {:?}", self.shape(), weight.shape()),
            ));
        }
        let (h, w) = (self.shape()[1], self.shape()[2]);
        let c_out = weight.shape()[0];
        let flat = self.reshape(&[self.shape()[0], h * w])?;
        let mixed = weight.matmul(&flat)?;
        let biased = mixed.add(&bias.reshape(&[c_out, 1])?)?;
        biased.reshape(&[c_out, h, w])
    }
}

#[cfg(test)]
mod tests {

    use crate::Tensor;

    #[test]
    fn box_kernel_counts_covered_cells() {
        // All-ones 5x5 input, all-ones 3x3 kernel, padding 1: each output is
        // the number of in-bounds taps (9 interior, 6 edge, 4 corner).
        let x = Tensor::from_vec(&[1, 5, 5], vec![1.0; 25]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&k, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        let d = y.to_vec();
        assert_eq!(d[0], 4.0); // corner
        assert_eq!(d[1], 6.0); // edge
        assert_eq!(d[6], 9.0); // interior
        assert_eq!(d[12], 9.0); // center
        assert_eq!(d[24], 4.0); // opposite corner
    }

    #[test]
    fn center_tap_kernel_is_identity() {
        let x = Tensor::from_vec(&[1, 3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let k = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&k, &b, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn stride_two_halves_spatial_extent() {
        let x = Tensor::zeros(&[2, 8, 8]);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let y = x.conv2d(&k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
    }

    #[test]
    fn bias_fills_output() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[2, 1, 1, 1]);
        let b = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let y = x.conv2d(&k, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5, 0.5, 0.5, -1.5, -1.5, -1.5, -1.5]);
    }

    #[test]
    fn depthwise_scales_each_channel_independently() {
        let x = Tensor::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let k = Tensor::from_vec(&[2, 1, 1], vec![2.0, -1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = x.depthwise_conv2d(&k, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 4.0, 6.0, 8.0, -5.0, -6.0, -7.0, -8.0]);
    }

    #[test]
    fn depthwise_matches_grouped_full_conv() {
        let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|v| (v as f64) * 0.25 - 3.0).collect()).unwrap();
        let kd = Tensor::from_vec(&[2, 3, 3], (0..18).map(|v| (v as f64) * 0.1 - 0.8).collect()).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.3, -0.2]).unwrap();
        let dw = x.depthwise_conv2d(&kd, &b, 1, 1).unwrap();
        // Same filters embedded in a block-diagonal dense kernel.
        let mut dense = vec![0.0; 2 * 2 * 9];
        let kdv = kd.to_vec();
        for c in 0..2 {
            for t in 0..9 {
                dense[((c * 2 + c) * 9) + t] = kdv[c * 9 + t];
            }
        }
        let kf = Tensor::from_vec(&[2, 2, 3, 3], dense).unwrap();
        let full = x.conv2d(&kf, &b, 1, 1).unwrap();
        for (a, bv) in dw.to_vec().iter().zip(full.to_vec()) {
            assert!((a - bv).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1x1_matches_dense_conv() {
        let x = Tensor::from_vec(&[3, 2, 2], (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![1.0, -1.0, 0.5, 0.0, 2.0, -0.5]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.1]).unwrap();
        let fast = x.conv1x1(&w, &b).unwrap();
        let w4 = w.reshape(&[2, 3, 1, 1]).unwrap();
        let slow = x.conv2d(&w4, &b, 1, 0).unwrap();
        for (a, bv) in fast.to_vec().iter().zip(slow.to_vec()) {
            assert!((a - bv).abs() < 1e-12);
        }
    }
}
