//! Dilated 2-D convolution kernels (NCHW activations, OIHW weights).
//!
//! All three kernels parallelize over disjoint output planes; inner
//! accumulation order is fixed, so results do not depend on thread count.

use crate::error::{Error, Result};
use crate::parallel::par_chunks;
use crate::tensor::Tensor;

/// Geometry of one convolution application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Result<Self> {
        if stride == 0 || dilation == 0 {
            return Err(Error::Shape(format!(
                "conv2d: stride and dilation must be >= 1 (got stride {stride}, dilation {dilation})"
            )));
        }
        Ok(ConvGeom { stride, padding, dilation })
    }
}

/// "Same"-style default padding for a given kernel/dilation.
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

/// Output extent of one spatial dimension, or an error when no output
/// position exists.
pub fn conv_out_extent(input: usize, kernel: usize, g: ConvGeom) -> Result<usize> {
    let span = input as isize + 2 * g.padding as isize
        - (g.dilation * (kernel - 1)) as isize
        - 1;
    if span < 0 {
        return Err(Error::Shape(format!(
            "conv2d: input extent {input} with kernel {kernel}, stride {}, padding {}, dilation {} \
             admits no output position",
            g.stride, g.padding, g.dilation
        )));
    }
    Ok(span as usize / g.stride + 1)
}

/// Range of output indices whose tap `o*stride + k_off - pad` lands inside
/// `0..input`. Returns `(lo, hi_exclusive)`.
#[inline]
fn valid_out_range(out: usize, input: usize, stride: usize, off: isize) -> (usize, usize) {
    // need 0 <= o*stride + off < input
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize + stride - 1) / stride
    };
    let top = input as isize - 1 - off;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

fn check_shapes(x: &Tensor, w: &Tensor) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("conv2d: input must be NCHW, got {:?}", x.shape())));
    }
    if w.rank() != 4 {
        return Err(Error::Shape(format!("conv2d: weight must be OIHW, got {:?}", w.shape())));
    }
    if x.shape()[1] != w.shape()[1] {
        return Err(Error::Shape(format!(
            "conv2d: input has {} channels but weight expects {} (x {:?}, w {:?})",
            x.shape()[1],
            w.shape()[1],
            x.shape(),
            w.shape()
        )));
    }
    Ok(())
}

/// Output shape for `forward` with the same arguments.
pub fn out_shape(x: &Tensor, w: &Tensor, g: ConvGeom) -> Result<[usize; 4]> {
    check_shapes(x, w)?;
    let (n, _, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    Ok([n, o, conv_out_extent(h, kh, g)?, conv_out_extent(wd, kw, g)?])
}

pub fn forward(x: &Tensor, w: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let [n, o, oh, ow] = out_shape(x, w, g)?;
    let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let mut out = Tensor::zeros(&[n, o, oh, ow]);

    let xd = x.data();
    let wd_ = w.data();
    let plane = oh * ow;
    // one task per (n, o) output plane
    par_chunks(out.data_mut(), n * o, |task, out_plane| {
        let (ni, oi) = (task / o, task % o);
        for ci in 0..c {
            let x_plane = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
            for khi in 0..kh {
                let h_off = (khi * g.dilation) as isize - g.padding as isize;
                let (lo_h, hi_h) = valid_out_range(oh, h, g.stride, h_off);
                for kwi in 0..kw {
                    let wv = wd_[((oi * c + ci) * kh + khi) * kw + kwi];
                    let w_off = (kwi * g.dilation) as isize - g.padding as isize;
                    let (lo_w, hi_w) = valid_out_range(ow, wd, g.stride, w_off);
                    for ohi in lo_h..hi_h {
                        let ih = (ohi * g.stride) as isize + h_off;
                        let xrow = ih as usize * wd;
                        let orow = ohi * ow;
                        for owi in lo_w..hi_w {
                            let iw = (owi * g.stride) as isize + w_off;
                            out_plane[orow + owi] += wv * x_plane[xrow + iw as usize];
                        }
                    }
                }
            }
        }
        debug_assert_eq!(out_plane.len(), plane);
    });
    Ok(out)
}

/// Gradient w.r.t. the input. `dout` must have the forward output shape.
pub fn backward_input(x_shape: &[usize], w: &Tensor, dout: &Tensor, g: ConvGeom) -> Tensor {
    let (n, c, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (dout.shape()[2], dout.shape()[3]);
    let mut dx = Tensor::zeros(x_shape);

    let wd_ = w.data();
    let dod = dout.data();
    // one task per (n, c) input plane; scatter stays inside the plane
    par_chunks(dx.data_mut(), n * c, |task, dx_plane| {
        let (ni, ci) = (task / c, task % c);
        for oi in 0..o {
            let do_plane = &dod[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            for khi in 0..kh {
                let h_off = (khi * g.dilation) as isize - g.padding as isize;
                let (lo_h, hi_h) = valid_out_range(oh, h, g.stride, h_off);
                for kwi in 0..kw {
                    let wv = wd_[((oi * c + ci) * kh + khi) * kw + kwi];
                    let w_off = (kwi * g.dilation) as isize - g.padding as isize;
                    let (lo_w, hi_w) = valid_out_range(ow, wd, g.stride, w_off);
                    for ohi in lo_h..hi_h {
                        let ih = ((ohi * g.stride) as isize + h_off) as usize;
                        let xrow = ih * wd;
                        let orow = ohi * ow;
                        for owi in lo_w..hi_w {
                            let iw = ((owi * g.stride) as isize + w_off) as usize;
                            dx_plane[xrow + iw] += wv * do_plane[orow + owi];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient w.r.t. the weights.
pub fn backward_weight(x: &Tensor, w_shape: &[usize], dout: &Tensor, g: ConvGeom) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let (oh, ow) = (dout.shape()[2], dout.shape()[3]);
    let mut dw = Tensor::zeros(w_shape);

    let xd = x.data();
    let dod = dout.data();
    // one task per (o, c) weight plane
    par_chunks(dw.data_mut(), o * c, |task, dw_plane| {
        let (oi, ci) = (task / c, task % c);
        for khi in 0..kh {
            let h_off = (khi * g.dilation) as isize - g.padding as isize;
            let (lo_h, hi_h) = valid_out_range(oh, h, g.stride, h_off);
            for kwi in 0..kw {
                let w_off = (kwi * g.dilation) as isize - g.padding as isize;
                let (lo_w, hi_w) = valid_out_range(ow, wd, g.stride, w_off);
                let mut acc = 0.0;
                for ni in 0..n {
                    let x_plane = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    let do_plane = &dod[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                    for ohi in lo_h..hi_h {
                        let ih = ((ohi * g.stride) as isize + h_off) as usize;
                        let xrow = ih * wd;
                        let orow = ohi * ow;
                        for owi in lo_w..hi_w {
                            let iw = ((owi * g.stride) as isize + w_off) as usize;
                            acc += x_plane[xrow + iw] * do_plane[orow + owi];
                        }
                    }
                }
                dw_plane[khi * kw + kwi] = acc;
            }
        }
    });
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = forward(&x, &w, ConvGeom::new(1, 0, 1).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilated_same_padding_preserves_shape() {
        // 7x7 input, 3x3 kernel, stride 1, pad 2, dilation 2 -> 7x7
        let x = Tensor::from_fn(&[1, 1, 7, 7], |i| (i as f64).sin());
        let w = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.1);
        let y = forward(&x, &w, ConvGeom::new(1, 2, 2).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 7, 7]);
        assert_eq!(same_padding(3, 2), 2);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::zeros(&[1, 3, 5, 5]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = forward(&x, &w, ConvGeom::new(1, 1, 1).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 channels"), "{msg}");
        assert!(msg.contains("expects 2"), "{msg}");
    }

    #[test]
    fn no_output_position_is_an_error() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(forward(&x, &w, ConvGeom::new(1, 0, 2).unwrap()).is_err());
    }

    /// Brute-force reference: direct translation of the definition, padding
    /// handled by explicit bounds checks per tap.
    fn conv_reference(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let [n, o, oh, ow] = out_shape(x, w, g).unwrap();
        let (c, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw) = (w.shape()[2], w.shape()[3]);
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let ih = (ohi * g.stride + khi * g.dilation) as isize
                                        - g.padding as isize;
                                    let iw = (owi * g.stride + kwi * g.dilation) as isize
                                        - g.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((ni * c + ci) * h + ih as usize) * wd + iw as usize]
                                        * w.data()[((oi * c + ci) * kh + khi) * kw + kwi];
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * oh + ohi) * ow + owi] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_reference_on_random_configs() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        for (stride, pad, dil) in [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2), (3, 1, 1)]
        {
            let mut x = Tensor::zeros(&[2, 3, 9, 8]);
            let mut w = Tensor::zeros(&[4, 3, 3, 3]);
            x.fill_normal(1.0, &mut rng);
            w.fill_normal(0.5, &mut rng);
            let g = ConvGeom::new(stride, pad, dil).unwrap();
            let got = forward(&x, &w, g).unwrap();
            let want = conv_reference(&x, &w, g);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "s{stride} p{pad} d{dil}");
        }
    }
}
