//! Spatial max pooling (with dilation) and global average pooling.

use crate::error::{Error, Result};
use crate::ops::conv::{conv_out_extent, ConvGeom};
use crate::parallel::par_chunks;
use crate::tensor::Tensor;

/// Max pooling over NCHW input. Returns the pooled tensor and, per output
/// element, the flat index (within its input plane) of the selected maximum.
/// Ties pick the first element in row-major scan order. Padded positions are
/// never selected.
pub fn maxpool_forward(
    x: &Tensor,
    kernel: usize,
    g: ConvGeom,
) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("maxpool: input must be NCHW, got {:?}", x.shape())));
    }
    if kernel == 0 {
        return Err(Error::Shape("maxpool: kernel must be >= 1".into()));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = conv_out_extent(h, kernel, g)?;
    let ow = conv_out_extent(w, kernel, g)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];

    let xd = x.data();
    let plane = oh * ow;
    let out_data = out.data_mut();
    // pooling is cheap next to conv; one deterministic sequential pass
    for task in 0..n * c {
        let x_plane = &xd[task * h * w..(task + 1) * h * w];
        let out_plane = &mut out_data[task * plane..(task + 1) * plane];
        let arg_plane = &mut argmax[task * plane..(task + 1) * plane];
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for khi in 0..kernel {
                    let ih = (ohi * g.stride + khi * g.dilation) as isize - g.padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kwi in 0..kernel {
                        let iw =
                            (owi * g.stride + kwi * g.dilation) as isize - g.padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = ih as usize * w + iw as usize;
                        let v = x_plane[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                if best_idx == usize::MAX {
                    return Err(Error::Shape(format!(
                        "maxpool: window at ({ohi},{owi}) covers only padding \
                         (kernel {kernel}, stride {}, padding {}, dilation {})",
                        g.stride, g.padding, g.dilation
                    )));
                }
                out_plane[ohi * ow + owi] = best;
                arg_plane[ohi * ow + owi] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Subgradient of max pooling: routes each upstream element to its argmax.
pub fn maxpool_backward(x_shape: &[usize], argmax: &[usize], dout: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let plane_out = dout.shape()[2] * dout.shape()[3];
    let mut dx = Tensor::zeros(x_shape);
    let dod = dout.data();
    par_chunks(dx.data_mut(), n * c, |task, dx_plane| {
        debug_assert_eq!(dx_plane.len(), h * w);
        let do_plane = &dod[task * plane_out..(task + 1) * plane_out];
        let arg_plane = &argmax[task * plane_out..(task + 1) * plane_out];
        for (i, &src) in arg_plane.iter().enumerate() {
            dx_plane[src] += do_plane[i];
        }
    });
    dx
}

/// Global average pooling: NCHW -> [N, C].
pub fn global_avgpool_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!(
            "global avgpool: input must be NCHW, got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let area = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        let plane = &x.data()[i * h * w..(i + 1) * h * w];
        out.data_mut()[i] = plane.iter().sum::<f64>() / area;
    }
    Ok(out)
}

pub fn global_avgpool_backward(x_shape: &[usize], dout: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let area = (h * w) as f64;
    let mut dx = Tensor::zeros(x_shape);
    for i in 0..n * c {
        let g = dout.data()[i] / area;
        for v in &mut dx.data_mut()[i * h * w..(i + 1) * h * w] {
            *v = g;
        }
    }
    dx
}
