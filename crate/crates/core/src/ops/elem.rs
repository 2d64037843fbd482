//! Elementwise operations: rectifier, dropout, scaling, summation, bilinear
//! and nearest-neighbour resampling for the data path.

use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0))
}

pub fn relu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| if x.data()[i] > 0.0 { dout.data()[i] } else { 0.0 })
}

/// Inverted-dropout mask: kept positions carry 1/(1-rate), dropped carry 0.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

pub fn apply_mask(x: &Tensor, mask: &[f64]) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i] * mask[i])
}

/// Bilinear resize of an NCHW (or CHW treated per-plane) tensor to
/// (out_h, out_w), half-pixel centers, clamped at borders. Exact identity
/// when the size is unchanged.
pub fn resize_bilinear_plane(
    src: &[f64],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[y * ow + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Index map for nearest-neighbour resampling with half-pixel centers.
pub fn nearest_index(src_extent: usize, dst_extent: usize, dst: usize) -> usize {
    let scale = src_extent as f64 / dst_extent as f64;
    (((dst as f64 + 0.5) * scale).floor() as usize).min(src_extent - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn relu_and_subgradient() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let d = relu_backward(&x, &Tensor::full(&[4], 3.0));
        assert_eq!(d.data(), &[0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn dropout_mask_scales_kept_positions() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let mask = dropout_mask(10_000, 0.3, &mut rng);
        let kept = mask.iter().filter(|&&m| m > 0.0).count();
        assert!((kept as f64 / 10_000.0 - 0.7).abs() < 0.03);
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.7).abs() < 1e-15));
    }

    #[test]
    fn bilinear_identity_and_means() {
        let src: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(resize_bilinear_plane(&src, (3, 4), (3, 4)), src);
        // 2x downsample of a linear ramp keeps the global mean
        let down = resize_bilinear_plane(&src, (3, 4), (1, 2));
        let mean_src: f64 = src.iter().sum::<f64>() / 12.0;
        let mean_down: f64 = down.iter().sum::<f64>() / 2.0;
        assert!((mean_src - mean_down).abs() < 1e-9);
    }

    #[test]
    fn nearest_is_within_bounds_and_identity_at_same_size() {
        for i in 0..7 {
            assert_eq!(nearest_index(7, 7, i), i);
        }
        for i in 0..3 {
            assert!(nearest_index(7, 3, i) < 7);
        }
    }
}
