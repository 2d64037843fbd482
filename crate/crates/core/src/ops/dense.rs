//! Fully connected layer: y = x W^T + b.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::Shape(format!(
            "linear: expected x [N,F] and w [K,F], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let (k, fw) = (w.shape()[0], w.shape()[1]);
    if f != fw {
        return Err(Error::Shape(format!(
            "linear: x features {} but weight expects {} (x {:?}, w {:?})",
            f,
            fw,
            x.shape(),
            w.shape()
        )));
    }
    if b.len() != k {
        return Err(Error::Shape(format!("linear: bias length {} != {}", b.len(), k)));
    }
    Ok((n, f, k))
}

pub fn forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, f, k) = check(x, w, b)?;
    let mut out = Tensor::zeros(&[n, k]);
    for ni in 0..n {
        let xr = &x.data()[ni * f..(ni + 1) * f];
        for ki in 0..k {
            let wr = &w.data()[ki * f..(ki + 1) * f];
            let mut acc = b.data()[ki];
            for fi in 0..f {
                acc += xr[fi] * wr[fi];
            }
            out.data_mut()[ni * k + ki] = acc;
        }
    }
    Ok(out)
}

/// Returns (dx, dw, db).
pub fn backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let mut dx = Tensor::zeros(&[n, f]);
    let mut dw = Tensor::zeros(&[k, f]);
    let mut db = Tensor::zeros(&[k]);
    for ni in 0..n {
        let dr = &dout.data()[ni * k..(ni + 1) * k];
        let xr = &x.data()[ni * f..(ni + 1) * f];
        for ki in 0..k {
            let g = dr[ki];
            db.data_mut()[ki] += g;
            let wr = &w.data()[ki * f..(ki + 1) * f];
            let dxr = &mut dx.data_mut()[ni * f..(ni + 1) * f];
            for fi in 0..f {
                dxr[fi] += g * wr[fi];
            }
            let dwr = &mut dw.data_mut()[ki * f..(ki + 1) * f];
            for fi in 0..f {
                dwr[fi] += g * xr[fi];
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel bias over an NCHW map.
pub fn bias4_forward(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 || b.rank() != 1 || b.len() != x.shape()[1] {
        return Err(Error::Shape(format!(
            "channel bias: x {:?} with bias {:?}",
            x.shape(),
            b.shape()
        )));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let bv = b.data()[ci];
            for v in &mut out.data_mut()[base..base + plane] {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Gradient w.r.t. the bias (the input gradient is the upstream itself).
pub fn bias4_backward_bias(c: usize, dout: &Tensor) -> Tensor {
    let n = dout.shape()[0];
    let plane = dout.shape()[2] * dout.shape()[3];
    let mut db = Tensor::zeros(&[c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            db.data_mut()[ci] += dout.data()[base..base + plane].iter().sum::<f64>();
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_hand_example() {
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![10.0, -10.0]).unwrap();
        let y = forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0 - 3.0 + 10.0, 3.0 - 10.0]);
    }

    #[test]
    fn feature_mismatch_rejected() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 4]);
        let b = Tensor::zeros(&[2]);
        assert!(forward(&x, &w, &b).is_err());
    }
}
