//! Softmax cross-entropy over class logits, with an optional ignore label
//! for dense prediction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layout of a logits tensor: `n` examples, `k` classes, `s` spatial
/// positions per example (1 for plain classification).
#[derive(Debug, Clone, Copy)]
pub struct LogitLayout {
    pub n: usize,
    pub k: usize,
    pub s: usize,
}

pub fn layout(logits: &Tensor) -> Result<LogitLayout> {
    match logits.shape() {
        [n, k] => Ok(LogitLayout { n: *n, k: *k, s: 1 }),
        [n, k, h, w] => Ok(LogitLayout { n: *n, k: *k, s: h * w }),
        other => Err(Error::Shape(format!(
            "softmax-xent: logits must be [N,K] or [N,K,H,W], got {other:?}"
        ))),
    }
}

/// Saved state for the backward pass: per-position class probabilities and
/// which positions were counted.
#[derive(Debug, Clone)]
pub struct XentSaved {
    pub probs: Vec<f64>,
    pub counted: usize,
    pub layout: LogitLayout,
    pub shape: Vec<usize>,
    pub labels: Vec<i64>,
    pub ignore: Option<i64>,
}

/// Mean negative log-likelihood over non-ignored positions. Labels are
/// flattened position-major: `labels[n * s + pos]`.
pub fn forward(logits: &Tensor, labels: &[i64], ignore: Option<i64>) -> Result<(f64, XentSaved)> {
    let lay = layout(logits)?;
    if labels.len() != lay.n * lay.s {
        return Err(Error::Shape(format!(
            "softmax-xent: {} labels for {} positions",
            labels.len(),
            lay.n * lay.s
        )));
    }
    let mut probs = vec![0.0; logits.len()];
    let mut counted = 0usize;
    let mut nll = 0.0;
    for ni in 0..lay.n {
        for pos in 0..lay.s {
            let lbl = labels[ni * lay.s + pos];
            let at = |ki: usize| (ni * lay.k + ki) * lay.s + pos;
            let mut mx = f64::NEG_INFINITY;
            for ki in 0..lay.k {
                mx = mx.max(logits.data()[at(ki)]);
            }
            let mut z = 0.0;
            for ki in 0..lay.k {
                z += (logits.data()[at(ki)] - mx).exp();
            }
            for ki in 0..lay.k {
                probs[at(ki)] = (logits.data()[at(ki)] - mx).exp() / z;
            }
            if ignore == Some(lbl) {
                continue;
            }
            if lbl < 0 || lbl as usize >= lay.k {
                return Err(Error::Shape(format!(
                    "softmax-xent: label {lbl} out of range for {} classes",
                    lay.k
                )));
            }
            nll -= probs[at(lbl as usize)].ln();
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Numeric(
            "softmax-xent: every position carries the ignore label".into(),
        ));
    }
    let loss = nll / counted as f64;
    Ok((
        loss,
        XentSaved {
            probs,
            counted,
            layout: lay,
            shape: logits.shape().to_vec(),
            labels: labels.to_vec(),
            ignore,
        },
    ))
}

/// Gradient w.r.t. logits, scaled by the upstream scalar gradient.
pub fn backward(saved: &XentSaved, upstream: f64) -> Tensor {
    let lay = saved.layout;
    let mut d = vec![0.0; saved.probs.len()];
    let scale = upstream / saved.counted as f64;
    for ni in 0..lay.n {
        for pos in 0..lay.s {
            let lbl = saved.labels[ni * lay.s + pos];
            if saved.ignore == Some(lbl) {
                continue;
            }
            let at = |ki: usize| (ni * lay.k + ki) * lay.s + pos;
            for ki in 0..lay.k {
                let onehot = if ki as i64 == lbl { 1.0 } else { 0.0 };
                d[at(ki)] = scale * (saved.probs[at(ki)] - onehot);
            }
        }
    }
    Tensor::new(saved.shape.clone(), d).expect("xent grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, _) = forward(&logits, &[0, 3], None).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ignored_positions_do_not_count() {
        let logits = Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64);
        // positions: (0,0) true class 0, (1,0) ignored
        let (loss, saved) = forward(&logits, &[0, 255], Some(255)).unwrap();
        assert_eq!(saved.counted, 1);
        assert!(loss > 0.0);
        let d = backward(&saved, 1.0);
        // gradient at the ignored position is zero for every class
        assert_eq!(d.data()[1], 0.0);
        assert_eq!(d.data()[3], 0.0);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(forward(&logits, &[255], Some(255)).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(forward(&logits, &[2], None).is_err());
    }
}
