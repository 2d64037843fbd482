//! Receptive-field arithmetic along a feed-forward chain.

/// One layer on the chain, described by its window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfStep {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl RfStep {
    pub fn new(kernel: usize, stride: usize, dilation: usize) -> Self {
        RfStep { kernel, stride, dilation }
    }
}

/// Receptive field and cumulative stride (jump) of the chain's output, in
/// units of the chain's input grid:
/// `rf += (K - 1) * dilation * jump; jump *= stride` per layer.
pub fn receptive_field(steps: &[RfStep]) -> (u64, u64) {
    let mut rf: u64 = 1;
    let mut jump: u64 = 1;
    for s in steps {
        rf += (s.kernel as u64 - 1) * s.dilation as u64 * jump;
        jump *= s.stride as u64;
    }
    (rf, jump)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_3x3() {
        assert_eq!(receptive_field(&[RfStep::new(3, 1, 1)]), (3, 1));
    }

    #[test]
    fn strided_then_plain() {
        let steps = [RfStep::new(3, 2, 1), RfStep::new(3, 1, 1)];
        assert_eq!(receptive_field(&steps).0, 7);
    }

    #[test]
    fn two_dilated_stages_span_49() {
        let steps = [RfStep::new(3, 1, 12), RfStep::new(3, 1, 12)];
        assert_eq!(receptive_field(&steps).0, 49);
    }

    /// Perturbation oracle: mark which input pixels influence one output of
    /// the two-conv chain [3x3 stride 2, 3x3 stride 1] and compare the extent.
    #[test]
    fn strided_chain_matches_perturbation_probe() {
        use crate::ops::conv::{forward, ConvGeom};
        use crate::tensor::Tensor;

        let n = 17;
        let w1 = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w2 = Tensor::full(&[1, 1, 3, 3], 1.0);
        let run = |x: &Tensor| {
            let a = forward(x, &w1, ConvGeom::new(2, 0, 1).unwrap()).unwrap();
            forward(&a, &w2, ConvGeom::new(1, 0, 1).unwrap()).unwrap()
        };
        let base = run(&Tensor::zeros(&[1, 1, n, n]));
        let (oh, ow) = (base.shape()[2], base.shape()[3]);
        let probe_out = (oh / 2, ow / 2);
        let mut touched_cols = Vec::new();
        for col in 0..n {
            let mut x = Tensor::zeros(&[1, 1, n, n]);
            x.data_mut()[(n / 2) * n + col] = 1.0;
            let y = run(&x);
            if y.data()[probe_out.0 * ow + probe_out.1] != 0.0 {
                touched_cols.push(col);
            }
        }
        let extent = touched_cols.last().unwrap() - touched_cols.first().unwrap() + 1;
        let (rf, _) = receptive_field(&[RfStep::new(3, 2, 1), RfStep::new(3, 1, 1)]);
        assert_eq!(extent as u64, rf);
    }
}
