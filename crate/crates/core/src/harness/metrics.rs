//! Evaluation metrics: top-1 accuracy for classification; pixel accuracy,
//! mean class-wise accuracy and mean intersection-over-union for dense
//! prediction. All scores are percentages.

use crate::tensor::Tensor;

/// Class confusion counts; `counts[label * k + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn add(&mut self, label: usize, pred: usize) {
        self.counts[label * self.k + pred] += 1;
    }

    /// Accumulate a prediction/label pair sequence, skipping ignored labels.
    pub fn add_pairs(&mut self, labels: &[i64], preds: &[i64], ignore: Option<i64>) {
        for (&l, &p) in labels.iter().zip(preds) {
            if ignore == Some(l) {
                continue;
            }
            self.add(l as usize, p as usize);
        }
    }

    fn label_total(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.counts[c * self.k + p]).sum()
    }

    fn pred_total(&self, c: usize) -> u64 {
        (0..self.k).map(|l| self.counts[l * self.k + c]).sum()
    }

    fn tp(&self, c: usize) -> u64 {
        self.counts[c * self.k + c]
    }

    /// Percentage of correctly labelled (non-ignored) pixels.
    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.k).map(|c| self.tp(c)).sum();
        100.0 * correct as f64 / total as f64
    }

    /// Mean of class-wise pixel accuracies, over classes that appear in the
    /// labels.
    pub fn mean_accuracy(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for c in 0..self.k {
            let lt = self.label_total(c);
            if lt == 0 {
                continue;
            }
            acc += self.tp(c) as f64 / lt as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            100.0 * acc / n as f64
        }
    }

    /// Mean of class-wise TP / (TP + FP + FN). A class absent from both the
    /// labels and the predictions is excluded from the mean.
    pub fn mean_iou(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for c in 0..self.k {
            let tp = self.tp(c);
            let union = self.label_total(c) + self.pred_total(c) - tp;
            if union == 0 {
                continue;
            }
            acc += tp as f64 / union as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            100.0 * acc / n as f64
        }
    }
}

/// Argmax class per example of a [N, K] logit tensor.
pub fn argmax_rows(logits: &Tensor) -> Vec<i64> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as i64
        })
        .collect()
}

/// Argmax class per position of a [N, K, H, W] score tensor, flattened
/// position-major.
pub fn argmax_channels(scores: &Tensor) -> Vec<i64> {
    let (n, k, h, w) = (
        scores.shape()[0],
        scores.shape()[1],
        scores.shape()[2],
        scores.shape()[3],
    );
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for ni in 0..n {
        for pos in 0..plane {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ki in 0..k {
                let v = scores.data()[(ni * k + ki) * plane + pos];
                if v > best_v {
                    best_v = v;
                    best = ki;
                }
            }
            out.push(best as i64);
        }
    }
    out
}

/// Top-1 accuracy (percent).
pub fn classification_accuracy(logits: &Tensor, labels: &[i64]) -> f64 {
    let preds = argmax_rows(logits);
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: per-class TP/FP/FN by direct triple scan.
    fn brute_force_scores(labels: &[i64], preds: &[i64], k: usize, ignore: i64) -> (f64, f64, f64) {
        let mut correct = 0u64;
        let mut total = 0u64;
        for (&l, &p) in labels.iter().zip(preds) {
            if l == ignore {
                continue;
            }
            total += 1;
            if l == p {
                correct += 1;
            }
        }
        let pixel = 100.0 * correct as f64 / total as f64;

        let mut accs = Vec::new();
        let mut ious = Vec::new();
        for c in 0..k as i64 {
            let mut tp = 0u64;
            let mut fp_ = 0u64;
            let mut fn_ = 0u64;
            for (&l, &p) in labels.iter().zip(preds) {
                if l == ignore {
                    continue;
                }
                if l == c && p == c {
                    tp += 1;
                }
                if l != c && p == c {
                    fp_ += 1;
                }
                if l == c && p != c {
                    fn_ += 1;
                }
            }
            if tp + fn_ > 0 {
                accs.push(tp as f64 / (tp + fn_) as f64);
            }
            if tp + fp_ + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp_ + fn_) as f64);
            }
        }
        let mean_acc = 100.0 * accs.iter().sum::<f64>() / accs.len() as f64;
        let mean_iou = 100.0 * ious.iter().sum::<f64>() / ious.len() as f64;
        (pixel, mean_acc, mean_iou)
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let labels = vec![0, 1, 2, 1, 0, 2];
        let mut cm = ConfusionMatrix::new(3);
        cm.add_pairs(&labels, &labels, Some(255));
        assert_eq!(cm.pixel_accuracy(), 100.0);
        assert_eq!(cm.mean_accuracy(), 100.0);
        assert_eq!(cm.mean_iou(), 100.0);
    }

    #[test]
    fn all_background_on_half_background_labels() {
        // half the pixels are background (0), half are foreground (1);
        // predicting all background: IoU(bg) = 0.5, IoU(fg) = 0, mean 25.0
        let labels: Vec<i64> = (0..16).map(|i| i64::from(i >= 8)).collect();
        let preds = vec![0i64; 16];
        let mut cm = ConfusionMatrix::new(2);
        cm.add_pairs(&labels, &preds, None);
        assert_eq!(cm.mean_iou(), 25.0);
        assert_eq!(cm.pixel_accuracy(), 50.0);
        assert_eq!(cm.mean_accuracy(), 50.0);
    }

    #[test]
    fn absent_class_is_excluded_from_the_mean() {
        // class 2 appears in neither labels nor predictions
        let labels = vec![0, 0, 1, 1];
        let preds = vec![0, 1, 1, 1];
        let mut cm = ConfusionMatrix::new(3);
        cm.add_pairs(&labels, &preds, None);
        let (p, a, i) = brute_force_scores(&labels, &preds, 3, 255);
        assert_eq!(cm.pixel_accuracy(), p);
        assert_eq!(cm.mean_accuracy(), a);
        assert_eq!(cm.mean_iou(), i);
        // with class 2 present the mean would change; here it is over 2 classes
        assert!((cm.mean_iou() - 100.0 * (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn hand_built_four_by_four_map() {
        // labels:          predictions:
        //  0 0 1 1          0 1 1 1
        //  0 0 1 1          0 0 0 1
        //  0 0 1 1          0 0 1 1
        //  0 0 1 1          0 0 1 1
        let labels = vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1];
        let preds = vec![0, 1, 1, 1, 0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 1];
        let mut cm = ConfusionMatrix::new(2);
        cm.add_pairs(&labels, &preds, None);
        // class 0: TP 7, FP 1, FN 1 -> 7/9; class 1: TP 7, FP 1, FN 1 -> 7/9
        assert!((cm.mean_iou() - 100.0 * 7.0 / 9.0).abs() < 1e-12);
        assert!((cm.pixel_accuracy() - 100.0 * 14.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn randomized_against_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(123);
        for _ in 0..200 {
            let k = rng.gen_range(2..=4usize);
            let n = rng.gen_range(4..=64usize);
            let labels: Vec<i64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        255
                    } else {
                        rng.gen_range(0..k as i64)
                    }
                })
                .collect();
            let preds: Vec<i64> = (0..n).map(|_| rng.gen_range(0..k as i64)).collect();
            if labels.iter().all(|&l| l == 255) {
                continue;
            }
            let mut cm = ConfusionMatrix::new(k);
            cm.add_pairs(&labels, &preds, Some(255));
            let (p, a, i) = brute_force_scores(&labels, &preds, k, 255);
            assert_eq!(cm.pixel_accuracy(), p);
            assert_eq!(cm.mean_accuracy(), a);
            assert_eq!(cm.mean_iou(), i);
        }
    }

    #[test]
    fn argmax_helpers() {
        let logits = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.0, 2.0, -1.0, 1.0]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![1, 0]);
        assert_eq!(classification_accuracy(&logits, &[1, 0]), 100.0);
        assert_eq!(classification_accuracy(&logits, &[1, 2]), 50.0);

        let scores = Tensor::new(vec![1, 2, 1, 2], vec![0.3, 0.1, 0.2, 0.4]).unwrap();
        assert_eq!(argmax_channels(&scores), vec![0, 1]);
    }
}
