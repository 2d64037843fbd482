//! Built-in datasets: synthetic blob images for classification and
//! segmentation sanity runs, plus a reader for the standard CIFAR-10 binary
//! record layout. Nothing here touches the network.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::seg::LabelMap;
use crate::tensor::Tensor;

/// An in-memory labelled image set.
#[derive(Debug, Clone)]
pub struct ClassifyData {
    /// [C, H, W] images.
    pub images: Vec<Tensor>,
    pub labels: Vec<i64>,
    pub classes: usize,
}

impl ClassifyData {
    /// Stack examples `idx` into an NCHW batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<i64>) {
        let shape = self.images[0].shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut out = Tensor::zeros(&[idx.len(), c, h, w]);
        let per = c * h * w;
        for (row, &i) in idx.iter().enumerate() {
            out.data_mut()[row * per..(row + 1) * per].copy_from_slice(self.images[i].data());
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SegData {
    pub images: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
    pub classes: usize,
}

/// Class-conditioned blob images: each class places a soft disk in its own
/// image region; pixels carry noise on top.
pub fn blobs_classify(n: usize, size: usize, classes: usize, seed: u64) -> ClassifyData {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % classes) as i64;
        let (img, _) = blob_image(size, class as usize, classes, &mut rng);
        images.push(img);
        labels.push(class);
    }
    ClassifyData { images, labels, classes }
}

/// Blob images with aligned per-pixel masks: background 0, blob pixels carry
/// `class + 1`.
pub fn blobs_segment(n: usize, size: usize, classes: usize, seed: u64) -> SegData {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (img, mask) = blob_image(size, class, classes, &mut rng);
        images.push(img);
        labels.push(mask);
    }
    // class ids in the mask run 0..=classes (0 = background)
    SegData { images, labels, classes: classes + 1 }
}

fn blob_image(
    size: usize,
    class: usize,
    classes: usize,
    rng: &mut ChaCha20Rng,
) -> (Tensor, LabelMap) {
    // class centers sit on a circle around the image center
    let angle = std::f64::consts::TAU * class as f64 / classes as f64;
    let r = size as f64 / 4.0;
    let cy = size as f64 / 2.0 + r * angle.sin() + rng.gen_range(-1.0..=1.0);
    let cx = size as f64 / 2.0 + r * angle.cos() + rng.gen_range(-1.0..=1.0);
    let radius = size as f64 / 5.0;

    let mut img = Tensor::zeros(&[3, size, size]);
    let mut mask = LabelMap::new(size, size, 0);
    for y in 0..size {
        for x in 0..size {
            let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (radius * radius);
            let bump = (-d2).exp();
            for c in 0..3 {
                let noise = rng.gen_range(-0.15..=0.15);
                img.data_mut()[(c * size + y) * size + x] = bump * (0.5 + 0.25 * c as f64) + noise;
            }
            if d2 <= 1.0 {
                mask.set(y, x, (class + 1) as u8);
            }
        }
    }
    (img, mask)
}

/// Byte length of one record in the CIFAR-10 binary layout: a label byte
/// followed by 3072 pixel bytes (3 channels x 32 x 32, channel-major).
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_EDGE: usize = 32;

/// Read every record of a CIFAR-10-format binary file. Pixels map to
/// [-0.5, 0.5).
pub fn read_cifar10_bin(path: &Path) -> Result<ClassifyData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_cifar10(&bytes)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<ClassifyData> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Parse(format!(
            "CIFAR-10 binary length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as i64;
        if label > 9 {
            return Err(Error::Parse(format!("CIFAR-10 label {label} out of range")));
        }
        let img = Tensor::from_fn(&[3, CIFAR_EDGE, CIFAR_EDGE], |i| {
            rec[1 + i] as f64 / 256.0 - 0.5
        });
        images.push(img);
        labels.push(label);
    }
    Ok(ClassifyData { images, labels, classes: 10 })
}

/// Dataset descriptor: `blobs:n=256,size=16,classes=2`,
/// `segblobs:n=64,size=64,classes=2` or `cifar10:<path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSpec {
    Blobs { n: usize, size: usize, classes: usize },
    SegBlobs { n: usize, size: usize, classes: usize },
    Cifar10 { path: String },
}

impl DatasetSpec {
    pub fn parse(desc: &str) -> Result<Self> {
        let (kind, rest) = desc.split_once(':').unwrap_or((desc, ""));
        match kind {
            "blobs" | "segblobs" => {
                let (mut n, mut size, mut classes) = (256usize, 16usize, 2usize);
                for part in rest.split(',').filter(|p| !p.is_empty()) {
                    let Some((k, v)) = part.split_once('=') else {
                        return Err(Error::Config(format!("dataset: bad field {part:?}")));
                    };
                    let v: usize = v
                        .parse()
                        .map_err(|_| Error::Config(format!("dataset: bad value in {part:?}")))?;
                    match k {
                        "n" => n = v,
                        "size" => size = v,
                        "classes" => classes = v,
                        other => {
                            return Err(Error::Config(format!("dataset: unknown field {other:?}")))
                        }
                    }
                }
                if n == 0 || size == 0 || classes == 0 {
                    return Err(Error::Config("dataset: n, size, classes must be positive".into()));
                }
                Ok(if kind == "blobs" {
                    DatasetSpec::Blobs { n, size, classes }
                } else {
                    DatasetSpec::SegBlobs { n, size, classes }
                })
            }
            "cifar10" => {
                if rest.is_empty() {
                    return Err(Error::Config("dataset: cifar10 needs a path".into()));
                }
                Ok(DatasetSpec::Cifar10 { path: rest.to_string() })
            }
            other => Err(Error::Config(format!("dataset: unknown kind {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_images_are_deterministic_and_separable() {
        let a = blobs_classify(8, 16, 2, 5);
        let b = blobs_classify(8, 16, 2, 5);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        // the two classes place mass in different halves
        let mass_y = |t: &Tensor| {
            let (h, w) = (t.shape()[1], t.shape()[2]);
            let mut top = 0.0;
            let mut bottom = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let v = t.data()[y * w + x];
                    if y < h / 2 {
                        top += v;
                    } else {
                        bottom += v;
                    }
                }
            }
            top - bottom
        };
        // class 0 centers at angle 0 (right, vertically centered); class 1 at
        // angle pi (left). Use x-mass instead for robustness.
        let mass_x = |t: &Tensor| {
            let (h, w) = (t.shape()[1], t.shape()[2]);
            let mut left = 0.0;
            let mut right = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let v = t.data()[y * w + x];
                    if x < w / 2 {
                        left += v;
                    } else {
                        right += v;
                    }
                }
            }
            right - left
        };
        let _ = mass_y;
        assert!(mass_x(&a.images[0]) > 0.0); // class 0: right
        assert!(mass_x(&a.images[1]) < 0.0); // class 1: left
    }

    #[test]
    fn seg_masks_align_with_blobs() {
        let d = blobs_segment(4, 24, 2, 9);
        assert_eq!(d.classes, 3);
        for (img, mask) in d.images.iter().zip(&d.labels) {
            assert_eq!(img.shape()[1], mask.h);
            // the blob's mask pixels average brighter than the background
            let mut blob_sum = 0.0;
            let mut blob_n = 0.0;
            let mut bg_sum = 0.0;
            let mut bg_n = 0.0;
            for y in 0..mask.h {
                for x in 0..mask.w {
                    let v = img.data()[y * mask.w + x];
                    if mask.get(y, x) > 0 {
                        blob_sum += v;
                        blob_n += 1.0;
                    } else {
                        bg_sum += v;
                        bg_n += 1.0;
                    }
                }
            }
            assert!(blob_sum / blob_n > bg_sum / bg_n + 0.2);
        }
    }

    #[test]
    fn cifar_layout_parses() {
        // two fabricated records
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[1] = 255; // first pixel of record 0
        bytes[CIFAR_RECORD] = 3;
        let d = parse_cifar10(&bytes).unwrap();
        assert_eq!(d.labels, vec![7, 3]);
        assert_eq!(d.images[0].shape(), &[3, 32, 32]);
        assert!((d.images[0].data()[0] - (255.0 / 256.0 - 0.5)).abs() < 1e-12);
        assert_eq!(d.images[1].data()[0], -0.5);

        assert!(parse_cifar10(&bytes[..100]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 12;
        assert!(parse_cifar10(&bad).is_err());
    }

    #[test]
    fn dataset_descriptors() {
        assert_eq!(
            DatasetSpec::parse("blobs:n=32,size=24,classes=3").unwrap(),
            DatasetSpec::Blobs { n: 32, size: 24, classes: 3 }
        );
        assert_eq!(
            DatasetSpec::parse("blobs").unwrap(),
            DatasetSpec::Blobs { n: 256, size: 16, classes: 2 }
        );
        assert_eq!(
            DatasetSpec::parse("cifar10:/data/batch_1.bin").unwrap(),
            DatasetSpec::Cifar10 { path: "/data/batch_1.bin".into() }
        );
        assert!(DatasetSpec::parse("blobs:n=0").is_err());
        assert!(DatasetSpec::parse("imagenet:/x").is_err());
        assert!(DatasetSpec::parse("cifar10").is_err());
    }

    #[test]
    fn batch_stacks_rows() {
        let d = blobs_classify(4, 8, 2, 1);
        let (batch, labels) = d.batch(&[2, 0]);
        assert_eq!(batch.shape(), &[2, 3, 8, 8]);
        assert_eq!(labels, vec![d.labels[2], d.labels[0]]);
        assert_eq!(&batch.data()[0..192], d.images[2].data());
    }
}
