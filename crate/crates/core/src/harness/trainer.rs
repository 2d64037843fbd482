//! Training and evaluation driver: SGD with momentum and weight decay on the
//! linear learning-rate schedule, deterministic given the config seed.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::arch::{Mode, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::harness::config::{Task, TrainConfig};
use crate::harness::data::{
    blobs_classify, blobs_segment, read_cifar10_bin, ClassifyData, DatasetSpec, SegData,
};
use crate::harness::metrics::{
    argmax_channels, argmax_rows, classification_accuracy, ConfusionMatrix,
};
use crate::seg::{
    augment_sample, to_fcn, DilationPlan, DropoutPolicy, SegHead, SegNetwork, IGNORE_LABEL,
};
use crate::tape::{BackwardOptions, Tape};
use crate::tensor::Tensor;
use crate::weights;

const DATA_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const DROPOUT_SEED_SALT: u64 = 0x5851_f42d_4c95_7f2d;

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub pixel_acc: Option<f64>,
    pub mean_acc: Option<f64>,
    pub mean_iou: Option<f64>,
}

/// What a finished run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub metrics_path: PathBuf,
    pub weights_path: PathBuf,
    pub final_loss: f64,
    /// Iteration at which the accuracy target was reached, when early
    /// stopping was requested.
    pub reached_target_at: Option<usize>,
}

/// Optional early stop: probe full-train accuracy every `every` iterations
/// and stop once it reaches `target` percent.
#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    pub every: usize,
    pub target: f64,
}

/// Single-crop evaluation size convention by training input size
/// (224 -> 320, 112 -> 160, 56 -> 80).
pub fn default_eval_crop(input_size: usize) -> usize {
    input_size * 10 / 7
}

struct Sgd {
    velocity: BTreeMap<String, Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { velocity: BTreeMap::new(), momentum, weight_decay }
    }

    fn apply(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        for i in 0..param.len() {
            let g = grad.data()[i] + self.weight_decay * param.data()[i];
            let vi = self.momentum * v.data()[i] + g;
            v.data_mut()[i] = vi;
            param.data_mut()[i] -= lr * vi;
        }
    }
}

fn spec_with_widths(cfg: &TrainConfig) -> Result<NetworkSpec> {
    let mut spec = NetworkSpec::parse(&cfg.spec)?;
    if let Some(w) = cfg.widths {
        spec = spec.with_widths(w);
    }
    Ok(spec)
}

fn load_classify_data(cfg: &TrainConfig) -> Result<ClassifyData> {
    match DatasetSpec::parse(&cfg.dataset)? {
        DatasetSpec::Blobs { n, size, classes } => Ok(blobs_classify(n, size, classes, cfg.seed)),
        DatasetSpec::Cifar10 { path } => read_cifar10_bin(std::path::Path::new(&path)),
        DatasetSpec::SegBlobs { .. } => {
            Err(Error::Config("classification run needs a classification dataset".into()))
        }
    }
}

fn load_seg_data(cfg: &TrainConfig) -> Result<SegData> {
    match DatasetSpec::parse(&cfg.dataset)? {
        DatasetSpec::SegBlobs { n, size, classes } => Ok(blobs_segment(n, size, classes, cfg.seed)),
        _ => Err(Error::Config("segmentation run needs a segblobs dataset".into())),
    }
}

/// Cyclic epoch order, reshuffled per epoch.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha20Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            cursor: 0,
            rng: ChaCha20Rng::seed_from_u64(seed ^ DATA_SEED_SALT),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx
    }
}

/// Train per the config; classification and segmentation fine-tuning share
/// the schedule/optimizer machinery. Aborts with a numeric error carrying the
/// iteration and learning rate when the loss stops being finite.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_stop(cfg, None)
}

pub fn train_with_stop(cfg: &TrainConfig, stop: Option<StopRule>) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.task {
        Task::Classify => train_classify(cfg, stop),
        Task::Segment => train_segment(cfg),
    }
}

fn train_classify(cfg: &TrainConfig, stop: Option<StopRule>) -> Result<TrainOutcome> {
    let data = load_classify_data(cfg)?;
    if data.classes != cfg.classes {
        return Err(Error::Config(format!(
            "config says {} classes but the dataset has {}",
            cfg.classes, data.classes
        )));
    }
    let spec = spec_with_widths(cfg)?;
    let mut net = Network::build(&spec, cfg.classes, cfg.seed)?;
    if let Some(path) = &cfg.init_weights {
        net.load_state(&weights::load(path)?)?;
    }
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut records = Vec::new();
    let mut final_loss = f64::NAN;
    let mut reached = None;

    for iter in 0..cfg.total_iters {
        let lr = cfg.lr_at(iter)?;
        let idx = sampler.next_batch(cfg.batch_size);
        let (batch, labels) = data.batch(&idx);

        let mut tape = Tape::new();
        let x = tape.leaf(batch, false);
        let trace = net.forward(&mut tape, x, Mode::Train)?;
        let loss_var = tape.softmax_xent(trace.output, &labels, None)?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at iteration {iter} (lr {lr})"
            )));
        }
        let mut grads = tape.backward(loss_var, &BackwardOptions::default())?;
        if !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at iteration {iter} (lr {lr})"
            )));
        }
        let by_name = trace.grads_by_name(&mut grads);
        net.visit_params_mut(&mut |name, t| {
            if let Some(g) = by_name.get(name) {
                sgd.apply(name, t, g, lr);
            }
        });
        net.apply_bn_updates(&tape, &trace);
        final_loss = loss;

        if iter % cfg.log_interval == 0 || iter + 1 == cfg.total_iters {
            let acc = classification_accuracy(tape.value(trace.output), &labels);
            records.push(MetricRecord {
                iteration: iter,
                lr,
                loss,
                accuracy: Some(acc),
                pixel_acc: None,
                mean_acc: None,
                mean_iou: None,
            });
        }
        if let Some(rule) = stop {
            if (iter + 1) % rule.every == 0 {
                let acc = eval_classify_accuracy(&net, &data, cfg.batch_size)?;
                if acc >= rule.target {
                    reached = Some(iter + 1);
                    break;
                }
            }
        }
    }

    let (metrics_path, weights_path) =
        write_run_artifacts(cfg, &records, net.state_tensors())?;
    Ok(TrainOutcome { records, metrics_path, weights_path, final_loss, reached_target_at: reached })
}

fn train_segment(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = load_seg_data(cfg)?;
    let spec = spec_with_widths(cfg)?;
    let mut backbone = Network::build(&spec, data.classes, cfg.seed)?;
    if let Some(path) = &cfg.init_weights {
        backbone.load_state(&weights::load(path)?)?;
    } else {
        // no pre-trained statistics to freeze; start from identity estimates
        backbone.init_identity_stats();
    }
    let plan = DilationPlan::for_network(&backbone)?;
    let head = SegHead { kind: cfg.head, ..SegHead::one_conv(data.classes) };
    let mut seg = to_fcn(backbone, &plan, &head, &DropoutPolicy::default(), cfg.seed)?;

    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut sampler = BatchSampler::new(data.images.len(), cfg.seed);
    let mut aug_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ DATA_SEED_SALT ^ 1);
    let mut drop_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ DROPOUT_SEED_SALT);
    let mut records = Vec::new();
    let mut final_loss = f64::NAN;

    let os = seg.output_stride;
    for iter in 0..cfg.total_iters {
        let lr = cfg.lr_at(iter)?;
        let idx = sampler.next_batch(cfg.batch_size);
        // augment and stack
        let crop = cfg.crop;
        let mut batch = Tensor::zeros(&[idx.len(), 3, crop, crop]);
        let mut full_labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            let (img, lbl) = augment_sample(&data.images[i], &data.labels[i], crop, &mut aug_rng)?;
            let per = img.len();
            batch.data_mut()[row * per..(row + 1) * per].copy_from_slice(img.data());
            full_labels.push(lbl);
        }

        let mut tape = Tape::new();
        let x = tape.leaf(batch, false);
        let trace = seg.forward_with(&mut tape, x, Mode::Frozen, Some(&mut drop_rng))?;
        let score_shape = tape.shape(trace.scores).to_vec();
        let (sh, sw) = (score_shape[2], score_shape[3]);
        let mut targets = Vec::with_capacity(idx.len() * sh * sw);
        for lbl in &full_labels {
            targets.extend(lbl.resized(sh, sw).targets());
        }
        let loss_var = tape.softmax_xent(trace.scores, &targets, Some(IGNORE_LABEL as i64))?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at iteration {iter} (lr {lr})"
            )));
        }
        let mut grads = tape.backward(loss_var, &BackwardOptions::default())?;
        if !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at iteration {iter} (lr {lr})"
            )));
        }
        let by_name = trace.grads_by_name(&mut grads);
        apply_seg_sgd(&mut seg, &mut sgd, &by_name, lr);
        final_loss = loss;
        let _ = os;

        if iter % cfg.log_interval == 0 || iter + 1 == cfg.total_iters {
            let preds = argmax_channels(tape.value(trace.scores));
            let mut cm = ConfusionMatrix::new(data.classes);
            cm.add_pairs(&targets, &preds, Some(IGNORE_LABEL as i64));
            records.push(MetricRecord {
                iteration: iter,
                lr,
                loss,
                accuracy: None,
                pixel_acc: Some(cm.pixel_accuracy()),
                mean_acc: Some(cm.mean_accuracy()),
                mean_iou: Some(cm.mean_iou()),
            });
        }
    }

    let (metrics_path, weights_path) = write_run_artifacts(cfg, &records, seg.state_tensors())?;
    Ok(TrainOutcome {
        records,
        metrics_path,
        weights_path,
        final_loss,
        reached_target_at: None,
    })
}

fn apply_seg_sgd(
    seg: &mut SegNetwork,
    sgd: &mut Sgd,
    by_name: &BTreeMap<String, Tensor>,
    lr: f64,
) {
    seg.backbone.visit_params_mut(&mut |name, t| {
        if let Some(g) = by_name.get(name) {
            sgd.apply(name, t, g, lr);
        }
    });
    for (i, layer) in seg.head_layers.iter_mut().enumerate() {
        for (suffix, t) in [("w", &mut layer.weight), ("b", &mut layer.bias)] {
            let name = format!("head.c{i}.{suffix}");
            if let Some(g) = by_name.get(&name) {
                sgd.apply(&name, t, g, lr);
            }
        }
    }
}

/// Top-1 accuracy of a network over a whole dataset, eval mode.
pub fn eval_classify_accuracy(net: &Network, data: &ClassifyData, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut i = 0usize;
    while i < data.len() {
        let idx: Vec<usize> = (i..(i + batch).min(data.len())).collect();
        let (x, labels) = data.batch(&idx);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let trace = net.forward(&mut tape, xv, Mode::Eval)?;
        let preds = argmax_rows(tape.value(trace.output));
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        total += labels.len();
        i += batch;
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Dense-prediction metrics over a dataset, scored at the network's output
/// resolution against nearest-neighbour-downsampled labels.
pub fn eval_segmentation(seg: &SegNetwork, data: &SegData, batch: usize) -> Result<MetricRecord> {
    let mut cm = ConfusionMatrix::new(data.classes);
    let mut i = 0usize;
    while i < data.images.len() {
        let hi = (i + batch).min(data.images.len());
        let shape = data.images[i].shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut x = Tensor::zeros(&[hi - i, c, h, w]);
        for (row, j) in (i..hi).enumerate() {
            let per = c * h * w;
            x.data_mut()[row * per..(row + 1) * per].copy_from_slice(data.images[j].data());
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let trace = seg.forward_with(&mut tape, xv, Mode::Eval, None)?;
        let scores = tape.value(trace.scores);
        let (sh, sw) = (scores.shape()[2], scores.shape()[3]);
        let preds = argmax_channels(scores);
        let mut targets = Vec::new();
        for j in i..hi {
            targets.extend(data.labels[j].resized(sh, sw).targets());
        }
        cm.add_pairs(&targets, &preds, Some(IGNORE_LABEL as i64));
        i = hi;
    }
    Ok(MetricRecord {
        iteration: 0,
        lr: 0.0,
        loss: 0.0,
        accuracy: None,
        pixel_acc: Some(cm.pixel_accuracy()),
        mean_acc: Some(cm.mean_accuracy()),
        mean_iou: Some(cm.mean_iou()),
    })
}

/// Evaluate stored weights on a dataset.
pub fn evaluate(cfg: &TrainConfig, weights_path: &std::path::Path) -> Result<MetricRecord> {
    let spec = spec_with_widths(cfg)?;
    let tensors = weights::load(weights_path)?;
    match cfg.task {
        Task::Classify => {
            let data = load_classify_data(cfg)?;
            if data.classes != cfg.classes {
                return Err(Error::Config(format!(
                    "config says {} classes but the dataset has {}",
                    cfg.classes, data.classes
                )));
            }
            let mut net = Network::build(&spec, cfg.classes, 0)?;
            net.load_state(&tensors)?;
            let acc = eval_classify_accuracy(&net, &data, cfg.batch_size)?;
            Ok(MetricRecord {
                iteration: 0,
                lr: 0.0,
                loss: 0.0,
                accuracy: Some(acc),
                pixel_acc: None,
                mean_acc: None,
                mean_iou: None,
            })
        }
        Task::Segment => {
            let data = load_seg_data(cfg)?;
            let backbone = Network::build(&spec, data.classes, 0)?;
            let plan = DilationPlan::for_network(&backbone)?;
            let head = SegHead { kind: cfg.head, ..SegHead::one_conv(data.classes) };
            let mut seg = to_fcn(backbone, &plan, &head, &DropoutPolicy::default(), 0)?;
            seg.load_state(&tensors)?;
            eval_segmentation(&seg, &data, cfg.batch_size)
        }
    }
}

/// Metrics CSV header for a task.
pub fn csv_header(task: Task) -> &'static str {
    match task {
        Task::Classify => "iteration,lr,loss,accuracy",
        Task::Segment => "iteration,lr,loss,pixel_acc,mean_acc,mean_iou",
    }
}

pub fn metrics_to_csv(task: Task, records: &[MetricRecord]) -> String {
    let mut s = String::from(csv_header(task));
    s.push('\n');
    for r in records {
        match task {
            Task::Classify => {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    r.iteration,
                    r.lr,
                    r.loss,
                    r.accuracy.unwrap_or(f64::NAN)
                ));
            }
            Task::Segment => {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.iteration,
                    r.lr,
                    r.loss,
                    r.pixel_acc.unwrap_or(f64::NAN),
                    r.mean_acc.unwrap_or(f64::NAN),
                    r.mean_iou.unwrap_or(f64::NAN)
                ));
            }
        }
    }
    s
}

fn write_run_artifacts(
    cfg: &TrainConfig,
    records: &[MetricRecord],
    state: BTreeMap<String, Tensor>,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_to_csv(cfg.task, records))?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.echo())?;
    let weights_path = cfg.out_dir.join("weights.rnwt");
    weights::save(&weights_path, &state)?;
    Ok((metrics_path, weights_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg(dir: &std::path::Path, seed: u64) -> TrainConfig {
        TrainConfig {
            spec: "16-1-0-0-0-0-1-1".into(),
            widths: Some([4, 6, 8, 10, 12, 16, 24]),
            classes: 2,
            lr_start: 0.05,
            lr_end: 1e-4,
            total_iters: 60,
            batch_size: 8,
            seed,
            dataset: "blobs:n=64,size=16,classes=2".into(),
            out_dir: dir.to_path_buf(),
            log_interval: 10,
            ..Default::default()
        }
    }

    #[test]
    fn classify_training_decreases_loss_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_cfg(&dir.path().join("a"), 3);
        let out = train(&cfg).unwrap();
        assert!(out.final_loss.is_finite());
        let first = out.records.first().unwrap().loss;
        let last = out.records.last().unwrap().loss;
        assert!(last < first, "loss did not fall: {first} -> {last}");

        // byte-identical rerun
        let cfg2 = TrainConfig { out_dir: dir.path().join("b"), ..cfg.clone() };
        let out2 = train(&cfg2).unwrap();
        let a = std::fs::read(&out.metrics_path).unwrap();
        let b = std::fs::read(&out2.metrics_path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logged_lr_column_matches_the_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_cfg(dir.path(), 4);
        let out = train(&cfg).unwrap();
        let text = std::fs::read_to_string(&out.metrics_path).unwrap();
        for line in text.lines().skip(1) {
            let mut cols = line.split(',');
            let iter: usize = cols.next().unwrap().parse().unwrap();
            let lr: f64 = cols.next().unwrap().parse().unwrap();
            assert_eq!(lr.to_bits(), cfg.lr_at(iter).unwrap().to_bits());
        }
    }

    #[test]
    fn evaluate_round_trips_weights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_cfg(dir.path(), 5);
        let out = train(&cfg).unwrap();
        let m = evaluate(&cfg, &out.weights_path).unwrap();
        assert!(m.accuracy.unwrap() >= 0.0);
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_cfg(dir.path(), 6);
        cfg.lr_start = 1e9; // guaranteed blow-up
        cfg.lr_end = 1e8;
        let err = train(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("iteration"), "{msg}");
        assert!(msg.contains("lr"), "{msg}");
    }

    #[test]
    fn segmentation_fine_tune_keeps_stats_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            spec: "16-1-0-0-0-0-1-1".into(),
            task: Task::Segment,
            widths: Some([4, 6, 8, 10, 12, 16, 24]),
            classes: 3,
            lr_start: 0.01,
            lr_end: 1e-4,
            total_iters: 4,
            batch_size: 2,
            seed: 7,
            dataset: "segblobs:n=8,size=24,classes=2".into(),
            out_dir: dir.path().to_path_buf(),
            crop: 24,
            log_interval: 1,
            ..Default::default()
        };
        // train writes weights; running-statistic tensors must be identical
        // to the initial identity estimates (frozen contract)
        let out = train(&cfg).unwrap();
        let state = weights::load(&out.weights_path).unwrap();
        for (name, t) in &state {
            if name.ends_with(".bn.mean") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} moved");
            }
            if name.ends_with(".bn.var") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name} moved");
            }
        }
        assert!(out.final_loss.is_finite());
        let m = evaluate(&cfg, &out.weights_path).unwrap();
        assert!(m.mean_iou.unwrap() >= 0.0);
    }

    #[test]
    fn eval_crop_convention() {
        assert_eq!(default_eval_crop(224), 320);
        assert_eq!(default_eval_crop(112), 160);
        assert_eq!(default_eval_crop(56), 80);
    }
}
