//! Materialized networks: parameters, initialization, forward recording,
//! and plain residual chains for analysis.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::arch::{
    plan, EntryDownsample, LevelPlan, NetPlan, NetworkSpec, RfStep, StagePlan, UnitPlan,
};
use crate::error::{Error, Result};
use crate::ops::norm::{BnMode, RunningStats};
use crate::ops::{same_padding, ConvGeom};
use crate::tape::{GradStore, Tape, Var};
use crate::tensor::Tensor;

/// Statistics/regularization mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates updated, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Fine-tuning: running statistics stay fixed while dropout is active.
    Frozen,
}

impl Mode {
    pub fn bn_mode(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
            Mode::Frozen => BnMode::Frozen,
        }
    }

    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::Frozen)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    TwoStage,
    Bottleneck,
}

#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            stats: RunningStats::new(channels),
        }
    }
}

/// One convolution stage with its optional pre-activation parameters.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub geom: StagePlan,
    pub bn: Option<BnParams>,
    pub weight: Tensor,
}

impl StageParams {
    fn init(p: &StagePlan, rng: &mut ChaCha20Rng, gamma_scale: f64) -> Self {
        let fan_in = (p.in_ch * p.kernel * p.kernel) as f64;
        // rectified stages get the ReLU variance gain
        let std = if p.preact { (2.0 / fan_in).sqrt() } else { (1.0 / fan_in).sqrt() };
        let mut weight = Tensor::zeros(&[p.out_ch, p.in_ch, p.kernel, p.kernel]);
        weight.fill_normal(std, rng);
        let bn = p.preact.then(|| {
            let mut bn = BnParams::new(p.in_ch);
            if gamma_scale != 1.0 {
                bn.gamma = Tensor::full(&[p.in_ch], gamma_scale);
            }
            bn
        });
        StageParams { geom: *p, bn, weight }
    }

    pub fn conv_geom(&self) -> ConvGeom {
        ConvGeom {
            stride: self.geom.stride,
            padding: self.geom.padding(),
            dilation: self.geom.dilation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub kind: UnitKind,
    pub unit_id: usize,
    pub stages: Vec<StageParams>,
    pub projection: Option<StageParams>,
    /// Dropout rate on the unit output, set by the dense-prediction rewrite.
    pub dropout: Option<f64>,
}

impl ResidualUnit {
    fn init(p: &UnitPlan, rng: &mut ChaCha20Rng, gamma_scale: f64) -> Self {
        ResidualUnit {
            kind: p.kind,
            unit_id: p.unit_id,
            stages: p.stages.iter().map(|s| StageParams::init(s, rng, gamma_scale)).collect(),
            projection: p.projection.as_ref().map(|s| StageParams::init(s, rng, 1.0)),
            dropout: None,
        }
    }

    /// Evaluate the trainable branch f_i alone (no shortcut, no add).
    /// Normalization runs in frozen mode so the evaluation is a
    /// deterministic function of the input.
    pub fn branch(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut rec =
            Recorder { mode: Mode::Frozen, rng: None, params: Vec::new(), bn_sites: Vec::new(), level_outputs: Vec::new() };
        let mut cur = x;
        for (s, stage) in self.stages.iter().enumerate() {
            cur = stage_rec(
                &mut rec,
                tape,
                &format!("branch.s{s}"),
                stage,
                Some(BnSite::Stage { level: 0, unit: 0, stage: s }),
                cur,
            )?;
        }
        Ok(cur)
    }

    /// Evaluate the shortcut alone: identity, or the projection convolution.
    pub fn shortcut(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.projection {
            None => Ok(x),
            Some(p) => {
                let w = tape.param("proj.w", p.weight.clone());
                tape.conv2d(x, w, p.conv_geom())
            }
        }
    }
}

/// Where a batchnorm node came from, for post-backward stat updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnSite {
    Stage { level: usize, unit: usize, stage: usize },
    Top,
}

struct Recorder<'r> {
    mode: Mode,
    rng: Option<&'r mut ChaCha20Rng>,
    params: Vec<(String, Var)>,
    bn_sites: Vec<(BnSite, Var)>,
    level_outputs: Vec<Var>,
}

/// Everything one recorded forward pass exposes.
pub struct ForwardTrace {
    /// Class logits, [N, classes].
    pub output: Var,
    /// Feature map before global pooling, [N, C, H, W].
    pub features: Var,
    /// Output of each level, for shape tracing.
    pub level_outputs: Vec<Var>,
    /// Parameter leaf vars by container name.
    pub params: Vec<(String, Var)>,
    bn_sites: Vec<(BnSite, Var)>,
}

impl ForwardTrace {
    /// Gradients keyed by parameter name, taken out of the store.
    pub fn grads_by_name(&self, grads: &mut GradStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Level {
    pub entry: EntryDownsample,
    pub width: usize,
    pub units: Vec<ResidualUnit>,
}

/// A built classification network.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub classes: usize,
    pub stem: StageParams,
    pub levels: Vec<Level>,
    pub top_bn: BnParams,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

impl Network {
    /// Materialize a spec with seeded variance-scaling initialization.
    pub fn build(spec: &NetworkSpec, classes: usize, seed: u64) -> Result<Network> {
        let p = plan(spec, classes)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(Self::from_plan(spec.clone(), &p, &mut rng))
    }

    fn from_plan(spec: NetworkSpec, p: &NetPlan, rng: &mut ChaCha20Rng) -> Network {
        let stem = StageParams::init(&p.stem, rng, 1.0);
        let levels: Vec<Level> = p
            .levels
            .iter()
            .map(|l: &LevelPlan| Level {
                entry: l.entry,
                width: l.width,
                units: l.units.iter().map(|u| ResidualUnit::init(u, rng, 1.0)).collect(),
            })
            .collect();
        let top_bn = BnParams::new(p.feature_dim);
        let mut fc_w = Tensor::zeros(&[p.classes, p.feature_dim]);
        fc_w.fill_normal((1.0 / p.feature_dim as f64).sqrt(), rng);
        let fc_b = Tensor::zeros(&[p.classes]);
        Network { spec, classes: p.classes, stem, levels, top_bn, fc_w, fc_b }
    }

    /// Global residual-unit ids present, in forward order.
    pub fn unit_ids(&self) -> Vec<usize> {
        self.levels
            .iter()
            .flat_map(|l| l.units.iter().map(|u| u.unit_id))
            .collect()
    }

    pub fn unit_count(&self) -> usize {
        self.levels.iter().map(|l| l.units.len()).sum()
    }

    /// Mark every running statistic usable as-is (fresh networks only expose
    /// eval/frozen modes after training or an explicit initialization).
    pub fn init_identity_stats(&mut self) {
        self.visit_bn_mut(&mut |bn| bn.stats.init_identity());
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BnParams)) {
        for level in &mut self.levels {
            for unit in &mut level.units {
                for stage in &mut unit.stages {
                    if let Some(bn) = &mut stage.bn {
                        f(bn);
                    }
                }
            }
        }
        f(&mut self.top_bn);
    }

    /// Record a full forward pass: stem, levels, top normalization, global
    /// average pooling and the linear classifier.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<ForwardTrace> {
        self.forward_with(tape, x, mode, None)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: Option<&mut ChaCha20Rng>,
    ) -> Result<ForwardTrace> {
        let mut rec = Recorder { mode, rng, params: Vec::new(), bn_sites: Vec::new(), level_outputs: Vec::new() };
        let features = self.features_rec(&mut rec, tape, x)?;
        let pooled = tape.global_avgpool(features)?;
        let w = tape.param("fc.w", self.fc_w.clone());
        let b = tape.param("fc.b", self.fc_b.clone());
        rec.params.push(("fc.w".into(), w));
        rec.params.push(("fc.b".into(), b));
        let output = tape.linear(pooled, w, b)?;
        Ok(ForwardTrace {
            output,
            features,
            level_outputs: rec.level_outputs,
            params: rec.params,
            bn_sites: rec.bn_sites,
        })
    }

    /// Record the convolutional trunk only: everything up to and including
    /// the final normalize-rectify, skipping global pooling and the
    /// classifier. `output` aliases `features`.
    pub fn forward_features_with(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: Option<&mut ChaCha20Rng>,
    ) -> Result<ForwardTrace> {
        let mut rec = Recorder { mode, rng, params: Vec::new(), bn_sites: Vec::new(), level_outputs: Vec::new() };
        let features = self.features_rec(&mut rec, tape, x)?;
        Ok(ForwardTrace {
            output: features,
            features,
            level_outputs: rec.level_outputs,
            params: rec.params,
            bn_sites: rec.bn_sites,
        })
    }

    fn features_rec(&self, rec: &mut Recorder, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param("stem.w", self.stem.weight.clone());
        rec.params.push(("stem.w".into(), w));
        let mut cur = tape.conv2d(x, w, self.stem.conv_geom())?;
        for (lv, level) in self.levels.iter().enumerate() {
            if let EntryDownsample::Pool { stride, dilation } = level.entry {
                let geom = ConvGeom {
                    stride,
                    padding: same_padding(3, dilation),
                    dilation,
                };
                cur = tape.maxpool(cur, 3, geom)?;
            }
            for (u, unit) in level.units.iter().enumerate() {
                cur = unit_forward(rec, tape, lv, u, unit, cur)?;
            }
            rec.level_outputs.push(cur);
        }
        // final normalize-rectify before pooling
        let bn_var = bn_forward(rec, tape, "top", &self.top_bn, cur, BnSite::Top)?;
        Ok(tape.relu(bn_var))
    }

    /// Fold batch statistics computed by a train-mode pass into the running
    /// estimates.
    pub fn apply_bn_updates(&mut self, tape: &Tape, trace: &ForwardTrace) {
        for (site, var) in &trace.bn_sites {
            let Some((mean, var_stats)) = tape.batch_stats(*var) else { continue };
            let bn = match site {
                BnSite::Top => &mut self.top_bn,
                BnSite::Stage { level, unit, stage } => {
                    match self.levels[*level].units[*unit].stages[*stage].bn.as_mut() {
                        Some(bn) => bn,
                        None => continue,
                    }
                }
            };
            let (mean, var_stats) = (mean.to_vec(), var_stats.to_vec());
            bn.stats.update(&mean, &var_stats);
        }
    }

    /// Apply `f` to every trainable parameter with its container name.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("stem.w", &mut self.stem.weight);
        for lv in 0..self.levels.len() {
            for u in 0..self.levels[lv].units.len() {
                let base = format!("l{}.u{}", lv + 1, u);
                let unit = &mut self.levels[lv].units[u];
                for (s, stage) in unit.stages.iter_mut().enumerate() {
                    if let Some(bn) = &mut stage.bn {
                        f(&format!("{base}.s{s}.bn.gamma"), &mut bn.gamma);
                        f(&format!("{base}.s{s}.bn.beta"), &mut bn.beta);
                    }
                    f(&format!("{base}.s{s}.w"), &mut stage.weight);
                }
                if let Some(proj) = &mut unit.projection {
                    f(&format!("{base}.proj.w"), &mut proj.weight);
                }
            }
        }
        f("top.bn.gamma", &mut self.top_bn.gamma);
        f("top.bn.beta", &mut self.top_bn.beta);
        f("fc.w", &mut self.fc_w);
        f("fc.b", &mut self.fc_b);
    }

    /// Apply `f` to every trainable parameter with its container name.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("stem.w", &self.stem.weight);
        for (lv, level) in self.levels.iter().enumerate() {
            for (u, unit) in level.units.iter().enumerate() {
                let base = format!("l{}.u{}", lv + 1, u);
                for (s, stage) in unit.stages.iter().enumerate() {
                    if let Some(bn) = &stage.bn {
                        f(&format!("{base}.s{s}.bn.gamma"), &bn.gamma);
                        f(&format!("{base}.s{s}.bn.beta"), &bn.beta);
                    }
                    f(&format!("{base}.s{s}.w"), &stage.weight);
                }
                if let Some(proj) = &unit.projection {
                    f(&format!("{base}.proj.w"), &proj.weight);
                }
            }
        }
        f("top.bn.gamma", &self.top_bn.gamma);
        f("top.bn.beta", &self.top_bn.beta);
        f("fc.w", &self.fc_w);
        f("fc.b", &self.fc_b);
    }

    /// All persistent tensors (parameters and running statistics), keyed by
    /// container name — the exchange-format image of this network.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            out.insert(name.to_string(), t.clone());
        });
        let mut push_stats = |base: &str, bn: &BnParams| {
            out.insert(format!("{base}.bn.mean"), stats_tensor(&bn.stats.mean));
            out.insert(format!("{base}.bn.var"), stats_tensor(&bn.stats.var));
        };
        for (lv, level) in self.levels.iter().enumerate() {
            for (u, unit) in level.units.iter().enumerate() {
                for (s, stage) in unit.stages.iter().enumerate() {
                    if let Some(bn) = &stage.bn {
                        push_stats(&format!("l{}.u{}.s{}", lv + 1, u, s), bn);
                    }
                }
            }
        }
        push_stats("top", &self.top_bn);
        out
    }

    /// Load parameters and running statistics saved by [`state_tensors`].
    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_params_mut(&mut |name, t| {
            match tensors.get(name) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => missing.push(format!(
                    "{name}: shape {:?} in file, {:?} in network",
                    src.shape(),
                    t.shape()
                )),
                None => missing.push(format!("{name}: missing")),
            }
        });
        if !missing.is_empty() {
            return Err(Error::WeightFormat(format!(
                "incompatible weights: {}",
                missing.join("; ")
            )));
        }
        // running statistics, where present
        let load_stats = |base: String, bn: &mut BnParams| {
            if let (Some(m), Some(v)) =
                (tensors.get(&format!("{base}.bn.mean")), tensors.get(&format!("{base}.bn.var")))
            {
                bn.stats.set(m.data().to_vec(), v.data().to_vec());
            }
        };
        for lv in 0..self.levels.len() {
            for u in 0..self.levels[lv].units.len() {
                for s in 0..self.levels[lv].units[u].stages.len() {
                    let base = format!("l{}.u{}.s{}", lv + 1, u, s);
                    if let Some(bn) = self.levels[lv].units[u].stages[s].bn.as_mut() {
                        load_stats(base, bn);
                    }
                }
            }
        }
        load_stats("top".into(), &mut self.top_bn);
        Ok(())
    }

    /// Main-path layers (entries and convolution stages) in forward order,
    /// with their window geometry. Shortcut branches are not walked; the
    /// receptive field of a layer is computed along the non-shortcut path.
    pub fn main_path(&self) -> Vec<(String, RfStep)> {
        let mut steps = Vec::new();
        steps.push(("stem".to_string(), RfStep::new(3, self.stem.geom.stride, 1)));
        for (lv, level) in self.levels.iter().enumerate() {
            if let EntryDownsample::Pool { stride, dilation } = level.entry {
                steps.push((format!("l{}.entry", lv + 1), RfStep::new(3, stride, dilation)));
            }
            for (u, unit) in level.units.iter().enumerate() {
                for (s, stage) in unit.stages.iter().enumerate() {
                    steps.push((
                        format!("l{}.u{}.s{}", lv + 1, u, s),
                        RfStep::new(stage.geom.kernel, stage.geom.stride, stage.geom.dilation),
                    ));
                }
            }
        }
        steps
    }

    /// Receptive field (input pixels) and jump of the named main-path layer.
    pub fn receptive_field_at(&self, layer: &str) -> Result<(u64, u64)> {
        let path = self.main_path();
        let pos = path
            .iter()
            .position(|(name, _)| name == layer)
            .ok_or_else(|| Error::Build(format!("no main-path layer named {layer}")))?;
        let steps: Vec<RfStep> = path[..=pos].iter().map(|(_, s)| *s).collect();
        Ok(crate::arch::receptive_field(&steps))
    }
}

fn stats_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("stats tensor")
}

fn bn_forward(
    rec: &mut Recorder,
    tape: &mut Tape,
    base: &str,
    bn: &BnParams,
    x: Var,
    site: BnSite,
) -> Result<Var> {
    let gamma = tape.param(format!("{base}.bn.gamma"), bn.gamma.clone());
    let beta = tape.param(format!("{base}.bn.beta"), bn.beta.clone());
    rec.params.push((format!("{base}.bn.gamma"), gamma));
    rec.params.push((format!("{base}.bn.beta"), beta));
    let out = tape.batchnorm(x, gamma, beta, &bn.stats, rec.mode.bn_mode())?;
    rec.bn_sites.push((site, out));
    Ok(out)
}

fn stage_rec(
    rec: &mut Recorder,
    tape: &mut Tape,
    base: &str,
    stage: &StageParams,
    site: Option<BnSite>,
    x: Var,
) -> Result<Var> {
    let mut cur = x;
    if let Some(bn) = &stage.bn {
        let bn_var = bn_forward(rec, tape, base, bn, cur, site.expect("bn site"))?;
        cur = tape.relu(bn_var);
    }
    let w = tape.param(format!("{base}.w"), stage.weight.clone());
    rec.params.push((format!("{base}.w"), w));
    tape.conv2d(cur, w, stage.conv_geom())
}

fn unit_forward(
    rec: &mut Recorder,
    tape: &mut Tape,
    lv: usize,
    u: usize,
    unit: &ResidualUnit,
    x: Var,
) -> Result<Var> {
    let base = format!("l{}.u{}", lv + 1, u);
    let mut branch = x;
    for (s, stage) in unit.stages.iter().enumerate() {
        branch = stage_rec(
            rec,
            tape,
            &format!("{base}.s{s}"),
            stage,
            Some(BnSite::Stage { level: lv, unit: u, stage: s }),
            branch,
        )?;
    }
    let shortcut = match &unit.projection {
        None => x,
        Some(p) => {
            let w = tape.param(format!("{base}.proj.w"), p.weight.clone());
            rec.params.push((format!("{base}.proj.w"), w));
            tape.conv2d(x, w, p.conv_geom())?
        }
    };
    let mut out = tape.residual_add(branch, shortcut, unit.unit_id)?;
    if let Some(rate) = unit.dropout {
        if rec.mode.dropout_active() {
            let rng = rec
                .rng
                .as_deref_mut()
                .ok_or_else(|| Error::Config("dropout requires an RNG in this mode".into()))?;
            out = tape.dropout(out, rate, rng);
        }
    }
    Ok(out)
}

/// A plain stack of identity-shortcut residual units at constant width and
/// resolution: the object the expansion, decomposition and path-profiling
/// analyses operate on. Batch normalization inside a chain always runs in
/// frozen mode so every evaluation is a deterministic function.
#[derive(Debug, Clone)]
pub struct Chain {
    pub width: usize,
    pub units: Vec<ResidualUnit>,
}

/// Forward trace of a chain: the output plus each unit's output.
pub struct ChainTrace {
    pub output: Var,
    /// y_0 (the input) followed by y_1 .. y_d.
    pub unit_outputs: Vec<Var>,
    pub params: Vec<(String, Var)>,
}

impl ChainTrace {
    /// Gradients keyed by parameter name, taken out of the store.
    pub fn grads_by_name(&self, grads: &mut GradStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

impl Chain {
    /// Random two-stage units (3x3, pre-activation, frozen identity
    /// statistics). `gamma_scale` scales the normalization gain: values
    /// below 1 make every branch contractive.
    pub fn random_two_stage(d: usize, channels: usize, seed: u64, gamma_scale: f64) -> Chain {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let units = (1..=d)
            .map(|unit_id| {
                let p = UnitPlan {
                    kind: UnitKind::TwoStage,
                    unit_id,
                    stages: vec![
                        StagePlan {
                            in_ch: channels,
                            out_ch: channels,
                            kernel: 3,
                            stride: 1,
                            dilation: 1,
                            preact: true,
                        };
                        2
                    ],
                    projection: None,
                };
                let mut unit = ResidualUnit::init(&p, &mut rng, gamma_scale);
                for stage in &mut unit.stages {
                    if let Some(bn) = &mut stage.bn {
                        bn.stats.init_identity();
                    }
                }
                unit
            })
            .collect();
        Chain { width: channels, units }
    }

    /// Units whose branch is a single linear 1x1 convolution with weight
    /// `scale * I`: branch Jacobians are exactly `scale * I`.
    pub fn linear_scaled_identity(d: usize, channels: usize, scale: f64) -> Chain {
        let units = (1..=d)
            .map(|unit_id| {
                let mut weight = Tensor::zeros(&[channels, channels, 1, 1]);
                for c in 0..channels {
                    weight.data_mut()[c * channels + c] = scale;
                }
                ResidualUnit {
                    kind: UnitKind::TwoStage,
                    unit_id,
                    stages: vec![StageParams {
                        geom: StagePlan {
                            in_ch: channels,
                            out_ch: channels,
                            kernel: 1,
                            stride: 1,
                            dilation: 1,
                            preact: false,
                        },
                        bn: None,
                        weight,
                    }],
                    projection: None,
                    dropout: None,
                }
            })
            .collect();
        Chain { width: channels, units }
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    /// True when every shortcut is an identity and no stage changes
    /// resolution.
    pub fn is_identity_chain(&self) -> bool {
        self.units
            .iter()
            .all(|u| u.projection.is_none() && u.stages.iter().all(|s| s.geom.stride == 1))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_trace(tape, x)?.output)
    }

    pub fn forward_trace(&self, tape: &mut Tape, x: Var) -> Result<ChainTrace> {
        let mut rec = Recorder { mode: Mode::Frozen, rng: None, params: Vec::new(), bn_sites: Vec::new(), level_outputs: Vec::new() };
        let mut outputs = vec![x];
        let mut cur = x;
        for (i, unit) in self.units.iter().enumerate() {
            cur = unit_forward(&mut rec, tape, 0, i, unit, cur)?;
            outputs.push(cur);
        }
        Ok(ChainTrace { output: cur, unit_outputs: outputs, params: rec.params })
    }

    /// Evaluate unit `i`'s trainable branch f_{i+1} on an arbitrary input.
    pub fn branch(&self, tape: &mut Tape, i: usize, x: Var) -> Result<Var> {
        let mut rec = Recorder { mode: Mode::Frozen, rng: None, params: Vec::new(), bn_sites: Vec::new(), level_outputs: Vec::new() };
        let unit = &self.units[i];
        let mut cur = x;
        for (s, stage) in unit.stages.iter().enumerate() {
            cur = stage_rec(
                &mut rec,
                tape,
                &format!("u{i}.s{s}"),
                stage,
                Some(BnSite::Stage { level: 0, unit: i, stage: s }),
                cur,
            )?;
        }
        Ok(cur)
    }
}
