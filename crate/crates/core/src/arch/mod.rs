//! The network family: naming grammar, structural planning, statistics and
//! receptive-field arithmetic.
//!
//! A network name is `input-n1-n2-n3-n4-n5-n6-n7`: the training input size
//! followed by the residual-unit count of each of the seven levels. Levels
//! 1-5 stack two-stage units (two 3x3 convolution stages each); levels 6 and
//! 7 stack bottleneck units (1x1, 3x3, 1x1). Every stage is pre-activation:
//! normalize, rectify, convolve.

mod network;
mod rf;

pub use network::{
    BnParams, Chain, ChainTrace, ForwardTrace, Mode, Network, ResidualUnit, StageParams, UnitKind,
};
pub use rf::{receptive_field, RfStep};

use crate::error::{Error, Result};

pub const LEVELS: usize = 7;

/// Feature-map edge below which no further downsampling is placed.
const MIN_MAP: usize = 7;

/// Default outer widths for levels 1-7.
pub const DEFAULT_WIDTHS: [usize; LEVELS] = [64, 128, 256, 512, 1024, 2048, 4096];

/// How a level's entry reduces resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryDownsample {
    /// No resolution change at this level's entry.
    None,
    /// Max pooling, kernel 3. `stride`/`dilation` start at 2/1 and are
    /// rewritten by the dense-prediction transform.
    Pool { stride: usize, dilation: usize },
    /// The level's first convolution (and its projection) carries stride 2.
    FirstConvStride,
}

impl EntryDownsample {
    pub fn downsamples(self) -> bool {
        match self {
            EntryDownsample::None => false,
            EntryDownsample::Pool { stride, .. } => stride > 1,
            EntryDownsample::FirstConvStride => true,
        }
    }

    pub fn is_pool(self) -> bool {
        matches!(self, EntryDownsample::Pool { .. })
    }
}

/// Parsed network name plus the structural knobs the name does not encode.
/// `level_widths` and `downsample` carry defaults; they are plain fields so
/// desk-scale configurations can shrink widths before building.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub units: [usize; LEVELS],
    pub level_widths: [usize; LEVELS],
    pub downsample: [EntryDownsample; LEVELS],
}

/// Strict decimal field: digits only, no sign, no leading zeros (so that
/// parse/serialize is an exact round trip on accepted names).
fn parse_field(s: &str, index: usize) -> Result<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Parse(format!(
            "field {index} of network name is not a non-negative integer: {s:?}"
        )));
    }
    if s.len() > 1 && s.starts_with('0') {
        return Err(Error::Parse(format!(
            "field {index} of network name has a leading zero: {s:?}"
        )));
    }
    s.parse::<usize>()
        .map_err(|_| Error::Parse(format!("field {index} of network name overflows: {s:?}")))
}

/// Default downsample placement: each level past the first halves the map at
/// its entry (kernel-3 stride-2 pooling) until the map is no larger than 7.
pub fn default_downsample(input_size: usize) -> [EntryDownsample; LEVELS] {
    let mut placement = [EntryDownsample::None; LEVELS];
    let mut size = input_size;
    for slot in placement.iter_mut().skip(1) {
        if size > MIN_MAP {
            *slot = EntryDownsample::Pool { stride: 2, dilation: 1 };
            size = pool_out(size);
        }
    }
    placement
}

/// Output extent of the kernel-3 stride-2 pad-1 downsample: ceil(s / 2).
fn pool_out(s: usize) -> usize {
    (s - 1) / 2 + 1
}

impl NetworkSpec {
    pub fn parse(name: &str) -> Result<Self> {
        let fields: Vec<&str> = name.split('-').collect();
        if fields.len() != 1 + LEVELS {
            return Err(Error::Parse(format!(
                "network name must have {} dash-separated fields, got {}: {name:?}",
                1 + LEVELS,
                fields.len()
            )));
        }
        let input_size = parse_field(fields[0], 0)?;
        if input_size == 0 {
            return Err(Error::Parse("field 0 (input size) must be positive".into()));
        }
        let mut units = [0usize; LEVELS];
        for (i, slot) in units.iter_mut().enumerate() {
            *slot = parse_field(fields[i + 1], i + 1)?;
        }
        Ok(NetworkSpec {
            input_size,
            units,
            level_widths: DEFAULT_WIDTHS,
            downsample: default_downsample(input_size),
        })
    }

    /// The exact naming string this spec was parsed from.
    pub fn name(&self) -> String {
        let mut s = self.input_size.to_string();
        for u in self.units {
            s.push('-');
            s.push_str(&u.to_string());
        }
        s
    }

    pub fn with_widths(mut self, widths: [usize; LEVELS]) -> Self {
        self.level_widths = widths;
        self
    }

    pub fn unit_count(&self) -> usize {
        self.units.iter().sum()
    }

    /// Trainable-layer depth: two convolutions per two-stage unit, three per
    /// bottleneck unit, plus the stem convolution and the final classifier.
    pub fn depth(&self) -> usize {
        let two_stage: usize = self.units[..5].iter().sum();
        let bottleneck: usize = self.units[5..].iter().sum();
        2 * two_stage + 3 * bottleneck + 2
    }
}

/// Kind of a unit at a given level (0-based).
pub fn level_unit_kind(level: usize) -> UnitKind {
    if level >= 5 {
        UnitKind::Bottleneck
    } else {
        UnitKind::TwoStage
    }
}

/// One convolution stage in the structural plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Whether the stage is preceded by its own normalize-rectify pair.
    pub preact: bool,
}

impl StagePlan {
    pub fn padding(&self) -> usize {
        crate::ops::same_padding(self.kernel, self.dilation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitPlan {
    pub kind: UnitKind,
    pub unit_id: usize,
    pub stages: Vec<StagePlan>,
    /// 1x1 projection on the shortcut when the width changes.
    pub projection: Option<StagePlan>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPlan {
    pub entry: EntryDownsample,
    pub width: usize,
    pub units: Vec<UnitPlan>,
    /// Feature-map edge inside this level, for the nominal input size.
    pub map_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetPlan {
    pub stem: StagePlan,
    pub levels: Vec<LevelPlan>,
    pub feature_dim: usize,
    pub classes: usize,
    pub final_map: usize,
}

/// Expand a spec into the full per-layer structural plan.
pub fn plan(spec: &NetworkSpec, classes: usize) -> Result<NetPlan> {
    if classes == 0 {
        return Err(Error::Build("classifier needs at least one class".into()));
    }
    let stem = StagePlan {
        in_ch: 3,
        out_ch: spec.level_widths[0],
        kernel: 3,
        stride: 1,
        dilation: 1,
        preact: false,
    };
    let mut levels = Vec::with_capacity(LEVELS);
    let mut prev_width = spec.level_widths[0];
    let mut size = spec.input_size;
    let mut next_unit_id = 1usize;
    for lv in 0..LEVELS {
        let entry = spec.downsample[lv];
        if entry.downsamples() {
            size = pool_out(size);
        }
        let width = spec.level_widths[lv];
        let kind = level_unit_kind(lv);
        let mut units = Vec::with_capacity(spec.units[lv]);
        for u in 0..spec.units[lv] {
            let in_ch = if u == 0 { prev_width } else { width };
            let unit = plan_unit(kind, next_unit_id, in_ch, width, lv)?;
            next_unit_id += 1;
            units.push(unit);
        }
        if !units.is_empty() {
            prev_width = width;
        }
        levels.push(LevelPlan { entry, width, units, map_size: size });
    }
    let feature_dim = prev_width;
    Ok(NetPlan { stem, levels, feature_dim, classes, final_map: size })
}

fn plan_unit(
    kind: UnitKind,
    unit_id: usize,
    in_ch: usize,
    out_ch: usize,
    level: usize,
) -> Result<UnitPlan> {
    let stages = match kind {
        UnitKind::TwoStage => vec![
            StagePlan { in_ch, out_ch, kernel: 3, stride: 1, dilation: 1, preact: true },
            StagePlan { in_ch: out_ch, out_ch, kernel: 3, stride: 1, dilation: 1, preact: true },
        ],
        UnitKind::Bottleneck => {
            if out_ch < 4 {
                return Err(Error::Build(format!(
                    "level {} bottleneck width {out_ch} is too narrow (needs >= 4)",
                    level + 1
                )));
            }
            let mid = out_ch / 4;
            vec![
                StagePlan { in_ch, out_ch: mid, kernel: 1, stride: 1, dilation: 1, preact: true },
                StagePlan { in_ch: mid, out_ch: mid, kernel: 3, stride: 1, dilation: 1, preact: true },
                StagePlan { in_ch: mid, out_ch, kernel: 1, stride: 1, dilation: 1, preact: true },
            ]
        }
    };
    let projection = (in_ch != out_ch).then_some(StagePlan {
        in_ch,
        out_ch,
        kernel: 1,
        stride: 1,
        dilation: 1,
        preact: false,
    });
    Ok(UnitPlan { kind, unit_id, stages, projection })
}

/// What a planned tensor is for; running statistics are not trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    MainConv,
    ProjectionConv,
    BnAffine,
    BnRunningStat,
    Classifier,
}

impl TensorKind {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorKind::BnRunningStat)
    }
}

/// Enumerate every tensor the plan materializes, with its container name.
pub fn tensor_entries(p: &NetPlan) -> Vec<(String, Vec<usize>, TensorKind)> {
    let mut out = Vec::new();
    let conv_shape =
        |s: &StagePlan| vec![s.out_ch, s.in_ch, s.kernel, s.kernel];
    out.push(("stem.w".to_string(), conv_shape(&p.stem), TensorKind::MainConv));
    for (lv, level) in p.levels.iter().enumerate() {
        for (u, unit) in level.units.iter().enumerate() {
            let base = format!("l{}.u{}", lv + 1, u);
            for (s, stage) in unit.stages.iter().enumerate() {
                if stage.preact {
                    push_bn(&mut out, &format!("{base}.s{s}"), stage.in_ch);
                }
                out.push((format!("{base}.s{s}.w"), conv_shape(stage), TensorKind::MainConv));
            }
            if let Some(proj) = &unit.projection {
                out.push((
                    format!("{base}.proj.w"),
                    conv_shape(proj),
                    TensorKind::ProjectionConv,
                ));
            }
        }
    }
    push_bn(&mut out, "top", p.feature_dim);
    out.push((
        "fc.w".to_string(),
        vec![p.classes, p.feature_dim],
        TensorKind::Classifier,
    ));
    out.push(("fc.b".to_string(), vec![p.classes], TensorKind::Classifier));
    out
}

fn push_bn(out: &mut Vec<(String, Vec<usize>, TensorKind)>, base: &str, ch: usize) {
    out.push((format!("{base}.bn.gamma"), vec![ch], TensorKind::BnAffine));
    out.push((format!("{base}.bn.beta"), vec![ch], TensorKind::BnAffine));
    out.push((format!("{base}.bn.mean"), vec![ch], TensorKind::BnRunningStat));
    out.push((format!("{base}.bn.var"), vec![ch], TensorKind::BnRunningStat));
}

/// Structural statistics of a spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkStats {
    pub name: String,
    pub depth: usize,
    pub unit_count: usize,
    pub param_count: usize,
    pub per_level_map: [usize; LEVELS],
    pub final_map: usize,
    pub feature_dim: usize,
}

/// Depth, unit and parameter counts plus per-level map sizes. Parameters are
/// counted by enumerating the plan's tensors, not from a closed form.
pub fn stats(spec: &NetworkSpec, classes: usize) -> Result<NetworkStats> {
    let p = plan(spec, classes)?;
    let param_count = tensor_entries(&p)
        .iter()
        .filter(|(_, _, k)| k.trainable())
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum();
    let mut per_level_map = [0usize; LEVELS];
    for (i, l) in p.levels.iter().enumerate() {
        per_level_map[i] = l.map_size;
    }
    Ok(NetworkStats {
        name: spec.name(),
        depth: spec.depth(),
        unit_count: spec.unit_count(),
        param_count,
        per_level_map,
        final_map: p.final_map,
        feature_dim: p.feature_dim,
    })
}

/// Count of trainable convolutions on the main path (stem and unit stages;
/// projections sit on shortcuts and do not count toward depth) plus the
/// classifier: an independent cross-check of [`NetworkSpec::depth`].
pub fn depth_from_plan(p: &NetPlan) -> usize {
    tensor_entries(p)
        .iter()
        .filter(|(_, _, k)| *k == TensorKind::MainConv)
        .count()
        + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_a_parses_to_seventeen_units_depth_38() {
        let spec = NetworkSpec::parse("224-0-3-3-6-3-1-1").unwrap();
        assert_eq!(spec.units, [0, 3, 3, 6, 3, 1, 1]);
        assert_eq!(spec.unit_count(), 17);
        assert_eq!(spec.depth(), 38);
    }

    #[test]
    fn published_depths() {
        for (name, depth) in [
            ("56-1-1-1-1-9-1-1", 34),
            ("112-1-1-1-1-5-1-1", 26),
            ("112-1-1-1-1-9-1-1", 34),
            ("112-1-1-1-1-13-1-1", 42),
            ("224-0-1-1-1-1-1-1", 16),
            ("224-0-1-1-1-3-1-1", 20),
            ("224-0-3-3-6-3-1-1", 38),
        ] {
            assert_eq!(NetworkSpec::parse(name).unwrap().depth(), depth, "{name}");
        }
    }

    #[test]
    fn parse_errors_name_the_field() {
        let e = NetworkSpec::parse("224-0-3-3-6-3-1").unwrap_err().to_string();
        assert!(e.contains("8 dash-separated fields"), "{e}");
        let e = NetworkSpec::parse("224-0-x-3-6-3-1-1").unwrap_err().to_string();
        assert!(e.contains("field 2"), "{e}");
        let e = NetworkSpec::parse("224-0--3-3-6-3-1-1").unwrap_err().to_string();
        assert!(e.contains("field"), "{e}");
        let e = NetworkSpec::parse("0-1-1-1-1-1-1-1").unwrap_err().to_string();
        assert!(e.contains("field 0"), "{e}");
        assert!(NetworkSpec::parse("224-0-03-3-6-3-1-1").is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        for name in ["224-0-3-3-6-3-1-1", "56-1-1-1-1-9-1-1", "8-0-0-0-0-0-1-1"] {
            assert_eq!(NetworkSpec::parse(name).unwrap().name(), name);
        }
    }

    #[test]
    fn downsample_counts_per_family() {
        let count = |size: usize| {
            default_downsample(size).iter().filter(|e| e.downsamples()).count()
        };
        assert_eq!(count(224), 5);
        assert_eq!(count(112), 4);
        assert_eq!(count(56), 3);
    }

    #[test]
    fn map_sizes_for_the_three_families() {
        let sizes = |name: &str| {
            let spec = NetworkSpec::parse(name).unwrap();
            stats(&spec, 10).unwrap().per_level_map
        };
        assert_eq!(sizes("224-0-3-3-6-3-1-1"), [224, 112, 56, 28, 14, 7, 7]);
        assert_eq!(sizes("112-1-1-1-1-5-1-1"), [112, 56, 28, 14, 7, 7, 7]);
        assert_eq!(sizes("56-1-1-1-1-9-1-1"), [56, 28, 14, 7, 7, 7, 7]);
    }

    #[test]
    fn unit_count_example() {
        assert_eq!(NetworkSpec::parse("112-1-1-1-1-5-1-1").unwrap().unit_count(), 11);
    }

    #[test]
    fn degenerate_all_zero_lower_levels() {
        let spec = NetworkSpec::parse("224-0-0-0-0-0-1-1").unwrap();
        assert_eq!(spec.unit_count(), 2);
        assert_eq!(spec.depth(), 8);
    }

    #[test]
    fn hand_counted_params_of_the_two_unit_config() {
        // independent hand count of 224-0-0-0-0-0-1-1 at default widths
        let spec = NetworkSpec::parse("224-0-0-0-0-0-1-1").unwrap();
        let s = stats(&spec, 1000).unwrap();
        let (w1, b6, b7) = (64usize, 2048usize, 4096usize);
        let (m6, m7) = (b6 / 4, b7 / 4);
        let stem = 3 * w1 * 9;
        let unit6 = 2 * w1 // bn
            + w1 * m6      // 1x1 reduce
            + 2 * m6
            + m6 * m6 * 9  // 3x3
            + 2 * m6
            + m6 * b6      // 1x1 expand
            + w1 * b6; // projection
        let unit7 = 2 * b6 + b6 * m7 + 2 * m7 + m7 * m7 * 9 + 2 * m7 + m7 * b7 + b6 * b7;
        let top = 2 * b7;
        let fc = b7 * 1000 + 1000;
        assert_eq!(s.param_count, stem + unit6 + unit7 + top + fc);
    }

    #[test]
    fn monotonicity_in_every_unit_slot() {
        let base = NetworkSpec::parse("56-1-1-1-1-2-1-1").unwrap();
        let base_stats = stats(&base, 10).unwrap();
        for lv in 0..LEVELS {
            let mut bigger = base.clone();
            bigger.units[lv] += 1;
            let s = stats(&bigger, 10).unwrap();
            assert!(s.param_count > base_stats.param_count, "level {lv}");
            assert!(s.depth > base_stats.depth, "level {lv}");
        }
    }
}
