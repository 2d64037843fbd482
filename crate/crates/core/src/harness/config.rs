//! Flat `key = value` configuration files and the training configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::seg::HeadKind;

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Segment,
}

/// Everything one training run needs. Defaults follow the reference recipe:
/// learning rate 0.1 falling linearly to 1e-6, batch 16, momentum 0.9,
/// weight decay 1e-4.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub spec: String,
    pub task: Task,
    pub widths: Option<[usize; 7]>,
    pub classes: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: String,
    pub out_dir: PathBuf,
    pub momentum: f64,
    pub weight_decay: f64,
    pub log_interval: usize,
    /// Segmentation: head kind and crop size.
    pub head: HeadKind,
    pub crop: usize,
    /// Segmentation: initial weights (classification-trained backbone).
    pub init_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            spec: String::new(),
            task: Task::Classify,
            widths: None,
            classes: 2,
            lr_start: 0.1,
            lr_end: 1e-6,
            total_iters: 450_000,
            batch_size: 16,
            seed: 0,
            dataset: "blobs:n=256,size=16,classes=2".into(),
            out_dir: PathBuf::from("run"),
            momentum: 0.9,
            weight_decay: 1e-4,
            log_interval: 10,
            head: HeadKind::OneConv,
            crop: crate::seg::DEFAULT_CROP,
            init_weights: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Build from parsed key/value pairs. Unknown keys are rejected so typos
    /// surface immediately.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, v) in kv {
            match key.as_str() {
                "spec" => cfg.spec = v.clone(),
                "task" => {
                    cfg.task = match v.as_str() {
                        "classify" => Task::Classify,
                        "segment" => Task::Segment,
                        other => {
                            return Err(Error::Config(format!(
                                "task: expected classify|segment, got {other:?}"
                            )))
                        }
                    }
                }
                "widths" => {
                    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                    if parts.len() != 7 {
                        return Err(Error::Config(format!(
                            "widths: expected 7 comma-separated values, got {}",
                            parts.len()
                        )));
                    }
                    let mut w = [0usize; 7];
                    for (i, p) in parts.iter().enumerate() {
                        w[i] = parse_num("widths", p)?;
                    }
                    cfg.widths = Some(w);
                }
                "classes" => cfg.classes = parse_num(key, v)?,
                "lr_start" => cfg.lr_start = parse_num(key, v)?,
                "lr_end" => cfg.lr_end = parse_num(key, v)?,
                "total_iters" => cfg.total_iters = parse_num(key, v)?,
                "batch_size" => cfg.batch_size = parse_num(key, v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "precision" => {
                    if v != "f64" {
                        return Err(Error::Config(format!(
                            "precision: this build runs 64-bit only, got {v:?}"
                        )));
                    }
                }
                "dataset" => cfg.dataset = v.clone(),
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "momentum" => cfg.momentum = parse_num(key, v)?,
                "weight_decay" => cfg.weight_decay = parse_num(key, v)?,
                "log_interval" => cfg.log_interval = parse_num(key, v)?,
                "head" => {
                    cfg.head = match v.as_str() {
                        "1conv" => HeadKind::OneConv,
                        "2conv" => HeadKind::TwoConv,
                        other => {
                            return Err(Error::Config(format!(
                                "head: expected 1conv|2conv, got {other:?}"
                            )))
                        }
                    }
                }
                "crop" => cfg.crop = parse_num(key, v)?,
                "init_weights" => cfg.init_weights = Some(PathBuf::from(v)),
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spec.is_empty() {
            return Err(Error::Config("spec is required".into()));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_end > 0 (got {} and {})",
                self.lr_start, self.lr_end
            )));
        }
        if self.total_iters < 1 {
            return Err(Error::Config("total_iters must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.log_interval < 1 {
            return Err(Error::Config("log_interval must be >= 1".into()));
        }
        if self.classes < 1 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at an iteration: affine from `lr_start` at 0 to
    /// `lr_end` at `total_iters - 1`.
    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        if iter >= self.total_iters {
            return Err(Error::Config(format!(
                "iteration {iter} is outside the schedule (total_iters {})",
                self.total_iters
            )));
        }
        if self.total_iters == 1 {
            return Ok(self.lr_start);
        }
        // convex combination: exact at both endpoints
        let t = iter as f64 / (self.total_iters - 1) as f64;
        Ok(self.lr_start * (1.0 - t) + self.lr_end * t)
    }

    /// Echo of the effective configuration, parseable by [`parse_kv`].
    pub fn echo(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("spec = {}\n", self.spec));
        s.push_str(&format!(
            "task = {}\n",
            match self.task {
                Task::Classify => "classify",
                Task::Segment => "segment",
            }
        ));
        if let Some(w) = self.widths {
            s.push_str(&format!(
                "widths = {}\n",
                w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            ));
        }
        s.push_str(&format!("classes = {}\n", self.classes));
        s.push_str(&format!("lr_start = {}\n", self.lr_start));
        s.push_str(&format!("lr_end = {}\n", self.lr_end));
        s.push_str(&format!("total_iters = {}\n", self.total_iters));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("dataset = {}\n", self.dataset));
        s.push_str(&format!("momentum = {}\n", self.momentum));
        s.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        s.push_str(&format!("log_interval = {}\n", self.log_interval));
        if self.task == Task::Segment {
            s.push_str(&format!(
                "head = {}\n",
                match self.head {
                    HeadKind::OneConv => "1conv",
                    HeadKind::TwoConv => "2conv",
                }
            ));
            s.push_str(&format!("crop = {}\n", self.crop));
            if let Some(p) = &self.init_weights {
                s.push_str(&format!("init_weights = {}\n", p.display()));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing_and_comments() {
        let kv = parse_kv("a = 1\n# note\n b  =  two words \n\nc=3 # trailing\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "two words");
        assert_eq!(kv["c"], "3");
        assert!(parse_kv("novalue\n").is_err());
        assert!(parse_kv("a=1\na=2\n").is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let mut cfg = TrainConfig { spec: "224-0-3-3-6-3-1-1".into(), ..Default::default() };
        cfg.total_iters = 450_000;
        assert_eq!(cfg.lr_at(0).unwrap(), 0.1);
        assert_eq!(cfg.lr_at(449_999).unwrap(), 1e-6);
        let mut odd = cfg.clone();
        odd.total_iters = 101;
        let mid = odd.lr_at(50).unwrap();
        assert!((mid - (0.1 + 1e-6) / 2.0).abs() < 1e-12);
        assert!(cfg.lr_at(450_000).is_err());
    }

    #[test]
    fn schedule_is_affine() {
        let cfg = TrainConfig {
            spec: "56-1-1-1-1-9-1-1".into(),
            total_iters: 1000,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..1000).map(|i| cfg.lr_at(i).unwrap()).collect();
        for w in lrs.windows(3) {
            let second_diff = (w[2] - w[1]) - (w[1] - w[0]);
            assert!(second_diff.abs() < 1e-15, "{second_diff}");
        }
    }

    #[test]
    fn config_rejects_bad_fields() {
        let base = "spec = 16-1-0-0-0-0-1-1\n";
        assert!(TrainConfig::from_kv(&parse_kv(base).unwrap()).is_ok());
        for bad in [
            "mystery = 1\n",
            "task = guess\n",
            "lr_start = 0.0001\nlr_end = 0.1\n",
            "total_iters = 0\n",
            "precision = f32\n",
            "widths = 1,2,3\n",
        ] {
            let text = format!("{base}{bad}");
            let kv = parse_kv(&text).unwrap();
            assert!(TrainConfig::from_kv(&kv).is_err(), "{bad}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let kv = parse_kv("spec = 16-1-0-0-0-0-1-1\nwidths = 4,6,8,10,12,16,24\nseed = 7\n").unwrap();
        let cfg = TrainConfig::from_kv(&kv).unwrap();
        let back = TrainConfig::from_kv(&parse_kv(&cfg.echo()).unwrap()).unwrap();
        assert_eq!(back.spec, cfg.spec);
        assert_eq!(back.widths, cfg.widths);
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.lr_start, cfg.lr_start);
    }
}
