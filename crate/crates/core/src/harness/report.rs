//! Run comparison: markdown tables from run directories and SVG line plots.

use std::path::{Path, PathBuf};

use crate::arch::NetworkSpec;
use crate::error::{Error, Result};
use crate::harness::config::{parse_kv, Task, TrainConfig};

/// A minimal SVG polyline chart; series share axes, scaled to the data.
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN: f64 = 54.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

impl LinePlot {
    pub fn render(&self) -> String {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for (_, s) in &self.series {
            for &(x, y) in s {
                let y = if self.log_y { y.max(1e-300).log10() } else { y };
                if x.is_finite() && y.is_finite() {
                    pts.push((x, y));
                }
            }
        }
        let (x0, x1) = span(pts.iter().map(|p| p.0));
        let (y0, y1) = span(pts.iter().map(|p| p.1));
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(1e-12) * (PLOT_W - 2.0 * MARGIN);
        let sy = |y: f64| {
            let y = if self.log_y { y.max(1e-300).log10() } else { y };
            PLOT_H - MARGIN - (y - y0) / (y1 - y0).max(1e-12) * (PLOT_H - 2.0 * MARGIN)
        };

        let mut s = String::new();
        s.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
             viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n"
        ));
        s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        s.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            PLOT_W / 2.0,
            xml_escape(&self.title)
        ));
        // axes
        s.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = MARGIN,
            b = PLOT_H - MARGIN,
            r = PLOT_W - MARGIN,
            t = MARGIN
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
            PLOT_W / 2.0,
            PLOT_H - 12.0,
            xml_escape(&self.x_label)
        ));
        let ylab = if self.log_y {
            format!("log10 {}", self.y_label)
        } else {
            self.y_label.clone()
        };
        s.push_str(&format!(
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" \
             transform=\"rotate(-90 14 {})\">{}</text>\n",
            PLOT_H / 2.0,
            PLOT_H / 2.0,
            xml_escape(&ylab)
        ));
        // endpoint tick labels
        s.push_str(&format!(
            "<text x=\"{m}\" y=\"{b}\" font-size=\"10\" dy=\"12\">{x0:.3}</text>\n\
             <text x=\"{r}\" y=\"{b}\" font-size=\"10\" dy=\"12\" text-anchor=\"end\">{x1:.3}</text>\n\
             <text x=\"{m}\" y=\"{t}\" font-size=\"10\" dx=\"-4\" text-anchor=\"end\">{y1:.3}</text>\n\
             <text x=\"{m}\" y=\"{b}\" font-size=\"10\" dx=\"-4\" text-anchor=\"end\">{y0:.3}</text>\n",
            m = MARGIN,
            b = PLOT_H - MARGIN,
            r = PLOT_W - MARGIN,
            t = MARGIN
        ));
        for (i, (name, pts)) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> =
                pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
                PLOT_W - MARGIN + 4.0,
                MARGIN + 14.0 * i as f64,
                xml_escape(name)
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One parsed run directory.
#[derive(Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config: TrainConfig,
    pub depth: usize,
    pub units: usize,
    pub params: usize,
    pub final_metric: (String, f64),
    pub loss_curve: Vec<(f64, f64)>,
}

fn read_run(dir: &Path) -> Result<RunSummary> {
    let cfg_text = std::fs::read_to_string(dir.join("config.txt"))?;
    let config = TrainConfig::from_kv(&parse_kv(&cfg_text)?)?;
    let mut spec = NetworkSpec::parse(&config.spec)?;
    if let Some(w) = config.widths {
        spec = spec.with_widths(w);
    }
    let stats = crate::arch::stats(&spec, config.classes)?;

    let metrics = std::fs::read_to_string(dir.join("metrics.csv"))?;
    let mut lines = metrics.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty metrics.csv".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let mut loss_curve = Vec::new();
    let mut last: Option<Vec<f64>> = None;
    for line in lines {
        let vals: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.parse::<f64>()).collect();
        let vals = vals.map_err(|_| Error::Parse(format!("bad metrics row {line:?}")))?;
        if vals.len() != cols.len() {
            return Err(Error::Parse(format!("ragged metrics row {line:?}")));
        }
        loss_curve.push((vals[0], vals[2]));
        last = Some(vals);
    }
    let last = last.ok_or_else(|| Error::Parse("metrics.csv has no rows".into()))?;
    let metric_col = cols.len() - 1;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        depth: stats.depth,
        units: stats.unit_count,
        params: stats.param_count,
        final_metric: (cols[metric_col].to_string(), last[metric_col]),
        loss_curve,
        config,
    })
}

/// Emitted report artifacts.
#[derive(Debug)]
pub struct ReportPaths {
    pub table: PathBuf,
    pub loss_plot: PathBuf,
    pub profile_plot: Option<PathBuf>,
}

/// Summarize one or more completed runs into `out_dir`: a markdown table of
/// structure vs outcome, a loss-curve plot, and — when any run directory
/// carries a path-profile CSV — a median-norm-vs-k plot. Malformed run
/// directories are skipped with a warning.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportPaths> {
    let mut runs = Vec::new();
    for dir in run_dirs {
        match read_run(dir) {
            Ok(r) => runs.push(r),
            Err(e) => eprintln!("warning: skipping {}: {e}", dir.display()),
        }
    }
    if runs.is_empty() {
        return Err(Error::Config("no readable runs to report".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut md = String::from("| run | spec | task | depth | units | params | final loss | final metric |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in &runs {
        let task = match r.config.task {
            Task::Classify => "classify",
            Task::Segment => "segment",
        };
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {:.6} | {} = {:.4} |\n",
            r.dir.file_name().and_then(|s| s.to_str()).unwrap_or("run"),
            r.config.spec,
            task,
            r.depth,
            r.units,
            r.params,
            r.loss_curve.last().map(|p| p.1).unwrap_or(f64::NAN),
            r.final_metric.0,
            r.final_metric.1,
        ));
    }
    let table = out_dir.join("report.md");
    std::fs::write(&table, md)?;

    let plot = LinePlot {
        title: "training loss".into(),
        x_label: "iteration".into(),
        y_label: "loss".into(),
        log_y: false,
        series: runs
            .iter()
            .map(|r| {
                (
                    r.dir.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string(),
                    r.loss_curve.clone(),
                )
            })
            .collect(),
    };
    let loss_plot = out_dir.join("loss.svg");
    std::fs::write(&loss_plot, plot.render())?;

    // optional path-profile companion plot
    let mut profile_series = Vec::new();
    for dir in run_dirs {
        let p = dir.join("profile.csv");
        if let Ok(rows) = std::fs::read_to_string(&p) {
            match median_by_k(&rows) {
                Ok(series) => profile_series.push((
                    dir.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string(),
                    series,
                )),
                Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
            }
        }
    }
    let profile_plot = if profile_series.is_empty() {
        None
    } else {
        let plot = LinePlot {
            title: "input-gradient norm by path length".into(),
            x_label: "path length k".into(),
            y_label: "median norm".into(),
            log_y: true,
            series: profile_series,
        };
        let path = out_dir.join("profile.svg");
        std::fs::write(&path, plot.render())?;
        Some(path)
    };

    Ok(ReportPaths { table, loss_plot, profile_plot })
}

/// Median grad-norm per k from a `k,trial,grad_norm` CSV.
pub fn median_by_k(csv: &str) -> Result<Vec<(f64, f64)>> {
    let mut by_k: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            if line != "k,trial,grad_norm" {
                return Err(Error::Parse(format!("unexpected profile header {line:?}")));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Parse(format!("ragged profile row {line:?}")));
        }
        let k: usize = cols[0]
            .parse()
            .map_err(|_| Error::Parse(format!("bad k in {line:?}")))?;
        let norm: f64 = cols[2]
            .parse()
            .map_err(|_| Error::Parse(format!("bad norm in {line:?}")))?;
        by_k.entry(k).or_default().push(norm);
    }
    Ok(by_k
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = v.len() / 2;
            let med = if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) };
            (k as f64, med)
        })
        .collect())
}

/// Serialize a profile report as `k,trial,grad_norm` CSV.
pub fn profile_to_csv(report: &crate::profile::ProfileReport) -> String {
    let mut s = String::from("k,trial,grad_norm\n");
    for row in &report.rows {
        s.push_str(&format!("{},{},{}\n", row.k, row.trial, row.grad_norm));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_renders_valid_svg() {
        let plot = LinePlot {
            title: "t & t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_y: false,
            series: vec![("a".into(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)])],
        };
        let svg = plot.render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("t &amp; t"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn profile_median_extraction() {
        let csv = "k,trial,grad_norm\n0,0,1.0\n0,1,3.0\n1,0,0.5\n1,1,0.7\n1,2,0.9\n";
        let m = median_by_k(csv).unwrap();
        assert_eq!(m, vec![(0.0, 2.0), (1.0, 0.7)]);
        assert!(median_by_k("bogus\n1,2,3\n").is_err());
    }
}
