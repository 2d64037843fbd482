//! Path-length gradient profiling.
//!
//! One forward pass runs through the whole network unmodified; each backward
//! pass routes the gradient through the trainable branch of exactly `k`
//! sampled units and through the shortcut of the remaining `n - k`. The
//! Euclidean norm of the gradient that reaches the input, divided by the
//! batch size, is the profiled quantity.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::arch::{Chain, Mode, Network};
use crate::error::{Error, Result};
use crate::tape::{BackwardOptions, RouteGate, Tape, Var};
use crate::tensor::Tensor;

/// One sampled route's measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub k: usize,
    pub trial: usize,
    /// ||input gradient|| / batch size.
    pub grad_norm: f64,
}

/// Per-k distribution summary.
#[derive(Debug, Clone, PartialEq)]
pub struct KSummary {
    pub k: usize,
    pub trials: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct ProfileReport {
    /// Identity of the profiled network.
    pub network: String,
    pub rows: Vec<PathSample>,
    pub summary: Vec<KSummary>,
}

/// Route-sampling strategy actually used for one k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RoutePlan {
    /// Every distinct route once, in canonical order.
    Exhaustive,
    /// A random subset of distinct routes.
    WithoutReplacement,
    /// Independent uniform draws.
    WithReplacement,
}

/// Route count below which sampling is done without replacement.
const SMALL_ROUTE_SPACE: u128 = 10_000;

/// A recorded forward pass ready for repeated gated backward passes.
pub struct PathProfiler {
    tape: Tape,
    loss: Var,
    input: Var,
    unit_ids: Vec<usize>,
    batch_size: usize,
    network: String,
}

impl PathProfiler {
    /// Profile a plain chain; backward is seeded from the sum of its output.
    pub fn over_chain(chain: &Chain, batch: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), true);
        let out = chain.forward(&mut tape, input)?;
        let loss = tape.sum(out);
        Ok(PathProfiler {
            tape,
            loss,
            input,
            unit_ids: chain.units.iter().map(|u| u.unit_id).collect(),
            batch_size: batch.shape()[0],
            network: format!("chain-{}x{}", chain.unit_count(), chain.width),
        })
    }

    /// Profile a built network on a labelled batch; backward is seeded from
    /// the sum of each example's labelled-class logit. Statistics run frozen.
    pub fn over_network(net: &Network, batch: &Tensor, labels: &[i64]) -> Result<Self> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), true);
        let trace = net.forward(&mut tape, input, Mode::Frozen)?;
        let loss = tape.class_logit_sum(trace.output, labels)?;
        Ok(PathProfiler {
            tape,
            loss,
            input,
            unit_ids: net.unit_ids(),
            batch_size: batch.shape()[0],
            network: net.spec.name(),
        })
    }

    pub fn unit_count(&self) -> usize {
        self.unit_ids.len()
    }

    /// Input-gradient norm (per example) for an explicit set of
    /// branch-routed units.
    pub fn route_grad_norm(&self, branch_units: &[usize]) -> Result<f64> {
        let gates = self
            .unit_ids
            .iter()
            .map(|&u| {
                let gate = if branch_units.contains(&u) {
                    RouteGate::BranchOnly
                } else {
                    RouteGate::ShortcutOnly
                };
                (u, gate)
            })
            .collect();
        let mut grads = self
            .tape
            .backward(self.loss, &BackwardOptions::gated(gates))?;
        let g = grads
            .take(self.input)
            .ok_or_else(|| Error::Numeric("no gradient reached the input".into()))?;
        Ok(g.norm() / self.batch_size as f64)
    }

    /// Draw one route of length `k` and measure it.
    pub fn sample_path_gradient(
        &self,
        k: usize,
        trial: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<PathSample> {
        let n = self.unit_count();
        if k > n {
            return Err(Error::Config(format!(
                "path length {k} exceeds the chain's {n} units"
            )));
        }
        let picked = rand::seq::index::sample(rng, n, k)
            .into_iter()
            .map(|i| self.unit_ids[i])
            .collect::<Vec<_>>();
        let grad_norm = self.route_grad_norm(&picked)?;
        Ok(PathSample { k, trial, grad_norm })
    }

    /// Measure every requested path length. Small route spaces are sampled
    /// without replacement — exhaustively, in canonical order, when the trial
    /// budget covers all C(n, k) routes — so the profile is exact there.
    pub fn profile(&self, k_list: &[usize], trials_per_k: usize, seed: u64) -> Result<ProfileReport> {
        if trials_per_k == 0 {
            return Err(Error::Config("trials_per_k must be >= 1".into()));
        }
        let n = self.unit_count();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut summary = Vec::new();
        for &k in k_list {
            if k > n {
                return Err(Error::Config(format!(
                    "path length {k} exceeds the chain's {n} units"
                )));
            }
            let route_space = binomial(n, k);
            let plan = if route_space <= SMALL_ROUTE_SPACE {
                if trials_per_k as u128 >= route_space {
                    RoutePlan::Exhaustive
                } else {
                    RoutePlan::WithoutReplacement
                }
            } else {
                RoutePlan::WithReplacement
            };
            let mut norms = Vec::new();
            match plan {
                RoutePlan::Exhaustive | RoutePlan::WithoutReplacement => {
                    let mut routes = combinations(&self.unit_ids, k);
                    if plan == RoutePlan::WithoutReplacement {
                        routes.shuffle(&mut rng);
                        routes.truncate(trials_per_k);
                    }
                    for (trial, route) in routes.iter().enumerate() {
                        push_sample(
                            &mut rows,
                            &mut norms,
                            k,
                            trial,
                            self.route_grad_norm(route)?,
                        );
                    }
                }
                RoutePlan::WithReplacement => {
                    for trial in 0..trials_per_k {
                        let s = self.sample_path_gradient(k, trial, &mut rng)?;
                        push_sample(&mut rows, &mut norms, k, trial, s.grad_norm);
                    }
                }
            }
            if norms.is_empty() {
                return Err(Error::Numeric(format!(
                    "every sampled route at k={k} produced a non-finite gradient"
                )));
            }
            summary.push(summarize(k, &norms));
        }
        Ok(ProfileReport { network: self.network.clone(), rows, summary })
    }
}

fn push_sample(rows: &mut Vec<PathSample>, norms: &mut Vec<f64>, k: usize, trial: usize, norm: f64) {
    if !norm.is_finite() {
        eprintln!("warning: non-finite gradient at k={k} trial={trial}; sample excluded");
        return;
    }
    rows.push(PathSample { k, trial, grad_norm: norm });
    norms.push(norm);
}

fn summarize(k: usize, norms: &[f64]) -> KSummary {
    let mut sorted = norms.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    KSummary {
        k,
        trials: norms.len(),
        mean: norms.iter().sum::<f64>() / norms.len() as f64,
        median,
        min: sorted[0],
        max: *sorted.last().unwrap(),
    }
}

/// C(n, k), saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
    }
    acc
}

/// All k-element subsets of `ids`, lexicographic by index.
pub fn combinations(ids: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = ids.len();
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| ids[i]).collect());
        // advance the combination
        let mut pos = k;
        while pos > 0 {
            pos -= 1;
            if idx[pos] != pos + n - k {
                idx[pos] += 1;
                for j in pos + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                return out;
            }
        }
        if k == 0 {
            return out;
        }
    }
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        dx += (x - mx) * (x - mx);
        dy += (y - my) * (y - my);
    }
    num / (dx.sqrt() * dy.sqrt())
}
