//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] is append-only: every recorded node's inputs precede it, so the
//! reverse index order is a reverse topological order and backward visits
//! each node exactly once.
//!
//! Residual additions carry a unit id. Backward accepts two controls keyed on
//! those ids:
//!
//! * per-unit route gates, which let the upstream gradient enter only the
//!   trainable branch, only the shortcut, or both;
//! * an effective-depth bound `l`, under which any gradient route that would
//!   traverse more than `l` residual branches contributes nothing. This is
//!   realized by stratifying every adjoint by the number of branch segments
//!   crossed so far; crossing into a branch shifts the stratum up and the
//!   overflow stratum is dropped.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvGeom};
use crate::ops::dense;
use crate::ops::elem;
use crate::ops::loss::{self, XentSaved};
use crate::ops::norm::{self, BnMode, BnSaved, RunningStats};
use crate::ops::pool;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How backward treats one residual unit's addition node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RouteGate {
    #[default]
    Both,
    /// Upstream gradient enters only the trainable branch f_i.
    BranchOnly,
    /// Upstream gradient passes only the shortcut.
    ShortcutOnly,
}

/// Backward-pass controls. The default runs a plain backward pass.
#[derive(Debug, Clone, Default)]
pub struct BackwardOptions {
    pub gates: HashMap<usize, RouteGate>,
    /// Maximum number of residual branches a gradient route may traverse.
    pub effective_depth: Option<usize>,
}

impl BackwardOptions {
    pub fn gated(gates: HashMap<usize, RouteGate>) -> Self {
        BackwardOptions { gates, effective_depth: None }
    }

    pub fn truncated(l: usize) -> Self {
        BackwardOptions { gates: HashMap::new(), effective_depth: Some(l) }
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Bias4 { x: Var, b: Var },
    Add { a: Var, b: Var, residual: Option<usize> },
    SoftmaxXent { logits: Var, saved: XentSaved },
    Dropout { x: Var, mask: Vec<f64> },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// True when every stored gradient is finite.
    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Named parameter vars recorded so far, in recording order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.clone().map(|name| (name, Var(i))))
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, name });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, None)
    }

    /// A leaf that carries a parameter name, so its gradient can be matched
    /// back to the owning structure.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, Some(name.into()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let out = conv::forward(self.value(x), self.value(w), geom)?;
        let rg = self.requires(x) || self.requires(w);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, rg, None))
    }

    /// Batch normalization. In train mode the computed batch statistics are
    /// retrievable afterwards via [`Tape::batch_stats`] so the caller can
    /// fold them into its running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let (out, saved) =
            norm::forward(self.value(x), self.value(gamma), self.value(beta), stats, mode)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, saved }, rg, None))
    }

    /// Batch statistics computed by a train-mode batchnorm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { saved, .. } if saved.mode.uses_batch_stats() => {
                Some((&saved.batch_mean, &saved.batch_var))
            }
            _ => None,
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = elem::relu_forward(self.value(x));
        let rg = self.requires(x);
        self.push(out, Op::Relu { x }, rg, None)
    }

    pub fn maxpool(&mut self, x: Var, kernel: usize, geom: ConvGeom) -> Result<Var> {
        let (out, argmax) = pool::maxpool_forward(self.value(x), kernel, geom)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg, None))
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avgpool_forward(self.value(x))?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg, None))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = dense::forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg, None))
    }

    /// Per-channel bias over an NCHW map.
    pub fn bias4(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = dense::bias4_forward(self.value(x), self.value(b))?;
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(out, Op::Bias4 { x, b }, rg, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add { a, b, residual: None }, rg, None))
    }

    /// Residual addition `branch + shortcut`, tagged with the unit id that
    /// backward gating and effective-depth truncation key on.
    pub fn residual_add(&mut self, branch: Var, shortcut: Var, unit: usize) -> Result<Var> {
        let out = self.value(branch).add(self.value(shortcut))?;
        let rg = self.requires(branch) || self.requires(shortcut);
        Ok(self.push(out, Op::Add { a: branch, b: shortcut, residual: Some(unit) }, rg, None))
    }

    /// Mean softmax cross-entropy; returns a scalar node.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[i64], ignore: Option<i64>) -> Result<Var> {
        let (loss_val, saved) = loss::forward(self.value(logits), labels, ignore)?;
        let rg = self.requires(logits);
        Ok(self.push(Tensor::scalar(loss_val), Op::SoftmaxXent { logits, saved }, rg, None))
    }

    /// Inverted dropout with the given rate; the mask is drawn here and
    /// replayed exactly in backward.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl rand::Rng) -> Var {
        let mask = elem::dropout_mask(self.value(x).len(), rate, rng);
        let out = elem::apply_mask(self.value(x), &mask);
        let rg = self.requires(x);
        self.push(out, Op::Dropout { x, mask }, rg, None)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scaled(c);
        let rg = self.requires(x);
        self.push(out, Op::Scale { x, c }, rg, None)
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires(x);
        self.push(out, Op::Sum { x }, rg, None)
    }

    /// Sum of the logit of each example's labelled class: the seeding loss
    /// for path-gradient experiments.
    pub fn class_logit_sum(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let lay = loss::layout(self.value(logits))?;
        if lay.s != 1 {
            return Err(Error::Shape("class_logit_sum expects [N,K] logits".into()));
        }
        if labels.len() != lay.n {
            return Err(Error::Shape(format!(
                "class_logit_sum: {} labels for {} examples",
                labels.len(),
                lay.n
            )));
        }
        // picking one logit per row is a fixed linear map; reuse Scale-free
        // machinery by recording it as a Linear against a constant selector
        // would obscure the tape, so it gets its own tiny op via Sum over a
        // masked copy.
        let mut mask = Tensor::zeros(self.shape(logits));
        for (ni, &lbl) in labels.iter().enumerate() {
            if lbl < 0 || lbl as usize >= lay.k {
                return Err(Error::Shape(format!(
                    "class_logit_sum: label {lbl} out of range for {} classes",
                    lay.k
                )));
            }
            mask.data_mut()[ni * lay.k + lbl as usize] = 1.0;
        }
        let mask_var = self.leaf(mask, false);
        let picked = self.mul_mask(logits, mask_var);
        Ok(self.sum(picked))
    }

    fn mul_mask(&mut self, x: Var, mask: Var) -> Var {
        let m = self.value(mask).data().to_vec();
        let out = elem::apply_mask(self.value(x), &m);
        let rg = self.requires(x);
        self.push(out, Op::Dropout { x, mask: m }, rg, None)
    }

    /// Backward from a scalar node with seed 1.
    pub fn backward(&self, root: Var, opts: &BackwardOptions) -> Result<GradStore> {
        if !self.value(root).is_scalar() {
            return Err(Error::Numeric(format!(
                "backward on non-scalar of shape {:?} requires an explicit seed",
                self.shape(root)
            )));
        }
        self.backward_seeded(root, &Tensor::scalar(1.0), opts)
    }

    /// Backward from any node with an explicit upstream gradient.
    pub fn backward_seeded(
        &self,
        root: Var,
        seed: &Tensor,
        opts: &BackwardOptions,
    ) -> Result<GradStore> {
        if seed.shape() != self.shape(root) {
            return Err(Error::Shape(format!(
                "backward seed shape {:?} does not match node shape {:?}",
                seed.shape(),
                self.shape(root)
            )));
        }
        let strata = opts.effective_depth.map(|l| l + 1).unwrap_or(1);
        if let Some(l) = opts.effective_depth {
            if l == 0 {
                return Err(Error::Config("effective depth must be >= 1".into()));
            }
        }

        // adjoint[node][stratum]
        let mut adj: Vec<Vec<Option<Tensor>>> = (0..self.nodes.len())
            .map(|_| (0..strata).map(|_| None).collect())
            .collect();
        adj[root.0][0] = Some(seed.clone());

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node_adj = std::mem::take(&mut adj[i]);
            if node_adj.iter().all(|a| a.is_none()) {
                adj[i] = node_adj;
                continue;
            }
            for (c, slot) in node_adj.iter().enumerate() {
                let Some(g) = slot else { continue };
                self.propagate(i, c, g, opts, strata, &mut adj)?;
            }
            adj[i] = node_adj;
        }

        let grads = adj
            .into_iter()
            .map(|strata_slots| {
                let mut acc: Option<Tensor> = None;
                for s in strata_slots.into_iter().flatten() {
                    match &mut acc {
                        None => acc = Some(s),
                        Some(t) => t.axpy(1.0, &s),
                    }
                }
                acc
            })
            .collect();
        Ok(GradStore { grads })
    }

    fn propagate(
        &self,
        i: usize,
        stratum: usize,
        g: &Tensor,
        opts: &BackwardOptions,
        strata: usize,
        adj: &mut [Vec<Option<Tensor>>],
    ) -> Result<()> {
        let add_adj = |adj: &mut [Vec<Option<Tensor>>], v: Var, c: usize, t: Tensor| {
            debug_assert_eq!(t.shape(), self.shape(v));
            match &mut adj[v.0][c] {
                slot @ None => *slot = Some(t),
                Some(acc) => acc.axpy(1.0, &t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                if self.requires(*x) {
                    let dx = conv::backward_input(self.shape(*x), self.value(*w), g, *geom);
                    add_adj(adj, *x, stratum, dx);
                }
                if self.requires(*w) {
                    let dw = conv::backward_weight(self.value(*x), self.shape(*w), g, *geom);
                    add_adj(adj, *w, stratum, dw);
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dgamma, dbeta) =
                    norm::backward(self.shape(*x), self.value(*gamma), saved, g);
                if self.requires(*x) {
                    add_adj(adj, *x, stratum, dx);
                }
                if self.requires(*gamma) {
                    add_adj(adj, *gamma, stratum, dgamma);
                }
                if self.requires(*beta) {
                    add_adj(adj, *beta, stratum, dbeta);
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    add_adj(adj, *x, stratum, elem::relu_backward(self.value(*x), g));
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.requires(*x) {
                    add_adj(adj, *x, stratum, pool::maxpool_backward(self.shape(*x), argmax, g));
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.requires(*x) {
                    add_adj(adj, *x, stratum, pool::global_avgpool_backward(self.shape(*x), g));
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = dense::backward(self.value(*x), self.value(*w), g);
                if self.requires(*x) {
                    add_adj(adj, *x, stratum, dx);
                }
                if self.requires(*w) {
                    add_adj(adj, *w, stratum, dw);
                }
                if self.requires(*b) {
                    add_adj(adj, *b, stratum, db);
                }
            }
            Op::Bias4 { x, b } => {
                if self.requires(*x) {
                    add_adj(adj, *x, stratum, g.clone());
                }
                if self.requires(*b) {
                    let db = dense::bias4_backward_bias(self.shape(*b)[0], g);
                    add_adj(adj, *b, stratum, db);
                }
            }
            Op::Add { a, b, residual } => {
                let gate = residual
                    .and_then(|u| opts.gates.get(&u).copied())
                    .unwrap_or(RouteGate::Both);
                let is_residual = residual.is_some();
                // branch side: crossing into the trainable mapping counts one
                // more branch segment under effective-depth truncation
                if self.requires(*a) && gate != RouteGate::ShortcutOnly {
                    let target = if is_residual && opts.effective_depth.is_some() {
                        stratum + 1
                    } else {
                        stratum
                    };
                    if target < strata {
                        add_adj(adj, *a, target, g.clone());
                    }
                }
                if self.requires(*b) && gate != RouteGate::BranchOnly {
                    add_adj(adj, *b, stratum, g.clone());
                }
            }
            Op::SoftmaxXent { logits, saved } => {
                if self.requires(*logits) {
                    add_adj(adj, *logits, stratum, loss::backward(saved, g.item()));
                }
            }
            Op::Dropout { x, mask } => {
                if self.requires(*x) {
                    add_adj(adj, *x, stratum, elem::apply_mask(g, mask));
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    add_adj(adj, *x, stratum, g.scaled(*c));
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    add_adj(adj, *x, stratum, Tensor::full(self.shape(*x), g.item()));
                }
            }
        }
        Ok(())
    }
}
