//! The ensemble view of a residual chain.
//!
//! A chain of `d` identity-shortcut units expands into `d + 1` sub-network
//! terms: the identity, plus one term per unit evaluated on the full output
//! of everything below it. The expansion grows linearly with depth; the
//! non-linearity gap measures exactly why it cannot be split further into an
//! exponential family.
//!
//! On the backward side, every gradient route to a parameter is classified
//! by how many residual branches it traverses. Routes can be selected
//! per-unit (branch or shortcut), enumerated exhaustively, or truncated by an
//! effective-depth bound.

use std::collections::{BTreeMap, HashMap};

use crate::arch::{Chain, ChainTrace};
use crate::error::{Error, Result};
use crate::tape::{BackwardOptions, RouteGate, Tape, Var};
use crate::tensor::Tensor;

/// One term of the expanded ensemble.
#[derive(Debug, Clone)]
pub struct SubNetworkTerm {
    /// 0 is the identity term; i >= 1 is unit i's branch output.
    pub index: usize,
    pub value: Tensor,
}

impl SubNetworkTerm {
    /// Depth of this term's trained portion under effective depth `l`.
    pub fn actual_depth(&self, l: usize) -> usize {
        self.index.min(l)
    }
}

fn require_identity_chain(chain: &Chain) -> Result<()> {
    if !chain.is_identity_chain() {
        return Err(Error::UnsupportedChain(
            "expansion requires identity shortcuts and no downsampling inside the chain".into(),
        ));
    }
    Ok(())
}

/// Expand a d-unit chain on input `x` into its d+1 terms. The sum of the
/// returned terms equals the chain's forward output.
pub fn expand(chain: &Chain, x: &Tensor) -> Result<Vec<SubNetworkTerm>> {
    require_identity_chain(chain)?;
    let mut tape = Tape::new();
    let x_var = tape.leaf(x.clone(), false);
    let mut terms = vec![SubNetworkTerm { index: 0, value: x.clone() }];
    let mut running = x_var;
    for i in 0..chain.unit_count() {
        let branch = chain.branch(&mut tape, i, running)?;
        terms.push(SubNetworkTerm { index: i + 1, value: tape.value(branch).clone() });
        running = tape.add(branch, running)?;
    }
    Ok(terms)
}

/// Sum of expanded terms, for comparison against the forward pass.
pub fn sum_terms(terms: &[SubNetworkTerm]) -> Result<Tensor> {
    let mut acc = terms[0].value.clone();
    for t in &terms[1..] {
        acc = acc.add(&t.value)?;
    }
    Ok(acc)
}

/// `|| f(a+b) - f(a) - f(b) ||`: zero exactly when `f` is additive, strictly
/// positive otherwise. A positive gap on a residual branch certifies that the
/// branch cannot be split across ensemble terms.
pub fn nonlinearity_gap<F>(f: F, a: &Tensor, b: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let joint = f(&a.add(b)?)?;
    let split = f(a)?.add(&f(b)?)?;
    Ok(joint.sub(&split)?.norm())
}

/// `nonlinearity_gap` applied to one unit's trainable branch.
pub fn unit_nonlinearity_gap(chain: &Chain, unit: usize, a: &Tensor, b: &Tensor) -> Result<f64> {
    nonlinearity_gap(
        |t| {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone(), false);
            let out = chain.branch(&mut tape, unit, v)?;
            Ok(tape.value(out).clone())
        },
        a,
        b,
    )
}

/// A recorded forward pass over a chain whose backward can be re-run under
/// different route selections without re-recording.
pub struct RoutedBackward<'c> {
    chain: &'c Chain,
    tape: Tape,
    trace: ChainTrace,
    input: Var,
}

impl<'c> RoutedBackward<'c> {
    pub fn new(chain: &'c Chain, x: &Tensor) -> Result<Self> {
        require_identity_chain(chain)?;
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone(), true);
        let trace = chain.forward_trace(&mut tape, input)?;
        Ok(RoutedBackward { chain, tape, trace, input })
    }

    pub fn output_value(&self) -> &Tensor {
        self.tape.value(self.trace.output)
    }

    fn backward(&self, seed: &Tensor, opts: &BackwardOptions) -> Result<crate::tape::GradStore> {
        self.tape.backward_seeded(self.trace.output, seed, opts)
    }

    /// Ungated parameter gradients, keyed by parameter name.
    pub fn full_param_grads(&self, seed: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.backward(seed, &BackwardOptions::default())?;
        Ok(self.trace.grads_by_name(&mut grads))
    }

    /// Parameter gradients with every unit gated: units in `branch_units`
    /// pass gradient only through their trainable branch, all others only
    /// through their shortcut.
    pub fn gated_param_grads(
        &self,
        branch_units: &[usize],
        seed: &Tensor,
    ) -> Result<BTreeMap<String, Tensor>> {
        let opts = BackwardOptions::gated(self.gates_for(branch_units));
        let mut grads = self.backward(seed, &opts)?;
        Ok(self.trace.grads_by_name(&mut grads))
    }

    /// Input gradient with every unit gated as in [`gated_param_grads`].
    pub fn gated_input_grad(&self, branch_units: &[usize], seed: &Tensor) -> Result<Tensor> {
        let opts = BackwardOptions::gated(self.gates_for(branch_units));
        let mut grads = self.backward(seed, &opts)?;
        grads
            .take(self.input)
            .ok_or_else(|| Error::Numeric("no gradient reached the input".into()))
    }

    /// Parameter gradients under the effective-depth bound `l`.
    pub fn truncated_param_grads(&self, l: usize, seed: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.backward(seed, &BackwardOptions::truncated(l))?;
        Ok(self.trace.grads_by_name(&mut grads))
    }

    /// Gradients of the first unit's parameters for one gradient route:
    /// `above_branch` lists the units above unit 1 (ids 2..=d) whose branch
    /// the route passes through; the rest pass through their shortcuts.
    pub fn first_unit_route_grads(
        &self,
        above_branch: &[usize],
        seed: &Tensor,
    ) -> Result<BTreeMap<String, Tensor>> {
        let mut gates = HashMap::new();
        for unit in self.chain.units.iter().skip(1) {
            let gate = if above_branch.contains(&unit.unit_id) {
                RouteGate::BranchOnly
            } else {
                RouteGate::ShortcutOnly
            };
            gates.insert(unit.unit_id, gate);
        }
        let opts = BackwardOptions::gated(gates);
        let mut grads = self.backward(seed, &opts)?;
        let all = self.trace.grads_by_name(&mut grads);
        Ok(first_unit_only(all))
    }

    fn gates_for(&self, branch_units: &[usize]) -> HashMap<usize, RouteGate> {
        self.chain
            .units
            .iter()
            .map(|u| {
                let gate = if branch_units.contains(&u.unit_id) {
                    RouteGate::BranchOnly
                } else {
                    RouteGate::ShortcutOnly
                };
                (u.unit_id, gate)
            })
            .collect()
    }
}

fn first_unit_only(all: BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    all.into_iter().filter(|(name, _)| name.starts_with("l1.u0.")).collect()
}

/// The two-route decomposition of the first unit's gradient in a two-unit
/// chain: the direct route (upstream gradient through unit 2's shortcut) and
/// the route through unit 2's branch Jacobian.
#[derive(Debug)]
pub struct GradDecomposition {
    pub term_direct: BTreeMap<String, Tensor>,
    pub term_via_f2: BTreeMap<String, Tensor>,
    pub full: BTreeMap<String, Tensor>,
}

/// Split the first unit's parameter gradient by the route the upstream
/// gradient takes through the second unit. `upstream` seeds the backward
/// pass at the chain output.
pub fn grad_decomposition(
    chain: &Chain,
    x: &Tensor,
    upstream: &Tensor,
) -> Result<GradDecomposition> {
    if chain.unit_count() != 2 {
        return Err(Error::UnsupportedChain(format!(
            "gradient decomposition is defined on a two-unit chain, got {} units",
            chain.unit_count()
        )));
    }
    let routed = RoutedBackward::new(chain, x)?;
    let unit2 = chain.units[1].unit_id;

    let mut direct_gates = HashMap::new();
    direct_gates.insert(unit2, RouteGate::ShortcutOnly);
    let mut g = routed.backward(upstream, &BackwardOptions::gated(direct_gates))?;
    let term_direct = first_unit_only(routed.trace.grads_by_name(&mut g));

    let mut via_gates = HashMap::new();
    via_gates.insert(unit2, RouteGate::BranchOnly);
    let mut g = routed.backward(upstream, &BackwardOptions::gated(via_gates))?;
    let term_via_f2 = first_unit_only(routed.trace.grads_by_name(&mut g));

    let full = first_unit_only(routed.full_param_grads(upstream)?);
    Ok(GradDecomposition { term_direct, term_via_f2, full })
}

/// A training-time view of a chain under effective depth `l`: forward passes
/// are unchanged, while any backward route traversing more than `l` residual
/// branches contributes nothing.
pub struct EffectiveDepthView<'c> {
    pub chain: &'c Chain,
    pub l: usize,
}

pub fn truncate_effective_depth(chain: &Chain, l: usize) -> Result<EffectiveDepthView<'_>> {
    if l == 0 {
        return Err(Error::Config("effective depth must be >= 1".into()));
    }
    Ok(EffectiveDepthView { chain, l })
}

impl EffectiveDepthView<'_> {
    /// Forward output — identical to the untruncated chain.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let out = self.chain.forward(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }

    /// Parameter gradients under the bound.
    pub fn param_grads(&self, x: &Tensor, upstream: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        RoutedBackward::new(self.chain, x)?.truncated_param_grads(self.l, upstream)
    }
}

/// All subsets of the given ids, in lexicographic order by inclusion mask.
pub fn power_set(ids: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(1 << ids.len());
    for mask in 0u64..(1 << ids.len()) {
        out.push(
            ids.iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &id)| id)
                .collect(),
        );
    }
    out
}

/// Largest relative difference between two gradient maps:
/// max over parameters of ||a - b|| / max(||b||, eps).
pub fn map_rel_err(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, want) in b {
        let got = match a.get(name) {
            Some(g) => g.clone(),
            None => Tensor::zeros(want.shape()),
        };
        let denom = want.norm().max(1e-300);
        worst = worst.max(got.sub(want).unwrap().norm() / denom);
    }
    worst
}

/// Elementwise sum of gradient maps.
pub fn map_sum(maps: &[BTreeMap<String, Tensor>]) -> BTreeMap<String, Tensor> {
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for m in maps {
        for (k, v) in m {
            acc.entry(k.clone())
                .and_modify(|t| t.axpy(1.0, v))
                .or_insert_with(|| v.clone());
        }
    }
    acc
}
