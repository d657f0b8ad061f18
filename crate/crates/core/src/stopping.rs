//! The one-dimensional optimal-stopping problem attached to a follower problem.
//!
//! The payoff of stopping at node `ν` is
//!
//! ```text
//! Z_ν = f(t_ν) + E[ Σ_{j >= i(ν)} h_a(L_{t_j}, 0)·Δ_{j+1} + g_a(L_T, 0) | ν ]
//! ```
//!
//! which is the adjoint of the zero plan. Never stopping pays 0, so the
//! minimizing Snell envelope is `U_T = min(Z_T, 0)` and
//! `U_ν = min(Z_ν, E[U | ν])`. An optimal control yields an optimal stopping
//! rule through `τ_A = inf{t : A_t > 0}`.

use serde::{Deserialize, Serialize};

use crate::cost::{ControlPlan, CostSpec};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, ScenarioTree};
use crate::pontryagin::{certify_with, compute_adjoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayoffForm {
    /// Terminal gradient at `L_T`: the payoff for which the control and
    /// stopping problems are equivalent.
    #[default]
    Proof,
    /// Terminal gradient evaluated at the stopping node, `g_a(L_τ, 0)`.
    /// Offered for comparison only.
    Display,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingPayoff {
    pub form: PayoffForm,
    pub z: AdaptedProcess,
}

fn require_scalar(spec: &CostSpec) -> Result<()> {
    if spec.k() != 1 {
        return Err(Error::StoppingDimension(spec.k()));
    }
    Ok(())
}

pub fn payoff_process(tree: &ScenarioTree, spec: &CostSpec, form: PayoffForm) -> Result<StoppingPayoff> {
    require_scalar(spec)?;
    let zero = ControlPlan::zeros(tree, 1);
    let y = compute_adjoint(tree, spec, &zero)?;
    let z = match form {
        PayoffForm::Proof => y.process().clone(),
        PayoffForm::Display => {
            // Replace E[g_a(L_T, 0) | ν] by g_a(L_ν, 0): subtract the projected
            // terminal gradient and add the local one.
            let m = tree.steps();
            let mut projected = vec![0.0; tree.len()];
            for i in (0..=m).rev() {
                for &id in tree.slice(i) {
                    let node = tree.node(id);
                    projected[id] = if i == m {
                        spec.terminal_gradient(&node.l, &[0.0])[0]
                    } else {
                        node.children.iter().map(|b| b.probability * projected[b.node]).sum()
                    };
                }
            }
            AdaptedProcess::from_fn(tree, 1, |node| {
                let local = spec.terminal_gradient(&node.l, &[0.0])[0];
                vec![y.get(node.id)[0] - projected[node.id] + local]
            })?
        }
    };
    Ok(StoppingPayoff { form, z })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnellEnvelope {
    pub u: AdaptedProcess,
    /// `E[U | ν]` over children, and 0 at terminal nodes.
    pub continuation: Vec<f64>,
    /// Nodes with `Z_ν <= continuation_ν` (ties stop).
    pub stop_region: Vec<bool>,
}

impl SnellEnvelope {
    pub fn root_value(&self, tree: &ScenarioTree) -> f64 {
        self.u.get(tree.root())[0]
    }

    /// First entry into the stop region along every path.
    pub fn policy(&self, tree: &ScenarioTree) -> StoppingPolicy {
        let stops = tree
            .paths()
            .iter()
            .map(|p| PathStop {
                leaf: p.leaf(),
                time_index: p.nodes.iter().position(|&id| self.stop_region[id]),
            })
            .collect();
        StoppingPolicy { stops }
    }
}

pub fn snell_min(tree: &ScenarioTree, payoff: &AdaptedProcess) -> Result<SnellEnvelope> {
    payoff.check_tree(tree)?;
    if payoff.dim() != 1 {
        return Err(Error::StoppingDimension(payoff.dim()));
    }
    let n = tree.len();
    let mut u = vec![0.0; n];
    let mut continuation = vec![0.0; n];
    let mut stop_region = vec![false; n];
    for i in (0..=tree.steps()).rev() {
        for &id in tree.slice(i) {
            let node = tree.node(id);
            let cont: f64 = node.children.iter().map(|b| b.probability * u[b.node]).sum();
            let z = payoff.get(id)[0];
            continuation[id] = cont;
            stop_region[id] = z <= cont;
            u[id] = z.min(cont);
        }
    }
    Ok(SnellEnvelope { u: AdaptedProcess::from_flat(tree, 1, u)?, continuation, stop_region })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStop {
    pub leaf: usize,
    /// Grid index of the stop, `None` for never.
    pub time_index: Option<usize>,
}

/// Stopping time per path, in leaf order of [`ScenarioTree::paths`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppingPolicy {
    pub stops: Vec<PathStop>,
}

impl StoppingPolicy {
    pub fn never(tree: &ScenarioTree) -> Self {
        Self { stops: tree.leaves().iter().map(|&leaf| PathStop { leaf, time_index: None }).collect() }
    }

    pub fn at(tree: &ScenarioTree, time_index: usize) -> Self {
        Self { stops: tree.leaves().iter().map(|&leaf| PathStop { leaf, time_index: Some(time_index) }).collect() }
    }

    /// Builds a policy from a per-node stop set by first entry.
    pub fn first_entry(tree: &ScenarioTree, stop: &[bool]) -> Self {
        let stops = tree
            .paths()
            .iter()
            .map(|p| PathStop { leaf: p.leaf(), time_index: p.nodes.iter().position(|&id| stop[id]) })
            .collect();
        Self { stops }
    }
}

/// `τ_A = first grid index with A > threshold` (the initial jump counts at
/// index 0).
pub fn tau_from_control_above(tree: &ScenarioTree, plan: &ControlPlan, threshold: f64) -> Result<StoppingPolicy> {
    if plan.k() != 1 {
        return Err(Error::StoppingDimension(plan.k()));
    }
    let a = plan.cumulative(tree);
    let stops = tree
        .paths()
        .iter()
        .map(|p| PathStop { leaf: p.leaf(), time_index: p.nodes.iter().position(|&id| a.get(id)[0] > threshold) })
        .collect();
    Ok(StoppingPolicy { stops })
}

/// `τ_A = inf{t : A_t > 0}`.
pub fn tau_from_control(tree: &ScenarioTree, plan: &ControlPlan) -> Result<StoppingPolicy> {
    tau_from_control_above(tree, plan, 0.0)
}

/// `E[Z_τ 1{τ < ∞}]`.
pub fn stopping_value(tree: &ScenarioTree, payoff: &AdaptedProcess, policy: &StoppingPolicy) -> Result<f64> {
    payoff.check_tree(tree)?;
    if policy.stops.len() != tree.leaves().len() {
        return Err(Error::DimensionMismatch { expected: tree.leaves().len(), found: policy.stops.len() });
    }
    let mut total = 0.0;
    for stop in &policy.stops {
        if let Some(i) = stop.time_index {
            if i > tree.steps() {
                return Err(Error::IndexOutOfRange { index: i, steps: tree.steps() });
            }
            let node = tree.ancestor_at(stop.leaf, i);
            total += tree.node_probability(stop.leaf) * payoff.get(node)[0];
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// `E[Z_τ 1{τ<∞}]` for `τ` read off the control.
    pub control_value: f64,
    pub snell_value: f64,
    /// `Z_root - Y_root`, the lower bound from the adjoint at the plan.
    pub adjoint_bound: f64,
    pub tolerance: f64,
    pub policy: StoppingPolicy,
    pub passed: bool,
}

/// Checks that the stopping rule read off a certified control is optimal.
///
/// Cumulative values below `1e-9·max(1, max A)` count as zero when reading
/// `τ_A`, so solver round-off does not trigger early stops.
pub fn equivalence_check(
    tree: &ScenarioTree,
    spec: &CostSpec,
    plan: &ControlPlan,
    tolerance: f64,
) -> Result<EquivalenceReport> {
    require_scalar(spec)?;
    let y = compute_adjoint(tree, spec, plan)?;
    let cert = certify_with(tree, spec, plan, &y, tolerance);
    if !cert.certified {
        let (name, value) = cert.worst_residual();
        return Err(Error::NotCertified(format!("{name} residual {value:e} exceeds {tolerance:e}")));
    }
    let payoff = payoff_process(tree, spec, PayoffForm::Proof)?;
    let snell = snell_min(tree, &payoff.z)?;
    let a = plan.cumulative(tree);
    let scale = a.as_flat().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let policy = tau_from_control_above(tree, plan, 1e-9 * scale)?;
    let control_value = stopping_value(tree, &payoff.z, &policy)?;
    let snell_value = snell.root_value(tree);
    let root = tree.root();
    let adjoint_bound = payoff.z.get(root)[0] - y.get(root)[0];
    let passed = (control_value - snell_value).abs() <= tolerance && (control_value - adjoint_bound).abs() <= tolerance;
    Ok(EquivalenceReport { control_value, snell_value, adjoint_bound, tolerance, policy, passed })
}

/// One row of the stop-region table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRegionRow {
    pub node: usize,
    pub time: f64,
    pub l: Vec<f64>,
    pub z: f64,
    pub u: f64,
    pub in_region: bool,
}

pub fn stop_region_rows(tree: &ScenarioTree, payoff: &AdaptedProcess, snell: &SnellEnvelope) -> Vec<StopRegionRow> {
    tree.nodes()
        .iter()
        .map(|n| StopRegionRow {
            node: n.id,
            time: tree.grid().time(n.time_index),
            l: n.l.clone(),
            z: payoff.get(n.id)[0],
            u: snell.u.get(n.id)[0],
            in_region: snell.stop_region[n.id],
        })
        .collect()
}
