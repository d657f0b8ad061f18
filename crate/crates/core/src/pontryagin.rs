//! Adjoint process and first-order optimality certificates.
//!
//! The adjoint `Y` is the optional projection of the subgradient process onto
//! the tree filtration:
//!
//! ```text
//! Y_ν = f(t_ν) + E[ Σ_{j >= i(ν), j<M} ∇h(L_{t_j}, A_{t_j})·Δ_{j+1} + ∇g(L_T, A_T) | ν ]
//! ```
//!
//! and `node_probability(ν)·Y_ν` is the partial derivative of the expected
//! cost with respect to the increment at `ν`. A plan is certified when
//! `Y >= 0`, `Y·ΔA = 0` node by node, and `Y + N - f` is a martingale with
//! the right terminal value, where `N_ν = Σ_{j < i(ν)} ∇h·Δ_{j+1}`.

use serde::{Deserialize, Serialize};

use crate::cost::{expected_cost, ControlPlan, CostSpec};
use crate::error::{Error, Result};
use crate::lattice::{dot, AdaptedProcess, ScenarioTree};

/// `Y` at every node, dimension `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointProcess(pub AdaptedProcess);

impl AdjointProcess {
    pub fn get(&self, node: usize) -> &[f64] {
        self.0.get(node)
    }

    pub fn process(&self) -> &AdaptedProcess {
        &self.0
    }
}

/// Backward induction for the adjoint at `plan`.
pub fn compute_adjoint(tree: &ScenarioTree, spec: &CostSpec, plan: &ControlPlan) -> Result<AdjointProcess> {
    spec.require_gradients()?;
    spec.check_dims(tree, plan)?;
    let k = spec.k();
    let grid = tree.grid();
    let m = grid.steps();
    let a = plan.cumulative(tree);
    // tail[ν] = E[Σ_{j>=i} ∇h Δ + ∇g | ν]
    let mut tail = vec![0.0; tree.len() * k];
    let mut y = AdaptedProcess::zeros(tree, k);
    for i in (0..=m).rev() {
        let price = spec.price(grid.time(i));
        for &id in tree.slice(i) {
            let node = tree.node(id);
            let mut acc = if i == m {
                spec.terminal_gradient(&node.l, a.get(id))
            } else {
                let gh = spec.running_gradient(&node.l, a.get(id));
                let dt = grid.step(i + 1);
                let mut acc: Vec<f64> = gh.iter().map(|v| v * dt).collect();
                for b in &node.children {
                    for (s, v) in acc.iter_mut().zip(&tail[b.node * k..(b.node + 1) * k]) {
                        *s += b.probability * v;
                    }
                }
                acc
            };
            if acc.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCost { node: id, term: "gradient" });
            }
            tail[id * k..(id + 1) * k].copy_from_slice(&acc);
            for (s, f) in acc.iter_mut().zip(&price) {
                *s += f;
            }
            y.set(id, &acc);
        }
    }
    Ok(AdjointProcess(y))
}

/// `E<Y, dA> = Y_root·ΔA_init + Σ_ν p_ν Y_ν·ΔA_ν`.
pub fn expected_pairing(tree: &ScenarioTree, y: &AdjointProcess, plan: &ControlPlan) -> f64 {
    let mut total = dot(y.get(tree.root()), plan.initial_jump());
    for node in tree.nodes() {
        total += tree.node_probability(node.id) * dot(y.get(node.id), plan.increment(node.id));
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbsdeCertificate {
    pub tolerance: f64,
    /// `max(0, -min Y)`
    pub negativity_residual: f64,
    /// `|E<Y, dA>|`
    pub complementarity_expected: f64,
    /// `max_ν |Y_ν·ΔA_ν|` (and the initial jump); the certifying form.
    pub complementarity_pathwise: f64,
    pub martingale_defect: f64,
    pub terminal_defect: f64,
    pub admissibility_checked: bool,
    pub certified: bool,
}

impl FbsdeCertificate {
    pub fn max_residual(&self) -> f64 {
        self.negativity_residual
            .max(self.complementarity_pathwise)
            .max(self.complementarity_expected)
            .max(self.martingale_defect)
            .max(self.terminal_defect)
    }

    /// Name of the largest residual, for diagnostics.
    pub fn worst_residual(&self) -> (&'static str, f64) {
        [
            ("negativity", self.negativity_residual),
            ("complementarity", self.complementarity_pathwise.max(self.complementarity_expected)),
            ("martingale", self.martingale_defect),
            ("terminal", self.terminal_defect),
        ]
        .into_iter()
        .fold(("none", 0.0), |best, cur| if cur.1 > best.1 { cur } else { best })
    }
}

/// Evaluates every residual of the discrete Pontryagin system at `plan`.
pub fn certify(tree: &ScenarioTree, spec: &CostSpec, plan: &ControlPlan, tolerance: f64) -> Result<FbsdeCertificate> {
    let y = compute_adjoint(tree, spec, plan)?;
    Ok(certify_with(tree, spec, plan, &y, tolerance))
}

pub(crate) fn certify_with(
    tree: &ScenarioTree,
    spec: &CostSpec,
    plan: &ControlPlan,
    y: &AdjointProcess,
    tolerance: f64,
) -> FbsdeCertificate {
    let k = spec.k();
    let grid = tree.grid();
    let m = grid.steps();
    let admissible = plan.validate(tree).is_ok();
    let a = plan.cumulative(tree);

    let mut min_y = f64::INFINITY;
    let mut comp_path: f64 = y.get(tree.root()).iter().zip(plan.initial_jump()).map(|(v, d)| (v * d).abs()).fold(0.0, f64::max);
    for node in tree.nodes() {
        for (v, d) in y.get(node.id).iter().zip(plan.increment(node.id)) {
            min_y = min_y.min(*v);
            comp_path = comp_path.max((v * d).abs());
        }
    }
    let comp_expected = expected_pairing(tree, y, plan).abs();

    // N_ν = Σ_{j < i(ν)} ∇h(L_j, A_j)·Δ_{j+1} along the root path.
    let mut n_acc = vec![0.0; tree.len() * k];
    let mut shifted = vec![0.0; tree.len() * k];
    for i in 0..=m {
        let price = spec.price(grid.time(i));
        for &id in tree.slice(i) {
            let node = tree.node(id);
            if let Some(p) = node.parent {
                let gh = spec.running_gradient(&tree.node(p).l, a.get(p));
                let dt = grid.step(i);
                for j in 0..k {
                    n_acc[id * k + j] = n_acc[p * k + j] + gh[j] * dt;
                }
            }
            for j in 0..k {
                shifted[id * k + j] = y.get(id)[j] + n_acc[id * k + j] - price[j];
            }
        }
    }
    let mut martingale: f64 = 0.0;
    for node in tree.nodes() {
        if node.time_index == m {
            continue;
        }
        for j in 0..k {
            let next: f64 = node.children.iter().map(|b| b.probability * shifted[b.node * k + j]).sum();
            martingale = martingale.max((shifted[node.id * k + j] - next).abs());
        }
    }
    let price_t = spec.price(grid.horizon());
    let mut terminal: f64 = 0.0;
    for &id in tree.leaves() {
        let gg = spec.terminal_gradient(&tree.node(id).l, a.get(id));
        for j in 0..k {
            terminal = terminal.max((y.get(id)[j] - (gg[j] + price_t[j])).abs());
        }
    }

    let negativity = (-min_y).max(0.0);
    let certified = admissible
        && negativity <= tolerance
        && comp_path <= tolerance
        && martingale <= tolerance
        && terminal <= tolerance;
    FbsdeCertificate {
        tolerance,
        negativity_residual: negativity,
        complementarity_expected: comp_expected,
        complementarity_pathwise: comp_path,
        martingale_defect: martingale,
        terminal_defect: terminal,
        admissibility_checked: admissible,
        certified,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapBound {
    /// `J(plan) + E<Y, dA'> - E<Y, dA>`, a lower bound on `J(competitor)`.
    pub bound: f64,
    pub plan_value: f64,
    pub competitor_pairing: f64,
    pub plan_pairing: f64,
}

/// Lower bound on the competitor's cost from the subgradient inequality.
pub fn optimality_gap_bound(
    tree: &ScenarioTree,
    spec: &CostSpec,
    plan: &ControlPlan,
    y: &AdjointProcess,
    competitor: &ControlPlan,
) -> Result<GapBound> {
    competitor.validate(tree)?;
    let plan_value = expected_cost(spec, tree, plan)?;
    let competitor_pairing = expected_pairing(tree, y, competitor);
    let plan_pairing = expected_pairing(tree, y, plan);
    Ok(GapBound { bound: plan_value + competitor_pairing - plan_pairing, plan_value, competitor_pairing, plan_pairing })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CappedKktReport {
    pub cap: f64,
    /// `E ∫ (Y)^- dt` on the grid.
    pub negative_part: f64,
    /// `n · E ∫ (Y)^- dt`
    pub lhs: f64,
    /// `-E ∫ Y dA`
    pub rhs: f64,
    pub identity_gap: f64,
    /// Largest of: `(Y)^-` where the control sits at 0, `(Y)^+` where it sits
    /// at the cap, `|Y|` in between.
    pub box_violation: f64,
}

/// `E ∫ (Y)^- dt = Σ_{ν: i(ν) >= 1} p_ν Σ_j (Y_ν^j)^- · Δ_{i(ν)}`. The interval
/// `(t_{i-1}, t_i]` is charged to the node at `t_i`, where its increment is
/// decided.
pub fn negative_part_integral(tree: &ScenarioTree, y: &AdjointProcess) -> f64 {
    let grid = tree.grid();
    tree.nodes()
        .iter()
        .filter(|n| n.time_index >= 1)
        .map(|n| {
            let neg: f64 = y.get(n.id).iter().map(|v| (-v).max(0.0)).sum();
            tree.node_probability(n.id) * neg * grid.step(n.time_index)
        })
        .sum()
}

/// Discrete form of `n E∫(Y)^- dt = -E∫Y dA` plus the box-KKT decomposition
/// for a capped optimizer.
pub fn capped_kkt_identities(
    tree: &ScenarioTree,
    spec: &CostSpec,
    plan: &ControlPlan,
    cap: f64,
) -> Result<CappedKktReport> {
    let y = compute_adjoint(tree, spec, plan)?;
    let negative_part = negative_part_integral(tree, &y);
    let lhs = cap * negative_part;
    let rhs = -expected_pairing(tree, &y, plan);
    let grid = tree.grid();
    let mut box_violation: f64 = 0.0;
    for node in tree.nodes() {
        let upper = cap * grid.step(node.time_index);
        if upper == 0.0 {
            continue;
        }
        let slack = 1e-12 * (1.0 + upper);
        for (v, d) in y.get(node.id).iter().zip(plan.increment(node.id)) {
            let viol = if *d <= slack {
                (-v).max(0.0)
            } else if *d >= upper - slack {
                v.max(0.0)
            } else {
                v.abs()
            };
            box_violation = box_violation.max(viol);
        }
    }
    Ok(CappedKktReport { cap, negative_part, lhs, rhs, identity_gap: (lhs - rhs).abs(), box_violation })
}

/// `E∫(Y^[n])^- dt` for each capped optimizer of a ladder.
pub fn negative_part_trace(tree: &ScenarioTree, spec: &CostSpec, plans: &[ControlPlan]) -> Result<Vec<f64>> {
    plans
        .iter()
        .map(|plan| compute_adjoint(tree, spec, plan).map(|y| negative_part_integral(tree, &y)))
        .collect()
}
