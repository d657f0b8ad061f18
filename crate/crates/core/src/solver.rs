//! Projected-gradient solvers for the capped and uncapped problems, the
//! coercivity precheck, and the cap ladder.
//!
//! Both solvers work on the vector `x = (initial jump, increments)` with box
//! bounds `0 <= x <= ub`. The search direction is the adjoint `Y`, which is the
//! gradient of `J` in the probability-weighted inner product
//! `<u, v>_p = Σ p_ν u_ν v_ν` (weight 1 on the initial jump). Step lengths use
//! the Barzilai-Borwein rule in that metric, safeguarded by monotone Armijo
//! backtracking, so iterates are invariant to rescaling the cost.

use serde::{Deserialize, Serialize};

use crate::cost::{expected_cost, ControlPlan, CostSpec};
use crate::error::{Error, Result};
use crate::lattice::ScenarioTree;
use crate::pontryagin::{compute_adjoint, negative_part_integral};
use crate::pseudopath::{plan_pseudopath_distance, plan_sup_distance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepRule {
    /// First trial step, in units of control mass per unit of `max|Y|`.
    pub initial: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        Self { initial: 1.0, shrink: 0.5, sufficient_decrease: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Target for the projected-gradient residual, in units of `Y`.
    pub grad_tolerance: f64,
    pub step: StepRule,
    /// Recorded for reproducibility; the solver itself is deterministic.
    pub seed: u64,
    /// Run the uncapped solver even when coercivity cannot be verified.
    pub waive_coercivity: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_iterations: 10_000, grad_tolerance: 1e-10, step: StepRule::default(), seed: 0, waive_coercivity: false }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!("grad_tolerance must be positive, got {}", self.grad_tolerance)));
        }
        if !(self.step.shrink > 0.0 && self.step.shrink < 1.0) {
            return Err(Error::InvalidArgument(format!("shrink factor must lie in (0, 1), got {}", self.step.shrink)));
        }
        if !(self.step.initial > 0.0) {
            return Err(Error::InvalidArgument(format!("initial step must be positive, got {}", self.step.initial)));
        }
        if !(self.step.sufficient_decrease > 0.0 && self.step.sufficient_decrease < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sufficient-decrease constant must lie in (0, 1), got {}",
                self.step.sufficient_decrease
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// Backtracking could not find a decrease; usually the floating-point floor.
    LineSearchStalled,
    /// Waived-coercivity run whose cost keeps decreasing along the jump ray.
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub value: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    pub coercivity_verified: bool,
    pub termination: Termination,
    /// `J` after every accepted step, starting with the initial point.
    pub value_trace: Vec<f64>,
    /// `E|A_T|_1` after every accepted step.
    pub mass_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoercivityCheck {
    pub verified: bool,
    /// Constant `κ` with `J >= κ E|A_T|_1 - const`, when one was found.
    pub constant: Option<f64>,
    pub explanation: String,
}

/// Sufficient conditions for the uncapped problem to have a minimizer: a
/// positive lower bound on `f` over the grid or declared linear growth of `g`
/// confirmed on probe points (both give `J(A) >= κ E|A_T| - const`), or a
/// nonnegative adjoint at the zero plan, which makes `A = 0` optimal.
pub fn check_coercivity(spec: &CostSpec, tree: &ScenarioTree) -> CoercivityCheck {
    let grid = tree.grid();
    let mut min_f = f64::INFINITY;
    let mut witness = (0.0, 0usize);
    for &t in grid.times() {
        for (j, v) in spec.price(t).into_iter().enumerate() {
            if v < min_f {
                min_f = v;
                witness = (t, j);
            }
        }
    }
    if let Some(c) = spec.meta.f_lower_bound {
        if c > 0.0 && min_f >= c {
            return CoercivityCheck {
                verified: true,
                constant: Some(c),
                explanation: format!("f >= {c} on the grid (declared)"),
            };
        }
    }
    if min_f > 0.0 {
        return CoercivityCheck {
            verified: true,
            constant: Some(min_f),
            explanation: format!("f >= {min_f} on the grid"),
        };
    }
    let f_msg = format!("f vanishes at t = {}, component {}", witness.0, witness.1);

    if let Some(growth) = spec.meta.g_linear_growth {
        if growth.slope > 0.0 && linear_growth_holds(spec, tree, growth.slope, growth.offset) {
            return CoercivityCheck {
                verified: true,
                constant: Some(growth.slope),
                explanation: format!("{f_msg}; g grows at least linearly with slope {}", growth.slope),
            };
        }
        return CoercivityCheck {
            verified: false,
            constant: None,
            explanation: format!("{f_msg}; declared linear growth of g fails on probe points"),
        };
    }
    if zero_plan_is_optimal(spec, tree) {
        return CoercivityCheck {
            verified: true,
            constant: None,
            explanation: format!("{f_msg}; Y >= 0 at every node for A = 0, so the zero plan is a minimizer"),
        };
    }
    let g_msg = if terminal_bounded_on_probes(spec, tree) {
        "g is bounded along the probe ray a = s·1"
    } else {
        "g has no declared linear growth"
    };
    CoercivityCheck { verified: false, constant: None, explanation: format!("{f_msg}; {g_msg}") }
}

fn zero_plan_is_optimal(spec: &CostSpec, tree: &ScenarioTree) -> bool {
    if !spec.has_gradients() {
        return false;
    }
    compute_adjoint(tree, spec, &ControlPlan::zeros(tree, spec.k()))
        .map(|y| y.process().as_flat().iter().all(|v| *v >= 0.0))
        .unwrap_or(false)
}

fn probe_levels(tree: &ScenarioTree) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for &id in tree.leaves() {
        let l = &tree.node(id).l;
        if !out.contains(l) {
            out.push(l.clone());
        }
        if out.len() >= 16 {
            break;
        }
    }
    out
}

fn linear_growth_holds(spec: &CostSpec, tree: &ScenarioTree, slope: f64, offset: f64) -> bool {
    let k = spec.k();
    probe_levels(tree).iter().all(|l| {
        [0.0, 1.0, 10.0, 100.0, 1e4].iter().all(|&s| {
            let a = vec![s; k];
            spec.terminal(l, &a) >= slope * s * k as f64 - offset - 1e-9 * (1.0 + s)
        })
    })
}

fn terminal_bounded_on_probes(spec: &CostSpec, tree: &ScenarioTree) -> bool {
    let k = spec.k();
    probe_levels(tree).iter().all(|l| {
        let base = spec.terminal(l, &vec![0.0; k]);
        [1.0, 10.0, 100.0, 1e4].iter().all(|&s| spec.terminal(l, &vec![s; k]) <= base.max(1.0))
    })
}

/// Box `[0, ub]` per variable and metric weights, in the layout
/// `[initial jump (k), increments (len·k)]`.
struct Layout {
    k: usize,
    upper: Vec<f64>,
    weight: Vec<f64>,
    cap: Option<f64>,
}

impl Layout {
    fn new(tree: &ScenarioTree, k: usize, cap: Option<f64>) -> Self {
        let mut upper = Vec::with_capacity((tree.len() + 1) * k);
        let mut weight = Vec::with_capacity((tree.len() + 1) * k);
        let jump_ub = if cap.is_some() { 0.0 } else { f64::INFINITY };
        upper.extend(std::iter::repeat_n(jump_ub, k));
        weight.extend(std::iter::repeat_n(1.0, k));
        for node in tree.nodes() {
            let ub = match cap {
                Some(n) => n * tree.grid().step(node.time_index),
                // The root increment duplicates the initial jump; keep it at 0.
                None if node.parent.is_none() => 0.0,
                None => f64::INFINITY,
            };
            upper.extend(std::iter::repeat_n(ub, k));
            weight.extend(std::iter::repeat_n(tree.node_probability(node.id), k));
        }
        Self { k, upper, weight, cap }
    }

    fn pack(&self, tree: &ScenarioTree, plan: &ControlPlan) -> Vec<f64> {
        let k = self.k;
        let mut x = Vec::with_capacity(self.upper.len());
        x.extend_from_slice(plan.initial_jump());
        x.extend_from_slice(plan.increments_flat());
        if self.cap.is_none() {
            // Fold a root increment into the initial jump.
            let root = tree.root();
            for j in 0..k {
                x[j] += x[k + root * k + j];
                x[k + root * k + j] = 0.0;
            }
        }
        for (v, ub) in x.iter_mut().zip(&self.upper) {
            *v = v.clamp(0.0, *ub);
        }
        x
    }

    fn unpack(&self, tree: &ScenarioTree, x: &[f64]) -> ControlPlan {
        let k = self.k;
        let mut plan = match self.cap {
            Some(n) => ControlPlan::capped_zeros(tree, k, n),
            None => ControlPlan::zeros(tree, k),
        };
        plan.initial_jump_mut().copy_from_slice(&x[..k]);
        plan.increments_mut().copy_from_slice(&x[k..]);
        plan
    }
}

struct Evaluation {
    value: f64,
    /// `Y` in packed layout (root `Y` in the jump slot).
    y: Vec<f64>,
    mass: f64,
}

fn evaluate(tree: &ScenarioTree, spec: &CostSpec, layout: &Layout, x: &[f64]) -> Result<Evaluation> {
    let plan = layout.unpack(tree, x);
    let value = expected_cost(spec, tree, &plan)?;
    let adj = compute_adjoint(tree, spec, &plan)?;
    let mut y = Vec::with_capacity(x.len());
    y.extend_from_slice(adj.get(tree.root()));
    y.extend_from_slice(adj.process().as_flat());
    Ok(Evaluation { value, y, mass: plan.expected_terminal_mass(tree) })
}

fn kkt_residual(x: &[f64], y: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(upper)
        .map(|((xi, yi), ub)| (xi - (xi - yi).clamp(0.0, *ub)).abs())
        .fold(0.0, f64::max)
}

fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

const ALPHA_MIN: f64 = 1e-12;
const ALPHA_MAX: f64 = 1e12;
const MAX_BACKTRACKS: usize = 60;

fn minimize(
    tree: &ScenarioTree,
    spec: &CostSpec,
    layout: &Layout,
    start: &ControlPlan,
    opts: &SolveOptions,
    coercivity_verified: bool,
    probe_recession: bool,
) -> Result<(ControlPlan, SolveReport)> {
    let mut x = layout.pack(tree, start);
    let mut cur = evaluate(tree, spec, layout, &x)?;
    let mut value_trace = vec![cur.value];
    let mut mass_trace = vec![cur.mass];
    let mut kkt = kkt_residual(&x, &cur.y, &layout.upper);
    let y_scale = cur.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut alpha = if y_scale > 0.0 { opts.step.initial / y_scale } else { opts.step.initial };
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut memory = Memory::default();

    loop {
        if kkt <= opts.grad_tolerance {
            termination = Termination::Converged;
            if probe_recession && recedes(tree, spec, layout, &x, &cur)? {
                termination = Termination::Unbounded;
            }
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;

        let mut accepted = quasi_newton_step(tree, spec, layout, &x, &cur, &memory, alpha, kkt, opts)?;
        if accepted.is_none() {
            let d: Vec<f64> = x
                .iter()
                .zip(&cur.y)
                .zip(&layout.upper)
                .map(|((xi, yi), ub)| (xi - alpha * yi).clamp(0.0, *ub) - xi)
                .collect();
            if !(weighted_dot(&layout.weight, &cur.y, &d) < 0.0) {
                // Projected step makes no first-order progress: floating-point floor.
                termination = Termination::LineSearchStalled;
                break;
            }
            accepted = arc_search(tree, spec, layout, &x, &cur, &d, MAX_BACKTRACKS, opts)?;
        }
        let Some((xn, next)) = accepted else {
            termination = Termination::LineSearchStalled;
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yd: Vec<f64> = next.y.iter().zip(&cur.y).map(|(a, b)| a - b).collect();
        let ss = weighted_dot(&layout.weight, &s, &s);
        let sy = weighted_dot(&layout.weight, &s, &yd);
        alpha = if sy > 0.0 { (ss / sy).clamp(ALPHA_MIN, ALPHA_MAX) } else { ALPHA_MAX.min(alpha * 10.0) };
        memory.push(s, yd);

        x = xn;
        cur = next;
        kkt = kkt_residual(&x, &cur.y, &layout.upper);
        value_trace.push(cur.value);
        mass_trace.push(cur.mass);
    }

    let plan = layout.unpack(tree, &x);
    let report = SolveReport {
        value: cur.value,
        iterations,
        kkt_residual: kkt,
        converged: termination == Termination::Converged,
        coercivity_verified,
        termination,
        value_trace,
        mass_trace,
    };
    Ok((plan, report))
}

const MEMORY: usize = 10;
const QN_BACKTRACKS: usize = 30;

/// Recent `(s, ΔY)` pairs for the limited-memory quasi-Newton direction.
#[derive(Default)]
struct Memory {
    pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        if self.pairs.len() == MEMORY {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y));
    }

    /// `H·q` in the `p`-weighted metric, restricted to the coordinates in `free`.
    fn apply(&self, w: &[f64], free: &[bool], q: &[f64], fallback: f64) -> Vec<f64> {
        let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(a, &f)| if f { *a } else { 0.0 }).collect() };
        let mut reduced = Vec::with_capacity(self.pairs.len());
        for (s, y) in &self.pairs {
            let (s, y) = (mask(s), mask(y));
            let sy = weighted_dot(w, &s, &y);
            let scale = (weighted_dot(w, &s, &s) * weighted_dot(w, &y, &y)).sqrt();
            if sy > 1e-10 * scale && sy > 0.0 {
                reduced.push((s, y, 1.0 / sy));
            }
        }
        let mut r = mask(q);
        let mut coef = vec![0.0; reduced.len()];
        for (i, (s, y, rho)) in reduced.iter().enumerate().rev() {
            coef[i] = rho * weighted_dot(w, s, &r);
            r.iter_mut().zip(y).for_each(|(ri, yi)| *ri -= coef[i] * yi);
        }
        let gamma = match reduced.last() {
            Some((_, y, rho)) => 1.0 / (rho * weighted_dot(w, y, y)),
            None => fallback,
        };
        r.iter_mut().for_each(|ri| *ri *= gamma);
        for (i, (s, y, rho)) in reduced.iter().enumerate() {
            let beta = rho * weighted_dot(w, y, &r);
            r.iter_mut().zip(s).for_each(|(ri, si)| *ri += (coef[i] - beta) * si);
        }
        r
    }
}

/// Projected arc search along `x + λ d` with Armijo on the realized step.
#[allow(clippy::too_many_arguments)]
fn arc_search(
    tree: &ScenarioTree,
    spec: &CostSpec,
    layout: &Layout,
    x: &[f64],
    cur: &Evaluation,
    d: &[f64],
    backtracks: usize,
    opts: &SolveOptions,
) -> Result<Option<(Vec<f64>, Evaluation)>> {
    let mut lambda = 1.0;
    let floor = 4.0 * f64::EPSILON * cur.value.abs().max(f64::MIN_POSITIVE);
    for _ in 0..backtracks {
        let xn: Vec<f64> =
            x.iter().zip(d).zip(&layout.upper).map(|((xi, di), ub)| (xi + lambda * di).clamp(0.0, *ub)).collect();
        let step: Vec<f64> = xn.iter().zip(x).map(|(a, b)| a - b).collect();
        let slope = weighted_dot(&layout.weight, &cur.y, &step);
        if slope < 0.0 {
            if let Ok(next) = evaluate(tree, spec, layout, &xn) {
                let predicted = opts.step.sufficient_decrease * slope;
                let armijo = next.value <= cur.value + predicted;
                // Below the rounding floor of J the Armijo test is noise; accept
                // any step that does not visibly increase the cost.
                let roundoff = predicted.abs() <= floor && next.value <= cur.value + floor;
                if armijo || roundoff {
                    return Ok(Some((xn, next)));
                }
            }
        }
        lambda *= opts.step.shrink;
    }
    Ok(None)
}

/// Quasi-Newton step on the free variables, gradient step on the nearly
/// active ones. `None` when it fails to give sufficient decrease.
#[allow(clippy::too_many_arguments)]
fn quasi_newton_step(
    tree: &ScenarioTree,
    spec: &CostSpec,
    layout: &Layout,
    x: &[f64],
    cur: &Evaluation,
    memory: &Memory,
    alpha: f64,
    kkt: f64,
    opts: &SolveOptions,
) -> Result<Option<(Vec<f64>, Evaluation)>> {
    if memory.pairs.is_empty() {
        return Ok(None);
    }
    let margin = kkt.min(1e-3);
    let free: Vec<bool> = x
        .iter()
        .zip(&cur.y)
        .zip(&layout.upper)
        .map(|((xi, yi), ub)| !((*xi <= margin && *yi > 0.0) || (*xi >= ub - margin && *yi < 0.0)))
        .collect();
    if !free.iter().any(|&f| f) {
        return Ok(None);
    }
    let hq = memory.apply(&layout.weight, &free, &cur.y, alpha);
    let d: Vec<f64> =
        free.iter().zip(&hq).zip(&cur.y).map(|((&f, h), yi)| if f { -h } else { -alpha * yi }).collect();
    if !d.iter().all(|v| v.is_finite()) || !(weighted_dot(&layout.weight, &cur.y, &d) < 0.0) {
        return Ok(None);
    }
    arc_search(tree, spec, layout, x, cur, &d, QN_BACKTRACKS, opts)
}

/// True when pushing extra mass through the initial jump still lowers `J`,
/// i.e. the stationary point found is an artifact of the tolerance.
fn recedes(tree: &ScenarioTree, spec: &CostSpec, layout: &Layout, x: &[f64], cur: &Evaluation) -> Result<bool> {
    let step = 1.0 + cur.mass;
    let mut probe = x.to_vec();
    for v in probe.iter_mut().take(layout.k) {
        *v += step;
    }
    let far = evaluate(tree, spec, layout, &probe)?;
    Ok(far.value < cur.value - 1e-14 * cur.value.abs().max(1.0))
}

/// Minimizes `J` over plans with `0 <= ΔA_ν <= n·Δ_{i(ν)}` and no initial jump.
pub fn solve_capped(
    tree: &ScenarioTree,
    spec: &CostSpec,
    cap: f64,
    opts: &SolveOptions,
) -> Result<(ControlPlan, SolveReport)> {
    spec.audit(tree)?;
    let coercive = check_coercivity(spec, tree).verified;
    solve_capped_from(tree, spec, cap, opts, &ControlPlan::capped_zeros(tree, spec.k(), cap), coercive)
}

fn solve_capped_from(
    tree: &ScenarioTree,
    spec: &CostSpec,
    cap: f64,
    opts: &SolveOptions,
    start: &ControlPlan,
    coercive: bool,
) -> Result<(ControlPlan, SolveReport)> {
    opts.validate()?;
    spec.require_gradients()?;
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Error::InvalidArgument(format!("cap must be positive and finite, got {cap}")));
    }
    let layout = Layout::new(tree, spec.k(), Some(cap));
    minimize(tree, spec, &layout, start, opts, coercive, false)
}

/// Minimizes `J` over all nonnegative increments and initial jumps.
///
/// Without verified coercivity this is refused unless
/// [`SolveOptions::waive_coercivity`] is set; a waived run that keeps
/// decreasing along the jump ray reports [`Termination::Unbounded`].
pub fn solve_uncapped(tree: &ScenarioTree, spec: &CostSpec, opts: &SolveOptions) -> Result<(ControlPlan, SolveReport)> {
    spec.audit(tree)?;
    solve_uncapped_from(tree, spec, opts, &ControlPlan::zeros(tree, spec.k()))
}

fn solve_uncapped_from(
    tree: &ScenarioTree,
    spec: &CostSpec,
    opts: &SolveOptions,
    start: &ControlPlan,
) -> Result<(ControlPlan, SolveReport)> {
    opts.validate()?;
    spec.require_gradients()?;
    let coercivity = check_coercivity(spec, tree);
    if !coercivity.verified && !opts.waive_coercivity {
        return Err(Error::CoercivityUnverified(coercivity.explanation));
    }
    let layout = Layout::new(tree, spec.k(), None);
    minimize(tree, spec, &layout, start, opts, coercivity.verified, !coercivity.verified)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRung {
    pub cap: f64,
    pub value: f64,
    /// `V^[n] - V`
    pub gap: f64,
    /// Pseudopath distance to the uncapped optimizer.
    pub pp_distance: f64,
    /// Pseudopath distance to the previous rung's optimizer.
    pub pp_to_previous: Option<f64>,
    /// Largest grid-sup distance to the uncapped optimizer over paths.
    pub sup_distance: f64,
    /// `E∫(Y^[n])^- dt`
    pub negative_part: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub plan: ControlPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub caps: Vec<f64>,
    pub rungs: Vec<LadderRung>,
    pub uncapped_value: f64,
    pub uncapped_plan: ControlPlan,
    pub uncapped_report: SolveReport,
    /// `V^[n]` nonincreasing within [`LADDER_SLACK`].
    pub monotone: bool,
    /// Every `V^[n] >= V - LADDER_SLACK`.
    pub bounded_below: bool,
}

pub const LADDER_SLACK: f64 = 1e-8;

impl LadderReport {
    pub fn values(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.value).collect()
    }

    pub fn all_converged(&self) -> bool {
        self.uncapped_report.converged && self.rungs.iter().all(|r| r.converged)
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.rungs.last().map(|r| r.gap)
    }
}

/// Solves the uncapped problem and then each capped problem in increasing
/// order of `caps`, warm-starting every rung from the previous optimizer.
pub fn run_ladder(tree: &ScenarioTree, spec: &CostSpec, caps: &[f64], opts: &SolveOptions) -> Result<LadderReport> {
    if caps.is_empty() {
        return Err(Error::InvalidArgument("cap list is empty".into()));
    }
    if let Some(w) = caps.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(format!("caps must be strictly increasing: {} then {}", w[0], w[1])));
    }
    spec.audit(tree)?;
    let coercive = check_coercivity(spec, tree).verified;
    let (uncapped_plan, uncapped_report) = solve_uncapped_from(tree, spec, opts, &ControlPlan::zeros(tree, spec.k()))?;
    let v = uncapped_report.value;

    let mut rungs: Vec<LadderRung> = Vec::with_capacity(caps.len());
    let mut start = ControlPlan::capped_zeros(tree, spec.k(), caps[0]);
    for &cap in caps {
        let warm = ControlPlan::new(tree, spec.k(), start.initial_jump().to_vec(), start.increments_flat().to_vec(), Some(cap))?;
        let (plan, report) = solve_capped_from(tree, spec, cap, opts, &warm, coercive)?;
        let y = compute_adjoint(tree, spec, &plan)?;
        let pp_to_previous = match rungs.last() {
            Some(prev) => Some(plan_pseudopath_distance(tree, &prev.plan, &plan)?),
            None => None,
        };
        rungs.push(LadderRung {
            cap,
            value: report.value,
            gap: report.value - v,
            pp_distance: plan_pseudopath_distance(tree, &plan, &uncapped_plan)?,
            pp_to_previous,
            sup_distance: plan_sup_distance(tree, &plan, &uncapped_plan)?,
            negative_part: negative_part_integral(tree, &y),
            iterations: report.iterations,
            converged: report.converged,
            kkt_residual: report.kkt_residual,
            plan: plan.clone(),
        });
        start = plan;
    }
    let monotone = rungs.windows(2).all(|w| w[1].value <= w[0].value + LADDER_SLACK);
    let bounded_below = rungs.iter().all(|r| r.value >= v - LADDER_SLACK);
    Ok(LadderReport {
        caps: caps.to_vec(),
        rungs,
        uncapped_value: v,
        uncapped_plan,
        uncapped_report,
        monotone,
        bounded_below,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{Penalty, Price};

    fn lottery() -> ScenarioTree {
        ScenarioTree::lottery(1, &[(vec![0.0], 0.5), (vec![2.0], 0.5)], 1.0).unwrap()
    }

    fn high_leaf(tree: &ScenarioTree) -> usize {
        *tree.leaves().iter().find(|&&id| tree.node(id).l[0] == 2.0).unwrap()
    }

    #[test]
    fn zero_spec_is_immediate() {
        let tree = lottery();
        let spec = CostSpec::zero(1);
        let (plan, rep) = solve_capped(&tree, &spec, 1.0, &SolveOptions::default()).unwrap();
        assert!(rep.converged && rep.iterations <= 1);
        assert_eq!(rep.value, 0.0);
        assert!(plan.increments_flat().iter().all(|v| *v == 0.0));
        let (plan, rep) = solve_uncapped(&tree, &spec, &SolveOptions::default()).unwrap();
        assert!(rep.converged && rep.coercivity_verified);
        assert_eq!(rep.value, 0.0);
        assert_eq!(plan.initial_jump(), &[0.0]);
    }

    #[test]
    fn capped_lottery_values() {
        let tree = lottery();
        let spec = CostSpec::quadratic_terminal(1.0);
        let hi = high_leaf(&tree);
        let (plan, rep) = solve_capped(&tree, &spec, 1.0, &SolveOptions::default()).unwrap();
        assert!(rep.converged);
        assert!((rep.value - 0.75).abs() < 1e-9);
        assert!((plan.increment(hi)[0] - 1.0).abs() < 1e-9);
        let (plan, rep) = solve_capped(&tree, &spec, 0.5, &SolveOptions::default()).unwrap();
        assert!((rep.value - 0.8125).abs() < 1e-9);
        assert!((plan.increment(hi)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uncapped_lottery_optimum() {
        let tree = lottery();
        let spec = CostSpec::quadratic_terminal(1.0);
        let (plan, rep) = solve_uncapped(&tree, &spec, &SolveOptions::default()).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!((rep.value - 0.75).abs() < 1e-9);
        let a = plan.cumulative(&tree);
        for &id in tree.leaves() {
            let l = tree.node(id).l[0];
            assert!((a.get(id)[0] - (l - 1.0).max(0.0)).abs() < 1e-9);
        }
        assert!(rep.value_trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn coercivity_cases() {
        let tree = lottery();
        let c = check_coercivity(&CostSpec::quadratic_terminal(1.0), &tree);
        assert!(c.verified);
        assert_eq!(c.constant, Some(1.0));
        let c = check_coercivity(&CostSpec::exp_nonattain(), &tree);
        assert!(!c.verified);
        assert!(c.explanation.contains("bounded"), "{}", c.explanation);
        let flat = CostSpec::new("flat", 1, Price::Constant(vec![1.0, 0.0]), Penalty::Zero, Penalty::Zero);
        let c = check_coercivity(&flat, &tree);
        assert!(c.verified && c.constant.is_none());
        assert!(c.explanation.contains("component 1") && c.explanation.contains("zero plan"), "{}", c.explanation);
        let decaying =
            CostSpec::new("decaying", 1, Price::Constant(vec![1.0, 0.0]), Penalty::Zero, Penalty::ExpDecay { weight: 1.0 });
        let c = check_coercivity(&decaying, &tree);
        assert!(!c.verified);
        assert!(c.explanation.contains("component 1"), "{}", c.explanation);
    }

    #[test]
    fn waived_nonattainment_diverges() {
        let tree = lottery();
        let spec = CostSpec::exp_nonattain();
        assert!(matches!(solve_uncapped(&tree, &spec, &SolveOptions::default()), Err(Error::CoercivityUnverified(_))));
        let opts = SolveOptions { waive_coercivity: true, ..SolveOptions::default() };
        let (_, rep) = solve_uncapped(&tree, &spec, &opts).unwrap();
        assert!(!rep.converged);
        assert!(*rep.value_trace.last().unwrap() <= 0.01);
        assert!(*rep.mass_trace.last().unwrap() >= 5.0);
        assert!(rep.value_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ladder_on_lottery() {
        let tree = lottery();
        let spec = CostSpec::quadratic_terminal(1.0);
        let rep = run_ladder(&tree, &spec, &[0.5, 1.0, 2.0, 4.0], &SolveOptions::default()).unwrap();
        assert!(rep.monotone && rep.bounded_below);
        assert!((rep.rungs[0].value - 0.8125).abs() < 1e-9);
        assert!(rep.final_gap().unwrap().abs() < 1e-6);
        assert!(rep.rungs[0].negative_part > 0.0);
        assert!(rep.rungs[1..].iter().all(|r| r.negative_part < 1e-9));
        assert!(run_ladder(&tree, &spec, &[2.0, 1.0], &SolveOptions::default()).is_err());
    }

    #[test]
    fn options_validation() {
        let bad = SolveOptions { grad_tolerance: 0.0, ..SolveOptions::default() };
        assert!(bad.validate().is_err());
        let bad = SolveOptions { step: StepRule { shrink: 1.0, ..StepRule::default() }, ..SolveOptions::default() };
        assert!(bad.validate().is_err());
    }
}
