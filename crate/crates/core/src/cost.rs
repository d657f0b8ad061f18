//! Cost functional, control plans and the subgradient process.
//!
//! For a path of `L` and a nondecreasing control `A` the pathwise cost is
//!
//! ```text
//! C(L, A) = f(0)·ΔA_init + Σ_i f(t_i)·ΔA_i            (Stieltjes part)
//!         + Σ_{i<M} h(L_{t_i}, A_{t_i})·(t_{i+1} - t_i)  (left-endpoint rule)
//!         + g(L_T, A_T)
//! ```
//!
//! and the subgradient process is
//! `∂C_{t_i} = f(t_i) + Σ_{j>=i, j<M} ∇h(L_{t_j}, A_{t_j})·Δ_{j+1} + ∇g(L_T, A_T)`,
//! which is exactly the derivative of `C` with respect to an increment placed
//! at `t_i` under the same quadrature.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{dot, pairing, AdaptedProcess, Increments, PathSample, ScenarioTree};

/// The price `f : [0, T] -> [0, ∞)^k` of control.
pub trait PriceSchedule: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn price(&self, t: f64, out: &mut [f64]);
}

/// A running or terminal cost `φ(l, a)`, convex in `a`.
pub trait StateCost: Send + Sync + fmt::Debug {
    fn value(&self, l: &[f64], a: &[f64]) -> f64;

    /// Gradient in `a`, written into `out`.
    fn gradient(&self, l: &[f64], a: &[f64], out: &mut [f64]);

    fn has_gradient(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Price {
    Constant(Vec<f64>),
    /// `intercept + slope·t`, per component.
    Affine { intercept: Vec<f64>, slope: Vec<f64> },
}

impl PriceSchedule for Price {
    fn dim(&self) -> usize {
        match self {
            Price::Constant(c) => c.len(),
            Price::Affine { intercept, .. } => intercept.len(),
        }
    }

    fn price(&self, t: f64, out: &mut [f64]) {
        match self {
            Price::Constant(c) => out.copy_from_slice(c),
            Price::Affine { intercept, slope } => {
                for ((o, a), b) in out.iter_mut().zip(intercept).zip(slope) {
                    *o = a + b * t;
                }
            }
        }
    }
}

/// Built-in state costs. Tracking variants pair `a_j` with `l_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Penalty {
    Zero,
    /// `w/2 · |l - a|²`
    Quadratic { weight: f64 },
    /// `w · Σ |l_j - a_j|`; the gradient takes value 0 at ties.
    Absolute { weight: f64 },
    /// `w · Σ exp(-a_j)`
    ExpDecay { weight: f64 },
    /// `w · Σ a_j`
    Linear { weight: f64 },
}

impl StateCost for Penalty {
    fn value(&self, l: &[f64], a: &[f64]) -> f64 {
        match *self {
            Penalty::Zero => 0.0,
            Penalty::Quadratic { weight } => {
                0.5 * weight * l.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            }
            Penalty::Absolute { weight } => weight * l.iter().zip(a).map(|(x, y)| (x - y).abs()).sum::<f64>(),
            Penalty::ExpDecay { weight } => weight * a.iter().map(|y| (-y).exp()).sum::<f64>(),
            Penalty::Linear { weight } => weight * a.iter().sum::<f64>(),
        }
    }

    fn gradient(&self, l: &[f64], a: &[f64], out: &mut [f64]) {
        match *self {
            Penalty::Zero => out.fill(0.0),
            Penalty::Quadratic { weight } => {
                for ((o, x), y) in out.iter_mut().zip(l).zip(a) {
                    *o = weight * (y - x);
                }
            }
            Penalty::Absolute { weight } => {
                for ((o, x), y) in out.iter_mut().zip(l).zip(a) {
                    *o = if y > x {
                        weight
                    } else if y < x {
                        -weight
                    } else {
                        0.0
                    };
                }
            }
            Penalty::ExpDecay { weight } => {
                for (o, y) in out.iter_mut().zip(a) {
                    *o = -weight * (-y).exp();
                }
            }
            Penalty::Linear { weight } => out.fill(weight),
        }
    }
}

type ValueFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type GradientFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// User-supplied state cost, optionally with a gradient.
#[derive(Clone)]
pub struct CustomCost {
    pub name: String,
    value: Arc<ValueFn>,
    gradient: Option<Arc<GradientFn>>,
}

impl CustomCost {
    pub fn new(name: impl Into<String>, value: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), value: Arc::new(value), gradient: None }
    }

    pub fn with_gradient(mut self, gradient: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }
}

impl fmt::Debug for CustomCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomCost")
            .field("name", &self.name)
            .field("gradient", &self.gradient.is_some())
            .finish()
    }
}

impl StateCost for CustomCost {
    fn value(&self, l: &[f64], a: &[f64]) -> f64 {
        (self.value)(l, a)
    }

    fn gradient(&self, l: &[f64], a: &[f64], out: &mut [f64]) {
        match &self.gradient {
            Some(g) => g(l, a, out),
            None => out.fill(f64::NAN),
        }
    }

    fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }
}

/// `φ(l, a) >= slope·|a|_1 - offset` for all `l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGrowth {
    pub slope: f64,
    pub offset: f64,
}

/// Declared growth metadata. Only used for coercivity checks and warnings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostMeta {
    /// Declared componentwise lower bound `c` on `f`.
    pub f_lower_bound: Option<f64>,
    pub g_linear_growth: Option<LinearGrowth>,
    /// Growth exponents `(p, q)` of the envelope conditions.
    pub growth_exponents: Option<(f64, f64)>,
}

/// The triple `(f, h, g)` with dimensions `k` (control) and `d` (target).
#[derive(Clone, Debug)]
pub struct CostSpec {
    pub name: String,
    k: usize,
    d: usize,
    f: Arc<dyn PriceSchedule>,
    h: Arc<dyn StateCost>,
    g: Arc<dyn StateCost>,
    pub meta: CostMeta,
}

impl CostSpec {
    pub fn new(
        name: impl Into<String>,
        d: usize,
        f: impl PriceSchedule + 'static,
        h: impl StateCost + 'static,
        g: impl StateCost + 'static,
    ) -> Self {
        let k = f.dim();
        Self { name: name.into(), k, d, f: Arc::new(f), h: Arc::new(h), g: Arc::new(g), meta: CostMeta::default() }
    }

    pub fn with_meta(mut self, meta: CostMeta) -> Self {
        self.meta = meta;
        self
    }

    /// `f = h = g = 0`.
    pub fn zero(k: usize) -> Self {
        Self::new("zero", k, Price::Constant(vec![0.0; k]), Penalty::Zero, Penalty::Zero)
    }

    /// `f ≡ price`, `h ≡ 0`, `g = ½|l - a|²`.
    pub fn quadratic_terminal(price: f64) -> Self {
        Self::new("quadratic-terminal", 1, Price::Constant(vec![price]), Penalty::Zero, Penalty::Quadratic { weight: 1.0 })
            .with_meta(CostMeta { f_lower_bound: Some(price), ..CostMeta::default() })
    }

    /// `f = 0`, `h = 0`, `g = exp(-a)`: value 0, never attained.
    pub fn exp_nonattain() -> Self {
        Self::new("exp-nonattain", 1, Price::Constant(vec![0.0]), Penalty::Zero, Penalty::ExpDecay { weight: 1.0 })
    }

    /// `f(t) = ½ + t`, `h = |l - a|`, `g = 0` on `[0, 1]`.
    pub fn ray_counterexample() -> Self {
        Self::new(
            "ray-counterexample",
            1,
            Price::Affine { intercept: vec![0.5], slope: vec![1.0] },
            Penalty::Absolute { weight: 1.0 },
            Penalty::Zero,
        )
        .with_meta(CostMeta { f_lower_bound: Some(0.5), ..CostMeta::default() })
    }

    /// Looks up a built-in spec by name. `horizon` fixes time-dependent prices.
    ///
    /// | name                 | f                               | h               | g               |
    /// |----------------------|---------------------------------|-----------------|-----------------|
    /// | `zero`               | 0                               | 0               | 0               |
    /// | `quadratic-terminal` | price + tilt·(1 - t/T)          | 0               | w/2·\|l-a\|²    |
    /// | `quadratic-running`  | price                           | w_h/2·\|l-a\|²  | w/2·\|l-a\|²    |
    /// | `exp-nonattain`      | 0                               | 0               | w·exp(-a)       |
    /// | `ray-counterexample` | ½ + t                           | \|l-a\|         | 0               |
    pub fn named(name: &str, params: &BTreeMap<String, f64>, horizon: f64) -> Result<Self> {
        let allowed: &[&str] = match name {
            "zero" => &["dim"],
            "quadratic-terminal" => &["price", "tilt", "weight"],
            "quadratic-running" => &["price", "weight", "running_weight"],
            "exp-nonattain" => &["weight"],
            "ray-counterexample" => &[],
            other => return Err(Error::InvalidArgument(format!("unknown cost spec {other:?}"))),
        };
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!("cost spec {name:?} has no parameter {bad:?}")));
        }
        let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
        let spec = match name {
            "zero" => {
                let dim = get("dim", 1.0);
                if dim < 1.0 || dim.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!("dim must be a positive integer, got {dim}")));
                }
                Self::zero(dim as usize)
            }
            "quadratic-terminal" => {
                let price = get("price", 1.0);
                let tilt = get("tilt", 0.0);
                let f = Price::Affine { intercept: vec![price + tilt], slope: vec![-tilt / horizon] };
                let lower = price.min(price + tilt);
                Self::new("quadratic-terminal", 1, f, Penalty::Zero, Penalty::Quadratic { weight: get("weight", 1.0) })
                    .with_meta(CostMeta { f_lower_bound: Some(lower), ..CostMeta::default() })
            }
            "quadratic-running" => {
                let price = get("price", 1.0);
                Self::new(
                    "quadratic-running",
                    1,
                    Price::Constant(vec![price]),
                    Penalty::Quadratic { weight: get("running_weight", 1.0) },
                    Penalty::Quadratic { weight: get("weight", 1.0) },
                )
                .with_meta(CostMeta { f_lower_bound: Some(price), ..CostMeta::default() })
            }
            "exp-nonattain" => Self::new(
                "exp-nonattain",
                1,
                Price::Constant(vec![0.0]),
                Penalty::Zero,
                Penalty::ExpDecay { weight: get("weight", 1.0) },
            ),
            _ => Self::ray_counterexample(),
        };
        Ok(spec)
    }

    /// Control dimension `k`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Target dimension `d`.
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn price(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.f.price(t, &mut out);
        out
    }

    pub fn running(&self, l: &[f64], a: &[f64]) -> f64 {
        self.h.value(l, a)
    }

    pub fn terminal(&self, l: &[f64], a: &[f64]) -> f64 {
        self.g.value(l, a)
    }

    pub fn has_gradients(&self) -> bool {
        self.h.has_gradient() && self.g.has_gradient()
    }

    pub(crate) fn require_gradients(&self) -> Result<()> {
        if !self.h.has_gradient() {
            return Err(Error::GradientsRequired("h"));
        }
        if !self.g.has_gradient() {
            return Err(Error::GradientsRequired("g"));
        }
        Ok(())
    }

    pub fn running_gradient(&self, l: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.h.gradient(l, a, &mut out);
        out
    }

    pub fn terminal_gradient(&self, l: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.g.gradient(l, a, &mut out);
        out
    }

    pub(crate) fn check_dims(&self, tree: &ScenarioTree, plan: &ControlPlan) -> Result<()> {
        if tree.dim() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, found: tree.dim() });
        }
        if plan.k() != self.k {
            return Err(Error::DimensionMismatch { expected: self.k, found: plan.k() });
        }
        plan.check_tree(tree)
    }

    /// Nonnegativity, midpoint convexity and gradient checks on probe grids
    /// built from the tree's `L` values.
    pub fn audit(&self, tree: &ScenarioTree) -> Result<AuditReport> {
        if tree.dim() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, found: tree.dim() });
        }
        let grid = tree.grid();
        for &t in grid.times() {
            let p = self.price(t);
            if let Some(j) = p.iter().position(|v| !(*v >= 0.0)) {
                return Err(Error::AuditFailed(format!("f({t})[{j}] = {} is negative", p[j])));
            }
        }

        let l_probes = l_probes(tree);
        let probes = a_probes(self.k, 0.0);
        let shifted = a_probes(self.k, 0.05);
        let mut checks = 0usize;
        for (label, cost) in [("h", &self.h), ("g", &self.g)] {
            for l in &l_probes {
                let values: Vec<f64> = probes.iter().map(|a| cost.value(l, a)).collect();
                for (a, v) in probes.iter().zip(&values) {
                    if !(*v >= -1e-12) {
                        return Err(Error::AuditFailed(format!("{label}({l:?}, {a:?}) = {v} is negative")));
                    }
                }
                for (i, a) in probes.iter().enumerate() {
                    for (j, b) in probes.iter().enumerate().skip(i + 1) {
                        let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
                        let vm = cost.value(l, &mid);
                        let chord = 0.5 * (values[i] + values[j]);
                        let slack = 1e-10 * (1.0 + values[i].abs() + values[j].abs());
                        if vm > chord + slack {
                            return Err(Error::AuditFailed(format!(
                                "{label}({l:?}, ·) fails the midpoint test between {a:?} and {b:?}"
                            )));
                        }
                        checks += 1;
                    }
                }
                if cost.has_gradient() {
                    for a in &shifted {
                        checks += gradient_probe(label, cost.as_ref(), l, a)?;
                    }
                }
            }
        }

        let mut warnings = Vec::new();
        if self.meta.growth_exponents.is_none() {
            warnings.push("no growth envelope declared; finite-support trees make it vacuous".to_string());
        }
        Ok(AuditReport { checks, warnings })
    }
}

fn l_probes(tree: &ScenarioTree) -> Vec<Vec<f64>> {
    let mut seen: Vec<Vec<f64>> = Vec::new();
    for node in tree.nodes() {
        if !seen.iter().any(|v| v == &node.l) {
            seen.push(node.l.clone());
        }
    }
    if seen.len() <= 12 {
        return seen;
    }
    let stride = seen.len() as f64 / 12.0;
    (0..12).map(|i| seen[(i as f64 * stride) as usize].clone()).collect()
}

fn a_probes(k: usize, shift: f64) -> Vec<Vec<f64>> {
    let scales = [0.0, 0.3, 1.0, 2.5, 6.0];
    let mut out = Vec::new();
    for s in scales {
        out.push(vec![s + shift; k]);
        if k > 1 {
            for j in 0..k {
                let mut v = vec![shift; k];
                v[j] += s;
                out.push(v);
            }
        }
    }
    out
}

fn gradient_probe(label: &str, cost: &dyn StateCost, l: &[f64], a: &[f64]) -> Result<usize> {
    let k = a.len();
    let mut grad = vec![0.0; k];
    cost.gradient(l, a, &mut grad);
    let mut checked = 0;
    for j in 0..k {
        let h = 1e-6 * a[j].abs().max(1.0);
        let mut up = a.to_vec();
        up[j] += h;
        let mut dn = a.to_vec();
        dn[j] -= h;
        let (vu, v0, vd) = (cost.value(l, &up), cost.value(l, a), cost.value(l, &dn));
        let forward = (vu - v0) / h;
        let backward = (v0 - vd) / h;
        let central = (vu - vd) / (2.0 * h);
        if (forward - backward).abs() > 1e-3 * central.abs().max(1.0) {
            continue; // kink
        }
        if (central - grad[j]).abs() > 1e-5 * grad[j].abs().max(1.0) {
            return Err(Error::AuditFailed(format!(
                "gradient of {label} at l={l:?}, a={a:?}, component {j}: analytic {} vs finite difference {central}",
                grad[j]
            )));
        }
        checked += 1;
    }
    Ok(checked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: usize,
    pub warnings: Vec<String>,
}

/// An adapted nondecreasing control: an initial jump at the root's pre-time
/// slot plus a nonnegative increment at every node.
///
/// Capped plans (`cap = Some(n)`) satisfy `0 <= ΔA_ν <= n·Δ_{i(ν)}` and have no
/// initial jump; the root increment is then forced to zero since `Δ_0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPlan {
    k: usize,
    initial_jump: Vec<f64>,
    increments: Vec<f64>,
    cap: Option<f64>,
}

impl ControlPlan {
    pub fn zeros(tree: &ScenarioTree, k: usize) -> Self {
        Self { k, initial_jump: vec![0.0; k], increments: vec![0.0; tree.len() * k], cap: None }
    }

    pub fn capped_zeros(tree: &ScenarioTree, k: usize, cap: f64) -> Self {
        Self { cap: Some(cap), ..Self::zeros(tree, k) }
    }

    /// Builds a plan and checks feasibility.
    pub fn new(
        tree: &ScenarioTree,
        k: usize,
        initial_jump: Vec<f64>,
        increments: Vec<f64>,
        cap: Option<f64>,
    ) -> Result<Self> {
        if initial_jump.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: initial_jump.len() });
        }
        let plan = Self { k, initial_jump, increments, cap };
        plan.validate(tree)?;
        Ok(plan)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cap(&self) -> Option<f64> {
        self.cap
    }

    pub fn initial_jump(&self) -> &[f64] {
        &self.initial_jump
    }

    pub fn increment(&self, node: usize) -> &[f64] {
        &self.increments[node * self.k..(node + 1) * self.k]
    }

    pub(crate) fn initial_jump_mut(&mut self) -> &mut [f64] {
        &mut self.initial_jump
    }

    pub(crate) fn increments_mut(&mut self) -> &mut [f64] {
        &mut self.increments
    }

    pub fn increments_flat(&self) -> &[f64] {
        &self.increments
    }

    pub fn set_increment(&mut self, node: usize, value: &[f64]) {
        self.increments[node * self.k..(node + 1) * self.k].copy_from_slice(value);
    }

    pub fn set_initial_jump(&mut self, value: &[f64]) {
        self.initial_jump.copy_from_slice(value);
    }

    /// Drops the cap marker, e.g. to compare a capped optimizer with an
    /// uncapped one.
    pub fn uncapped(mut self) -> Self {
        self.cap = None;
        self
    }

    /// Upper bound on the increment at `node` (`∞` for uncapped plans).
    pub fn node_cap(&self, tree: &ScenarioTree, node: usize) -> f64 {
        match self.cap {
            Some(n) => n * tree.grid().step(tree.node(node).time_index),
            None => f64::INFINITY,
        }
    }

    fn check_tree(&self, tree: &ScenarioTree) -> Result<()> {
        if self.increments.len() != tree.len() * self.k {
            return Err(Error::DimensionMismatch { expected: tree.len() * self.k, found: self.increments.len() });
        }
        Ok(())
    }

    pub fn validate(&self, tree: &ScenarioTree) -> Result<()> {
        self.check_tree(tree)?;
        if let Some(j) = self.initial_jump.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InfeasiblePlan(format!("initial jump component {j} is {}", self.initial_jump[j])));
        }
        if let Some(n) = self.cap {
            if !(n > 0.0) {
                return Err(Error::InfeasiblePlan(format!("cap must be positive, got {n}")));
            }
            if self.initial_jump.iter().any(|v| *v != 0.0) {
                return Err(Error::InfeasiblePlan("capped plans have no initial jump".into()));
            }
        }
        for node in tree.nodes() {
            let cap = self.node_cap(tree, node.id);
            for (j, v) in self.increment(node.id).iter().enumerate() {
                if !(*v >= 0.0) || !v.is_finite() {
                    return Err(Error::InfeasiblePlan(format!("increment at node {} component {j} is {v}", node.id)));
                }
                if *v > cap * (1.0 + 1e-12) {
                    return Err(Error::InfeasiblePlan(format!(
                        "increment {v} at node {} exceeds the cap {cap}",
                        node.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// `A` at every node (initial jump plus increments along the root path).
    pub fn cumulative(&self, tree: &ScenarioTree) -> AdaptedProcess {
        let k = self.k;
        let mut values = vec![0.0; tree.len() * k];
        for i in 0..=tree.steps() {
            for &id in tree.slice(i) {
                let base: Vec<f64> = match tree.node(id).parent {
                    Some(p) => values[p * k..(p + 1) * k].to_vec(),
                    None => self.initial_jump.clone(),
                };
                for j in 0..k {
                    values[id * k + j] = base[j] + self.increments[id * k + j];
                }
            }
        }
        AdaptedProcess::from_flat(tree, k, values).expect("sized from the tree")
    }

    /// Increments seen along one path.
    pub fn along(&self, path: &PathSample) -> Increments {
        Increments {
            initial: self.initial_jump.clone(),
            steps: path.nodes.iter().map(|&id| self.increment(id).to_vec()).collect(),
        }
    }

    /// `E[|A_T|_1]`.
    pub fn expected_terminal_mass(&self, tree: &ScenarioTree) -> f64 {
        let a = self.cumulative(tree);
        tree.leaves().iter().map(|&id| tree.node_probability(id) * a.get(id).iter().sum::<f64>()).sum()
    }

    pub fn shifted(&self, tree: &ScenarioTree, direction: &Direction) -> Result<ControlPlan> {
        let mut out = self.clone();
        out.cap = None;
        for (a, d) in out.initial_jump.iter_mut().zip(&direction.initial) {
            *a += d;
        }
        for (a, d) in out.increments.iter_mut().zip(&direction.increments) {
            *a += d;
        }
        for v in out.initial_jump.iter_mut().chain(out.increments.iter_mut()) {
            if *v < 0.0 && *v > -1e-14 {
                *v = 0.0;
            }
        }
        out.validate(tree)?;
        Ok(out)
    }
}

/// A signed perturbation of a control plan (same layout as [`ControlPlan`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub initial: Vec<f64>,
    pub increments: Vec<f64>,
}

impl Direction {
    pub fn zeros(tree: &ScenarioTree, k: usize) -> Self {
        Self { initial: vec![0.0; k], increments: vec![0.0; tree.len() * k] }
    }

    pub fn along(&self, path: &PathSample) -> Increments {
        let k = self.initial.len();
        Increments {
            initial: self.initial.clone(),
            steps: path.nodes.iter().map(|&id| self.increments[id * k..(id + 1) * k].to_vec()).collect(),
        }
    }

    /// Direction taking `plan` to `target`.
    pub fn between(plan: &ControlPlan, target: &ControlPlan) -> Self {
        let initial = target.initial_jump.iter().zip(&plan.initial_jump).map(|(a, b)| a - b).collect();
        let increments = target.increments.iter().zip(&plan.increments).map(|(a, b)| a - b).collect();
        Self { initial, increments }
    }
}

fn check_finite(v: f64, node: usize, term: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteCost { node, term })
    }
}

/// `C(L, A)` along one path.
pub fn pathwise_cost(spec: &CostSpec, tree: &ScenarioTree, path: &PathSample, plan: &ControlPlan) -> Result<f64> {
    spec.check_dims(tree, plan)?;
    let grid = tree.grid();
    let inc = plan.along(path);
    let cum = inc.cumulative();
    let prices: Vec<Vec<f64>> = grid.times().iter().map(|&t| spec.price(t)).collect();
    let mut total = pairing(&prices, &inc)?;
    let m = grid.steps();
    for (i, (l, a)) in path.l.iter().zip(&cum).take(m).enumerate() {
        let v = spec.running(l, a);
        total += check_finite(v, path.nodes[i], "h")? * grid.step(i + 1);
    }
    total += check_finite(spec.terminal(&path.l[m], &cum[m]), path.nodes[m], "g")?;
    check_finite(total, path.leaf(), "f")
}

/// `J = E[C(L, A)]`, accumulated node by node in ascending id.
pub fn expected_cost(spec: &CostSpec, tree: &ScenarioTree, plan: &ControlPlan) -> Result<f64> {
    spec.check_dims(tree, plan)?;
    let grid = tree.grid();
    let m = grid.steps();
    let a = plan.cumulative(tree);
    let mut total = dot(&spec.price(0.0), plan.initial_jump());
    for node in tree.nodes() {
        let p = tree.node_probability(node.id);
        let t = grid.time(node.time_index);
        let mut local = dot(&spec.price(t), plan.increment(node.id));
        if node.time_index < m {
            local += check_finite(spec.running(&node.l, a.get(node.id)), node.id, "h")? * grid.step(node.time_index + 1);
        } else {
            local += check_finite(spec.terminal(&node.l, a.get(node.id)), node.id, "g")?;
        }
        total += p * local;
    }
    check_finite(total, tree.root(), "f")
}

/// `∂C(L, A)_t` on the grid of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgradientPath {
    pub values: Vec<Vec<f64>>,
}

pub fn subgradient_process(
    spec: &CostSpec,
    tree: &ScenarioTree,
    path: &PathSample,
    plan: &ControlPlan,
) -> Result<SubgradientPath> {
    spec.require_gradients()?;
    spec.check_dims(tree, plan)?;
    let grid = tree.grid();
    let m = grid.steps();
    let cum = plan.along(path).cumulative();
    let mut tail = spec.terminal_gradient(&path.l[m], &cum[m]);
    let mut values = vec![Vec::new(); m + 1];
    for i in (0..=m).rev() {
        if i < m {
            let gh = spec.running_gradient(&path.l[i], &cum[i]);
            for (s, v) in tail.iter_mut().zip(&gh) {
                *s += v * grid.step(i + 1);
            }
        }
        values[i] = spec.price(grid.time(i)).iter().zip(&tail).map(|(f, s)| f + s).collect();
        if values[i].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost { node: path.nodes[i], term: "gradient" });
        }
    }
    Ok(SubgradientPath { values })
}

/// Right side of the integration-by-parts identity:
/// `∫ f dΔ + Σ_{j<M} ∇h(L_j, A_j)·Δ_{t_j}·(t_{j+1} - t_j) + ∇g(L_T, A_T)·Δ_T`.
pub fn integration_by_parts_rhs(
    spec: &CostSpec,
    tree: &ScenarioTree,
    path: &PathSample,
    plan: &ControlPlan,
    delta: &Increments,
) -> Result<f64> {
    spec.require_gradients()?;
    let grid = tree.grid();
    let m = grid.steps();
    let cum = plan.along(path).cumulative();
    let dcum = delta.cumulative();
    let prices: Vec<Vec<f64>> = grid.times().iter().map(|&t| spec.price(t)).collect();
    let mut total = pairing(&prices, delta)?;
    for j in 0..m {
        total += dot(&spec.running_gradient(&path.l[j], &cum[j]), &dcum[j]) * grid.step(j + 1);
    }
    total += dot(&spec.terminal_gradient(&path.l[m], &cum[m]), &dcum[m]);
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathInequality {
    pub leaf: usize,
    /// `C(L, A + Δ)`
    pub perturbed: f64,
    /// `C(L, A) + <∂C(L, A), Δ>`
    pub linearized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgradientCheck {
    pub paths: Vec<PathInequality>,
    pub max_violation: f64,
    pub violations: usize,
}

/// Checks `C(L, A + Δ) >= C(L, A) + <∂C(L, A), Δ>` on every path.
pub fn subgradient_inequality_check(
    spec: &CostSpec,
    tree: &ScenarioTree,
    plan: &ControlPlan,
    direction: &Direction,
) -> Result<SubgradientCheck> {
    let shifted = plan.shifted(tree, direction)?;
    let mut paths = Vec::new();
    let mut max_violation: f64 = 0.0;
    let mut violations = 0;
    for path in tree.paths() {
        let base = pathwise_cost(spec, tree, &path, plan)?;
        let sub = subgradient_process(spec, tree, &path, plan)?;
        let linearized = base + pairing(&sub.values, &direction.along(&path))?;
        let perturbed = pathwise_cost(spec, tree, &path, &shifted)?;
        let gap = linearized - perturbed;
        if gap > 1e-9 {
            violations += 1;
        }
        max_violation = max_violation.max(gap);
        paths.push(PathInequality { leaf: path.leaf(), perturbed, linearized });
    }
    Ok(SubgradientCheck { paths, max_violation: max_violation.max(0.0), violations })
}
