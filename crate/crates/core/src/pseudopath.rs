//! Path comparison in the pseudopath topology.
//!
//! Two grid paths are compared by the convergence-in-measure metric for
//! `λ + δ_T` (Lebesgue measure plus a unit atom at the horizon):
//!
//! ```text
//! d(x, y) = Σ_{i<M} min(1, |x(t_i) - y(t_i)|)·Δ_{i+1} + min(1, |x(T) - y(T)|)
//! ```
//!
//! A ramp that steepens into a terminal jump converges in this metric while
//! staying far away in the sup norm. The module also provides the conditional
//! (quasimartingale) variation used for tightness, and a bounded-Lipschitz
//! comparison of finite-dimensional marginals.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::ControlPlan;
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, ScenarioTree, TimeGrid};

/// Values of a path at every time of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    grid: TimeGrid,
    values: Vec<Vec<f64>>,
}

impl GridPath {
    pub fn new(grid: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.steps() + 1 {
            return Err(Error::DimensionMismatch { expected: grid.steps() + 1, found: values.len() });
        }
        let dim = values[0].len();
        if let Some(v) = values.iter().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
        }
        Ok(Self { grid, values })
    }

    /// Scalar path from a closure of time.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.times().iter().map(|&t| vec![f(t)]).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn terminal(&self) -> &[f64] {
        &self.values[self.values.len() - 1]
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn same_grid(x: &GridPath, y: &GridPath) -> Result<()> {
    if x.grid != y.grid {
        return Err(Error::GridMismatch("paths live on different grids; resample first".into()));
    }
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), found: y.dim() });
    }
    Ok(())
}

pub fn pseudopath_distance(x: &GridPath, y: &GridPath) -> Result<f64> {
    same_grid(x, y)?;
    let m = x.grid.steps();
    let mut total = 0.0;
    for i in 0..m {
        total += distance(&x.values[i], &y.values[i]).min(1.0) * x.grid.step(i + 1);
    }
    Ok(total + distance(&x.values[m], &y.values[m]).min(1.0))
}

/// `max_i |x(t_i) - y(t_i)|`.
pub fn sup_distance(x: &GridPath, y: &GridPath) -> Result<f64> {
    same_grid(x, y)?;
    Ok(x.values.iter().zip(&y.values).map(|(a, b)| distance(a, b)).fold(0.0, f64::max))
}

/// `Σ min(1, sup|x - y|)·Δ + min(1, |x(T) - y(T)|)`, an upper bound for
/// [`pseudopath_distance`].
pub fn sup_bound(x: &GridPath, y: &GridPath) -> Result<f64> {
    let sup = sup_distance(x, y)?.min(1.0);
    let m = x.grid.steps();
    let body: f64 = (1..=m).map(|i| sup * x.grid.step(i)).sum();
    Ok(body + distance(&x.values[m], &y.values[m]).min(1.0))
}

/// Right-continuous step interpolation onto `target`.
pub fn resample_path(x: &GridPath, target: &TimeGrid) -> Result<GridPath> {
    if x.grid.horizon() != target.horizon() {
        return Err(Error::GridMismatch(format!(
            "horizon {} cannot be resampled onto horizon {}",
            x.grid.horizon(),
            target.horizon()
        )));
    }
    let src = x.grid.times();
    let mut pos = 0;
    let values = target
        .times()
        .iter()
        .map(|&s| {
            while pos + 1 < src.len() && src[pos + 1] <= s {
                pos += 1;
            }
            x.values[pos].clone()
        })
        .collect();
    GridPath::new(target.clone(), values)
}

/// Cumulative control `A` along every path of the tree, in leaf order, with
/// path probabilities.
pub fn plan_paths(tree: &ScenarioTree, plan: &ControlPlan) -> Vec<(GridPath, f64)> {
    let a = plan.cumulative(tree);
    tree.paths()
        .into_iter()
        .map(|p| {
            let values = p.nodes.iter().map(|&id| a.get(id).to_vec()).collect();
            (GridPath { grid: tree.grid().clone(), values }, p.probability)
        })
        .collect()
}

/// `E[d(A, B)]` over the tree's paths.
pub fn plan_pseudopath_distance(tree: &ScenarioTree, a: &ControlPlan, b: &ControlPlan) -> Result<f64> {
    let pa = plan_paths(tree, a);
    let pb = plan_paths(tree, b);
    let mut total = 0.0;
    for ((x, p), (y, _)) in pa.iter().zip(&pb) {
        total += p * pseudopath_distance(x, y)?;
    }
    Ok(total)
}

/// `max over paths of max_i |A(t_i) - B(t_i)|`.
pub fn plan_sup_distance(tree: &ScenarioTree, a: &ControlPlan, b: &ControlPlan) -> Result<f64> {
    let pa = plan_paths(tree, a);
    let pb = plan_paths(tree, b);
    let mut worst: f64 = 0.0;
    for ((x, _), (y, _)) in pa.iter().zip(&pb) {
        worst = worst.max(sup_distance(x, y)?);
    }
    Ok(worst)
}

type TestFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// A bounded continuous test function `b(s, x)`.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    f: Arc<TestFn>,
}

impl TestFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }

    /// `b(s, x) = min(1, |x|)`.
    pub fn truncated_norm() -> Self {
        Self::new("min(1,|x|)", |_, x| x.iter().map(|v| v * v).sum::<f64>().sqrt().min(1.0))
    }

    pub fn eval(&self, s: f64, x: &[f64]) -> f64 {
        (self.f)(s, x)
    }

    /// Left-endpoint quadrature of `∫ b(s, x(s)) ds`.
    pub fn integrate(&self, path: &GridPath) -> f64 {
        let g = &path.grid;
        (0..g.steps()).map(|i| self.eval(g.time(i), &path.values[i]) * g.step(i + 1)).sum()
    }
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalGaps {
    pub name: String,
    /// `|∫ b(s, x_n) ds - ∫ b(s, x) ds|` per sequence element.
    pub integral_gaps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub functionals: Vec<FunctionalGaps>,
    /// `|x_n(T) - x(T)|` per sequence element.
    pub terminal_gaps: Vec<f64>,
    pub tolerance: f64,
    pub tail: usize,
    pub converged: bool,
}

/// Checks `∫ b(s, x_n(s)) ds → ∫ b(s, x(s)) ds` and `x_n(T) → x(T)` by
/// requiring every gap in the last `tail` elements to be within `tolerance`.
pub fn functional_convergence_check(
    paths: &[GridPath],
    limit: &GridPath,
    test_fns: &[TestFunction],
    tolerance: f64,
    tail: usize,
) -> Result<FunctionalReport> {
    for p in paths {
        same_grid(p, limit)?;
    }
    let functionals: Vec<FunctionalGaps> = test_fns
        .iter()
        .map(|b| {
            let target = b.integrate(limit);
            FunctionalGaps {
                name: b.name.clone(),
                integral_gaps: paths.iter().map(|p| (b.integrate(p) - target).abs()).collect(),
            }
        })
        .collect();
    let terminal_gaps: Vec<f64> = paths.iter().map(|p| distance(p.terminal(), limit.terminal())).collect();
    let start = paths.len().saturating_sub(tail);
    let converged = !paths.is_empty()
        && terminal_gaps[start..].iter().all(|g| *g <= tolerance)
        && functionals.iter().all(|f| f.integral_gaps[start..].iter().all(|g| *g <= tolerance));
    Ok(FunctionalReport { functionals, terminal_gaps, tolerance, tail, converged })
}

/// Finest-partition conditional variation of a scalar adapted process:
///
/// ```text
/// Σ_{j=1..M} E| E[x_{t_j} - x_{t_{j-1}} | F_{t_{j-1}}] | + E|x_T|
/// ```
pub fn conditional_variation(tree: &ScenarioTree, x: &AdaptedProcess) -> Result<f64> {
    x.check_tree(tree)?;
    if x.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, found: x.dim() });
    }
    let mut total = 0.0;
    for node in tree.nodes() {
        let p = tree.node_probability(node.id);
        let here = x.get(node.id)[0];
        if node.children.is_empty() {
            total += p * here.abs();
        } else {
            let next: f64 = node.children.iter().map(|b| b.probability * x.get(b.node)[0]).sum();
            total += p * (next - here).abs();
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    /// `per_process[m][i]`: variation of coordinate `i` of family member `m`.
    pub per_process: Vec<Vec<f64>>,
    /// Supremum over the family, per coordinate.
    pub supremum: Vec<f64>,
    pub ceiling: f64,
    pub bounded: bool,
}

/// Per-coordinate supremum of the conditional variation over a family.
pub fn tightness_certificate(family: &[(&ScenarioTree, &AdaptedProcess)], ceiling: f64) -> Result<VariationReport> {
    let Some((_, first)) = family.first() else {
        return Err(Error::InvalidArgument("tightness certificate needs a nonempty family".into()));
    };
    let dim = first.dim();
    let mut per_process = Vec::with_capacity(family.len());
    let mut supremum = vec![0.0f64; dim];
    for (tree, x) in family {
        if x.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: x.dim() });
        }
        let row = (0..dim).map(|j| conditional_variation(tree, &x.component(j))).collect::<Result<Vec<_>>>()?;
        for (s, v) in supremum.iter_mut().zip(&row) {
            *s = s.max(*v);
        }
        per_process.push(row);
    }
    let bounded = supremum.iter().all(|s| *s <= ceiling);
    Ok(VariationReport { per_process, supremum, ceiling, bounded })
}

/// Version tag of the test-function dictionary used by
/// [`findim_marginal_distance`].
pub const DICTIONARY_VERSION: &str = "clip-minmax/v1";

/// Weighted empirical law of paths on a common grid.
pub type WeightedPaths = [(GridPath, f64)];

fn clip_up(v: f64, theta: f64) -> f64 {
    (v - theta).clamp(0.0, 1.0)
}

fn clip_down(v: f64, theta: f64) -> f64 {
    (theta - v).clamp(0.0, 1.0)
}

/// Bounded-Lipschitz distance between the laws of `(x(t))_{t ∈ subset}` under
/// two weighted samples, estimated on a fixed dictionary of 1-Lipschitz
/// functions bounded by 1:
///
/// * coordinate clips `min(1, max(0, ±(v_c - θ)))` for θ in `-5, -4.75, …, 5`;
/// * pairwise min and max of upward clips of two coordinates, θ in `-5, -4, …, 5`.
///
/// `subset` holds grid indices and must contain the terminal index.
pub fn findim_marginal_distance(a: &WeightedPaths, b: &WeightedPaths, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("time subset is empty".into()));
    }
    let reference = a.first().or(b.first()).map(|(p, _)| p).ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let m = reference.grid.steps();
    if !subset.contains(&m) {
        return Err(Error::InvalidArgument("time subset must contain the horizon".into()));
    }
    if let Some(&i) = subset.iter().find(|&&i| i > m) {
        return Err(Error::IndexOutOfRange { index: i, steps: m });
    }
    for (p, _) in a.iter().chain(b) {
        same_grid(p, reference)?;
    }
    let flatten = |p: &GridPath| -> Vec<f64> { subset.iter().flat_map(|&i| p.values[i].iter().copied()).collect() };
    let fa: Vec<(Vec<f64>, f64)> = a.iter().map(|(p, w)| (flatten(p), *w)).collect();
    let fb: Vec<(Vec<f64>, f64)> = b.iter().map(|(p, w)| (flatten(p), *w)).collect();
    let coords = fa.first().or(fb.first()).map(|v| v.0.len()).unwrap_or(0);

    let gap = |phi: &dyn Fn(&[f64]) -> f64| -> f64 {
        let ea: f64 = fa.iter().map(|(v, w)| w * phi(v)).sum();
        let eb: f64 = fb.iter().map(|(v, w)| w * phi(v)).sum();
        (ea - eb).abs()
    };
    let fine: Vec<f64> = (0..=40).map(|i| -5.0 + 0.25 * i as f64).collect();
    let coarse: Vec<f64> = (0..=10).map(|i| -5.0 + i as f64).collect();
    let mut best: f64 = 0.0;
    for c in 0..coords {
        for &theta in &fine {
            best = best.max(gap(&|v| clip_up(v[c], theta)));
            best = best.max(gap(&|v| clip_down(v[c], theta)));
        }
    }
    for c1 in 0..coords {
        for c2 in (c1 + 1)..coords {
            for &t1 in &coarse {
                for &t2 in &coarse {
                    best = best.max(gap(&|v| clip_up(v[c1], t1).min(clip_up(v[c2], t2))));
                    best = best.max(gap(&|v| clip_up(v[c1], t1).max(clip_up(v[c2], t2))));
                }
            }
        }
    }
    Ok(best)
}
