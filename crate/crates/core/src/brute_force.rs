//! Exhaustive grid search for scalar controls.
//!
//! Cumulative control levels are restricted to `{0, δ, 2δ, …, a_max}` and the
//! problem is solved by dynamic programming over `(node, level)`:
//!
//! ```text
//! V_ν(a_in) = min_{a >= a_in} [ f(t_ν)(a - a_in) + R_ν(a) ]
//! R_ν(a)    = h(L_ν, a)·Δ_{i+1} + Σ_c p_c V_c(a)      (non-terminal)
//! R_ν(a)    = g(L_ν, a)                               (terminal)
//! ```
//!
//! The minimum over `a >= a_in` is a suffix minimum (or a sliding-window
//! minimum when increments are capped). Used as an independent oracle for the
//! gradient solvers and for anticipative benchmarks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cost::{ControlPlan, CostSpec};
use crate::error::{Error, Result};
use crate::lattice::ScenarioTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub resolution: f64,
    pub max_level: f64,
    /// Capped problem with rate `n` when set.
    pub cap: Option<f64>,
}

impl GridSearch {
    pub fn new(resolution: f64, max_level: f64) -> Self {
        Self { resolution, max_level, cap: None }
    }

    pub fn capped(mut self, cap: f64) -> Self {
        self.cap = Some(cap);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub value: f64,
    pub plan: ControlPlan,
}

/// Minimum of `J` over plans whose cumulative levels lie on the grid.
pub fn grid_search(tree: &ScenarioTree, spec: &CostSpec, search: &GridSearch) -> Result<GridSearchResult> {
    if spec.k() != 1 {
        return Err(Error::InvalidArgument(format!("grid search needs k = 1, got k = {}", spec.k())));
    }
    if tree.dim() != spec.d() {
        return Err(Error::DimensionMismatch { expected: spec.d(), found: tree.dim() });
    }
    if !(search.resolution > 0.0 && search.max_level >= 0.0) {
        return Err(Error::InvalidArgument("grid search needs a positive resolution".into()));
    }
    let levels = (search.max_level / search.resolution).round() as usize + 1;
    let level = |j: usize| j as f64 * search.resolution;
    let grid = tree.grid();
    let m = grid.steps();
    // Largest number of grid steps an increment may span at each slice.
    let window: Vec<usize> = (0..=m)
        .map(|i| match search.cap {
            Some(n) => ((n * grid.step(i)) / search.resolution + 1e-9).floor() as usize,
            None => levels,
        })
        .collect();

    let mut value = vec![Vec::new(); tree.len()];
    let mut choice = vec![Vec::new(); tree.len()];
    for i in (0..=m).rev() {
        let price = spec.price(grid.time(i))[0];
        for &id in tree.slice(i) {
            let node = tree.node(id);
            let reward: Vec<f64> = (0..levels)
                .map(|j| {
                    let a = [level(j)];
                    let local = if i == m {
                        spec.terminal(&node.l, &a)
                    } else {
                        spec.running(&node.l, &a) * grid.step(i + 1)
                            + node.children.iter().map(|b| b.probability * value[b.node][j]).sum::<f64>()
                    };
                    price * a[0] + local
                })
                .collect();
            if reward.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCost { node: id, term: if i == m { "g" } else { "h" } });
            }
            let (best, arg) = window_min(&reward, window[i]);
            value[id] = best.iter().enumerate().map(|(j, v)| v - price * level(j)).collect();
            choice[id] = arg;
        }
    }

    let k = 1;
    let mut plan = match search.cap {
        Some(n) => ControlPlan::capped_zeros(tree, k, n),
        None => ControlPlan::zeros(tree, k),
    };
    let mut at = vec![0usize; tree.len()];
    for i in 0..=m {
        for &id in tree.slice(i) {
            let from = tree.node(id).parent.map(|p| at[p]).unwrap_or(0);
            let to = choice[id][from];
            at[id] = to;
            let inc = level(to) - level(from);
            if tree.node(id).parent.is_none() && search.cap.is_none() {
                plan.set_initial_jump(&[inc]);
            } else {
                plan.set_increment(id, &[inc]);
            }
        }
    }
    Ok(GridSearchResult { value: value[tree.root()][0], plan })
}

/// `out[j] = min_{j <= j' <= j + w} v[j']` with the first minimizing index.
fn window_min(v: &[f64], w: usize) -> (Vec<f64>, Vec<usize>) {
    let n = v.len();
    let mut best = vec![0.0; n];
    let mut arg = vec![0usize; n];
    // Indices increase and values strictly decrease from front to back, so the
    // back holds the window minimum.
    let mut deque: VecDeque<usize> = VecDeque::new();
    for j in (0..n).rev() {
        while deque.front().is_some_and(|&f| v[f] >= v[j]) {
            deque.pop_front();
        }
        deque.push_front(j);
        while deque.back().is_some_and(|&b| b > j + w) {
            deque.pop_back();
        }
        let m = *deque.back().expect("window contains j");
        best[j] = v[m];
        arg[j] = m;
    }
    (best, arg)
}

/// Value of the anticipative problem: every path is optimized separately with
/// full knowledge of its future, then averaged.
pub fn anticipative_value(tree: &ScenarioTree, spec: &CostSpec, search: &GridSearch) -> Result<f64> {
    let mut total = 0.0;
    for path in tree.paths() {
        let single = ScenarioTree::single_path(tree.grid().clone(), &path.l)?;
        total += path.probability * grid_search(&single, spec, search)?.value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_min_matches_naive() {
        let v = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        for w in 0..v.len() {
            let (best, arg) = window_min(&v, w);
            for j in 0..v.len() {
                let hi = (j + w).min(v.len() - 1);
                let m = v[j..=hi].iter().cloned().fold(f64::INFINITY, f64::min);
                assert_eq!(best[j], m);
                assert_eq!(v[arg[j]], m);
            }
        }
    }

    #[test]
    fn lottery_oracle() {
        let tree = ScenarioTree::lottery(1, &[(vec![0.0], 0.5), (vec![2.0], 0.5)], 1.0).unwrap();
        let spec = CostSpec::quadratic_terminal(1.0);
        let res = grid_search(&tree, &spec, &GridSearch::new(1e-3, 3.0)).unwrap();
        assert!((res.value - 0.75).abs() < 1e-12);
        let capped = grid_search(&tree, &spec, &GridSearch::new(1e-3, 3.0).capped(0.5)).unwrap();
        assert!((capped.value - 0.8125).abs() < 1e-12);
        capped.plan.validate(&tree).unwrap();
    }

    #[test]
    fn ray_anticipative_path() {
        let tree = ScenarioTree::ray(1).unwrap();
        let spec = CostSpec::ray_counterexample();
        let search = GridSearch::new(1e-3, 2.0);
        let anticipative = anticipative_value(&tree, &spec, &search).unwrap();
        let admissible = grid_search(&tree, &spec, &search).unwrap().value;
        assert!(anticipative <= admissible + 1e-12);
    }
}
