//! Reference problems shared by the benchmarks.

use follower_core::{CostSpec, ScenarioTree};

/// Lottery `{0, 2}` revealed after the first step of a 100-step grid, with a
/// slightly decreasing quadratic-terminal price.
pub fn revealed_lottery() -> (ScenarioTree, CostSpec) {
    let tree = ScenarioTree::lottery_revealed_at(100, &[(vec![0.0], 0.5), (vec![2.0], 0.5)], 1.0, 1)
        .expect("valid lottery");
    let params = [("price".to_string(), 1.0), ("tilt".to_string(), 1e-3)].into_iter().collect();
    let spec = CostSpec::named("quadratic-terminal", &params, 1.0).expect("known spec");
    (tree, spec)
}

/// Binomial tree with `steps` steps and the quadratic-terminal spec.
pub fn binomial(steps: usize) -> (ScenarioTree, CostSpec) {
    let tree = ScenarioTree::binomial(steps, 1.0, 0.0, &[0.0], 1.0).expect("valid binomial");
    (tree, CostSpec::quadratic_terminal(1.0))
}
