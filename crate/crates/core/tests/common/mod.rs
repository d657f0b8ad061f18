#![allow(dead_code)]

use follower_core::cost::{Penalty, Price};
use follower_core::lattice::{Branch, Node};
use follower_core::{ControlPlan, CostSpec, ScenarioTree, TimeGrid};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn lottery() -> ScenarioTree {
    ScenarioTree::lottery(1, &[(vec![0.0], 0.5), (vec![2.0], 0.5)], 1.0).unwrap()
}

pub fn binomial(steps: usize) -> ScenarioTree {
    ScenarioTree::binomial(steps, 1.0, 0.0, &[0.0], 1.0).unwrap()
}

/// 100-step lottery `{0, 2}` revealed at the first grid time.
pub fn revealed_lottery() -> ScenarioTree {
    ScenarioTree::lottery_revealed_at(100, &[(vec![0.0], 0.5), (vec![2.0], 0.5)], 1.0, 1).unwrap()
}

/// `f = 1 + ε(1 - t)`, `h = 0`, `g = ½|l - a|²`.
pub fn tilted_quadratic(tilt: f64) -> CostSpec {
    let params = [("price".to_string(), 1.0), ("tilt".to_string(), tilt)].into_iter().collect();
    CostSpec::named("quadratic-terminal", &params, 1.0).unwrap()
}

/// Random tree with `1..=max_steps` steps, `1..=max_branch` children per node
/// and random transition probabilities and levels.
pub fn random_tree(rng: &mut impl Rng, max_steps: usize, max_branch: usize, dim: usize) -> ScenarioTree {
    let steps = rng.gen_range(1..=max_steps);
    let grid = TimeGrid::uniform(1.0, steps).unwrap();
    let mut nodes = vec![Node { id: 0, time_index: 0, parent: None, children: vec![], l: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() }];
    let mut frontier = vec![0usize];
    for i in 1..=steps {
        let mut next = Vec::new();
        for &parent in &frontier {
            let n = rng.gen_range(1..=max_branch);
            let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let head: f64 = probs[..n - 1].iter().sum();
            probs[n - 1] = 1.0 - head;
            for p in probs {
                let id = nodes.len();
                let l = nodes[parent].l.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
                nodes.push(Node { id, time_index: i, parent: Some(parent), children: vec![], l });
                nodes[parent].children.push(Branch { node: id, probability: p });
                next.push(id);
            }
        }
        frontier = next;
    }
    ScenarioTree::from_nodes(grid, nodes).unwrap()
}

/// Random feasible uncapped plan; each increment is zero with probability
/// `zero_prob`.
pub fn random_plan(rng: &mut impl Rng, tree: &ScenarioTree, k: usize, zero_prob: f64, scale: f64) -> ControlPlan {
    let mut plan = ControlPlan::zeros(tree, k);
    let jump: Vec<f64> = (0..k).map(|_| if rng.gen_bool(zero_prob) { 0.0 } else { rng.gen_range(0.0..scale) }).collect();
    plan.set_initial_jump(&jump);
    for node in tree.nodes() {
        let inc: Vec<f64> = (0..k).map(|_| if rng.gen_bool(zero_prob) { 0.0 } else { rng.gen_range(0.0..scale) }).collect();
        plan.set_increment(node.id, &inc);
    }
    plan
}

/// Smooth convex specs used by randomized checks, for `k = d = dim`.
pub fn smooth_specs(dim: usize) -> Vec<CostSpec> {
    let ones = vec![1.0; dim];
    vec![
        CostSpec::new("quadratic-terminal", dim, Price::Constant(ones.clone()), Penalty::Zero, Penalty::Quadratic { weight: 1.0 }),
        CostSpec::new(
            "quadratic-running",
            dim,
            Price::Affine { intercept: vec![0.4; dim], slope: vec![0.3; dim] },
            Penalty::Quadratic { weight: 2.0 },
            Penalty::Quadratic { weight: 1.5 },
        ),
        CostSpec::new("exp-terminal", dim, Price::Constant(vec![0.2; dim]), Penalty::Quadratic { weight: 0.5 }, Penalty::ExpDecay { weight: 3.0 }),
    ]
}
