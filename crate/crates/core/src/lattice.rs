//! Finite scenario trees for the target process `L`.
//!
//! A tree lives on a [`TimeGrid`] `0 = t_0 < t_1 < ... < t_M = T`. Every node
//! sits at one time index, carries the target value `L` at that node and
//! branches into children at the next time index. The filtration is the one
//! generated by the tree: knowing the current node is knowing the whole past.
//!
//! Controls follow the Stieltjes convention with an explicit jump slot just
//! before time zero: a path of increments consists of an `initial` jump
//! (charged at `f(0)`) plus one increment per grid time.
//!
//! All reductions sum children in ascending node-id order so results are
//! bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that probabilities sum to one.
pub const PROBABILITY_TOLERANCE: f64 = 1e-12;

/// Strictly increasing time points `0 = t_0 < ... < t_M = T`, `M >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct TimeGrid {
    times: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    times: Vec<f64>,
}

impl TryFrom<RawGrid> for TimeGrid {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        TimeGrid::new(raw.times)
    }
}

impl From<TimeGrid> for RawGrid {
    fn from(grid: TimeGrid) -> Self {
        RawGrid { times: grid.times }
    }
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid("need at least two time points".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("first time must be 0, got {}", times[0])));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "times must be finite and strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { times })
    }

    /// Equally spaced grid with `steps` intervals on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidGrid("steps must be at least 1".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        let times = (0..=steps)
            .map(|i| if i == steps { horizon } else { horizon * i as f64 / steps as f64 })
            .collect();
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, index: usize) -> f64 {
        self.times[index]
    }

    /// Number of intervals `M`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Interval length `t_i - t_{i-1}`; zero for `i = 0`.
    pub fn step(&self, index: usize) -> f64 {
        if index == 0 {
            0.0
        } else {
            self.times[index] - self.times[index - 1]
        }
    }

    pub fn max_step(&self) -> f64 {
        (1..=self.steps()).map(|i| self.step(i)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub node: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: usize,
    pub time_index: usize,
    pub parent: Option<usize>,
    pub children: Vec<Branch>,
    pub l: Vec<f64>,
}

/// Finite filtered probability model for the target `L`.
///
/// Immutable after construction; node ids equal their position in
/// [`ScenarioTree::nodes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeDocument", into = "TreeDocument")]
pub struct ScenarioTree {
    grid: TimeGrid,
    dim: usize,
    nodes: Vec<Node>,
    probability: Vec<f64>,
    slices: Vec<Vec<usize>>,
    leaves: Vec<usize>,
    root: usize,
}

pub const TREE_SCHEMA: &str = "follower/tree/v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeDocument {
    schema: String,
    grid: TimeGrid,
    nodes: Vec<Node>,
}

impl TryFrom<TreeDocument> for ScenarioTree {
    type Error = Error;

    fn try_from(doc: TreeDocument) -> Result<Self> {
        if doc.schema != TREE_SCHEMA {
            return Err(Error::Serialization(format!(
                "unsupported tree schema {:?}, expected {TREE_SCHEMA:?}",
                doc.schema
            )));
        }
        ScenarioTree::from_nodes(doc.grid, doc.nodes)
    }
}

impl From<ScenarioTree> for TreeDocument {
    fn from(tree: ScenarioTree) -> Self {
        TreeDocument { schema: TREE_SCHEMA.to_string(), grid: tree.grid, nodes: tree.nodes }
    }
}

impl ScenarioTree {
    /// Validates the node list and precomputes slices and node probabilities.
    pub fn from_nodes(grid: TimeGrid, mut nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidTree("no nodes".into()));
        }
        let dim = nodes[0].l.len();
        let steps = grid.steps();
        let mut slices = vec![Vec::new(); steps + 1];
        let mut root = None;
        for (pos, node) in nodes.iter_mut().enumerate() {
            if node.id != pos {
                return Err(Error::InvalidTree(format!("node at position {pos} has id {}", node.id)));
            }
            if node.l.len() != dim {
                return Err(Error::InvalidTree(format!(
                    "node {pos} has L of dimension {}, expected {dim}",
                    node.l.len()
                )));
            }
            if node.l.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidTree(format!("node {pos} has a non-finite L value")));
            }
            if node.time_index > steps {
                return Err(Error::InvalidTree(format!(
                    "node {pos} has time index {} beyond the grid",
                    node.time_index
                )));
            }
            slices[node.time_index].push(pos);
            node.children.sort_by_key(|b| b.node);
            if node.parent.is_none() {
                if root.replace(pos).is_some() {
                    return Err(Error::InvalidTree("more than one root".into()));
                }
                if node.time_index != 0 {
                    return Err(Error::InvalidTree("root must sit at time index 0".into()));
                }
            }
        }
        let root = root.ok_or_else(|| Error::InvalidTree("no root".into()))?;
        if slices[0].len() != 1 {
            return Err(Error::InvalidTree("exactly one node may sit at time index 0".into()));
        }

        let n = nodes.len();
        for node in &nodes {
            if let Some(p) = node.parent {
                if p >= n {
                    return Err(Error::InvalidTree(format!("node {} has unknown parent {p}", node.id)));
                }
                let parent = &nodes[p];
                if parent.time_index + 1 != node.time_index {
                    return Err(Error::InvalidTree(format!(
                        "node {} is not one step after its parent {p}",
                        node.id
                    )));
                }
                if !parent.children.iter().any(|b| b.node == node.id) {
                    return Err(Error::InvalidTree(format!(
                        "parent {p} does not list node {} as a child",
                        node.id
                    )));
                }
            }
            if node.time_index < steps {
                if node.children.is_empty() {
                    return Err(Error::InvalidTree(format!("non-terminal node {} has no children", node.id)));
                }
                let mut total = 0.0;
                for b in &node.children {
                    if b.node >= n || nodes[b.node].parent != Some(node.id) {
                        return Err(Error::InvalidTree(format!(
                            "node {} lists child {} whose parent disagrees",
                            node.id, b.node
                        )));
                    }
                    if !(b.probability > 0.0) || !b.probability.is_finite() {
                        return Err(Error::InvalidTree(format!(
                            "transition {} -> {} has nonpositive probability",
                            node.id, b.node
                        )));
                    }
                    total += b.probability;
                }
                if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(Error::InvalidTree(format!(
                        "transition probabilities out of node {} sum to {total}",
                        node.id
                    )));
                }
            } else if !node.children.is_empty() {
                return Err(Error::InvalidTree(format!("terminal node {} has children", node.id)));
            }
        }

        let mut probability = vec![0.0; n];
        probability[root] = 1.0;
        for slice in &slices {
            for &id in slice {
                for b in &nodes[id].children {
                    probability[b.node] = probability[id] * b.probability;
                }
            }
        }
        for (i, slice) in slices.iter().enumerate() {
            let mass: f64 = slice.iter().map(|&id| probability[id]).sum();
            if (mass - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidTree(format!("slice {i} carries probability {mass}")));
            }
        }
        let leaves = slices[steps].clone();
        Ok(Self { grid, dim, nodes, probability, slices, leaves, root })
    }

    /// Binary tree with fair up/down moves `±volatility·√Δ + drift·Δ` in
    /// every coordinate.
    pub fn binomial(steps: usize, volatility: f64, drift: f64, l0: &[f64], horizon: f64) -> Result<Self> {
        if !(volatility > 0.0) {
            return Err(Error::InvalidArgument(format!("volatility must be positive, got {volatility}")));
        }
        let grid = TimeGrid::uniform(horizon, steps)?;
        let mut nodes = vec![Node { id: 0, time_index: 0, parent: None, children: vec![], l: l0.to_vec() }];
        let mut frontier = vec![0usize];
        for i in 1..=steps {
            let dt = grid.step(i);
            let up = volatility * dt.sqrt() + drift * dt;
            let down = -volatility * dt.sqrt() + drift * dt;
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for &parent in &frontier {
                for shift in [up, down] {
                    let id = nodes.len();
                    let l = nodes[parent].l.iter().map(|v| v + shift).collect();
                    nodes.push(Node { id, time_index: i, parent: Some(parent), children: vec![], l });
                    nodes[parent].children.push(Branch { node: id, probability: 0.5 });
                    next.push(id);
                }
            }
            frontier = next;
        }
        Self::from_nodes(grid, nodes)
    }

    /// `L ≡ 0` until the last step, then a single branching into
    /// `terminal_support` (value, probability) at `T`.
    pub fn lottery(steps: usize, terminal_support: &[(Vec<f64>, f64)], horizon: f64) -> Result<Self> {
        Self::lottery_revealed_at(steps, terminal_support, horizon, steps)
    }

    /// Lottery whose outcome is revealed at time index `reveal_step` and then
    /// held constant until `T`. `reveal_step = steps` is [`ScenarioTree::lottery`].
    pub fn lottery_revealed_at(
        steps: usize,
        terminal_support: &[(Vec<f64>, f64)],
        horizon: f64,
        reveal_step: usize,
    ) -> Result<Self> {
        if terminal_support.is_empty() {
            return Err(Error::InvalidArgument("lottery support is empty".into()));
        }
        if reveal_step == 0 || reveal_step > steps {
            return Err(Error::InvalidArgument(format!(
                "reveal step must lie in 1..={steps}, got {reveal_step}"
            )));
        }
        let dim = terminal_support[0].0.len();
        let mut total = 0.0;
        for (value, p) in terminal_support {
            if value.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: value.len() });
            }
            if !(*p > 0.0) {
                return Err(Error::InvalidArgument(format!("lottery probability {p} is not positive")));
            }
            total += p;
        }
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(Error::InvalidArgument(format!("lottery probabilities sum to {total}")));
        }
        let grid = TimeGrid::uniform(horizon, steps)?;
        let mut nodes = vec![Node { id: 0, time_index: 0, parent: None, children: vec![], l: vec![0.0; dim] }];
        let mut last = 0;
        for i in 1..reveal_step {
            let id = nodes.len();
            nodes.push(Node { id, time_index: i, parent: Some(last), children: vec![], l: vec![0.0; dim] });
            nodes[last].children.push(Branch { node: id, probability: 1.0 });
            last = id;
        }
        let mut frontier = Vec::new();
        for (value, p) in terminal_support {
            let id = nodes.len();
            nodes.push(Node { id, time_index: reveal_step, parent: Some(last), children: vec![], l: value.clone() });
            nodes[last].children.push(Branch { node: id, probability: *p });
            frontier.push(id);
        }
        for i in reveal_step + 1..=steps {
            for slot in frontier.iter_mut() {
                let id = nodes.len();
                let l = nodes[*slot].l.clone();
                nodes.push(Node { id, time_index: i, parent: Some(*slot), children: vec![], l });
                nodes[*slot].children.push(Branch { node: id, probability: 1.0 });
                *slot = id;
            }
        }
        Self::from_nodes(grid, nodes)
    }

    /// Two rays `L_t = t·ℓ`, `ℓ ∈ {0, 1}` with probability 1/2 each, on
    /// `[0, 1]`; the fork happens at the first grid step.
    pub fn ray(steps: usize) -> Result<Self> {
        let grid = TimeGrid::uniform(1.0, steps)?;
        let mut nodes = vec![Node { id: 0, time_index: 0, parent: None, children: vec![], l: vec![0.0] }];
        let mut frontier = Vec::new();
        for slope in [0.0, 1.0] {
            let id = nodes.len();
            nodes.push(Node { id, time_index: 1, parent: Some(0), children: vec![], l: vec![slope * grid.time(1)] });
            nodes[0].children.push(Branch { node: id, probability: 0.5 });
            frontier.push((id, slope));
        }
        for i in 2..=steps {
            for (slot, slope) in frontier.iter_mut() {
                let id = nodes.len();
                nodes.push(Node {
                    id,
                    time_index: i,
                    parent: Some(*slot),
                    children: vec![],
                    l: vec![*slope * grid.time(i)],
                });
                nodes[*slot].children.push(Branch { node: id, probability: 1.0 });
                *slot = id;
            }
        }
        Self::from_nodes(grid, nodes)
    }

    /// Deterministic tree following a single path of `L` values.
    pub fn single_path(grid: TimeGrid, values: &[Vec<f64>]) -> Result<Self> {
        if values.len() != grid.steps() + 1 {
            return Err(Error::DimensionMismatch { expected: grid.steps() + 1, found: values.len() });
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(values.len());
        for (i, l) in values.iter().enumerate() {
            nodes.push(Node {
                id: i,
                time_index: i,
                parent: i.checked_sub(1),
                children: vec![],
                l: l.clone(),
            });
            if i > 0 {
                nodes[i - 1].children.push(Branch { node: i, probability: 1.0 });
            }
        }
        Self::from_nodes(grid, nodes)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Dimension `d` of the target.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Unconditional probability of reaching `id`.
    pub fn node_probability(&self, id: usize) -> f64 {
        self.probability[id]
    }

    /// Node ids at a time index, ascending.
    pub fn slice(&self, time_index: usize) -> &[usize] {
        &self.slices[time_index]
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn is_terminal(&self, id: usize) -> bool {
        self.nodes[id].time_index == self.grid.steps()
    }

    /// Node ids from the root to `leaf`.
    pub fn path_to(&self, leaf: usize) -> Vec<usize> {
        let mut path = vec![leaf];
        let mut cur = leaf;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Ancestor of `id` at `time_index` (itself if already there).
    pub fn ancestor_at(&self, id: usize, time_index: usize) -> usize {
        let mut cur = id;
        while self.nodes[cur].time_index > time_index {
            cur = self.nodes[cur].parent.expect("non-root node has a parent");
        }
        cur
    }

    /// Every root-to-leaf path, in ascending leaf id.
    pub fn paths(&self) -> Vec<PathSample> {
        self.leaves.iter().map(|&leaf| self.path_sample(leaf)).collect()
    }

    pub fn path_sample(&self, leaf: usize) -> PathSample {
        let nodes = self.path_to(leaf);
        let mut probability = 1.0;
        for w in nodes.windows(2) {
            let b = self.nodes[w[0]]
                .children
                .iter()
                .find(|b| b.node == w[1])
                .expect("consecutive path nodes are parent and child");
            probability *= b.probability;
        }
        let l = nodes.iter().map(|&id| self.nodes[id].l.clone()).collect();
        PathSample { nodes, l, probability }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub nodes: Vec<usize>,
    pub l: Vec<Vec<f64>>,
    pub probability: f64,
}

impl PathSample {
    pub fn leaf(&self) -> usize {
        *self.nodes.last().expect("paths are nonempty")
    }
}

/// A process with one value in `R^m` per node. Adaptedness is structural.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedProcess {
    dim: usize,
    values: Vec<f64>,
}

impl AdaptedProcess {
    pub fn zeros(tree: &ScenarioTree, dim: usize) -> Self {
        Self { dim, values: vec![0.0; tree.len() * dim] }
    }

    pub fn from_fn(tree: &ScenarioTree, dim: usize, mut f: impl FnMut(&Node) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(tree.len() * dim);
        for node in tree.nodes() {
            let v = f(node);
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            values.extend_from_slice(&v);
        }
        Ok(Self { dim, values })
    }

    pub fn from_flat(tree: &ScenarioTree, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != tree.len() * dim {
            return Err(Error::DimensionMismatch { expected: tree.len() * dim, found: values.len() });
        }
        Ok(Self { dim, values })
    }

    /// The target `L` itself as a process.
    pub fn target(tree: &ScenarioTree) -> Self {
        let values = tree.nodes().iter().flat_map(|n| n.l.iter().copied()).collect();
        Self { dim: tree.dim(), values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, node: usize) -> &[f64] {
        &self.values[node * self.dim..(node + 1) * self.dim]
    }

    pub fn get_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.values[node * self.dim..(node + 1) * self.dim]
    }

    pub fn set(&mut self, node: usize, value: &[f64]) {
        self.get_mut(node).copy_from_slice(value);
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    /// Scalar process made of one component.
    pub fn component(&self, j: usize) -> Self {
        let values = self.values.chunks(self.dim).map(|c| c[j]).collect();
        Self { dim: 1, values }
    }

    pub(crate) fn check_tree(&self, tree: &ScenarioTree) -> Result<()> {
        if self.values.len() != tree.len() * self.dim {
            return Err(Error::DimensionMismatch { expected: tree.len() * self.dim, found: self.values.len() });
        }
        Ok(())
    }
}

/// Values of a conditional expectation on one time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceValues {
    pub time_index: usize,
    pub nodes: Vec<usize>,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl SliceValues {
    pub fn get(&self, position: usize) -> &[f64] {
        &self.values[position * self.dim..(position + 1) * self.dim]
    }

    /// Value at a node of the slice.
    pub fn at(&self, node: usize) -> Option<&[f64]> {
        self.nodes.iter().position(|&n| n == node).map(|p| self.get(p))
    }

    /// Process carrying these values on their slice and zero elsewhere.
    pub fn to_process(&self, tree: &ScenarioTree) -> AdaptedProcess {
        let mut x = AdaptedProcess::zeros(tree, self.dim);
        for (pos, &node) in self.nodes.iter().enumerate() {
            x.set(node, self.get(pos));
        }
        x
    }
}

/// `E[x_{t_to} | F_{t_from}]` on every node of slice `from_index`, by backward
/// induction over the intermediate slices.
pub fn conditional_expectation(
    tree: &ScenarioTree,
    x: &AdaptedProcess,
    from_index: usize,
    to_index: usize,
) -> Result<SliceValues> {
    let steps = tree.steps();
    if to_index > steps {
        return Err(Error::IndexOutOfRange { index: to_index, steps });
    }
    if from_index > to_index {
        return Err(Error::IndexOutOfRange { index: from_index, steps: to_index });
    }
    x.check_tree(tree)?;
    let dim = x.dim();
    let mut current: Vec<f64> = vec![0.0; tree.len() * dim];
    for &id in tree.slice(to_index) {
        current[id * dim..(id + 1) * dim].copy_from_slice(x.get(id));
    }
    for i in (from_index..to_index).rev() {
        for &id in tree.slice(i) {
            let mut acc = vec![0.0; dim];
            for b in &tree.node(id).children {
                for (a, v) in acc.iter_mut().zip(&current[b.node * dim..(b.node + 1) * dim]) {
                    *a += b.probability * v;
                }
            }
            current[id * dim..(id + 1) * dim].copy_from_slice(&acc);
        }
    }
    let nodes = tree.slice(from_index).to_vec();
    let values = nodes.iter().flat_map(|&id| current[id * dim..(id + 1) * dim].iter().copied()).collect();
    Ok(SliceValues { time_index: from_index, nodes, dim, values })
}

/// Increments of a finite-variation path under the initial-jump convention:
/// a jump just before time zero plus one increment at each grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Increments {
    pub initial: Vec<f64>,
    pub steps: Vec<Vec<f64>>,
}

impl Increments {
    pub fn zeros(steps: usize, dim: usize) -> Self {
        Self { initial: vec![0.0; dim], steps: vec![vec![0.0; dim]; steps + 1] }
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    /// Running total `A_{t_i}` (the initial jump included from `t_0` on).
    pub fn cumulative(&self) -> Vec<Vec<f64>> {
        let mut acc = self.initial.clone();
        self.steps
            .iter()
            .map(|inc| {
                for (a, d) in acc.iter_mut().zip(inc) {
                    *a += d;
                }
                acc.clone()
            })
            .collect()
    }

    /// Inverse of [`Increments::cumulative`], with the whole time-zero value
    /// placed in the `t_0` slot.
    pub fn from_cumulative(values: &[Vec<f64>]) -> Self {
        let dim = values.first().map_or(0, |v| v.len());
        let mut prev = vec![0.0; dim];
        let steps = values
            .iter()
            .map(|v| {
                let d = v.iter().zip(&prev).map(|(a, b)| a - b).collect();
                prev = v.clone();
                d
            })
            .collect();
        Self { initial: vec![0.0; dim], steps }
    }

    pub fn total(&self) -> Vec<f64> {
        self.cumulative().pop().unwrap_or_default()
    }
}

/// `∫_{[0,T]} x dΔ = x(0)·ΔA_init + Σ_i x(t_i)·ΔA_i`.
pub fn pairing(integrand: &[Vec<f64>], increments: &Increments) -> Result<f64> {
    if integrand.len() != increments.steps.len() {
        return Err(Error::DimensionMismatch { expected: increments.steps.len(), found: integrand.len() });
    }
    let k = increments.dim();
    let mut total = 0.0;
    for (x, d) in integrand.iter().zip(&increments.steps) {
        if x.len() != k || d.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: x.len().min(d.len()) });
        }
    }
    total += dot(&integrand[0], &increments.initial);
    for (x, d) in integrand.iter().zip(&increments.steps) {
        total += dot(x, d);
    }
    Ok(total)
}

/// Stieltjes integral on a grid with the initial jump charged at the time-zero
/// integrand value.
pub fn stieltjes_integral(grid: &TimeGrid, integrand: &[Vec<f64>], increments: &Increments) -> Result<f64> {
    if integrand.len() != grid.steps() + 1 {
        return Err(Error::DimensionMismatch { expected: grid.steps() + 1, found: integrand.len() });
    }
    pairing(integrand, increments)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lottery_02() -> ScenarioTree {
        ScenarioTree::lottery(1, &[(vec![0.0], 0.5), (vec![2.0], 0.5)], 1.0).unwrap()
    }

    #[test]
    fn binomial_one_step_is_symmetric() {
        let tree = ScenarioTree::binomial(1, 1.0, 0.0, &[0.0], 1.0).unwrap();
        let leaves: Vec<f64> = tree.leaves().iter().map(|&id| tree.node(id).l[0]).collect();
        assert_eq!(leaves, vec![1.0, -1.0]);
        for &id in tree.leaves() {
            assert_eq!(tree.node_probability(id), 0.5);
        }
    }

    #[test]
    fn binomial_two_steps_centered() {
        let tree = ScenarioTree::binomial(2, 1.0, 0.0, &[0.0], 1.0).unwrap();
        let mut leaves: Vec<f64> = tree.leaves().iter().map(|&id| tree.node(id).l[0]).collect();
        leaves.sort_by(f64::total_cmp);
        let s = 2f64.sqrt();
        let expected = [-s, 0.0, 0.0, s];
        for (a, b) in leaves.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let mean: f64 = tree.leaves().iter().map(|&id| tree.node_probability(id) * tree.node(id).l[0]).sum();
        assert!(mean.abs() < 1e-15);
    }

    #[test]
    fn binomial_four_steps_unit_variance() {
        // Enumerate all 16 paths and sum squared terminal values.
        let tree = ScenarioTree::binomial(4, 1.0, 0.0, &[0.0], 1.0).unwrap();
        let paths = tree.paths();
        assert_eq!(paths.len(), 16);
        let var: f64 = paths.iter().map(|p| p.probability * p.l[4][0].powi(2)).sum();
        assert!((var - 1.0).abs() < 1e-14);
    }

    #[test]
    fn binomial_rejects_bad_input() {
        assert!(ScenarioTree::binomial(0, 1.0, 0.0, &[0.0], 1.0).is_err());
        assert!(ScenarioTree::binomial(2, 0.0, 0.0, &[0.0], 1.0).is_err());
        assert!(ScenarioTree::binomial(2, 1.0, 0.0, &[0.0], -1.0).is_err());
    }

    #[test]
    fn lottery_shapes() {
        let tree = lottery_02();
        let l: Vec<f64> = tree.leaves().iter().map(|&id| tree.node(id).l[0]).collect();
        assert_eq!(l, vec![0.0, 2.0]);

        let det = ScenarioTree::lottery(3, &[(vec![0.0], 1.0)], 1.0).unwrap();
        assert_eq!(det.paths().len(), 1);
        assert!(det.nodes().iter().all(|n| n.l == vec![0.0]));

        let two = ScenarioTree::lottery(2, &[(vec![0.0], 0.5), (vec![2.0], 0.5)], 1.0).unwrap();
        assert_eq!(two.slice(1).len(), 1);
        assert_eq!(two.slice(2).len(), 2);
    }

    #[test]
    fn lottery_rejects_bad_support() {
        assert!(ScenarioTree::lottery(1, &[], 1.0).is_err());
        assert!(ScenarioTree::lottery(1, &[(vec![0.0], 0.5), (vec![1.0], 0.4)], 1.0).is_err());
    }

    #[test]
    fn revealed_lottery_holds_value() {
        let tree = ScenarioTree::lottery_revealed_at(5, &[(vec![0.0], 0.5), (vec![2.0], 0.5)], 1.0, 1).unwrap();
        assert_eq!(tree.slice(1).len(), 2);
        for p in tree.paths() {
            assert!(p.l[1..].iter().all(|v| v == &p.l[5]));
        }
    }

    #[test]
    fn ray_tree() {
        let one = ScenarioTree::ray(1).unwrap();
        let l: Vec<f64> = one.leaves().iter().map(|&id| one.node(id).l[0]).collect();
        assert_eq!(l, vec![0.0, 1.0]);

        let four = ScenarioTree::ray(4).unwrap();
        let path = four.paths().into_iter().find(|p| p.l[4][0] == 1.0).unwrap();
        let values: Vec<f64> = path.l[1..].iter().map(|v| v[0]).collect();
        assert_eq!(values, vec![0.25, 0.5, 0.75, 1.0]);

        let two = ScenarioTree::ray(2).unwrap();
        for &id in two.slice(1) {
            assert_eq!(two.node_probability(id), 0.5);
        }
    }

    #[test]
    fn conditional_expectation_cases() {
        let tree = ScenarioTree::binomial(2, 1.0, 0.0, &[0.0], 1.0).unwrap();
        let c = AdaptedProcess::from_fn(&tree, 1, |_| vec![3.5]).unwrap();
        let s = conditional_expectation(&tree, &c, 0, 2).unwrap();
        assert_eq!(s.get(0), &[3.5]);

        let one = ScenarioTree::binomial(1, 1.0, 0.0, &[0.0], 1.0).unwrap();
        let l = AdaptedProcess::target(&one);
        assert_eq!(conditional_expectation(&one, &l, 0, 1).unwrap().get(0), &[0.0]);

        // L_T^2 from slice 1: enumerate descendant leaves of each node.
        let sq = AdaptedProcess::from_fn(&tree, 1, |n| vec![n.l[0] * n.l[0]]).unwrap();
        let s = conditional_expectation(&tree, &sq, 1, 2).unwrap();
        for (pos, &id) in s.nodes.iter().enumerate() {
            let kids = &tree.node(id).children;
            let oracle: f64 = kids.iter().map(|b| 0.5 * tree.node(b.node).l[0].powi(2)).sum();
            assert!((s.get(pos)[0] - oracle).abs() < 1e-15);
            // equals L_{t_1}^2 + Δ
            assert!((oracle - (tree.node(id).l[0].powi(2) + 0.5)).abs() < 1e-14);
        }
        assert!(conditional_expectation(&tree, &sq, 2, 1).is_err());
        assert!(conditional_expectation(&tree, &sq, 0, 3).is_err());
    }

    #[test]
    fn stieltjes_examples() {
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let f = vec![vec![0.5], vec![1.5]];
        let mut inc = Increments::zeros(1, 1);
        inc.initial = vec![0.25];
        assert_eq!(stieltjes_integral(&grid, &f, &inc).unwrap(), 0.125);

        let ones = vec![vec![1.0], vec![1.0]];
        let inc = Increments { initial: vec![0.5], steps: vec![vec![0.25], vec![1.0]] };
        assert_eq!(stieltjes_integral(&grid, &ones, &inc).unwrap(), 1.75);

        assert_eq!(stieltjes_integral(&grid, &f, &Increments::zeros(1, 1)).unwrap(), 0.0);
        assert!(stieltjes_integral(&grid, &[vec![1.0]], &Increments::zeros(1, 1)).is_err());
    }

    #[test]
    fn tree_json_round_trip_is_lossless() {
        let tree = ScenarioTree::binomial(3, 0.37, 0.011, &[0.1, -0.3], 0.7).unwrap();
        let text = tree.to_json().unwrap();
        let back = ScenarioTree::from_json(&text).unwrap();
        assert_eq!(tree, back);
    }

    #[test]
    fn rejects_malformed_tree() {
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let nodes = vec![
            Node { id: 0, time_index: 0, parent: None, children: vec![Branch { node: 1, probability: 0.7 }], l: vec![0.0] },
            Node { id: 1, time_index: 1, parent: Some(0), children: vec![], l: vec![1.0] },
        ];
        assert!(ScenarioTree::from_nodes(grid, nodes).is_err());
    }
}
