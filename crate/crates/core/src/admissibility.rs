//! Randomized controls, the conditional-independence admissibility test,
//! optional projection onto the target filtration, and conditionally
//! independent couplings.
//!
//! Randomization is a single lottery `ξ`, drawn at time 0 independently of
//! `L`; each outcome selects an adapted plan. Joint laws of `(L, A)` are
//! finite supports of `(leaf, companion path, probability)` atoms, where the
//! companion path stores the cumulative control at every grid time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{expected_cost, ControlPlan, CostSpec};
use crate::error::{Error, Result};
use crate::lattice::{dot, ScenarioTree};
use crate::pontryagin::AdjointProcess;

/// Tolerance for probability sums and marginal comparisons.
pub const MARGINAL_TOLERANCE: f64 = 1e-12;
/// Total-variation threshold of the factorization test.
pub const INDEPENDENCE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizedModel {
    /// `(P(ξ = outcome), plan used under that outcome)`.
    pub outcomes: Vec<(f64, ControlPlan)>,
}

impl RandomizedModel {
    pub fn new(tree: &ScenarioTree, outcomes: Vec<(f64, ControlPlan)>) -> Result<Self> {
        let Some((_, first)) = outcomes.first() else {
            return Err(Error::InvalidArgument("randomizer needs at least one outcome".into()));
        };
        let k = first.k();
        let mut total = 0.0;
        for (p, plan) in &outcomes {
            if !(*p > 0.0) {
                return Err(Error::InvalidArgument(format!("outcome probability {p} is not positive")));
            }
            if plan.k() != k {
                return Err(Error::DimensionMismatch { expected: k, found: plan.k() });
            }
            plan.validate(tree)?;
            total += p;
        }
        if (total - 1.0).abs() > MARGINAL_TOLERANCE {
            return Err(Error::InvalidArgument(format!("outcome probabilities sum to {total}")));
        }
        Ok(Self { outcomes })
    }

    pub fn k(&self) -> usize {
        self.outcomes[0].1.k()
    }

    /// Product law of `(L, A)` over paths and outcomes.
    pub fn joint_law(&self, tree: &ScenarioTree) -> JointLaw {
        let mut atoms = Vec::new();
        for path in tree.paths() {
            for (q, plan) in &self.outcomes {
                atoms.push(JointAtom {
                    path: path.leaf(),
                    companion: companion_path(tree, plan, &path.nodes),
                    probability: path.probability * q,
                });
            }
        }
        JointLaw { width: self.k(), atoms }
    }

    /// `E_ξ[J(A_ξ)]`.
    pub fn expected_cost(&self, tree: &ScenarioTree, spec: &CostSpec) -> Result<f64> {
        let mut total = 0.0;
        for (p, plan) in &self.outcomes {
            total += p * expected_cost(spec, tree, plan)?;
        }
        Ok(total)
    }
}

fn companion_path(tree: &ScenarioTree, plan: &ControlPlan, nodes: &[usize]) -> Vec<f64> {
    let a = plan.cumulative(tree);
    nodes.iter().flat_map(|&id| a.get(id).iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAtom {
    /// Leaf id identifying the `L` path.
    pub path: usize,
    /// Companion values at every grid time, `width` entries per time.
    pub companion: Vec<f64>,
    pub probability: f64,
}

/// Finite joint law of `L` and a companion process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLaw {
    pub width: usize,
    pub atoms: Vec<JointAtom>,
}

pub const JOINT_LAW_SCHEMA: &str = "follower/joint-law/v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointLawDocument {
    schema: String,
    width: usize,
    atoms: Vec<JointAtom>,
}

impl JointLaw {
    /// The law of `(L, A)` for a plan adapted to the tree.
    pub fn from_plan(tree: &ScenarioTree, plan: &ControlPlan) -> Self {
        let atoms = tree
            .paths()
            .into_iter()
            .map(|p| JointAtom {
                path: p.leaf(),
                companion: companion_path(tree, plan, &p.nodes),
                probability: p.probability,
            })
            .collect();
        Self { width: plan.k(), atoms }
    }

    /// Probability mass of every leaf, in ascending leaf id.
    pub fn l_marginal(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for atom in &self.atoms {
            *out.entry(atom.path).or_insert(0.0) += atom.probability;
        }
        out
    }

    pub fn validate(&self, tree: &ScenarioTree) -> Result<()> {
        let len = (tree.steps() + 1) * self.width;
        let mut total = 0.0;
        for atom in &self.atoms {
            if !tree.leaves().contains(&atom.path) {
                return Err(Error::InvalidArgument(format!("atom refers to unknown leaf {}", atom.path)));
            }
            if atom.companion.len() != len {
                return Err(Error::DimensionMismatch { expected: len, found: atom.companion.len() });
            }
            if !(atom.probability >= 0.0) {
                return Err(Error::InvalidArgument(format!("atom probability {} is negative", atom.probability)));
            }
            total += atom.probability;
        }
        if (total - 1.0).abs() > MARGINAL_TOLERANCE {
            return Err(Error::InvalidArgument(format!("atom probabilities sum to {total}")));
        }
        let marginal = self.l_marginal();
        for &leaf in tree.leaves() {
            let mass = marginal.get(&leaf).copied().unwrap_or(0.0);
            let expected = tree.node_probability(leaf);
            if (mass - expected).abs() > MARGINAL_TOLERANCE {
                return Err(Error::MarginalMismatch { path: leaf, left: mass, right: expected });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = JointLawDocument { schema: JOINT_LAW_SCHEMA.into(), width: self.width, atoms: self.atoms.clone() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JointLawDocument = serde_json::from_str(text)?;
        if doc.schema != JOINT_LAW_SCHEMA {
            return Err(Error::Serialization(format!("unsupported schema {}", doc.schema)));
        }
        Ok(Self { width: doc.width, atoms: doc.atoms })
    }
}

/// Bit-exact grouping key for float vectors.
fn key(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceWitness {
    /// Node at `time_index` whose history fails to factorize.
    pub node: usize,
    pub total_variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub time_index: usize,
    pub independent: bool,
    pub max_total_variation: f64,
    pub witness: Option<IndependenceWitness>,
}

/// Tests, for every node `ν` at `time_index`, that the companion history
/// up to `time_index` and the `L` path are independent given the history `ν`.
pub fn check_conditional_independence(
    tree: &ScenarioTree,
    law: &JointLaw,
    time_index: usize,
) -> Result<IndependenceReport> {
    if time_index > tree.steps() {
        return Err(Error::IndexOutOfRange { index: time_index, steps: tree.steps() });
    }
    law.validate(tree)?;
    let prefix = (time_index + 1) * law.width;
    let mut max_tv: f64 = 0.0;
    let mut witness = None;
    for &node in tree.slice(time_index) {
        let mut joint: BTreeMap<(Vec<u64>, usize), f64> = BTreeMap::new();
        let mut by_a: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        let mut by_leaf: BTreeMap<usize, f64> = BTreeMap::new();
        let mut mass = 0.0;
        for atom in law.atoms.iter().filter(|a| tree.ancestor_at(a.path, time_index) == node) {
            let k = key(&atom.companion[..prefix]);
            *joint.entry((k.clone(), atom.path)).or_insert(0.0) += atom.probability;
            *by_a.entry(k).or_insert(0.0) += atom.probability;
            *by_leaf.entry(atom.path).or_insert(0.0) += atom.probability;
            mass += atom.probability;
        }
        if mass <= 0.0 {
            continue;
        }
        let mut tv = 0.0;
        for (a, pa) in &by_a {
            for (leaf, pl) in &by_leaf {
                let pj = joint.get(&(a.clone(), *leaf)).copied().unwrap_or(0.0) / mass;
                tv += (pj - (pa / mass) * (pl / mass)).abs();
            }
        }
        tv *= 0.5;
        if tv > max_tv {
            max_tv = tv;
        }
        if tv > INDEPENDENCE_TOLERANCE && witness.is_none() {
            witness = Some(IndependenceWitness { node, total_variation: tv });
        }
    }
    Ok(IndependenceReport { time_index, independent: witness.is_none(), max_total_variation: max_tv, witness })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub plan: ControlPlan,
    pub cost_before: f64,
    pub cost_after: f64,
}

/// Averages the control over the randomizer, node by node.
pub fn optional_project(tree: &ScenarioTree, model: &RandomizedModel, spec: &CostSpec) -> Result<ProjectionReport> {
    let k = model.k();
    let mut initial = vec![0.0; k];
    let mut increments = vec![0.0; tree.len() * k];
    for (p, plan) in &model.outcomes {
        for (s, v) in initial.iter_mut().zip(plan.initial_jump()) {
            *s += p * v;
        }
        for (s, v) in increments.iter_mut().zip(plan.increments_flat()) {
            *s += p * v;
        }
    }
    let first_cap = model.outcomes[0].1.cap();
    let cap = if model.outcomes.iter().all(|(_, plan)| plan.cap() == first_cap) { first_cap } else { None };
    let plan = ControlPlan::new(tree, k, initial, increments, cap)?;
    let cost_before = model.expected_cost(tree, spec)?;
    let cost_after = expected_cost(spec, tree, &plan)?;
    Ok(ProjectionReport { plan, cost_before, cost_after })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledAtom {
    pub path: usize,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledLaw {
    pub q_width: usize,
    pub r_width: usize,
    pub atoms: Vec<CoupledAtom>,
    /// TV distance between the `(L, Q)` marginal and the input law.
    pub q_marginal_tv: f64,
    pub r_marginal_tv: f64,
    /// Largest TV distance from factorization of `(Q, R)` given the `L` path.
    pub conditional_dependence_tv: f64,
}

impl CoupledLaw {
    pub fn marginal_q(&self) -> JointLaw {
        JointLaw {
            width: self.q_width,
            atoms: self.atoms.iter().map(|a| JointAtom { path: a.path, companion: a.q.clone(), probability: a.probability }).collect(),
        }
    }

    pub fn marginal_r(&self) -> JointLaw {
        JointLaw {
            width: self.r_width,
            atoms: self.atoms.iter().map(|a| JointAtom { path: a.path, companion: a.r.clone(), probability: a.probability }).collect(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.q_marginal_tv <= MARGINAL_TOLERANCE
            && self.r_marginal_tv <= MARGINAL_TOLERANCE
            && self.conditional_dependence_tv <= INDEPENDENCE_TOLERANCE
    }
}

/// Grouped law `(path, companion key) -> (companion, probability)`.
fn grouped(law: &JointLaw) -> BTreeMap<(usize, Vec<u64>), (Vec<f64>, f64)> {
    let mut out: BTreeMap<(usize, Vec<u64>), (Vec<f64>, f64)> = BTreeMap::new();
    for atom in &law.atoms {
        out.entry((atom.path, key(&atom.companion))).or_insert_with(|| (atom.companion.clone(), 0.0)).1 += atom.probability;
    }
    out
}

fn law_tv(a: &JointLaw, b: &JointLaw) -> f64 {
    let ga = grouped(a);
    let gb = grouped(b);
    let mut tv = 0.0;
    for (k, (_, p)) in &ga {
        tv += (p - gb.get(k).map(|v| v.1).unwrap_or(0.0)).abs();
    }
    for (k, (_, p)) in &gb {
        if !ga.contains_key(k) {
            tv += p.abs();
        }
    }
    0.5 * tv
}

/// Couples two laws sharing the `L` marginal so that `Q` and `R` are
/// conditionally independent given the `L` path.
pub fn couple_conditionally_independent(lq: &JointLaw, lr: &JointLaw) -> Result<CoupledLaw> {
    let mq = lq.l_marginal();
    let mr = lr.l_marginal();
    let mut tv = 0.0;
    let mut first_bad = None;
    let paths: std::collections::BTreeSet<usize> = mq.keys().chain(mr.keys()).copied().collect();
    for &path in &paths {
        let (a, b) = (mq.get(&path).copied().unwrap_or(0.0), mr.get(&path).copied().unwrap_or(0.0));
        let d = (a - b).abs();
        tv += d;
        if d > MARGINAL_TOLERANCE && first_bad.is_none() {
            first_bad = Some((path, a, b));
        }
    }
    if 0.5 * tv > MARGINAL_TOLERANCE || first_bad.is_some() {
        let (path, left, right) = first_bad.unwrap_or((paths.iter().next().copied().unwrap_or(0), 0.0, 0.0));
        return Err(Error::MarginalMismatch { path, left, right });
    }

    let gq = grouped(lq);
    let gr = grouped(lr);
    let mut atoms = Vec::new();
    for &path in &paths {
        let mass = mq[&path];
        if mass <= 0.0 {
            continue;
        }
        for ((_, _), (q, pq)) in gq.range((path, Vec::new())..).take_while(|((p, _), _)| *p == path) {
            for ((_, _), (r, pr)) in gr.range((path, Vec::new())..).take_while(|((p, _), _)| *p == path) {
                atoms.push(CoupledAtom { path, q: q.clone(), r: r.clone(), probability: pq * pr / mass });
            }
        }
    }
    let mut coupled = CoupledLaw {
        q_width: lq.width,
        r_width: lr.width,
        atoms,
        q_marginal_tv: 0.0,
        r_marginal_tv: 0.0,
        conditional_dependence_tv: 0.0,
    };
    coupled.q_marginal_tv = law_tv(&coupled.marginal_q(), lq);
    coupled.r_marginal_tv = law_tv(&coupled.marginal_r(), lr);
    coupled.conditional_dependence_tv = coupled_dependence(&coupled);
    Ok(coupled)
}

fn coupled_dependence(law: &CoupledLaw) -> f64 {
    let mut worst: f64 = 0.0;
    let mut by_path: BTreeMap<usize, Vec<&CoupledAtom>> = BTreeMap::new();
    for atom in &law.atoms {
        by_path.entry(atom.path).or_default().push(atom);
    }
    for atoms in by_path.values() {
        let mass: f64 = atoms.iter().map(|a| a.probability).sum();
        if mass <= 0.0 {
            continue;
        }
        let mut joint: BTreeMap<(Vec<u64>, Vec<u64>), f64> = BTreeMap::new();
        let mut pq: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        let mut pr: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
        for a in atoms {
            *joint.entry((key(&a.q), key(&a.r))).or_insert(0.0) += a.probability / mass;
            *pq.entry(key(&a.q)).or_insert(0.0) += a.probability / mass;
            *pr.entry(key(&a.r)).or_insert(0.0) += a.probability / mass;
        }
        let mut tv = 0.0;
        for (q, a) in &pq {
            for (r, b) in &pr {
                tv += (joint.get(&(q.clone(), r.clone())).copied().unwrap_or(0.0) - a * b).abs();
            }
        }
        worst = worst.max(0.5 * tv);
    }
    worst
}

/// `Σ_i Y(t_i)·(X_i - X_{i-1})` along one path with `X_{-1} = 0`.
fn path_pairing(tree: &ScenarioTree, y: &AdjointProcess, leaf: usize, companion: &[f64], width: usize) -> f64 {
    let nodes = tree.path_to(leaf);
    let mut prev = vec![0.0; width];
    let mut total = 0.0;
    for (i, &id) in nodes.iter().enumerate() {
        let cur = &companion[i * width..(i + 1) * width];
        let inc: Vec<f64> = cur.iter().zip(&prev).map(|(a, b)| a - b).collect();
        total += dot(y.get(id), &inc);
        prev.copy_from_slice(cur);
    }
    total
}

/// `J(plan) + E[<Y, dR>] - E[<Y, dQ>]` evaluated on a coupled space where `Q`
/// is the plan's control and `R` a competitor.
pub fn coupled_gap_bound(
    tree: &ScenarioTree,
    spec: &CostSpec,
    plan: &ControlPlan,
    y: &AdjointProcess,
    coupled: &CoupledLaw,
) -> Result<f64> {
    let mut pairing = 0.0;
    for atom in &coupled.atoms {
        let r = path_pairing(tree, y, atom.path, &atom.r, coupled.r_width);
        let q = path_pairing(tree, y, atom.path, &atom.q, coupled.q_width);
        pairing += atom.probability * (r - q);
    }
    Ok(expected_cost(spec, tree, plan)? + pairing)
}
