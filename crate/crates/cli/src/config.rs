//! Experiment configuration.
//!
//! A config is a TOML document with the sections `[tree]`, `[cost]`,
//! `[solver]`, `[solve]`, `[ladder]`, `[outputs]`, `[certificate]` and
//! `[stop]`. Only `[tree]` and `[cost]` are required. Unknown keys anywhere
//! are rejected.
//!
//! ```toml
//! [tree]
//! family = "lottery"
//! steps = 1
//! support = [{ value = 0.0, probability = 0.5 }, { value = 2.0, probability = 0.5 }]
//!
//! [cost]
//! name = "quadratic-terminal"
//! params = { price = 1.0 }
//!
//! [ladder]
//! caps = [1.0, 2.0, 4.0, 8.0]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use follower_core::lattice::{Branch, Node};
use follower_core::stopping::PayoffForm;
use follower_core::{CostSpec, ScenarioTree, SolveOptions, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tree: TreeConfig,
    pub cost: CostConfig,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub ladder: LadderSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub certificate: CertificateSection,
    #[serde(default)]
    pub stop: StopSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Level {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            Level::Scalar(v) => vec![*v],
            Level::Vector(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outcome {
    pub value: Level,
    pub probability: f64,
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

fn origin() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TreeConfig {
    /// `L = 0` until `reveal_step` (default: the last step), then one of
    /// `support`, held to `T`.
    Lottery {
        steps: usize,
        #[serde(default = "one")]
        horizon: f64,
        support: Vec<Outcome>,
        #[serde(default)]
        reveal_step: Option<usize>,
    },
    Binomial {
        steps: usize,
        #[serde(default = "one")]
        volatility: f64,
        #[serde(default)]
        drift: f64,
        #[serde(default = "origin")]
        l0: Vec<f64>,
        #[serde(default = "one")]
        horizon: f64,
    },
    /// Two rays `L_t = t·ℓ`, `ℓ ∈ {0, 1}`, forking at the first grid step.
    Ray { steps: usize },
    /// Random tree with uniform grid on `[0, 1]`, seeded.
    Random {
        steps: usize,
        #[serde(default = "two")]
        max_branch: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Tree JSON written by a previous run.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    /// Solve the capped problem `0 <= ΔA <= cap·Δt` instead of the singular one.
    pub cap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSection {
    #[serde(default)]
    pub caps: Vec<f64>,
    /// Largest acceptable `V^[n] - V` at the last rung.
    pub target_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), formats: vec![Format::Json, Format::Csv] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateSection {
    pub tolerance: f64,
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self { tolerance: 1e-8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopSection {
    pub payoff: PayoffForm,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let config: Self = toml::from_str(text).context("parsing config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.solver.validate()?;
        if self.certificate.tolerance.is_nan() || self.certificate.tolerance <= 0.0 {
            bail!("certificate tolerance must be positive, got {}", self.certificate.tolerance);
        }
        if let Some(cap) = self.solve.cap {
            if !(cap > 0.0 && cap.is_finite()) {
                bail!("solve.cap must be positive and finite, got {cap}");
            }
        }
        if let Some(bad) = self.ladder.caps.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            bail!("ladder caps must be positive and finite, got {bad}");
        }
        if self.ladder.caps.windows(2).any(|w| w[1] <= w[0]) {
            bail!("ladder caps must be strictly increasing");
        }
        if self.outputs.formats.is_empty() {
            bail!("outputs.formats must list at least one of json, csv");
        }
        Ok(())
    }

    pub fn wants(&self, format: Format) -> bool {
        self.outputs.formats.contains(&format)
    }

    /// Applies `--seed` to the tree section (when seeded) and the solver record.
    pub fn set_seed(&mut self, seed: u64) {
        self.solver.seed = seed;
        if let TreeConfig::Random { seed: s, .. } = &mut self.tree {
            *s = seed;
        }
    }

    pub fn build_tree(&self) -> anyhow::Result<ScenarioTree> {
        let tree = match &self.tree {
            TreeConfig::Lottery { steps, horizon, support, reveal_step } => {
                let support: Vec<(Vec<f64>, f64)> = support.iter().map(|o| (o.value.to_vec(), o.probability)).collect();
                ScenarioTree::lottery_revealed_at(*steps, &support, *horizon, reveal_step.unwrap_or(*steps))?
            }
            TreeConfig::Binomial { steps, volatility, drift, l0, horizon } => {
                ScenarioTree::binomial(*steps, *volatility, *drift, l0, *horizon)?
            }
            TreeConfig::Ray { steps } => ScenarioTree::ray(*steps)?,
            TreeConfig::Random { steps, max_branch, seed } => random_tree(*steps, *max_branch, *seed)?,
            TreeConfig::File { path } => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ScenarioTree::from_json(&text)?
            }
        };
        Ok(tree)
    }

    pub fn build_spec(&self, tree: &ScenarioTree) -> anyhow::Result<CostSpec> {
        let spec = CostSpec::named(&self.cost.name, &self.cost.params, tree.grid().horizon())?;
        if spec.d() != tree.dim() {
            bail!("cost {:?} expects d = {}, tree has d = {}", self.cost.name, spec.d(), tree.dim());
        }
        Ok(spec)
    }
}

/// Scalar random walk tree: each node gets `1..=max_branch` children with
/// random transition probabilities and uniform moves in `[-1, 1]`.
fn random_tree(steps: usize, max_branch: usize, seed: u64) -> anyhow::Result<ScenarioTree> {
    if max_branch == 0 {
        bail!("max_branch must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = TimeGrid::uniform(1.0, steps)?;
    let mut nodes = vec![Node { id: 0, time_index: 0, parent: None, children: vec![], l: vec![0.0] }];
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
                let l = vec![nodes[parent].l[0] + rng.gen_range(-1.0..1.0)];
                nodes.push(Node { id, time_index: i, parent: Some(parent), children: vec![], l });
                nodes[parent].children.push(Branch { node: id, probability: p });
                next.push(id);
            }
        }
        frontier = next;
    }
    Ok(ScenarioTree::from_nodes(grid, nodes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOTTERY: &str = r#"
[tree]
family = "lottery"
steps = 1
support = [{ value = 0.0, probability = 0.5 }, { value = 2.0, probability = 0.5 }]

[cost]
name = "quadratic-terminal"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(LOTTERY).unwrap();
        assert_eq!(c.solver, SolveOptions::default());
        assert_eq!(c.certificate.tolerance, 1e-8);
        assert!(c.wants(Format::Csv) && c.wants(Format::Json));
        let tree = c.build_tree().unwrap();
        assert_eq!(tree.leaves().len(), 2);
        c.build_spec(&tree).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["\n[bogus]\nx = 1\n", "\n[solver]\nmax_iters = 3\n", "\n[ladder]\ncap = [1.0]\n"] {
            let text = format!("{LOTTERY}{extra}");
            assert!(ExperimentConfig::parse(&text).is_err(), "accepted {extra:?}");
        }
        let typo = LOTTERY.replace("steps = 1", "steps = 1\nstep = 2");
        assert!(ExperimentConfig::parse(&typo).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = format!("{LOTTERY}\n[ladder]\ncaps = [2.0, 1.0]\n");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = format!("{LOTTERY}\n[certificate]\ntolerance = 0.0\n");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }

    #[test]
    fn seed_reaches_random_tree() {
        let text = "[tree]\nfamily = \"random\"\nsteps = 3\n\n[cost]\nname = \"quadratic-running\"\n";
        let mut c = ExperimentConfig::parse(text).unwrap();
        c.set_seed(7);
        let a = c.build_tree().unwrap();
        let b = c.build_tree().unwrap();
        assert_eq!(a, b);
        c.set_seed(8);
        assert_ne!(a, c.build_tree().unwrap());
    }
}
