//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::time::Instant;

use follower_core::admissibility::{
    check_conditional_independence, coupled_gap_bound, couple_conditionally_independent, optional_project, JointLaw,
    RandomizedModel,
};
use follower_core::pontryagin::{capped_kkt_identities, certify, compute_adjoint, optimality_gap_bound};
use follower_core::pseudopath::conditional_variation;
use follower_core::solver::LadderReport;
use follower_core::stopping::{equivalence_check, payoff_process, snell_min, stopping_value, PayoffForm, StoppingPolicy};
use follower_core::{
    expected_cost, export, run_ladder, solve_uncapped, AdaptedProcess, ControlPlan, CostSpec, Error, ScenarioTree,
    SolveOptions,
};
use rand::Rng;

use common::*;

const CAPS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn ladder_problems() -> Vec<(&'static str, ScenarioTree, CostSpec)> {
    vec![
        ("lottery", lottery(), CostSpec::quadratic_terminal(1.0)),
        ("binomial-4", binomial(4), CostSpec::quadratic_terminal(1.0)),
        ("revealed-lottery-100", revealed_lottery(), tilted_quadratic(1e-3)),
    ]
}

fn ladders() -> Vec<(&'static str, LadderReport)> {
    ladder_problems()
        .into_iter()
        .map(|(name, tree, spec)| (name, run_ladder(&tree, &spec, &CAPS, &SolveOptions::default()).unwrap()))
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let tree = lottery();
    let (plan, rep) = solve_uncapped(&tree, &CostSpec::quadratic_terminal(1.0), &SolveOptions::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let a = plan.cumulative(&tree);
    let rule_err = tree
        .leaves()
        .iter()
        .map(|&id| (a.get(id)[0] - (tree.node(id).l[0] - 1.0).max(0.0)).abs())
        .fold(0.0, f64::max);
    let pass = rule_err <= 1e-6 && (rep.value - 0.75).abs() <= 1e-6 && elapsed < 1.0;
    outcome(pass, format!("value {:.12}, rule error {rule_err:.2e}, {elapsed:.3}s", rep.value))
}

fn criterion_2(ladders: &[(&str, LadderReport)], elapsed: f64) -> Outcome {
    let mut pass = elapsed < 10.0;
    let mut parts = Vec::new();
    for (name, rep) in ladders {
        let last = rep.rungs.last().unwrap();
        let ok = rep.monotone && rep.bounded_below && last.gap.abs() <= 1e-4;
        pass &= ok;
        parts.push(format!("{name}: |V16-V| {:.2e} monotone {}", last.gap.abs(), rep.monotone));
    }
    outcome(pass, format!("{}; {elapsed:.2}s", parts.join(", ")))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(3);
    let mut problems: Vec<(String, ScenarioTree, CostSpec)> = vec![
        ("lottery".into(), lottery(), CostSpec::quadratic_terminal(1.0)),
        ("binomial-3".into(), binomial(3), CostSpec::quadratic_terminal(1.0)),
        ("binomial-4".into(), binomial(4), CostSpec::quadratic_terminal(1.0)),
        ("revealed-lottery-100".into(), revealed_lottery(), tilted_quadratic(1e-3)),
    ];
    for i in 0..6 {
        let tree = random_tree(&mut rng, 3, 3, 1);
        for spec in smooth_specs(1) {
            problems.push((format!("random-{i}/{}", spec.name), tree.clone(), spec));
        }
    }
    let opts = SolveOptions { grad_tolerance: 1e-9, ..SolveOptions::default() };
    let mut certified = 0;
    let mut worst_residual: f64 = 0.0;
    let mut worst_slack: f64 = 0.0;
    let mut failures = Vec::new();
    for (name, tree, spec) in &problems {
        let (plan, rep) = solve_uncapped(tree, spec, &opts).unwrap();
        if rep.kkt_residual > 1e-7 {
            failures.push(format!("{name}: kkt {:.1e}", rep.kkt_residual));
            continue;
        }
        let cert = certify(tree, spec, &plan, 1e-6).unwrap();
        worst_residual = worst_residual.max(cert.max_residual());
        if !cert.certified {
            failures.push(format!("{name}: not certified ({:?})", cert.worst_residual()));
            continue;
        }
        certified += 1;
        let y = compute_adjoint(tree, spec, &plan).unwrap();
        let value = rep.value;
        for _ in 0..1000 {
            let competitor = random_plan(&mut rng, tree, 1, 0.5, 2.0);
            let bound = optimality_gap_bound(tree, spec, &plan, &y, &competitor).unwrap();
            let cost = expected_cost(spec, tree, &competitor).unwrap();
            // J(competitor) >= bound >= J(plan) - slack
            let slack = (value - cost).max(bound.bound - cost).max(value - bound.bound);
            worst_slack = worst_slack.max(slack);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && worst_slack <= 1e-6 && elapsed < 30.0;
    outcome(
        pass,
        format!(
            "{certified}/{} certified, max residual {worst_residual:.1e}, worst competitor slack {worst_slack:.1e}, {elapsed:.2}s{}",
            problems.len(),
            if failures.is_empty() { String::new() } else { format!(", failures: {}", failures.join("; ")) }
        ),
    )
}

fn criterion_4(ladders: &[(&str, LadderReport)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for ((name, rep), (_, tree, spec)) in ladders.iter().zip(ladder_problems()) {
        let mut worst_gap: f64 = 0.0;
        for rung in &rep.rungs {
            let kkt = capped_kkt_identities(&tree, &spec, &rung.plan, rung.cap).unwrap();
            worst_gap = worst_gap.max(kkt.identity_gap);
        }
        let trace: Vec<f64> = rep.rungs.iter().map(|r| r.negative_part).collect();
        let nonincreasing = trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        let last = *trace.last().unwrap();
        pass &= worst_gap <= 1e-6 && nonincreasing && last <= 1e-3;
        parts.push(format!(
            "{name}: identity gap {worst_gap:.1e}, E∫Y⁻ trace [{}]",
            trace.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(" ")
        ));
    }
    outcome(pass, parts.join("; "))
}

/// Minimum of `E[Z_τ 1{τ<∞}]` over every first-entry rule of every stop set.
fn exhaustive_stopping(tree: &ScenarioTree, z: &AdaptedProcess) -> f64 {
    let n = tree.len();
    assert!(n <= 20, "exhaustive enumeration is for small trees");
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        let stop: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
        let policy = StoppingPolicy::first_entry(tree, &stop);
        best = best.min(stopping_value(tree, z, &policy).unwrap());
    }
    best
}

fn criterion_5() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let problems = [
        ("lottery", lottery()),
        ("lottery-3", ScenarioTree::lottery(3, &[(vec![0.0], 0.5), (vec![2.0], 0.5)], 1.0).unwrap()),
        ("binomial-2", binomial(2)),
        ("binomial-3", binomial(3)),
    ];
    for (name, tree) in problems {
        let spec = CostSpec::quadratic_terminal(1.0);
        let (plan, _) = solve_uncapped(&tree, &spec, &SolveOptions::default()).unwrap();
        let eq = equivalence_check(&tree, &spec, &plan, 1e-6).unwrap();
        let z = payoff_process(&tree, &spec, PayoffForm::Proof).unwrap().z;
        let snell = snell_min(&tree, &z).unwrap();
        let exhaustive = exhaustive_stopping(&tree, &z);
        let enum_gap = (snell.root_value(&tree) - exhaustive).abs();
        pass &= eq.passed && enum_gap <= 1e-12;
        parts.push(format!(
            "{name}: τ-value {:.9} Snell {:.9} enumeration gap {enum_gap:.1e}",
            eq.control_value, eq.snell_value
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_6(ladders: &[(&str, LadderReport)]) -> Outcome {
    let (_, rep) = ladders.iter().find(|(name, _)| *name == "revealed-lottery-100").unwrap();
    let last = rep.rungs.last().unwrap();
    let min_sup = rep.rungs.iter().map(|r| r.sup_distance).fold(f64::INFINITY, f64::min);
    let pp: Vec<String> = rep.rungs.iter().map(|r| format!("{:.4}", r.pp_distance)).collect();
    let pass = last.pp_distance < 0.05 && min_sup >= 0.4;
    outcome(pass, format!("pp [{}], min sup distance {min_sup:.3}", pp.join(" ")))
}

fn criterion_7() -> Outcome {
    let mut rng = rng(7);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 100 {
        let dim = if checked % 4 == 3 { 2 } else { 1 };
        let tree = random_tree(&mut rng, 3, 2, dim);
        let specs = smooth_specs(dim);
        let spec = &specs[checked % specs.len()];
        let plan = random_plan(&mut rng, &tree, dim, 0.0, 1.0);
        // Interior: bump every increment away from 0.
        let mut interior = plan.clone();
        for node in tree.nodes() {
            let v: Vec<f64> = plan.increment(node.id).iter().map(|x| x + 0.05).collect();
            interior.set_increment(node.id, &v);
        }
        let y = compute_adjoint(&tree, spec, &interior).unwrap();
        let h = 1e-6;
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for node in tree.nodes() {
            for j in 0..dim {
                let mut up = interior.clone();
                let mut dn = interior.clone();
                let mut v = interior.increment(node.id).to_vec();
                v[j] += h;
                up.set_increment(node.id, &v);
                v[j] -= 2.0 * h;
                dn.set_increment(node.id, &v);
                let fd = (expected_cost(spec, &tree, &up).unwrap() - expected_cost(spec, &tree, &dn).unwrap()) / (2.0 * h);
                let analytic = tree.node_probability(node.id) * y.get(node.id)[j];
                err = err.max((fd - analytic).abs());
                scale = scale.max(analytic.abs());
            }
        }
        worst = worst.max(err / scale.max(1e-300));
        checked += 1;
    }
    outcome(worst <= 1e-5, format!("{checked} plans, max relative error {worst:.2e}"))
}

fn criterion_8() -> Outcome {
    let mut rng = rng(8);
    let mut monotone = true;
    let mut worst_increase = f64::NEG_INFINITY;
    let mut worst_marginal: f64 = 0.0;
    let mut worst_dependence: f64 = 0.0;
    let mut worst_bound_gap: f64 = 0.0;
    let mut ci_ok = true;
    for i in 0..500 {
        let tree = random_tree(&mut rng, 3, 2, 1);
        let specs = smooth_specs(1);
        let spec = &specs[i % specs.len()];
        let outcomes_n = rng.gen_range(2..=4);
        let weights: Vec<f64> = (0..outcomes_n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let head: f64 = probs[..outcomes_n - 1].iter().sum();
        probs[outcomes_n - 1] = 1.0 - head;
        let outcomes: Vec<(f64, ControlPlan)> =
            probs.iter().map(|&p| (p, random_plan(&mut rng, &tree, 1, 0.4, 1.5))).collect();
        let model = RandomizedModel::new(&tree, outcomes).unwrap();
        let rep = optional_project(&tree, &model, spec).unwrap();
        let a = rep.plan.cumulative(&tree);
        monotone &= rep.plan.initial_jump()[0] >= 0.0
            && tree.nodes().iter().all(|n| n.parent.is_none_or(|p| a.get(n.id)[0] >= a.get(p)[0]));
        worst_increase = worst_increase.max(rep.cost_after - rep.cost_before);

        if i % 10 == 0 {
            let (opt, _) = solve_uncapped(&tree, spec, &SolveOptions::default()).unwrap();
            let lq = JointLaw::from_plan(&tree, &opt);
            let lr = model.joint_law(&tree);
            let coupled = couple_conditionally_independent(&lq, &lr).unwrap();
            worst_marginal = worst_marginal.max(coupled.q_marginal_tv).max(coupled.r_marginal_tv);
            worst_dependence = worst_dependence.max(coupled.conditional_dependence_tv);
            for t in 0..=tree.steps() {
                ci_ok &= check_conditional_independence(&tree, &coupled.marginal_r(), t).unwrap().independent;
            }
            let y = compute_adjoint(&tree, spec, &opt).unwrap();
            let direct = optimality_gap_bound(&tree, spec, &opt, &y, &rep.plan).unwrap().bound;
            let on_coupling = coupled_gap_bound(&tree, spec, &opt, &y, &coupled).unwrap();
            worst_bound_gap = worst_bound_gap.max((direct - on_coupling).abs());
        }
    }
    let pass = monotone
        && worst_increase <= 1e-10
        && worst_marginal <= 1e-12
        && worst_dependence <= 1e-10
        && ci_ok
        && worst_bound_gap <= 1e-12;
    outcome(
        pass,
        format!(
            "monotone {monotone}, max J(oA)-J(A) {worst_increase:.2e}, marginal TV {worst_marginal:.1e}, dependence TV {worst_dependence:.1e}, bound gap {worst_bound_gap:.1e}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let tree = lottery();
    let spec = CostSpec::exp_nonattain();
    let rejected = matches!(solve_uncapped(&tree, &spec, &SolveOptions::default()), Err(Error::CoercivityUnverified(_)));
    let opts = SolveOptions { waive_coercivity: true, ..SolveOptions::default() };
    let (_, rep) = solve_uncapped(&tree, &spec, &opts).unwrap();
    let value = *rep.value_trace.last().unwrap();
    let mass = *rep.mass_trace.last().unwrap();
    let pass = rejected && !rep.converged && value <= 0.01 && mass >= 5.0 && rep.iterations <= 10_000;
    outcome(
        pass,
        format!("rejected without waiver {rejected}, value {value:.2e}, A_T {mass:.2}, {} iterations, {:?}", rep.iterations, rep.termination),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = rng(10);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let tree = random_tree(&mut rng, 4, 3, 1);
        // Martingale: backward projection of a random terminal value.
        let mut m = AdaptedProcess::zeros(&tree, 1);
        for &leaf in tree.leaves() {
            m.set(leaf, &[rng.gen_range(-2.0..2.0)]);
        }
        for i in (0..tree.steps()).rev() {
            for &id in tree.slice(i) {
                let v: f64 = tree.node(id).children.iter().map(|b| b.probability * m.get(b.node)[0]).sum();
                m.set(id, &[v]);
            }
        }
        let e_abs: f64 = tree.leaves().iter().map(|&id| tree.node_probability(id) * m.get(id)[0].abs()).sum();
        worst = worst.max((conditional_variation(&tree, &m).unwrap() - e_abs).abs());

        // Nonnegative nondecreasing: cumulative of a random plan.
        let a = random_plan(&mut rng, &tree, 1, 0.3, 1.0).cumulative(&tree);
        let e_t: f64 = tree.leaves().iter().map(|&id| tree.node_probability(id) * a.get(id)[0]).sum();
        let closed = e_t - a.get(tree.root())[0] + e_t;
        worst = worst.max((conditional_variation(&tree, &a).unwrap() - closed).abs());
    }
    outcome(worst <= 1e-12, format!("200 trees, max deviation {worst:.1e}"))
}

/// Serialized artifacts of the acceptance experiments.
fn artifacts() -> Vec<u8> {
    use rayon::prelude::*;
    let outputs: Vec<Vec<u8>> = ladder_problems()
        .into_par_iter()
        .map(|(name, tree, spec)| {
            let rep = run_ladder(&tree, &spec, &CAPS, &SolveOptions::default()).unwrap();
            let cert = certify(&tree, &spec, &rep.uncapped_plan, 1e-6).unwrap();
            let mut out = name.as_bytes().to_vec();
            out.extend(serde_json::to_vec(&rep).unwrap());
            out.extend(serde_json::to_vec(&cert).unwrap());
            out.extend(export::ladder_csv(&rep).unwrap().into_bytes());
            out
        })
        .collect();
    outputs.concat()
}

fn criterion_11() -> Outcome {
    let runs: Vec<Vec<u8>> = [1usize, 2, 8, 1]
        .iter()
        .map(|&threads| rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(artifacts))
        .collect();
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    outcome(identical, format!("{} runs over 1/2/8/1 threads, {} bytes each, identical {identical}", runs.len(), runs[0].len()))
}

fn main() {
    let start = Instant::now();
    let ladders = ladders();
    let ladder_time = start.elapsed().as_secs_f64();

    let results = [
        ("1 quadratic-terminal reproduction", criterion_1()),
        ("2 ladder monotonicity and convergence", criterion_2(&ladders, ladder_time)),
        ("3 certificate soundness and completeness", criterion_3()),
        ("4 capped KKT identities", criterion_4(&ladders)),
        ("5 stopping equivalence", criterion_5()),
        ("6 pseudopath vs sup-norm contrast", criterion_6(&ladders)),
        ("7 adjoint vs finite differences", criterion_7()),
        ("8 optional projection and coupling", criterion_8()),
        ("9 nonattainment diagnostics", criterion_9()),
        ("10 conditional variation closed forms", criterion_10()),
        ("11 determinism across thread counts", criterion_11()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
