//! Subcommand implementations. Each returns the process exit code; errors
//! that escape are mapped to codes in `main`.

use std::fmt;
use std::path::Path;

use anyhow::Context;
use follower_core::brute_force::{anticipative_value, grid_search, GridSearch};
use follower_core::export::{distance_matrix_csv, fmt_f64, ladder_csv, mz_curve_csv, stop_region_csv};
use follower_core::pontryagin::{capped_kkt_identities, CappedKktReport};
use follower_core::pseudopath::{plan_pseudopath_distance, plan_sup_distance, pseudopath_distance, sup_distance, GridPath};
use follower_core::solver::{check_coercivity, CoercivityCheck, LadderReport};
use follower_core::stopping::{equivalence_check, payoff_process, snell_min, stop_region_rows, EquivalenceReport, PayoffForm};
use follower_core::{
    certify, run_ladder, solve_capped, solve_uncapped, ControlPlan, CostSpec, FbsdeCertificate, ScenarioTree,
    SolveOptions, SolveReport, TimeGrid,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::Artifacts;
use crate::config::{ExperimentConfig, Format};

pub const OK: u8 = 0;
pub const CONFIG: u8 = 2;
pub const NOT_CONVERGED: u8 = 3;
pub const CERTIFICATE: u8 = 4;

/// Marks an error as a configuration problem (exit code 2).
#[derive(Debug)]
pub struct ConfigError;

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid configuration")
    }
}

fn problem(config: &ExperimentConfig) -> anyhow::Result<(ScenarioTree, CostSpec)> {
    let tree = config.build_tree().context(ConfigError)?;
    let spec = config.build_spec(&tree).context(ConfigError)?;
    Ok((tree, spec))
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    problem: &'static str,
    cap: Option<f64>,
    coercivity: &'a CoercivityCheck,
    report: &'a SolveReport,
}

#[derive(Serialize)]
struct CertificateDoc {
    kind: &'static str,
    tolerance: f64,
    certified: bool,
    fbsde: Option<FbsdeCertificate>,
    capped_kkt: Option<CappedKktReport>,
}

impl CertificateDoc {
    fn failure(&self) -> String {
        if let Some(c) = &self.fbsde {
            let (name, value) = c.worst_residual();
            return format!("{name} residual {value:e} exceeds tolerance {:e}", self.tolerance);
        }
        if let Some(c) = &self.capped_kkt {
            return format!(
                "box-KKT violation {:e} or identity gap {:e} exceeds tolerance {:e}",
                c.box_violation, c.identity_gap, self.tolerance
            );
        }
        "no certificate".into()
    }
}

fn certificate(
    tree: &ScenarioTree,
    spec: &CostSpec,
    plan: &ControlPlan,
    cap: Option<f64>,
    tolerance: f64,
) -> anyhow::Result<CertificateDoc> {
    Ok(match cap {
        None => {
            let c = certify(tree, spec, plan, tolerance)?;
            CertificateDoc { kind: "fbsde", tolerance, certified: c.certified, fbsde: Some(c), capped_kkt: None }
        }
        Some(n) => {
            let c = capped_kkt_identities(tree, spec, plan, n)?;
            let certified = c.box_violation <= tolerance && c.identity_gap <= tolerance;
            CertificateDoc { kind: "capped-kkt", tolerance, certified, fbsde: None, capped_kkt: Some(c) }
        }
    })
}

pub fn solve(config: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<u8> {
    let (tree, spec) = problem(config)?;
    let cap = config.solve.cap;
    let coercivity = check_coercivity(&spec, &tree);
    let (plan, report) = match cap {
        Some(n) => solve_capped(&tree, &spec, n, &config.solver)?,
        None => solve_uncapped(&tree, &spec, &config.solver)?,
    };
    let cert = certificate(&tree, &spec, &plan, cap, config.certificate.tolerance)?;
    if config.wants(Format::Json) {
        art.text("tree.json", &format!("{}\n", tree.to_json()?))?;
        art.json("plan.json", "follower/plan/v1", &plan)?;
        let problem = if cap.is_some() { "capped" } else { "uncapped" };
        art.json("report.json", "follower/solve-report/v1", &SolveSummary { problem, cap, coercivity: &coercivity, report: &report })?;
        art.json("certificate.json", "follower/certificate/v1", &cert)?;
    }
    println!(
        "value {} iterations {} kkt {:e} termination {:?}",
        fmt_f64(report.value),
        report.iterations,
        report.kkt_residual,
        report.termination
    );
    if !report.converged {
        eprintln!("solver did not converge: {:?} with KKT residual {:e}", report.termination, report.kkt_residual);
        return Ok(NOT_CONVERGED);
    }
    if !cert.certified {
        eprintln!("certificate failed: {}", cert.failure());
        return Ok(CERTIFICATE);
    }
    println!("certificate PASS ({})", cert.kind);
    Ok(OK)
}

#[derive(Serialize)]
struct LadderDoc<'a> {
    #[serde(flatten)]
    report: &'a LadderReport,
    target_gap: Option<f64>,
}

fn write_ladder(art: &mut Artifacts, formats: &[Format], report: &LadderReport, target_gap: Option<f64>) -> anyhow::Result<()> {
    if formats.contains(&Format::Csv) {
        art.text("ladder.csv", &ladder_csv(report)?)?;
        art.text("mz_curve.csv", &mz_curve_csv(report)?)?;
    }
    if formats.contains(&Format::Json) {
        art.json("ladder.json", "follower/ladder/v1", &LadderDoc { report, target_gap })?;
    }
    Ok(())
}

fn print_ladder(report: &LadderReport) {
    println!("V = {}", fmt_f64(report.uncapped_value));
    println!("{:>8} {:>22} {:>12} {:>12} {:>12}", "n", "V_n", "gap", "pp_dist", "sup_dist");
    for r in &report.rungs {
        println!(
            "{:>8} {:>22} {:>12.4e} {:>12.4e} {:>12.4e}",
            fmt_f64(r.cap),
            fmt_f64(r.value),
            r.gap,
            r.pp_distance,
            r.sup_distance
        );
    }
}

pub fn ladder(config: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<u8> {
    if config.ladder.caps.is_empty() {
        return Err(anyhow::anyhow!("ladder.caps is empty").context(ConfigError));
    }
    let (tree, spec) = problem(config)?;
    let report = run_ladder(&tree, &spec, &config.ladder.caps, &config.solver)?;
    write_ladder(art, &config.outputs.formats, &report, config.ladder.target_gap)?;
    print_ladder(&report);
    if !report.all_converged() {
        eprintln!("a ladder rung did not converge");
        return Ok(NOT_CONVERGED);
    }
    let gap = report.final_gap().unwrap_or(0.0);
    let gap_ok = config.ladder.target_gap.is_none_or(|t| gap <= t);
    println!("monotone {} bounded below {} final gap {:e}", report.monotone, report.bounded_below, gap);
    if report.monotone && report.bounded_below && gap_ok {
        Ok(OK)
    } else {
        eprintln!("ladder check failed");
        Ok(CERTIFICATE)
    }
}

#[derive(Serialize)]
struct EquivalenceDoc<'a> {
    payoff: PayoffForm,
    equivalence: &'a EquivalenceReport,
    /// Snell value for the comparison payoff when `payoff = "display"`.
    display_snell_value: Option<f64>,
    never_stops: bool,
}

pub fn stop(config: &ExperimentConfig, art: &mut Artifacts) -> anyhow::Result<u8> {
    let (tree, spec) = problem(config)?;
    let (plan, report) = solve_uncapped(&tree, &spec, &config.solver)?;
    if !report.converged {
        eprintln!("solver did not converge: {:?} with KKT residual {:e}", report.termination, report.kkt_residual);
        return Ok(NOT_CONVERGED);
    }
    let tolerance = config.certificate.tolerance;
    let eq = match equivalence_check(&tree, &spec, &plan, tolerance) {
        Ok(eq) => eq,
        Err(follower_core::Error::NotCertified(msg)) => {
            eprintln!("certificate failed: {msg}");
            return Ok(CERTIFICATE);
        }
        Err(e) => return Err(e.into()),
    };
    let payoff = payoff_process(&tree, &spec, PayoffForm::Proof)?;
    let snell = snell_min(&tree, &payoff.z)?;
    let display_snell_value = match config.stop.payoff {
        PayoffForm::Proof => None,
        PayoffForm::Display => {
            let z = payoff_process(&tree, &spec, PayoffForm::Display)?.z;
            Some(snell_min(&tree, &z)?.root_value(&tree))
        }
    };
    let never_stops = eq.policy.stops.iter().all(|s| s.time_index.is_none());
    if config.wants(Format::Csv) {
        art.text("stop_region.csv", &stop_region_csv(&stop_region_rows(&tree, &payoff.z, &snell))?)?;
    }
    if config.wants(Format::Json) {
        art.json("plan.json", "follower/plan/v1", &plan)?;
        let doc = EquivalenceDoc { payoff: config.stop.payoff, equivalence: &eq, display_snell_value, never_stops };
        art.json("equivalence.json", "follower/equivalence/v1", &doc)?;
    }
    println!(
        "control value {} Snell value {} adjoint bound {}{}",
        fmt_f64(eq.control_value),
        fmt_f64(eq.snell_value),
        fmt_f64(eq.adjoint_bound),
        if never_stops { " (policy: never)" } else { "" }
    );
    if let Some(v) = display_snell_value {
        println!("display-form Snell value {} (comparison only)", fmt_f64(v));
    }
    if eq.passed {
        println!("equivalence PASS");
        Ok(OK)
    } else {
        eprintln!("equivalence FAIL: values differ by more than {tolerance:e}");
        Ok(CERTIFICATE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReproName {
    QuadraticTerminal,
    ExpNonattain,
    RayCounterexample,
}

#[derive(Serialize)]
struct Check {
    name: String,
    passed: bool,
}

#[derive(Serialize)]
struct ReproDoc<T: Serialize> {
    name: &'static str,
    passed: bool,
    checks: Vec<Check>,
    details: T,
}

fn report_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{}: {}", c.name, if c.passed { "PASS" } else { "FAIL" });
    }
    checks.iter().all(|c| c.passed)
}

pub fn repro(name: ReproName, opts: &SolveOptions, art: &mut Artifacts) -> anyhow::Result<u8> {
    let passed = match name {
        ReproName::QuadraticTerminal => repro_quadratic(opts, art)?,
        ReproName::ExpNonattain => repro_exp(opts, art)?,
        ReproName::RayCounterexample => repro_ray(art)?,
    };
    Ok(if passed { OK } else { CERTIFICATE })
}

fn lottery_support() -> Vec<(Vec<f64>, f64)> {
    vec![(vec![0.0], 0.5), (vec![2.0], 0.5)]
}

#[derive(Serialize)]
struct QuadraticDetails {
    value: f64,
    terminal: Vec<TerminalRow>,
    ladder_tree: &'static str,
    pp_distance: Vec<f64>,
    sup_distance: Vec<f64>,
}

#[derive(Serialize)]
struct TerminalRow {
    l: f64,
    a: f64,
    rule: f64,
}

fn repro_quadratic(opts: &SolveOptions, art: &mut Artifacts) -> anyhow::Result<bool> {
    let tree = ScenarioTree::lottery(1, &lottery_support(), 1.0)?;
    let spec = CostSpec::quadratic_terminal(1.0);
    let (plan, report) = solve_uncapped(&tree, &spec, opts)?;
    let a = plan.cumulative(&tree);
    let terminal: Vec<TerminalRow> = tree
        .leaves()
        .iter()
        .map(|&leaf| {
            let l = tree.node(leaf).l[0];
            TerminalRow { l, a: a.get(leaf)[0], rule: (l - 1.0).max(0.0) }
        })
        .collect();
    let rule_ok = report.converged && terminal.iter().all(|r| (r.a - r.rule).abs() <= 1e-6);
    println!("value {}", fmt_f64(report.value));

    // A lottery revealed right after time 0 lets capped controls ramp up
    // before T, so the capped optimizers approach the jump in the
    // pseudopath metric but never in the sup norm.
    let tilt = [("price".to_string(), 1.0), ("tilt".to_string(), 1e-3)].into_iter().collect();
    let ladder_tree = ScenarioTree::lottery_revealed_at(100, &lottery_support(), 1.0, 1)?;
    let ladder_spec = CostSpec::named("quadratic-terminal", &tilt, 1.0)?;
    let ladder = run_ladder(&ladder_tree, &ladder_spec, &[1.0, 2.0, 4.0, 8.0, 16.0], opts)?;
    print_ladder(&ladder);
    let pp: Vec<f64> = ladder.rungs.iter().map(|r| r.pp_distance).collect();
    let sup: Vec<f64> = ladder.rungs.iter().map(|r| r.sup_distance).collect();
    let checks = vec![
        Check { name: "terminal rule max(0, l−1)".into(), passed: rule_ok },
        Check { name: "ladder converged".into(), passed: ladder.all_converged() },
        Check { name: "pseudopath distance decreasing".into(), passed: pp.windows(2).all(|w| w[1] < w[0]) },
        Check { name: "sup distance stays >= 0.5".into(), passed: sup.iter().all(|&s| s >= 0.5) },
    ];
    let passed = report_checks(&checks);
    art.text("ladder.csv", &ladder_csv(&ladder)?)?;
    art.text("mz_curve.csv", &mz_curve_csv(&ladder)?)?;
    let details = QuadraticDetails {
        value: report.value,
        terminal,
        ladder_tree: "lottery {0, 2} revealed at t_1, 100 steps, f = 1 + 0.001(1 - t)",
        pp_distance: pp,
        sup_distance: sup,
    };
    art.json("repro.json", "follower/repro/v1", &ReproDoc { name: "quadratic-terminal", passed, checks, details })?;
    Ok(passed)
}

#[derive(Serialize)]
struct ExpDetails {
    rejected_without_waiver: String,
    iterations: usize,
    termination: String,
    value_trace: Vec<f64>,
    terminal_mass_trace: Vec<f64>,
}

fn repro_exp(opts: &SolveOptions, art: &mut Artifacts) -> anyhow::Result<bool> {
    let tree = ScenarioTree::lottery(1, &lottery_support(), 1.0)?;
    let spec = CostSpec::exp_nonattain();
    let refusal = match solve_uncapped(&tree, &spec, &SolveOptions { waive_coercivity: false, ..*opts }) {
        Err(e @ follower_core::Error::CoercivityUnverified(_)) => e.to_string(),
        Err(e) => return Err(e.into()),
        Ok(_) => String::new(),
    };
    println!("without waiver: {}", if refusal.is_empty() { "accepted" } else { &refusal });
    let waived = SolveOptions { waive_coercivity: true, max_iterations: opts.max_iterations.min(10_000), ..*opts };
    let (_, report) = solve_uncapped(&tree, &spec, &waived)?;
    let value = *report.value_trace.last().expect("trace has the starting point");
    let mass = *report.mass_trace.last().expect("trace has the starting point");
    println!("termination {:?} after {} iterations", report.termination, report.iterations);
    println!("value trace last {value:e}, A_T trace last {mass}");
    let checks = vec![
        Check { name: "refused without waiver".into(), passed: !refusal.is_empty() },
        Check { name: "value trace last entry <= 0.01".into(), passed: value <= 0.01 },
        Check { name: "A_T trace last entry >= 5".into(), passed: mass >= 5.0 },
        Check { name: "no minimizer reported".into(), passed: !report.converged },
    ];
    let passed = report_checks(&checks);
    let mut w = String::from("iteration,value,A_T\n");
    for (i, (v, m)) in report.value_trace.iter().zip(&report.mass_trace).enumerate() {
        w.push_str(&format!("{i},{},{}\n", fmt_f64(*v), fmt_f64(*m)));
    }
    art.text("trace.csv", &w)?;
    let details = ExpDetails {
        rejected_without_waiver: refusal,
        iterations: report.iterations,
        termination: format!("{:?}", report.termination),
        value_trace: report.value_trace.clone(),
        terminal_mass_trace: report.mass_trace.clone(),
    };
    art.json("repro.json", "follower/repro/v1", &ReproDoc { name: "exp-nonattain", passed, checks, details })?;
    Ok(passed)
}

const RAY_REFINEMENTS: [usize; 4] = [2, 4, 8, 16];
const RAY_RESOLUTION: f64 = 1e-4;

#[derive(Serialize)]
struct RayRow {
    refinement: usize,
    admissible: f64,
    anticipative: f64,
    gap: f64,
}

fn repro_ray(art: &mut Artifacts) -> anyhow::Result<bool> {
    let spec = CostSpec::ray_counterexample();
    let search = GridSearch::new(RAY_RESOLUTION, 1.0);
    let rows: Vec<RayRow> = RAY_REFINEMENTS
        .par_iter()
        .map(|&r| -> anyhow::Result<RayRow> {
            let tree = ScenarioTree::ray(r)?;
            let admissible = grid_search(&tree, &spec, &search)?.value;
            let anticipative = anticipative_value(&tree, &spec, &search)?;
            Ok(RayRow { refinement: r, admissible, anticipative, gap: admissible - anticipative })
        })
        .collect::<anyhow::Result<_>>()?;
    println!("{:>10} {:>22} {:>22} {:>12}", "refinement", "admissible", "anticipative", "gap");
    let mut w = String::from("refinement,admissible,anticipative,gap\n");
    for row in &rows {
        println!("{:>10} {:>22} {:>22} {:>12.4e}", row.refinement, fmt_f64(row.admissible), fmt_f64(row.anticipative), row.gap);
        w.push_str(&format!(
            "{},{},{},{}\n",
            row.refinement,
            fmt_f64(row.admissible),
            fmt_f64(row.anticipative),
            fmt_f64(row.gap)
        ));
    }
    let checks = vec![
        Check {
            name: "admissible value nonincreasing in refinement".into(),
            passed: rows.windows(2).all(|w| w[1].admissible <= w[0].admissible + 1e-12),
        },
        Check {
            name: "admissible value bounded below by the anticipative optimum".into(),
            passed: rows.iter().all(|r| r.gap >= -1e-12),
        },
    ];
    let passed = report_checks(&checks);
    art.text("ray.csv", &w)?;
    art.json("repro.json", "follower/repro/v1", &ReproDoc { name: "ray-counterexample", passed, checks, details: rows })?;
    Ok(passed)
}

/// Input for `mzdist --paths`: named paths on one shared grid.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathsDoc {
    schema: String,
    times: Vec<f64>,
    paths: Vec<NamedPath>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedPath {
    label: String,
    values: Vec<Vec<f64>>,
}

pub const PATHS_SCHEMA: &str = "follower/paths/v1";

#[derive(Serialize)]
struct DistancesDoc<'a> {
    labels: &'a [String],
    pseudopath: &'a [Vec<f64>],
    sup: &'a [Vec<f64>],
}

type Metric<'a> = dyn Fn(usize, usize) -> anyhow::Result<f64> + Sync + 'a;

fn matrix(n: usize, metric: &Metric<'_>) -> anyhow::Result<Vec<Vec<f64>>> {
    (0..n).into_par_iter().map(|i| (0..n).map(|j| metric(i, j)).collect()).collect()
}

pub fn mzdist(config: Option<&ExperimentConfig>, paths: Option<&Path>, art: &mut Artifacts, formats: &[Format]) -> anyhow::Result<u8> {
    let (labels, pp, sup) = match (paths, config) {
        (Some(file), _) => {
            let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let doc: PathsDoc = serde_json::from_str(&text).context(ConfigError)?;
            if doc.schema != PATHS_SCHEMA {
                return Err(anyhow::anyhow!("paths file schema {:?}, expected {PATHS_SCHEMA:?}", doc.schema).context(ConfigError));
            }
            let grid = TimeGrid::new(doc.times).context(ConfigError)?;
            let paths: Vec<GridPath> = doc
                .paths
                .iter()
                .map(|p| GridPath::new(grid.clone(), p.values.clone()))
                .collect::<Result<_, _>>()
                .context(ConfigError)?;
            let labels: Vec<String> = doc.paths.into_iter().map(|p| p.label).collect();
            let pp = matrix(paths.len(), &|i, j| Ok(pseudopath_distance(&paths[i], &paths[j])?))?;
            let sup = matrix(paths.len(), &|i, j| Ok(sup_distance(&paths[i], &paths[j])?))?;
            (labels, pp, sup)
        }
        (None, Some(config)) => {
            if config.ladder.caps.is_empty() {
                return Err(anyhow::anyhow!("mzdist needs ladder.caps or --paths").context(ConfigError));
            }
            let (tree, spec) = problem(config)?;
            let report = run_ladder(&tree, &spec, &config.ladder.caps, &config.solver)?;
            if !report.all_converged() {
                eprintln!("a ladder rung did not converge");
                return Ok(NOT_CONVERGED);
            }
            if formats.contains(&Format::Csv) {
                art.text("mz_curve.csv", &mz_curve_csv(&report)?)?;
            }
            let mut labels = vec!["V".to_string()];
            let mut plans = vec![&report.uncapped_plan];
            for r in &report.rungs {
                labels.push(format!("n={}", fmt_f64(r.cap)));
                plans.push(&r.plan);
            }
            let pp = matrix(plans.len(), &|i, j| Ok(plan_pseudopath_distance(&tree, plans[i], plans[j])?))?;
            let sup = matrix(plans.len(), &|i, j| Ok(plan_sup_distance(&tree, plans[i], plans[j])?))?;
            (labels, pp, sup)
        }
        (None, None) => return Err(anyhow::anyhow!("mzdist needs --config or --paths").context(ConfigError)),
    };
    if formats.contains(&Format::Csv) {
        art.text("pp_matrix.csv", &distance_matrix_csv(&labels, &pp)?)?;
        art.text("sup_matrix.csv", &distance_matrix_csv(&labels, &sup)?)?;
    }
    if formats.contains(&Format::Json) {
        art.json("distances.json", "follower/distances/v1", &DistancesDoc { labels: &labels, pseudopath: &pp, sup: &sup })?;
    }
    for (label, row) in labels.iter().zip(&pp) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{label:>10} {}", cells.join(" "));
    }
    Ok(OK)
}
