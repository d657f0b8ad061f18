use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use follower_cli::artifacts::check_schema;
use serde_json::Value;

const LOTTERY_TREE: &str = r#"
[tree]
family = "lottery"
steps = 1
support = [{ value = 0.0, probability = 0.5 }, { value = 2.0, probability = 0.5 }]
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn follower(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_follower"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("FOLLOWER_THREADS", n.to_string()),
        None => cmd.env_remove("FOLLOWER_THREADS"),
    };
    cmd.output().unwrap()
}

fn run(command: &str, config: Option<&Path>, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![command.to_string()];
    if let Some(c) = config {
        args.extend(["--config".to_string(), c.display().to_string()]);
    }
    args.extend(["--out".to_string(), out.display().to_string()]);
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    follower(&refs, None)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every JSON artifact in `dir` matches the key list of its schema stamp.
fn assert_schemas(dir: &Path) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            check_schema(&read_json(&path)).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect()
}

#[test]
fn solve_quadratic_lottery() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{LOTTERY_TREE}\n[cost]\nname = \"quadratic-terminal\"\n"));
    let out_dir = dir.path().join("out");
    let out = run("solve", Some(&cfg), &out_dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&out_dir.join("report.json"));
    assert!((report["report"]["value"].as_f64().unwrap() - 0.75).abs() <= 1e-6);
    assert_eq!(read_json(&out_dir.join("certificate.json"))["certified"], true);
    let manifest = read_json(&out_dir.join("manifest.json"));
    let names: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["tree.json", "plan.json", "report.json", "certificate.json"]);
    assert_schemas(&out_dir);
}

#[test]
fn capped_solve_certifies_with_box_kkt() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[tree]\nfamily = \"binomial\"\nsteps = 3\n\n[cost]\nname = \"quadratic-terminal\"\n\n[solve]\ncap = 2.0\n";
    let cfg = write_config(dir.path(), "c.toml", body);
    let out_dir = dir.path().join("out");
    let out = run("solve", Some(&cfg), &out_dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&out_dir.join("certificate.json"))["kind"], "capped-kkt");
    assert_schemas(&out_dir);
}

#[test]
fn exp_nonattain_without_waiver_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{LOTTERY_TREE}\n[cost]\nname = \"exp-nonattain\"\n"));
    let out = run("solve", Some(&cfg), &dir.path().join("out"), &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("coercivity unverified"), "{}", stderr(&out));

    let waived = run("solve", Some(&cfg), &dir.path().join("waived"), &["--waive-coercivity"]);
    assert_eq!(code(&waived), 3, "{}", stderr(&waived));
    let report = read_json(&dir.path().join("waived/report.json"));
    assert_eq!(report["report"]["termination"], "unbounded");
}

#[test]
fn zero_cost_solves_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[tree]\nfamily = \"binomial\"\nsteps = 3\n\n[cost]\nname = \"zero\"\n");
    let out_dir = dir.path().join("out");
    let out = run("solve", Some(&cfg), &out_dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&out_dir.join("report.json"))["report"]["value"].as_f64(), Some(0.0));
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        format!("{LOTTERY_TREE}\n[cost]\nname = \"quadratic-terminal\"\ncolour = 1\n"),
        format!("{LOTTERY_TREE}\n[cost]\nname = \"no-such-cost\"\n"),
        format!("{LOTTERY_TREE}\n[cost]\nname = \"quadratic-terminal\"\n\n[solver]\ngrad_tolerance = -1.0\n"),
        "[cost]\nname = \"zero\"\n".to_string(),
    ];
    for (i, body) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{i}.toml"), body);
        let out = run("solve", Some(&cfg), &dir.path().join("out"), &[]);
        assert_eq!(code(&out), 2, "case {i}: {}", stderr(&out));
    }
    let out = run("solve", Some(&dir.path().join("missing.toml")), &dir.path().join("out"), &[]);
    assert_eq!(code(&out), 2);
    let out = run("solve", None, &dir.path().join("out"), &[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn loose_solver_fails_the_certificate_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[tree]\nfamily = \"random\"\nsteps = 4\nmax_branch = 3\n\n[cost]\nname = \"quadratic-running\"\nparams = { price = 0.1 }\n\n\
                [solver]\ngrad_tolerance = 0.05\n";
    let cfg = write_config(dir.path(), "c.toml", body);
    let out = run("solve", Some(&cfg), &dir.path().join("out"), &["--tolerance", "1e-12", "--seed", "3"]);
    assert_eq!(code(&out), 4, "{}{}", stdout(&out), stderr(&out));
    assert!(stderr(&out).contains("residual"), "{}", stderr(&out));
}

#[test]
fn ladder_on_the_lottery_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{LOTTERY_TREE}\n[cost]\nname = \"quadratic-terminal\"\n\n[ladder]\ncaps = [1.0, 2.0, 4.0, 8.0]\ntarget_gap = 1e-6\n");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out_dir = dir.path().join("out");
    let out = run("ladder", Some(&cfg), &out_dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("ladder.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,V_n,gap_to_V,pp_distance,sup_distance,neg_part,iterations,converged"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-8));
    assert_schemas(&out_dir);

    let single = write_config(dir.path(), "s.toml", &body.replace("[1.0, 2.0, 4.0, 8.0]", "[3.0]"));
    let out = run("ladder", Some(&single), &dir.path().join("single"), &[]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(dir.path().join("single/ladder.csv")).unwrap().lines().count(), 2);

    let empty = write_config(dir.path(), "e.toml", &body.replace("[1.0, 2.0, 4.0, 8.0]", "[]"));
    assert_eq!(code(&run("ladder", Some(&empty), &dir.path().join("empty"), &[])), 2);
}

#[test]
fn stop_equivalence_on_lottery_and_binomial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{LOTTERY_TREE}\n[cost]\nname = \"quadratic-terminal\"\n"));
    let out_dir = dir.path().join("lottery");
    let out = run("stop", Some(&cfg), &out_dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("equivalence PASS"));
    let eq = read_json(&out_dir.join("equivalence.json"));
    assert!((eq["equivalence"]["snell_value"].as_f64().unwrap() + 0.5).abs() <= 1e-12);
    let csv = fs::read_to_string(out_dir.join("stop_region.csv")).unwrap();
    assert!(csv.starts_with("node,time,l_0,Z,U,in_region\n"));
    assert_schemas(&out_dir);

    let body = "[tree]\nfamily = \"binomial\"\nsteps = 3\n\n[cost]\nname = \"quadratic-terminal\"\n\n[certificate]\ntolerance = 1e-6\n";
    let cfg = write_config(dir.path(), "b.toml", body);
    let out = run("stop", Some(&cfg), &dir.path().join("binomial"), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let cfg = write_config(dir.path(), "d.toml", &format!("{LOTTERY_TREE}\n[cost]\nname = \"quadratic-terminal\"\n\n[stop]\npayoff = \"display\"\n"));
    let out = run("stop", Some(&cfg), &dir.path().join("display"), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(read_json(&dir.path().join("display/equivalence.json"))["display_snell_value"].is_f64());
}

#[test]
fn stop_with_expensive_control_never_stops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{LOTTERY_TREE}\n[cost]\nname = \"quadratic-terminal\"\nparams = {{ price = 10.0 }}\n"));
    let out_dir = dir.path().join("out");
    let out = run("stop", Some(&cfg), &out_dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eq = read_json(&out_dir.join("equivalence.json"));
    assert_eq!(eq["never_stops"], true);
    assert_eq!(eq["equivalence"]["control_value"].as_f64(), Some(0.0));
    assert_eq!(eq["equivalence"]["snell_value"].as_f64(), Some(0.0));
}

#[test]
fn repro_quadratic_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("repro", None, &dir.path().join("out"), &["quadratic-terminal"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("terminal rule max(0, l−1): PASS"));
    assert_schemas(&dir.path().join("out"));
}

#[test]
fn repro_exp_nonattain() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("repro", None, &dir.path().join("out"), &["exp-nonattain"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = read_json(&dir.path().join("out/repro.json"));
    let values = doc["details"]["value_trace"].as_array().unwrap();
    let masses = doc["details"]["terminal_mass_trace"].as_array().unwrap();
    assert!(values.last().unwrap().as_f64().unwrap() <= 0.01);
    assert!(masses.last().unwrap().as_f64().unwrap() >= 5.0);
}

#[test]
fn repro_ray_counterexample_reports_both_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("repro", None, &dir.path().join("out"), &["ray-counterexample"]);
    let doc = read_json(&dir.path().join("out/repro.json"));
    assert_eq!(code(&out), if doc["passed"] == true { 0 } else { 4 });
    let rows = doc["details"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for row in rows {
        assert!(row["gap"].as_f64().unwrap() >= -1e-12);
    }
    assert_schemas(&dir.path().join("out"));
}

#[test]
fn mzdist_from_paths_file() {
    let dir = tempfile::tempdir().unwrap();
    let paths = r#"{
  "schema": "follower/paths/v1",
  "times": [0.0, 0.5, 1.0],
  "paths": [
    { "label": "flat", "values": [[0.0], [0.0], [0.0]] },
    { "label": "jump", "values": [[0.0], [0.0], [1.0]] },
    { "label": "ramp", "values": [[0.0], [0.5], [1.0]] }
  ]
}"#;
    let file = dir.path().join("paths.json");
    fs::write(&file, paths).unwrap();
    let out_dir = dir.path().join("out");
    let out = run("mzdist", None, &out_dir, &["--paths", file.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = read_json(&out_dir.join("distances.json"));
    let pp = doc["pseudopath"].as_array().unwrap();
    for (i, row) in pp.iter().enumerate() {
        assert_eq!(row[i].as_f64(), Some(0.0));
        for (j, other) in pp.iter().enumerate() {
            assert_eq!(row[j], other[i]);
        }
    }
    assert!(fs::read_to_string(out_dir.join("pp_matrix.csv")).unwrap().starts_with("label,flat,jump,ramp\n"));
    assert_schemas(&out_dir);

    fs::write(&file, paths.replace("follower/paths/v1", "follower/paths/v0")).unwrap();
    assert_eq!(code(&run("mzdist", None, &dir.path().join("bad"), &["--paths", file.to_str().unwrap()])), 2);
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let out = follower(&["repro", "exp-nonattain", "--out", "/nonexistent/never-created"], None);
    assert_ne!(code(&out), 2);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_follower"));
    let out = cmd.args(["repro", "exp-nonattain"]).env("FOLLOWER_THREADS", "many").output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn outputs_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[tree]\nfamily = \"random\"\nsteps = 4\nmax_branch = 3\n\n[cost]\nname = \"quadratic-running\"\nparams = { price = 0.1 }\n\n\
                [ladder]\ncaps = [1.0, 2.0, 4.0, 8.0]\n";
    let cfg = write_config(dir.path(), "c.toml", body);
    let cfg = cfg.to_str().unwrap();
    let runs: [&[&str]; 4] = [
        &["ladder", "--config", cfg, "--seed", "11"],
        &["mzdist", "--config", cfg, "--seed", "11"],
        &["solve", "--config", cfg, "--seed", "11"],
        &["repro", "ray-counterexample"],
    ];
    for (k, args) in runs.iter().enumerate() {
        let mut snapshots = Vec::new();
        for threads in [1, 2, 8] {
            let out_dir = dir.path().join(format!("run{k}-{threads}"));
            let mut full: Vec<&str> = args.to_vec();
            let out_str = out_dir.display().to_string();
            full.extend(["--out", &out_str]);
            let out = follower(&full, Some(threads));
            assert!(matches!(code(&out), 0 | 4), "{args:?}: {}", stderr(&out));
            snapshots.push(snapshot(&out_dir));
        }
        assert!(!snapshots[0].is_empty());
        assert_eq!(snapshots[0], snapshots[1], "{args:?} differs between 1 and 2 threads");
        assert_eq!(snapshots[0], snapshots[2], "{args:?} differs between 1 and 8 threads");
    }
}
