use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use spillover::model::{ModelSpec, Noise};
use spillover::sim::simulate_dataset;
use spillover::{AssignmentMechanism, OutcomeModel};
use spillover_cli::data::{load_dataset, read_dataset, write_dataset};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn spillover(args: &[&str]) -> Run {
    spillover_env(args, &[])
}

fn spillover_env(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spillover"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn json(run: &Run) -> Value {
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    serde_json::from_str(&run.stdout).expect("stdout is JSON")
}

fn write_fixture(path: &Path, mech: &AssignmentMechanism, model: &OutcomeModel, n: usize, groups: usize, seed: u64) {
    let ds = simulate_dataset(mech, model, n, groups, seed).unwrap();
    write_dataset(&ds, fs::File::create(path).unwrap()).unwrap();
}

fn effect<'a>(rows: &'a Value, name: &str) -> &'a Value {
    rows.as_array()
        .unwrap()
        .iter()
        .find(|r| r["parameter"] == name)
        .unwrap_or_else(|| panic!("no row {name}"))
}

#[test]
fn loader_examples() {
    let ds = read_dataset("group_id,treatment,outcome\nh,1,1\nh,0,0\nh,0,1\n".as_bytes()).unwrap();
    assert_eq!(ds.groups().len(), 1);
    assert_eq!(ds.groups()[0].size(), 3);

    let err = read_dataset("group_id,treatment,outcome,saturation\nh,1,1,1\nh,0,0,1\nh,0,1,0\n".as_bytes()).unwrap_err();
    assert!(err.to_string().contains("saturation varies within group 'h'"), "{err}");
    assert_eq!(err.exit_code(), 2);

    let text = "group_id,treatment,outcome\na,1,1\na,0,0\na,0,1\nb,1,1\nb,0,0\nb,0,1\nc,1,1\nc,0,0\nc,0,1\nc,1,0\n";
    let ds = read_dataset(text.as_bytes()).unwrap();
    assert_eq!(ds.size_summary().into_iter().collect::<Vec<_>>(), vec![(3, 2), (4, 1)]);
}

#[test]
fn simulator_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.csv");
    let run = spillover(&["simulate", "--preset", "smoke", "--seed", "11", "--emit-dataset", path.to_str().unwrap()]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let loaded = load_dataset(&path).unwrap();
    let direct = simulate_dataset(
        &AssignmentMechanism::simple_random(0.5).unwrap(),
        &OutcomeModel::control_spillover(),
        2,
        50,
        11,
    )
    .unwrap();
    assert_eq!(loaded, direct);
    let mut buf = Vec::new();
    write_dataset(&loaded, &mut buf).unwrap();
    assert_eq!(read_dataset(&buf[..]).unwrap(), loaded);

    let pp = AssignmentMechanism::partial_population(0.5, 0.5).unwrap();
    let ds = simulate_dataset(&pp, &OutcomeModel::control_spillover(), 3, 40, 2).unwrap();
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf).unwrap();
    assert_eq!(read_dataset(&buf[..]).unwrap(), ds);
}

#[test]
fn estimate_recovers_simulated_spillovers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sr.csv");
    let sr = AssignmentMechanism::simple_random(0.5).unwrap();
    write_fixture(&path, &sr, &OutcomeModel::control_spillover(), 2, 5000, 404);
    let out = json(&spillover(&["estimate", path.to_str().unwrap(), "--format", "json"]));
    let stratum = &out["strata"][0];
    assert_eq!(stratum["n"], 2);
    let effects = &stratum["cell_means"]["effects"];
    for (name, truth) in [("theta0[1]", 0.12), ("theta0[2]", 0.12), ("theta1[1]", 0.0), ("theta1[2]", 0.0)] {
        let row = effect(effects, name);
        let (v, se) = (row["estimate"].as_f64().unwrap(), row["se"].as_f64().unwrap());
        assert!((v - truth).abs() <= 3.0 * se, "{name}: {v} (se {se}) vs {truth}");
    }
    let beta = stratum["difference_in_means"]["estimate"].as_f64().unwrap();
    assert!((beta - 0.04).abs() < 0.02);
    assert!(out["partial_population"].is_null());
}

#[test]
fn estimate_text_report_has_three_panels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let sr = AssignmentMechanism::simple_random(0.5).unwrap();
    write_fixture(&path, &sr, &OutcomeModel::control_spillover(), 2, 200, 1);
    let run = spillover(&["estimate", path.to_str().unwrap()]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    for needle in [
        "groups by size 3:200",
        "panel 1: difference in means",
        "panel 2: linear-in-means",
        "panel 3: cell-mean contrasts",
        "pooled spillover",
        "saturated contrasts",
        "exchangeability: W = ",
    ] {
        assert!(run.stdout.contains(needle), "missing '{needle}' in\n{}", run.stdout);
    }
}

#[test]
fn partial_population_needs_saturation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let sr = AssignmentMechanism::simple_random(0.5).unwrap();
    write_fixture(&path, &sr, &OutcomeModel::control_spillover(), 2, 50, 1);
    let run = spillover(&["estimate", path.to_str().unwrap(), "--partial-population"]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("saturation column required"), "{}", run.stderr);

    let pp = dir.path().join("pp.csv");
    let mech = AssignmentMechanism::partial_population(0.5, 0.5).unwrap();
    write_fixture(&pp, &mech, &OutcomeModel::control_spillover(), 2, 4000, 8);
    let out = json(&spillover(&["estimate", pp.to_str().unwrap(), "--partial-population", "--format", "json"]));
    let row = &out["partial_population"];
    let (v, se) = (row["estimate"].as_f64().unwrap(), row["se"].as_f64().unwrap());
    assert!((v - 0.09).abs() <= 3.0 * se, "{v} (se {se})");
}

#[test]
fn pairs_give_identical_panels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.csv");
    let model = OutcomeModel::from_spec(&ModelSpec::control_spillover(), Noise::Gaussian { sd: 1.0 });
    write_fixture(&path, &AssignmentMechanism::simple_random(0.5).unwrap(), &model, 1, 300, 5);
    let out = json(&spillover(&["estimate", path.to_str().unwrap(), "--format", "json"]));
    let s = &out["strata"][0];
    let strip = |panel: &Value| -> Vec<(Value, Value, Value)> {
        panel["effects"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| (r["parameter"].clone(), r["estimate"].clone(), r["se"].clone()))
            .collect()
    };
    assert_eq!(strip(&s["cell_means"]), strip(&s["saturated"]));
    assert_eq!(s["exchangeability"]["testable"], false);
}

#[test]
fn undefined_everywhere_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("thin.csv");
    fs::write(&path, "group_id,treatment,outcome\na,0,1\na,0,0\nb,0,1\nb,0,0\n").unwrap();
    let run = spillover(&["estimate", path.to_str().unwrap()]);
    assert_eq!(run.code, 3, "{}", run.stdout);
    assert!(run.stdout.contains("footnotes"));
}

#[test]
fn usage_and_validation_exit_codes() {
    assert_eq!(spillover(&["frobnicate"]).code, 1);
    assert_eq!(spillover(&["design", "--n", "2"]).code, 1);
    assert_eq!(spillover(&["estimate", "/nonexistent/data.csv"]).code, 2);
    assert_eq!(spillover(&["simulate", "--preset", "nope"]).code, 1);
    assert_eq!(spillover_env(&["design", "--n", "2", "2srfm"], &[("SPILLOVER_THREADS", "zero")]).code, 1);
    assert_eq!(spillover(&["--help"]).code, 0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "n = 2\nreplications = 0\n").unwrap();
    assert_eq!(spillover(&["simulate", cfg.to_str().unwrap()]).code, 1);
}

#[test]
fn design_rankings() {
    let first = |n: &str| {
        let out = json(&spillover(&["design", "--n", n, "--G", "300", "sr:p=0.5", "2srfm", "--format", "json"]));
        out["entries"][0]["mechanism"].as_str().unwrap().to_string()
    };
    assert_eq!(first("11"), "2srfm");
    assert_eq!(first("2"), "sr:p=0.5");

    let run = spillover(&["design", "--n", "3", "--G", "100", "cluster:p=0.5", "sr:p=0.5"]);
    assert_eq!(run.code, 0);
    assert!(run.stdout.contains("warning: cluster:p=0.5 leaves 6 of 8 assignments unidentified"), "{}", run.stdout);

    let run = spillover(&["design", "--n", "2", "coin:p=1"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("sr:p=<prob>"), "{}", run.stderr);
}

#[test]
fn exchangeability_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let sr = AssignmentMechanism::simple_random(0.5).unwrap();

    // each group paired with its rank-reversed copy: same-count cells share outcomes
    let model = OutcomeModel::from_spec(&ModelSpec::control_spillover(), Noise::Gaussian { sd: 1.0 });
    let base = simulate_dataset(&sr, &model, 2, 300, 3).unwrap();
    let mut text = String::from("group_id,unit_id,treatment,outcome,neighbor_rank\n");
    for g in base.groups() {
        for (copy, reverse) in [("a", false), ("b", true)] {
            for (j, u) in g.units.iter().enumerate() {
                let rank = if reverse { g.size() - j } else { j + 1 };
                text.push_str(&format!("{}{copy},u{j},{},{},{rank}\n", g.id, u8::from(u.treatment), u.outcome));
            }
        }
    }
    let sym = dir.path().join("sym.csv");
    fs::write(&sym, text).unwrap();
    let out = json(&spillover(&["test-exchangeability", sym.to_str().unwrap(), "--format", "json"]));
    let p = out["sizes"][0]["p_value"].as_f64().unwrap();
    assert!(p > 0.999, "p = {p}");

    let alt = OutcomeModel::from_spec(
        &ModelSpec::Positional {
            base: 0.75,
            direct: 0.13,
            weights: vec![0.3, 0.0],
        },
        Noise::Gaussian { sd: 0.5 },
    );
    let path = dir.path().join("alt.csv");
    write_fixture(&path, &sr, &alt, 2, 2000, 12);
    let out = json(&spillover(&["test-exchangeability", path.to_str().unwrap(), "--format", "json"]));
    let p = out["sizes"][0]["p_value"].as_f64().unwrap();
    assert!(p < 0.01, "p = {p}");

    let pairs = dir.path().join("pairs.csv");
    write_fixture(&pairs, &sr, &model, 1, 100, 1);
    let run = spillover(&["test-exchangeability", pairs.to_str().unwrap()]);
    assert_eq!(run.code, 0);
    assert!(run.stdout.contains("not testable"), "{}", run.stdout);

    let unranked = dir.path().join("unranked.csv");
    fs::write(&unranked, "group_id,treatment,outcome\na,1,1\na,0,0\nb,0,1\nb,1,0\n").unwrap();
    let run = spillover(&["test-exchangeability", unranked.to_str().unwrap()]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("neighbor ordering"), "{}", run.stderr);
}

#[test]
fn smoke_preset_writes_one_replication() {
    let dir = tempfile::tempdir().unwrap();
    let run = spillover(&["simulate", "--preset", "smoke", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let study: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("study.json")).unwrap()).unwrap();
    assert_eq!(study["studies"].as_array().unwrap().len(), 1);
    assert_eq!(study["studies"][0]["replications"], 1);
    let csv = fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
    assert!(csv.starts_with("n,mechanism,ci_kind,coverage\n"));
}

#[test]
fn table3_preset_panels() {
    let run = spillover(&["simulate", "--preset", "table3"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let labels = [
        "condition",
        "bias",
        "variance",
        "coverage (normal)",
        "coverage (bootstrap)",
        "prop. undefined",
    ];
    for mech in ["sr:p=0.5", "2srfm"] {
        let block: Vec<&str> = run
            .stdout
            .split("\n\n")
            .find(|b| b.starts_with(mech))
            .unwrap_or_else(|| panic!("no panel for {mech}:\n{}", run.stdout))
            .lines()
            .collect();
        assert!(block[1].contains("n=2") && block[1].contains("n=11"));
        let rows: Vec<&str> = block[2..].iter().map(|l| l.trim()).collect();
        assert_eq!(rows.len(), 6);
        for (row, label) in rows.iter().zip(labels) {
            assert!(row.starts_with(label), "{row}");
            assert_eq!(row[label.len()..].split_whitespace().count(), 4, "{row}");
        }
    }
}

#[test]
fn figure1_preset_coverage_grid() {
    let dir = tempfile::tempdir().unwrap();
    let run = spillover(&["simulate", "--preset", "figure1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let csv = fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,mechanism,ci_kind,coverage"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 11);
    for mech in ["sr:p=0.5", "2srfm"] {
        for kind in ["normal", "bootstrap"] {
            let ns: Vec<&str> = rows.iter().filter(|r| r[1] == mech && r[2] == kind).map(|r| r[0]).collect();
            assert_eq!(ns, (1..=11).map(|n| n.to_string()).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>());
        }
    }
}

#[test]
fn outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let sr = AssignmentMechanism::simple_random(0.5).unwrap();
    write_fixture(&data, &sr, &OutcomeModel::control_spillover(), 2, 100, 9);
    let mut outputs = Vec::new();
    for (k, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let o = out.to_str().unwrap();
        let env = [("SPILLOVER_THREADS", *threads)];
        assert_eq!(spillover_env(&["estimate", data.to_str().unwrap(), "--bootstrap", "99", "--seed", "4", "--out", o], &env).code, 0);
        let cfg = dir.path().join("s.json");
        fs::write(&cfg, r#"{"n": [2, 3], "groups": 60, "replications": 40, "bootstrap": 30, "seed": 5}"#).unwrap();
        assert_eq!(spillover_env(&["simulate", cfg.to_str().unwrap(), "--out", o], &env).code, 0);
        let files = ["estimate.json", "effects.csv", "cells.csv", "study.json", "coverage.csv"];
        outputs.push(files.map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}
