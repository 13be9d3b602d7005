use std::path::Path;
use std::process::{Command, Output};

use hmmdrop::{InitialLogits, ParameterSet, TransitionLogits};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmmdrop"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn truth() -> ParameterSet {
    ParameterSet {
        beta: vec![0.2, -0.5],
        zeta: vec![-1.0, 1.5],
        sigma2: 0.25,
        gamma: vec![-0.4, 0.5],
        xi: vec![1.5, 4.0],
        eta0: InitialLogits { alpha: vec![-0.5], psi: vec![1.5] },
        eta1: TransitionLogits { alpha: vec![vec![-2.0], vec![2.0]], psi: vec![0.8] },
        pi: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
        tau: vec![0.6, 0.4],
    }
}

/// Simulates a small panel into `dir` and returns the panel path.
fn simulate(dir: &Path, n: usize) -> String {
    let params = dir.join("truth.json");
    std::fs::write(&params, truth().to_json().unwrap()).unwrap();
    let out = run(&[
        "simulate",
        "--params",
        params.to_str().unwrap(),
        "--n",
        &n.to_string(),
        "--waves",
        "4",
        "--binary",
        "0.5",
        "--seed",
        "3",
        "--output-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    dir.join("panel.csv").to_str().unwrap().to_string()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn simulate_then_fit_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = simulate(tmp.path(), 150);
    let cfg = tmp.path().join("config_used.toml");
    let out_dir = tmp.path().join("fit");
    let out = run(&[
        "--workers",
        "1",
        "fit",
        "--input",
        &panel,
        "--config",
        cfg.to_str().unwrap(),
        "--starts",
        "3",
        "--se",
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    for f in ["params.json", "parameters.csv", "trace.csv", "assignments.csv", "progress.jsonl", "config_used.toml", "fit.json", "covariance.csv"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }

    let (header, rows) = read_csv(&out_dir.join("parameters.csv"));
    assert_eq!(header, ["parameter", "block", "estimate", "se"]);
    let mut blocks: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    blocks.dedup();
    blocks.sort();
    blocks.dedup();
    assert_eq!(blocks.len(), 9, "{blocks:?}");

    let (_, trace) = read_csv(&out_dir.join("trace.csv"));
    let ll: Vec<f64> = trace.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs().max(1.0)));

    let progress = std::fs::read_to_string(out_dir.join("progress.jsonl")).unwrap();
    for line in progress.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn missing_covariate_column_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = simulate(tmp.path(), 20);
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[data]\nx = [\"time\", \"income\"]\nw = [\"time\"]\n").unwrap();
    let out = run(&["fit", "--input", &panel, "--config", cfg.to_str().unwrap(), "--output-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("income"));
}

#[test]
fn replay_selects_lowest_bic() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/reference_grid_bic.csv");
    let out = run(&["select", "--replay", fixture, "--output-dir", tmp.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("G=5 K=3 H=2"), "{text}");
    assert!(tmp.path().join("grid_table.csv").exists());
}

#[test]
fn decode_rows_sum_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = simulate(tmp.path(), 40);
    let cfg = tmp.path().join("config_used.toml");
    let out = run(&[
        "decode",
        "--input",
        &panel,
        "--config",
        cfg.to_str().unwrap(),
        "--params",
        tmp.path().join("truth.json").to_str().unwrap(),
        "--output-dir",
        tmp.path().join("dec").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    for f in ["class_posteriors.csv", "state_posteriors.csv"] {
        let (header, rows) = read_csv(&tmp.path().join("dec").join(f));
        assert!(!rows.is_empty());
        for prefix in ["e_", "d_", "a_"] {
            let cols: Vec<usize> = (0..header.len()).filter(|&j| header[j].starts_with(prefix)).collect();
            for r in &rows {
                if cols.is_empty() {
                    continue;
                }
                let s: f64 = cols.iter().map(|&j| r[j].parse::<f64>().unwrap()).sum();
                assert!((s - 1.0).abs() < 1e-9, "{f} {prefix}: {s}");
            }
        }
    }
}

#[test]
fn small_grid_selection_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let panel = simulate(tmp.path(), 80);
    let cfg = tmp.path().join("config_used.toml");
    let out_dir = tmp.path().join("grid");
    let out = run(&[
        "select",
        "--input",
        &panel,
        "--config",
        cfg.to_str().unwrap(),
        "--G",
        "1-2",
        "--K",
        "1-2",
        "--H",
        "1-2",
        "--starts",
        "2",
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let (_, rows) = read_csv(&out_dir.join("grid_cells.csv"));
    assert_eq!(rows.len(), 8);
    assert!(out_dir.join("selected").join("params.json").exists());
}
