use std::path::Path;
use std::process::{Command, Output};

use icl_lab::cli_io::{Experiment, ExperimentConfig, WeightsEntry, WeightsFile};
use icl_lab::linalg::Matrix;
use icl_lab::sampler::CovarianceFile;
use icl_lab::transformer::TransformerParams;
use tempfile::tempdir;

fn icl_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-lab"))
        .args(args)
        .env_remove("ICL_LAB_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<f64>> {
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("row,col_0"));
    lines
        .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn closed_form_prints_scales_and_writes_json() {
    let dir = tempdir().unwrap();
    let out = icl_lab(&["closed-form", "--d", "5", "--n", "20", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(lines, vec!["0.769231"; 5]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("optimum.json")).unwrap()).unwrap();
    assert_eq!(json["s"].as_array().unwrap().len(), 5);

    let out = icl_lab(&["closed-form", "--d", "1", "--n", "1", "--out", p(dir.path())]);
    assert_eq!(stdout(&out).trim(), "0.333333");

    let out = icl_lab(&[
        "closed-form",
        "--d",
        "2",
        "--n",
        "4",
        "--entries",
        "2,1",
        "--basis-seed",
        "3",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().count(), 2);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempdir().unwrap();
    let zero = icl_lab(&[
        "closed-form",
        "--d",
        "2",
        "--n",
        "4",
        "--entries",
        "1,0",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&zero), 3);
    assert_eq!(
        code(&icl_lab(&[
            "closed-form",
            "--d",
            "2",
            "--n",
            "0",
            "--out",
            p(dir.path())
        ])),
        3
    );
    assert_eq!(code(&icl_lab(&["closed-form", "--d", "two", "--n", "4"])), 2);
    assert_eq!(code(&icl_lab(&["frobnicate"])), 2);
    assert_eq!(code(&icl_lab(&["verify", "--criterion", "11"])), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"experiment\": \"pnull\", ").unwrap();
    assert_eq!(code(&icl_lab(&["run", p(&bad)])), 2);
    std::fs::write(&bad, r#"{"experiment": "pnull", "colour": 3}"#).unwrap();
    assert_eq!(code(&icl_lab(&["run", p(&bad)])), 2);
    std::fs::write(&bad, r#"{"experiment": "pnull", "n": 0}"#).unwrap();
    assert_eq!(code(&icl_lab(&["run", p(&bad)])), 3);
    std::fs::write(&bad, r#"{"experiment": "lemma1-fuzz", "depth": 2}"#).unwrap();
    assert_eq!(code(&icl_lab(&["run", p(&bad)])), 3);
    assert_eq!(code(&icl_lab(&["run", p(&dir.path().join("missing.json"))])), 4);
    assert_eq!(code(&icl_lab(&["--threads", "0", "verify", "--criterion", "1"])), 3);
}

#[test]
fn lemma1_fuzz_and_verify_pass() {
    let dir = tempdir().unwrap();
    let out = icl_lab(&["run", "--experiment", "lemma1-fuzz", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("PASS"));
    assert!(dir.path().join("lemma1.json").exists());
    assert!(dir.path().join("summary.json").exists());

    let out = icl_lab(&["verify", "--criterion", "1", "--criterion", "2"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.contains(" PASS ")));
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn runs_are_byte_identical_across_reruns_and_thread_counts() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("two.json");
    std::fs::write(&cfg, r#"{"experiment": "two-layer", "seeds": [0, 1], "batch": 600}"#).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert!(icl_lab(&["--threads", "1", "run", p(&cfg), "--out", p(&a)])
        .status
        .success());
    assert!(icl_lab(&["--threads", "1", "run", p(&cfg), "--out", p(&b)])
        .status
        .success());
    let env_run = Command::new(env!("CARGO_BIN_EXE_icl-lab"))
        .args(["run", p(&cfg), "--out", p(&c)])
        .env("ICL_LAB_THREADS", "3")
        .output()
        .unwrap();
    assert!(env_run.status.success());

    let ta = read_tree(&a);
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "loss.csv",
        "weights.json",
        "summary.json",
        "seed_0/loss.csv",
        "seed_1/record.json",
        "seed_1/weights.json",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    assert!(names.contains(&"dist_raw.csv") && !names.contains(&"dist_b.csv"));
    assert_eq!(ta, read_tree(&b));
    assert_eq!(ta, read_tree(&c));

    let loss = String::from_utf8(std::fs::read(a.join("loss.csv")).unwrap()).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("iter,loss_mean,loss_std"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert!(first[1].contains('e'));

    // One seed from the command line overrides the config list.
    let d = dir.path().join("d");
    assert!(icl_lab(&["run", p(&cfg), "--seed", "1", "--out", p(&d)])
        .status
        .success());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([1]));
    assert_eq!(
        std::fs::read(d.join("seed_1/weights.json")).unwrap(),
        std::fs::read(a.join("seed_1/weights.json")).unwrap()
    );
}

fn weights_file(dir: &Path, spec: CovarianceFile, params: TransformerParams<f64>) -> std::path::PathBuf {
    let path = dir.join("weights.json");
    let file = WeightsFile {
        runs: vec![WeightsEntry { seed: 0, spec, params }],
    };
    std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    path
}

#[test]
fn heatmap_of_identity_and_whitened_s_point() {
    let dir = tempdir().unwrap();
    let iso = CovarianceFile {
        d: 3,
        d_entries: vec![1.0; 3],
        u_seed: None,
        u: None,
    };
    let w = weights_file(
        dir.path(),
        iso,
        TransformerParams::sparse(vec![Matrix::identity(3), Matrix::identity(3)]).unwrap(),
    );
    let out = icl_lab(&["heatmap", p(&w), "--layer", "1"]);
    assert_eq!(code(&out), 0);
    let rows = csv_rows(&stdout(&out));
    for (i, r) in rows.iter().enumerate() {
        for (j, &x) in r.iter().enumerate() {
            assert_eq!(x, if i == j { 1.0 } else { 0.0 });
        }
    }
    assert_eq!(code(&icl_lab(&["heatmap", p(&w), "--layer", "2"])), 3);
    assert_eq!(code(&icl_lab(&["heatmap", p(&w), "--matrix", "B"])), 3);
    assert_eq!(code(&icl_lab(&["heatmap", p(&w), "--run", "1"])), 3);

    // A = a·Σ^{-1} whitens to a·I.
    let aniso = CovarianceFile {
        d: 3,
        d_entries: vec![1.0, 0.6, 1.5],
        u_seed: Some(4),
        u: None,
    };
    let spec = aniso.build::<f64>().unwrap();
    let a = spec.sigma_inv().scale(-0.7);
    let w = weights_file(dir.path(), aniso, TransformerParams::sparse(vec![a]).unwrap());
    let file = dir.path().join("white.csv");
    let out = icl_lab(&["heatmap", p(&w), "--whitened", "--out", p(&file)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).is_empty());
    let rows = csv_rows(&std::fs::read_to_string(&file).unwrap());
    for (i, r) in rows.iter().enumerate() {
        for (j, &x) in r.iter().enumerate() {
            let want = if i == j { -0.7 } else { 0.0 };
            assert!((x - want).abs() < 1e-12, "({i},{j}) = {x}");
        }
    }
    let raw = csv_rows(&stdout(&icl_lab(&["heatmap", p(&w)])));
    assert!(raw[0][1].abs() > 1e-3);
}

#[test]
fn config_round_trips() {
    let mut cfg = ExperimentConfig::new(Experiment::Pq);
    cfg.n = Some(12);
    cfg.seeds = Some(vec![4, 5]);
    cfg.spec = Some(CovarianceFile {
        d: 2,
        d_entries: vec![1.0, 2.0],
        u_seed: Some(1),
        u: None,
    });
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    let plan = cfg.resolve().unwrap();
    assert_eq!(plan.n, 12);
    assert_eq!(plan.seeds, vec![4, 5]);
    assert_eq!(plan.depth, 3);

    let bare: ExperimentConfig = serde_json::from_str(r#"{"experiment": "single-layer"}"#).unwrap();
    assert_eq!(bare, ExperimentConfig::new(Experiment::SingleLayer));
    for e in Experiment::ALL {
        assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        assert!(ExperimentConfig::new(e).resolve().is_ok());
    }
}
