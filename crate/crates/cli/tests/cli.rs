//! End-to-end checks of the `owd` binary on a small world.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[world]
num_tasks = 2
classes_per_task = 3
d_in = 16
scenes_per_task = 24
test_scenes = 12
exemplars_per_class = 2

[frame]
k = 16
d = 32

[train]
steps_per_task = 40
replay_steps = 20
log_every = 10
"#;

fn owd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_into(config: &str, out: &Path, seed: Option<&str>) {
    let mut args = vec!["run", "--config", config, "--out", out.to_str().unwrap()];
    if let Some(s) = seed {
        args.extend(["--seed", s]);
    }
    let o = owd(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn run_writes_every_artifact_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    run_into(&config, &a, None);
    run_into(&config, &b, None);
    run_into(&config, &c, Some("4"));

    let files = sorted_files(&a);
    for expected in [
        "manifest.json",
        "config.toml",
        "frame.json",
        "train_log.csv",
        "summary.csv",
        "report_task1.json",
        "report_task2.json",
        "detections_task2.jsonl",
        "heatmap_task2.csv",
        "class_scores_task2.csv",
        "pca.csv",
    ] {
        assert!(files.contains(&expected.to_string()), "missing {expected}");
    }
    assert_eq!(files, sorted_files(&b));
    for name in &files {
        assert!(
            fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    assert_ne!(
        fs::read(a.join("report_task2.json")).unwrap(),
        fs::read(c.join("report_task2.json")).unwrap()
    );

    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("task,previous_map,current_map,known_map,u_recall,h_score")
    );
    assert_eq!(lines.count(), 2);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    let dets = fs::read_to_string(a.join("detections_task1.jsonl")).unwrap();
    for line in dets.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["image_id", "box", "class_id", "score"] {
            assert!(v.get(key).is_some(), "record lacks {key}: {line}");
        }
    }
}

#[test]
fn ablation_grid_writes_four_cells_and_matches_plain_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let grid = tmp.path().join("grid");
    let o = owd(&[
        "ablate",
        "--config",
        &config,
        "--out",
        grid.to_str().unwrap(),
        "--parallel",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(grid.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 * 2);

    let plain_cfg = format!("{SMALL}\n[ablation]\neus_enabled = false\nekd_enabled = false\n");
    let plain_dir = tmp.path().join("plain");
    fs::create_dir(&plain_dir).unwrap();
    let plain_config = write_config(&plain_dir, &plain_cfg);
    let plain = tmp.path().join("plain_out");
    run_into(&plain_config, &plain, None);
    for name in ["report_task1.json", "report_task2.json", "summary.csv"] {
        assert_eq!(
            fs::read(grid.join("eus_off_ekd_off").join(name)).unwrap(),
            fs::read(plain.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn margin_sweep_runs_one_cell_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("sweep");
    let o = owd(&[
        "ablate",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--sweep",
        "m=0.25,1.0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("m_0.25").join("summary.csv").exists());
    assert!(out.join("m_1").join("summary.csv").exists());
}

#[test]
fn etf_check_reports_exact_gram() {
    let o = owd(&["etf", "check", "--k", "128", "--d", "128", "--seed", "1"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["max_diag_err"].as_f64().unwrap() < 1e-9);
    assert!(v["max_offdiag_err"].as_f64().unwrap() < 1e-9);
}

#[test]
fn project_writes_coordinates_with_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("feats.csv");
    let output = tmp.path().join("proj.csv");
    fs::write(
        &input,
        "f0,f1,f2,label\n1,0,0,a\n0,1,0,b\n0,0,1,c\n1,1,1,a\n",
    )
    .unwrap();
    let o = owd(&[
        "project",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(output).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,label"));
    let labels: Vec<&str> = lines.map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(labels, ["a", "b", "c", "a"]);
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let unknown = owd(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));

    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "[frame]\nk = 7\n");
    let o = owd(&[
        "run",
        "--config",
        &bad,
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let missing = tmp.path().join("absent.toml");
    let o = owd(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let diverge = write_config(tmp.path(), &format!("{SMALL}\n[losses]\nw_cls = 1e300\n"));
    let o = owd(&[
        "run",
        "--config",
        &diverge,
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let o = owd(&["etf", "check", "--k", "5", "--d", "4"]);
    assert_eq!(o.status.code(), Some(1));
}
