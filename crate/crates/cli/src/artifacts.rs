//! Writes a run's reports, logs and tables into an output directory.
//!
//! CSV headers are part of the public interface and listed in the README.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use owd_core::eval::{matched_features, pca_project, EvalReport};
use owd_core::experiment::RunResult;
use serde::Serialize;

pub const TRAIN_LOG_HEADER: [&str; 11] = [
    "task", "phase", "step", "pseudo", "cls", "l1", "giou", "energy", "subspace", "ekd", "total",
];
pub const SUMMARY_HEADER: [&str; 6] = [
    "task",
    "previous_map",
    "current_map",
    "known_map",
    "u_recall",
    "h_score",
];
pub const ABLATION_HEADER: [&str; 12] = [
    "cell",
    "eus_enabled",
    "ekd_enabled",
    "margin",
    "k",
    "seed",
    "task",
    "previous_map",
    "current_map",
    "known_map",
    "u_recall",
    "h_score",
];

/// IoU used to pick the test proposals whose features are projected.
const PCA_IOU: f64 = 0.5;

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    seed: u64,
    frame_seed: u64,
    tasks: usize,
    files: &'a [String],
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)
        .with_context(|| format!("writing {}", path.display()))?;
    writeln!(out)?;
    out.flush()
        .with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// Optional metrics print as an empty field.
fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_row(r: &EvalReport) -> [String; 6] {
    [
        r.task.to_string(),
        opt(r.previous_map),
        r.current_map.to_string(),
        r.known_map.to_string(),
        r.u_recall.to_string(),
        r.h_score.to_string(),
    ]
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes every artifact of `run` into `dir` and returns the file names.
pub fn write_run(dir: &Path, run: &RunResult) -> Result<Vec<String>> {
    ensure_dir(dir)?;
    let mut files: Vec<String> = Vec::new();
    let mut path = |name: String| -> PathBuf {
        let p = dir.join(&name);
        files.push(name);
        p
    };

    let p = path("config.toml".into());
    fs::write(&p, run.config.to_toml()).with_context(|| format!("writing {}", p.display()))?;
    write_json(&path("frame.json".into()), &run.frame.to_record())?;

    let mut log = csv_writer(&path("train_log.csv".into()))?;
    log.write_record(TRAIN_LOG_HEADER)?;
    for row in run.tasks.iter().flat_map(|t| &t.log) {
        let l = &row.loss;
        let phase = match row.phase {
            owd_core::sim::Phase::Fresh => "fresh",
            owd_core::sim::Phase::Replay => "replay",
        };
        log.write_record([
            row.task.to_string(),
            phase.to_string(),
            row.step.to_string(),
            row.pseudo.to_string(),
            l.cls.to_string(),
            l.l1.to_string(),
            l.giou.to_string(),
            l.energy.to_string(),
            l.subspace.to_string(),
            l.ekd.to_string(),
            l.total.to_string(),
        ])?;
    }
    log.flush()?;

    let mut summary = csv_writer(&path("summary.csv".into()))?;
    summary.write_record(SUMMARY_HEADER)?;
    for t in &run.tasks {
        summary.write_record(summary_row(&t.report))?;
    }
    summary.flush()?;

    for t in &run.tasks {
        let task = t.report.task;
        write_json(&path(format!("report_task{task}.json")), &t.report)?;

        let mut dets = create(&path(format!("detections_task{task}.jsonl")))?;
        for d in &t.detections {
            serde_json::to_writer(&mut dets, d)?;
            writeln!(dets)?;
        }
        dets.flush()?;

        let mut heat = csv_writer(&path(format!("heatmap_task{task}.csv")))?;
        heat.write_record(["row_task", "col_task", "mean_affinity"])?;
        for (i, row) in t.report.heatmap.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                heat.write_record([(i + 1).to_string(), (j + 1).to_string(), v.to_string()])?;
            }
        }
        heat.flush()?;

        let mut scores = csv_writer(&path(format!("class_scores_task{task}.csv")))?;
        for s in &t.report.per_class_scores {
            scores.serialize(s)?;
        }
        scores.flush()?;
    }

    let (feats, labels) = matched_features(&run.params, &run.test_scenes, PCA_IOU)?;
    let mut pca = csv_writer(&path("pca.csv".into()))?;
    pca.write_record(["x", "y", "label"])?;
    if feats.len() >= 2 {
        for (xy, label) in pca_project(&feats)?.iter().zip(&labels) {
            pca.write_record([xy[0].to_string(), xy[1].to_string(), label.to_string()])?;
        }
    }
    pca.flush()?;

    files.push("manifest.json".into());
    let manifest = Manifest {
        config_sha256: run.config.digest(),
        seed: run.config.seed,
        frame_seed: run.config.frame_seed(),
        tasks: run.tasks.len(),
        files: &files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(files)
}

/// Appends one row per task of a grid or sweep cell.
pub fn write_ablation_rows(out: &mut csv::Writer<File>, cell: &str, run: &RunResult) -> Result<()> {
    let c = &run.config;
    for t in &run.tasks {
        let [task, prev, cur, known, urec, h] = summary_row(&t.report);
        out.write_record([
            cell.to_string(),
            c.ablation.eus_enabled.to_string(),
            c.ablation.ekd_enabled.to_string(),
            c.losses.margin.to_string(),
            c.frame.k.to_string(),
            c.seed.to_string(),
            task,
            prev,
            cur,
            known,
            urec,
            h,
        ])?;
    }
    Ok(())
}

pub fn ablation_writer(path: &Path) -> Result<csv::Writer<File>> {
    let mut w = csv_writer(path)?;
    w.write_record(ABLATION_HEADER)?;
    Ok(w)
}

#[derive(Serialize)]
pub struct CellEntry {
    pub name: String,
    pub config_sha256: String,
    pub seed: u64,
    pub frame_seed: u64,
}

pub fn write_grid_manifest(dir: &Path, cells: &[CellEntry]) -> Result<()> {
    write_json(&dir.join("manifest.json"), &cells)
}
