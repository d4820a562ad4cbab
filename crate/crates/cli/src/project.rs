//! The `project` subcommand: feature CSV in, 2-D PCA coordinates out.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use owd_core::eval::pca_project;

/// Malformed input rows; reported as a usage error rather than I/O.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(String);

/// Feature rows with the optional label column carried alongside.
#[derive(Debug, PartialEq)]
pub struct FeatureTable {
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<String>>,
}

pub fn read_features<R: std::io::Read>(reader: R) -> Result<FeatureTable> {
    let mut csv = csv::Reader::from_reader(reader);
    let header = csv.headers()?.clone();
    let label_col = header.iter().position(|h| h.trim() == "label");
    let mut features = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    for (line, record) in csv.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(record.len());
        for (col, field) in record.iter().enumerate() {
            if Some(col) == label_col {
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                InputError(format!(
                    "row {}, column '{}': '{field}' is not a number",
                    line + 1,
                    header.get(col).unwrap_or("?")
                ))
            })?;
            row.push(v);
        }
        if let (Some(col), Some(labels)) = (label_col, labels.as_mut()) {
            labels.push(record.get(col).unwrap_or_default().to_string());
        }
        features.push(row);
    }
    Ok(FeatureTable { features, labels })
}

pub fn write_projection<W: Write>(
    writer: W,
    coords: &[[f64; 2]],
    labels: Option<&[String]>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    match labels {
        Some(labels) => {
            out.write_record(["x", "y", "label"])?;
            for (xy, l) in coords.iter().zip(labels) {
                out.write_record([xy[0].to_string(), xy[1].to_string(), l.clone()])?;
            }
        }
        None => {
            out.write_record(["x", "y"])?;
            for xy in coords {
                out.write_record([xy[0].to_string(), xy[1].to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_project(input: &Path, output: Option<&Path>) -> Result<()> {
    let file =
        std::fs::File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let table = read_features(file).with_context(|| format!("reading {}", input.display()))?;
    let coords = pca_project(&table.features)?;
    let labels = table.labels.as_deref();
    match output {
        Some(path) => {
            let file = std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            write_projection(file, &coords, labels)
        }
        None => write_projection(std::io::stdout().lock(), &coords, labels),
    }
}
