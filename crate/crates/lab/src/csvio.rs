//! Dataset and feature-dump CSV files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use lecnet_core::dataset::{LabeledSet, Samples};
use lecnet_core::model::ModelState;
use lecnet_core::Tensor;

use crate::error::{LabError, LabResult};

/// Reads a `label,x0,...,x{d-1}` file. Labels may be arbitrary strings and
/// are re-indexed densely in order of first appearance.
pub fn load_csv(path: &Path) -> LabResult<LabeledSet> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let csv_err = |source| LabError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let width = reader.headers().map_err(csv_err)?.len();
    if width < 2 {
        return Err(LabError::RaggedRow {
            path: path.to_path_buf(),
            line: 1,
            expected: 2,
            actual: width,
        });
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(LabError::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected: width,
                actual: record.len(),
            });
        }
        let next = index.len();
        labels.push(*index.entry(record[0].to_string()).or_insert(next));
        for (column, cell) in record.iter().enumerate().skip(1) {
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(v),
                _ => {
                    return Err(LabError::NonNumeric {
                        path: path.to_path_buf(),
                        line,
                        column,
                        cell: cell.to_string(),
                    })
                }
            }
        }
    }
    if index.len() < 2 {
        return Err(LabError::TooFewClasses {
            path: path.to_path_buf(),
            found: index.len(),
        });
    }
    let features = Tensor::new(vec![labels.len(), width - 1], data)?;
    Ok(LabeledSet::new(features, labels, index.len())?)
}

fn create(path: &Path) -> LabResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| LabError::io(path, e))
}

fn write_rows(path: &Path, prefix: &str, width: usize, rows: impl Iterator<Item = (usize, Vec<f64>)>) -> LabResult<()> {
    let mut out = create(path)?;
    let io = |e| LabError::io(path, e);
    let mut header = String::from("label");
    for j in 0..width {
        header.push_str(&format!(",{prefix}{j}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for (label, values) in rows {
        let mut line = label.to_string();
        for v in values {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Writes a dataset with header `label,x0,...`. Values use the shortest
/// decimal representation that round-trips exactly.
pub fn write_csv(set: &LabeledSet, path: &Path) -> LabResult<()> {
    let x = set.features();
    let rows = (0..set.len()).map(|r| (set.labels()[r], x.row(r).to_vec()));
    write_rows(path, "x", set.dim(), rows)
}

/// Writes the fused features of `model` for every sample, header
/// `label,f0,...`. An empty sample set gives a header-only file.
pub fn dump_features(model: &ModelState, samples: &Samples, path: &Path) -> LabResult<()> {
    let c = model.arch.feature_dim;
    match samples.matrix() {
        None => write_rows(path, "f", c, std::iter::empty()),
        Some(x) => {
            let f = model.features(x)?;
            let rows = (0..samples.len()).map(|r| (samples.labels[r], f.row(r).to_vec()));
            write_rows(path, "f", c, rows)
        }
    }
}
