use std::path::Path;

use serde::Serialize;

use super::cluster::{cluster_order, Dendrogram};
use super::AnalysisError;
use crate::prompt::Matrix;
use crate::scalar::Scalar;

/// A labelled matrix ready for plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap<T> {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> Heatmap<T> {
    pub fn from_matrix(ids: Vec<String>, m: &Matrix<T>) -> Self {
        Self {
            row_ids: ids.clone(),
            col_ids: ids,
            values: m.iter_rows().map(<[T]>::to_vec).collect(),
        }
    }

    pub fn get(&self, row: &str, col: &str) -> Option<T> {
        let r = self.row_ids.iter().position(|x| x == row)?;
        let c = self.col_ids.iter().position(|x| x == col)?;
        Some(self.values[r][c])
    }

    fn check(&self) -> Result<(), AnalysisError> {
        if self.values.len() != self.row_ids.len()
            || self.values.iter().any(|r| r.len() != self.col_ids.len())
        {
            return Err(AnalysisError::Table(format!(
                "heatmap values do not match {} row and {} column ids",
                self.row_ids.len(),
                self.col_ids.len()
            )));
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, AnalysisError> {
        self.check()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| AnalysisError::Csv(e.to_string());
        let header = std::iter::once(String::new()).chain(self.col_ids.iter().cloned());
        w.write_record(header).map_err(csv_err)?;
        for (id, row) in self.row_ids.iter().zip(&self.values) {
            let rec = std::iter::once(id.clone()).chain(row.iter().map(|v| format_sig(v.widen(), 6)));
            w.write_record(rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| AnalysisError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Formats `v` with `digits` significant digits, without trailing zeros.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{:.*e}", digits.saturating_sub(1), v);
    let rounded: f64 = sci.parse().expect("formatted float parses");
    let exp = rounded.abs().log10().floor() as i32;
    if !(-4..15).contains(&exp) {
        return sci;
    }
    // shortest round-trip form of the rounded value has no trailing zeros
    format!("{rounded}")
}

fn write_text(path: &Path, text: &str) -> Result<(), AnalysisError> {
    std::fs::write(path, text).map_err(|e| AnalysisError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes a heatmap CSV: a header row of column ids (first cell empty),
/// then one row per row id, values at 6 significant digits.
pub fn export_heatmap<T: Scalar>(map: &Heatmap<T>, path: &Path) -> Result<(), AnalysisError> {
    write_text(path, &map.to_csv_string()?)
}

/// Reorders a square similarity matrix by [`cluster_order`] and writes it.
pub fn export_clustered_heatmap<T: Scalar>(
    ids: &[String],
    sim: &Matrix<T>,
    path: &Path,
) -> Result<Dendrogram<T>, AnalysisError> {
    if ids.len() != sim.rows() {
        return Err(AnalysisError::Table(format!(
            "{} ids for a {}x{} matrix",
            ids.len(),
            sim.rows(),
            sim.cols()
        )));
    }
    let tree = cluster_order(sim)?;
    let order = &tree.leaf_order;
    let permuted = Heatmap {
        row_ids: order.iter().map(|&i| ids[i].clone()).collect(),
        col_ids: order.iter().map(|&i| ids[i].clone()).collect(),
        values: order
            .iter()
            .map(|&i| order.iter().map(|&j| sim.get(i, j)).collect())
            .collect(),
    };
    export_heatmap(&permuted, path)?;
    Ok(tree)
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap<f64>, AnalysisError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnalysisError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_heatmap(&text)
}

pub(crate) fn parse_heatmap(text: &str) -> Result<Heatmap<f64>, AnalysisError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| AnalysisError::Csv("empty heatmap".into()))?
        .map_err(|e| AnalysisError::Csv(e.to_string()))?;
    let col_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_ids = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| AnalysisError::Csv(e.to_string()))?;
        row_ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, v)| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or(AnalysisError::NonFinite { row: i, col: j })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        values.push(row);
    }
    let map = Heatmap {
        row_ids,
        col_ids,
        values,
    };
    map.check()?;
    Ok(map)
}
