//! CSV tables for ladders, stop regions and distance matrices.
//!
//! Floats are written in shortest round-trip form, so identical inputs give
//! byte-identical files.

use crate::error::{Error, Result};
use crate::solver::LadderReport;
use crate::stopping::StopRegionRow;

/// Shortest round-trip decimal.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn finish(writer: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = writer.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

/// Columns `n, V_n, gap_to_V, pp_distance, sup_distance, neg_part, iterations, converged`.
pub fn ladder_csv(report: &LadderReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "V_n", "gap_to_V", "pp_distance", "sup_distance", "neg_part", "iterations", "converged"])?;
    for r in &report.rungs {
        w.write_record([
            fmt_f64(r.cap),
            fmt_f64(r.value),
            fmt_f64(r.gap),
            fmt_f64(r.pp_distance),
            fmt_f64(r.sup_distance),
            fmt_f64(r.negative_part),
            r.iterations.to_string(),
            r.converged.to_string(),
        ])?;
    }
    finish(w)
}

/// Columns `n, pp_distance, sup_distance`.
pub fn mz_curve_csv(report: &LadderReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "pp_distance", "sup_distance"])?;
    for r in &report.rungs {
        w.write_record([fmt_f64(r.cap), fmt_f64(r.pp_distance), fmt_f64(r.sup_distance)])?;
    }
    finish(w)
}

/// Columns `node, time, l_0 … l_{d-1}, Z, U, in_region`.
pub fn stop_region_csv(rows: &[StopRegionRow]) -> Result<String> {
    let d = rows.first().map(|r| r.l.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["node".to_string(), "time".to_string()];
    header.extend((0..d).map(|j| format!("l_{j}")));
    header.extend(["Z", "U", "in_region"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.node.to_string(), fmt_f64(r.time)];
        rec.extend(r.l.iter().map(|v| fmt_f64(*v)));
        rec.extend([fmt_f64(r.z), fmt_f64(r.u), r.in_region.to_string()]);
        w.write_record(&rec)?;
    }
    finish(w)
}

/// Square matrix with a `label` column and one column per label.
pub fn distance_matrix_csv(labels: &[String], matrix: &[Vec<f64>]) -> Result<String> {
    if matrix.len() != labels.len() || matrix.iter().any(|row| row.len() != labels.len()) {
        return Err(Error::DimensionMismatch { expected: labels.len(), found: matrix.len() });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in labels.iter().zip(matrix) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    finish(w)
}
