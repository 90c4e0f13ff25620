//! Prediction CSVs in, metrics JSON and plot-ready CSVs out.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::roc::ScoredSample;
use crate::{Error, Result};

/// Contents of a prediction CSV, keyed by study id.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictionTable {
    /// Header `study_id,score,label`.
    Scores(Vec<(String, ScoredSample)>),
    /// Header `study_id,pred,truth`.
    Pairs(Vec<(String, f64, f64)>),
}

fn open(path: &Path) -> Result<csv::Reader<fs::File>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?)
}

fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::format(path, format!("line {line}: `{field}` = `{s}` is not a finite number")))
}

pub fn read_predictions(path: &Path) -> Result<PredictionTable> {
    let mut rdr = open(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let kind = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["study_id", "score", "label"] => 0,
        ["study_id", "pred", "truth"] => 1,
        _ => {
            return Err(Error::format(
                path,
                format!("header {header:?}; expected study_id,score,label or study_id,pred,truth"),
            ))
        }
    };
    let mut scores = Vec::new();
    let mut pairs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let id = rec.get(0).unwrap_or_default().to_string();
        let a = parse_f64(path, line, &header[1], rec.get(1).unwrap_or_default())?;
        let b = rec.get(2).unwrap_or_default();
        if kind == 0 {
            let label = match b {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(Error::format(path, format!("line {line}: label `{b}` is not 0/1"))),
            };
            scores.push((id, ScoredSample::new(a, label)));
        } else {
            pairs.push((id, a, parse_f64(path, line, "truth", b)?));
        }
    }
    Ok(if kind == 0 {
        PredictionTable::Scores(scores)
    } else {
        PredictionTable::Pairs(pairs)
    })
}

pub fn write_scores(path: &Path, rows: &[(String, ScoredSample)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["study_id", "score", "label"])?;
    for (id, s) in rows {
        w.write_record([id.clone(), s.score.to_string(), u8::from(s.label).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pairs(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["study_id", "pred", "truth"])?;
    for (id, p, t) in rows {
        w.write_record([id.clone(), p.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn write_curve(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fpr", "tpr"])?;
    for (f, t) in curve {
        w.write_record([f.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_coords(path: &Path, ids: &[String], coords: &[[f64; 2]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "x", "y"])?;
    for (id, c) in ids.iter().zip(coords) {
        w.write_record([id.clone(), c[0].to_string(), c[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}
