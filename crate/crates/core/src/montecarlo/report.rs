//! Tabular export of cell summaries.
//!
//! CSV columns: `rho_u, c, rho_m, truth_1..truth_M, bias_lm, bias_dm,
//! rmse_lm, rmse_dm, se_lm, se_dm, cover_lm, cover_dm`, then
//! `scaled_alpha, alpha_bar, mcse_lm, mcse_dm, completed, failed`.
//! Floats are written in shortest round-trip form. The reader accepts
//! files carrying only the leading block; the concentration is then
//! recovered from `rho_m`.

use std::collections::HashMap;
use std::io::{Read, Write};

use super::{CellSummary, EstimatorSummary};
use crate::error::{Error, Result};
use crate::randomize::alpha_for_icc;

const STATS: [&str; 4] = ["bias", "rmse", "se", "cover"];
const TAIL: [&str; 6] = [
    "scaled_alpha",
    "alpha_bar",
    "mcse_lm",
    "mcse_dm",
    "completed",
    "failed",
];

fn header(treatments: usize) -> Vec<String> {
    let mut h = vec!["rho_u".to_string(), "c".into(), "rho_m".into()];
    h.extend((1..=treatments).map(|m| format!("truth_{m}")));
    for s in STATS {
        h.push(format!("{s}_lm"));
        h.push(format!("{s}_dm"));
    }
    h.extend(TAIL.iter().map(|s| s.to_string()));
    h
}

fn stat(s: &EstimatorSummary, name: &str) -> f64 {
    match name {
        "bias" => s.bias,
        "rmse" => s.rmse,
        "se" => s.mean_se,
        _ => s.coverage,
    }
}

/// Row-at-a-time CSV output; each row is flushed as it is written.
pub struct CellCsvWriter<W: Write> {
    out: csv::Writer<W>,
    treatments: usize,
}

impl<W: Write> CellCsvWriter<W> {
    pub fn new(w: W, treatments: usize) -> Result<Self> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(header(treatments))?;
        out.flush()?;
        Ok(CellCsvWriter { out, treatments })
    }

    pub fn write(&mut self, cell: &CellSummary) -> Result<()> {
        if cell.truths.len() != self.treatments {
            return Err(Error::DimensionMismatch(
                "cells disagree on the number of arms".into(),
            ));
        }
        let mut rec = vec![
            cell.rho_u.to_string(),
            cell.c.to_string(),
            cell.rho_m.to_string(),
        ];
        rec.extend(cell.truths.iter().map(f64::to_string));
        for s in STATS {
            rec.push(stat(&cell.lm, s).to_string());
            rec.push(stat(&cell.dm, s).to_string());
        }
        rec.push(cell.scaled_alpha.to_string());
        rec.push(cell.alpha_bar.to_string());
        rec.push(cell.lm.bias_mc_se.to_string());
        rec.push(cell.dm.bias_mc_se.to_string());
        rec.push(cell.iterations_completed.to_string());
        rec.push(cell.iterations_failed.to_string());
        self.out.write_record(&rec)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_cells_csv<W: Write>(cells: &[CellSummary], w: W) -> Result<()> {
    let treatments = cells.first().map_or(2, |c| c.truths.len());
    let mut out = CellCsvWriter::new(w, treatments)?;
    for cell in cells {
        out.write(cell)?;
    }
    Ok(())
}

pub fn read_cells_csv<R: Read>(r: R) -> Result<Vec<CellSummary>> {
    let mut rdr = csv::Reader::from_reader(r);
    let head: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let mut treatments = 0;
    while head.contains_key(&format!("truth_{}", treatments + 1)) {
        treatments += 1;
    }
    if treatments == 0 {
        return Err(Error::Parse("no truth_1 column".into()));
    }
    let mut required = vec!["rho_u".to_string(), "c".into(), "rho_m".into()];
    for s in STATS {
        required.push(format!("{s}_lm"));
        required.push(format!("{s}_dm"));
    }
    if let Some(missing) = required.iter().find(|h| !head.contains_key(*h)) {
        return Err(Error::Parse(format!("missing column {missing}")));
    }
    let mut cells = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get =
            |name: &str| -> Result<Option<f64>> {
                match head.get(name).and_then(|&i| rec.get(i)) {
                    None => Ok(None),
                    Some(v) => v.trim().parse::<f64>().map(Some).map_err(|_| {
                        Error::Parse(format!("row {}: bad {name} value {v:?}", line + 1))
                    }),
                }
            };
        let need = |name: &str| -> Result<f64> {
            get(name)?.ok_or_else(|| Error::Parse(format!("row {}: missing {name}", line + 1)))
        };
        let summary = |tag: &str| -> Result<EstimatorSummary> {
            Ok(EstimatorSummary {
                bias: need(&format!("bias_{tag}"))?,
                rmse: need(&format!("rmse_{tag}"))?,
                mean_se: need(&format!("se_{tag}"))?,
                coverage: need(&format!("cover_{tag}"))?,
                bias_mc_se: get(&format!("mcse_{tag}"))?.unwrap_or(f64::NAN),
                arm_bias: Vec::new(),
                arm_coverage: Vec::new(),
                degraded: f64::NAN,
            })
        };
        let rho_m = need("rho_m")?;
        let alpha_bar = match get("alpha_bar")? {
            Some(a) => a,
            None => alpha_for_icc(rho_m, treatments)?,
        };
        let scaled_alpha = get("scaled_alpha")?.unwrap_or(alpha_bar * (treatments + 1) as f64);
        let count = |name: &str| -> Result<usize> { Ok(get(name)?.map_or(0, |v| v as usize)) };
        cells.push(CellSummary {
            rho_u: need("rho_u")?,
            c: need("c")?,
            scaled_alpha,
            alpha_bar,
            rho_m,
            truths: (1..=treatments)
                .map(|m| need(&format!("truth_{m}")))
                .collect::<Result<_>>()?,
            lm: summary("lm")?,
            dm: summary("dm")?,
            iterations_completed: count("completed")?,
            iterations_failed: count("failed")?,
        });
    }
    Ok(cells)
}

pub fn write_cells_json<W: Write>(cells: &[CellSummary], mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, cells)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_cells_json<R: Read>(r: R) -> Result<Vec<CellSummary>> {
    Ok(serde_json::from_reader(r)?)
}
