//! Long-format CSV ingestion and export.
//!
//! One row per subject and wave: `id, wave, y, r` followed by named
//! covariate columns. `y` is empty at the dropout wave, and rows after the
//! dropout wave may be omitted or left with an empty `r`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_panel, PanelData, SubjectRecord};
use crate::simulate::SimTruth;

/// Which columns to read and how to transform the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub id_column: String,
    pub wave_column: String,
    pub y_column: String,
    pub r_column: String,
    /// Longitudinal covariates.
    pub x: Vec<String>,
    /// Dropout covariates.
    pub w: Vec<String>,
    /// When set, `y <- ln(1 + ceiling - raw)`.
    pub ceiling: Option<f64>,
    /// Planned waves; defaults to the largest wave in the file.
    pub n_waves: Option<usize>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            id_column: "id".into(),
            wave_column: "wave".into(),
            y_column: "y".into(),
            r_column: "r".into(),
            x: Vec::new(),
            w: Vec::new(),
            ceiling: None,
            n_waves: None,
        }
    }
}

/// A subject removed at ingestion and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: PanelData,
    pub dropped: Vec<Dropped>,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn parse_num(s: &str, line: u64, column: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Input(format!("line {line}: column '{column}' has non-numeric value '{s}'")))
}

struct Row {
    line: u64,
    wave: usize,
    y: Option<f64>,
    r: u8,
    x: Option<Vec<f64>>,
    w: Option<Vec<f64>>,
}

/// Reads a panel from CSV text.
pub fn read_panel<R: Read>(reader: R, cfg: &IngestConfig) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("column '{name}' not found in input header")))
    };
    let (i_id, i_wave, i_y, i_r) = (col(&cfg.id_column)?, col(&cfg.wave_column)?, col(&cfg.y_column)?, col(&cfg.r_column)?);
    let i_x = cfg.x.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let i_w = cfg.w.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id = field(i_id).to_string();
        if id.is_empty() {
            return Err(Error::Input(format!("line {line}: empty subject id")));
        }
        if is_missing(field(i_r)) {
            continue;
        }
        let r = match field(i_r) {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(Error::Input(format!("line {line}: indicator must be 0 or 1, found '{other}'"))),
        };
        let wave = field(i_wave)
            .parse::<usize>()
            .ok()
            .filter(|w| *w >= 1)
            .ok_or_else(|| Error::Input(format!("line {line}: wave must be a positive integer, found '{}'", field(i_wave))))?;
        let y = if is_missing(field(i_y)) {
            None
        } else {
            let raw = parse_num(field(i_y), line, &cfg.y_column)?;
            Some(match cfg.ceiling {
                Some(c) => {
                    let arg = 1.0 + c - raw;
                    if !(arg > 0.0) {
                        return Err(Error::Input(format!("line {line}: response {raw} exceeds the ceiling {c} + 1")));
                    }
                    arg.ln()
                }
                None => raw,
            })
        };
        let covs = |idx: &[usize], names: &[String]| -> Result<Option<Vec<f64>>> {
            let mut out = Vec::with_capacity(idx.len());
            for (&i, name) in idx.iter().zip(names) {
                if is_missing(field(i)) {
                    return Ok(None);
                }
                out.push(parse_num(field(i), line, name)?);
            }
            Ok(Some(out))
        };
        let x = covs(&i_x, &cfg.x)?;
        let w = covs(&i_w, &cfg.w)?;
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push(Row { line, wave, y, r, x, w });
    }

    let n_waves = match cfg.n_waves {
        Some(t) => t,
        None => rows.values().flatten().map(|r| r.wave).max().unwrap_or(0),
    };
    let mut subjects = Vec::with_capacity(order.len());
    let mut dropped = Vec::new();
    for id in order {
        let mut rs = rows.remove(&id).unwrap_or_default();
        rs.sort_by_key(|r| r.wave);
        for (k, r) in rs.iter().enumerate() {
            if r.wave != k + 1 {
                return Err(Error::Input(format!(
                    "line {}: subject '{id}' has wave {} where wave {} was expected",
                    r.line,
                    r.wave,
                    k + 1
                )));
            }
            if r.r == 0 && r.y.is_none() {
                return Err(Error::Input(format!(
                    "line {}: subject '{id}' is marked observed at wave {} but has no response",
                    r.line, r.wave
                )));
            }
            if r.r == 1 && r.y.is_some() {
                return Err(Error::Input(format!(
                    "line {}: subject '{id}' has a response at its dropout wave {}",
                    r.line, r.wave
                )));
            }
        }
        let observed: Vec<&Row> = rs.iter().filter(|r| r.r == 0).collect();
        if observed.iter().any(|r| r.x.is_none()) || rs.iter().any(|r| r.w.is_none()) {
            log::warn!("dropping subject '{id}': incomplete covariate information");
            dropped.push(Dropped { id, reason: "incomplete covariates".into() });
            continue;
        }
        subjects.push(SubjectRecord {
            y: observed.iter().map(|r| r.y.unwrap()).collect(),
            x: observed.iter().map(|r| r.x.clone().unwrap()).collect(),
            r: rs.iter().map(|r| r.r).collect(),
            w: rs.iter().map(|r| r.w.clone().unwrap()).collect(),
            id,
        });
    }
    let data = PanelData { n_waves, x_names: cfg.x.clone(), w_names: cfg.w.clone(), subjects };
    let report = validate_panel(&data);
    if !report.is_ok() {
        let shown: Vec<String> = report.violations.iter().take(5).map(|v| v.to_string()).collect();
        return Err(Error::Input(format!(
            "{} panel violation(s): {}",
            report.violations.len(),
            shown.join("; ")
        )));
    }
    Ok(Ingested { data, dropped })
}

pub fn read_panel_path(path: &Path, cfg: &IngestConfig) -> Result<Ingested> {
    let file = std::fs::File::open(path)?;
    read_panel(std::io::BufReader::new(file), cfg)
}

/// Covariate columns in write order: `x` names, then `w` names not in `x`.
pub fn covariate_columns(data: &PanelData) -> Vec<String> {
    let mut cols = data.x_names.clone();
    cols.extend(data.w_names.iter().filter(|w| !data.x_names.contains(w)).cloned());
    cols
}

/// Writes the panel in the format [`read_panel`] accepts.
pub fn write_panel<W: Write>(writer: W, data: &PanelData) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let cols = covariate_columns(data);
    let mut header = vec!["id".to_string(), "wave".into(), "y".into(), "r".into()];
    header.extend(cols.iter().cloned());
    wtr.write_record(&header)?;
    for s in &data.subjects {
        for t in 0..s.n_indicators() {
            let mut rec = vec![
                s.id.clone(),
                (t + 1).to_string(),
                s.y.get(t).map_or(String::new(), |v| v.to_string()),
                s.r[t].to_string(),
            ];
            for c in &cols {
                let from_w = data.w_names.iter().position(|n| n == c).map(|j| s.w[t][j]);
                let from_x = data.x_names.iter().position(|n| n == c).and_then(|j| s.x.get(t).map(|row| row[j]));
                rec.push(from_x.or(from_w).map_or(String::new(), |v| v.to_string()));
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_panel_path(path: &Path, data: &PanelData) -> Result<()> {
    write_panel(std::fs::File::create(path)?, data)
}

/// Ground-truth sidecar: `id, v, u, dropout_wave, z` with 1-based labels
/// and the state path joined by `;`.
pub fn write_truth<W: Write>(writer: W, truth: &SimTruth) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["id", "v", "u", "dropout_wave", "z"])?;
    for s in &truth.subjects {
        let z: Vec<String> = s.z.iter().map(|g| (g + 1).to_string()).collect();
        wtr.write_record([
            s.id.clone(),
            (s.v + 1).to_string(),
            (s.u + 1).to_string(),
            s.dropout_wave.map_or(String::new(), |w| w.to_string()),
            z.join(";"),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a sidecar written by [`write_truth`], back to 0-based labels.
pub fn read_truth<R: Read>(reader: R) -> Result<Vec<crate::simulate::SubjectTruth>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|v| *v >= 1)
                .ok_or_else(|| Error::Input(format!("line {line}: bad label in column {}", i + 1)))
        };
        let z = rec
            .get(4)
            .unwrap_or("")
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map(|g| g - 1).map_err(|_| Error::Input(format!("line {line}: bad state path"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(crate::simulate::SubjectTruth {
            id: rec.get(0).unwrap_or("").to_string(),
            v: num(1)? - 1,
            u: num(2)? - 1,
            z,
            dropout_wave: rec.get(3).filter(|s| !s.is_empty()).map(|_| num(3)).transpose()?,
        });
    }
    Ok(out)
}
