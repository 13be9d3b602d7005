//! Information criteria, grid search over `(G, K, H)` and the comparison
//! of an ignorable fit against a non-ignorable one.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit, FitResult};
use crate::error::{Error, Result};
use crate::inference::CovarianceReport;
use crate::model::{EmControls, ModelSpec, PanelData};

/// `-2 loglik + n_params ln n`, with `n` the number of subjects.
pub fn bic(loglik: f64, n_params: usize, n: usize) -> f64 {
    -2.0 * loglik + n_params as f64 * (n as f64).ln()
}

pub fn aic(loglik: f64, n_params: usize) -> f64 {
    -2.0 * loglik + 2.0 * n_params as f64
}

/// One `(G, K, H)` cell of a selection grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub g: usize,
    pub k: usize,
    pub h: usize,
    pub loglik: Option<f64>,
    pub n_params: Option<usize>,
    pub bic: f64,
    pub aic: Option<f64>,
    pub converged: bool,
    pub degenerate_starts: usize,
    /// Failure message when the cell could not be fitted.
    pub error: Option<String>,
}

impl GridCell {
    pub fn from_fit(fit: &FitResult) -> Self {
        Self {
            g: fit.spec.n_states,
            k: fit.spec.n_classes,
            h: fit.spec.n_upper,
            loglik: Some(fit.loglik),
            n_params: Some(fit.n_params),
            bic: fit.bic,
            aic: Some(fit.aic),
            converged: fit.converged,
            degenerate_starts: fit.degenerate_starts(),
            error: None,
        }
    }

    pub fn failed(g: usize, k: usize, h: usize, error: String) -> Self {
        Self { g, k, h, loglik: None, n_params: None, bic: f64::NAN, aic: None, converged: false, degenerate_starts: 0, error: Some(error) }
    }

    /// A cell known only through its criterion value.
    pub fn from_bic(g: usize, k: usize, h: usize, bic: f64) -> Self {
        Self { g, k, h, loglik: None, n_params: None, bic, aic: None, converged: true, degenerate_starts: 0, error: None }
    }

    fn eligible(&self) -> bool {
        self.converged && self.error.is_none() && self.bic.is_finite()
    }

    fn complexity(&self) -> (usize, usize, usize) {
        (self.h, self.g, self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the selected model.
    pub selected: usize,
}

impl GridReport {
    pub fn selected_cell(&self) -> &GridCell {
        &self.cells[self.selected]
    }

    /// Wide table: one row per `G`, one column per `(H, K)`.
    pub fn write_table_csv(&self, path: &Path) -> Result<()> {
        let mut gs: Vec<usize> = self.cells.iter().map(|c| c.g).collect();
        let mut hk: Vec<(usize, usize)> = self.cells.iter().map(|c| (c.h, c.k)).collect();
        gs.sort_unstable();
        gs.dedup();
        hk.sort_unstable();
        hk.dedup();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["G".to_string()];
        header.extend(hk.iter().map(|(h, k)| format!("H{h}_K{k}")));
        w.write_record(&header)?;
        for g in gs {
            let mut row = vec![g.to_string()];
            for &(h, k) in &hk {
                let v = self.cells.iter().find(|c| c.g == g && c.h == h && c.k == k);
                row.push(v.filter(|c| c.bic.is_finite()).map_or(String::new(), |c| c.bic.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per cell with every recorded field.
    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["G", "K", "H", "loglik", "n_params", "bic", "aic", "converged", "degenerate_starts", "selected", "error"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for (i, c) in self.cells.iter().enumerate() {
            w.write_record([
                c.g.to_string(),
                c.k.to_string(),
                c.h.to_string(),
                opt(c.loglik),
                c.n_params.map_or(String::new(), |v| v.to_string()),
                if c.bic.is_finite() { c.bic.to_string() } else { String::new() },
                opt(c.aic),
                c.converged.to_string(),
                c.degenerate_starts.to_string(),
                (i == self.selected).to_string(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Minimum-BIC cell among converged cells; exact ties go to the smaller
/// `H`, then `G`, then `K`.
pub fn select(cells: Vec<GridCell>) -> Result<GridReport> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if !c.eligible() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &cells[b];
                c.bic < cur.bic || (c.bic == cur.bic && c.complexity() < cur.complexity())
            }
        };
        if better {
            best = Some(i);
        }
    }
    let selected = best.ok_or(Error::NoConvergedCell)?;
    Ok(GridReport { cells, selected })
}

/// Reads grid cells from either the long layout (`G, K, H, bic, ...`)
/// or the wide layout written by [`GridReport::write_table_csv`].
/// Cells with a `loglik` and `n_params` but no `bic` need `n_subjects`.
pub fn read_grid_csv(path: &Path, n_subjects: Option<usize>) -> Result<Vec<GridCell>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let pos = |n: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(n));
    let num = |s: &str, line: u64| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Input(format!("line {line}: '{s}' is not a number")))
    };
    let int = |s: &str, line: u64| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::Input(format!("line {line}: '{s}' is not a positive integer")))
    };
    let mut cells = Vec::new();
    if let (Some(ig), Some(ik), Some(ih)) = (pos("G"), pos("K"), pos("H")) {
        let (ib, il, ip, ic) = (pos("bic"), pos("loglik"), pos("n_params"), pos("converged"));
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let get = |i: Option<usize>| i.and_then(|i| rec.get(i)).filter(|s| !s.is_empty());
            let (g, k, h) = (int(&rec[ig], line)?, int(&rec[ik], line)?, int(&rec[ih], line)?);
            let loglik = get(il).map(|s| num(s, line)).transpose()?;
            let n_params = get(ip).map(|s| int(s, line)).transpose()?;
            let bic_value = match (get(ib), loglik, n_params, n_subjects) {
                (Some(b), ..) => num(b, line)?,
                (None, Some(l), Some(p), Some(n)) => bic(l, p, n),
                (None, Some(_), Some(_), None) => {
                    return Err(Error::Input(format!("line {line}: computing BIC from loglik needs the number of subjects")))
                }
                _ => f64::NAN,
            };
            let converged = get(ic).is_none_or(|s| s == "true" || s == "1");
            let mut c = GridCell::from_bic(g, k, h, bic_value);
            c.loglik = loglik;
            c.n_params = n_params;
            c.aic = match (loglik, n_params) {
                (Some(l), Some(p)) => Some(aic(l, p)),
                _ => None,
            };
            c.converged = converged && bic_value.is_finite();
            cells.push(c);
        }
    } else {
        let ig = pos("G").ok_or_else(|| Error::Input("grid file needs a 'G' column".into()))?;
        let mut cols = Vec::new();
        for (i, name) in headers.iter().enumerate() {
            if i == ig {
                continue;
            }
            let parsed = name
                .strip_prefix('H')
                .and_then(|rest| rest.split_once("_K"))
                .and_then(|(h, k)| Some((h.parse::<usize>().ok()?, k.parse::<usize>().ok()?)));
            let (h, k) = parsed.ok_or_else(|| Error::Input(format!("unrecognized grid column '{name}', expected H<h>_K<k>")))?;
            cols.push((i, h, k));
        }
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let g = int(&rec[ig], line)?;
            for &(i, h, k) in &cols {
                let s = rec.get(i).unwrap_or("");
                if !s.is_empty() {
                    cells.push(GridCell::from_bic(g, k, h, num(s, line)?));
                }
            }
        }
    }
    Ok(cells)
}

/// Inclusive ranges for a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRanges {
    pub g: (usize, usize),
    pub k: (usize, usize),
    pub h: (usize, usize),
}

impl GridRanges {
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for h in self.h.0..=self.h.1 {
            for g in self.g.0..=self.g.1 {
                for k in self.k.0..=self.k.1 {
                    out.push((g, k, h));
                }
            }
        }
        out
    }
}

/// Fits every cell. Failures are recorded in the cell, not propagated.
pub fn fit_grid(data: &PanelData, ranges: &GridRanges, em: &EmControls) -> Result<(GridReport, Vec<Option<FitResult>>)> {
    let cells = ranges.cells();
    if cells.is_empty() {
        return Err(Error::InvalidSpec("empty grid".into()));
    }
    let fits: Vec<(GridCell, Option<FitResult>)> = cells
        .par_iter()
        .map(|&(g, k, h)| {
            let spec = ModelSpec::for_data(data, g, k, h).with_em(em.clone());
            match fit(data, &spec) {
                Ok(f) => (GridCell::from_fit(&f), Some(f)),
                Err(e) => {
                    log::warn!("cell G={g} K={k} H={h} failed: {e}");
                    (GridCell::failed(g, k, h, e.to_string()), None)
                }
            }
        })
        .collect();
    let (cells, results): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
    Ok((select(cells)?, results))
}

/// Difference of one shared parameter between the two fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiff {
    pub name: String,
    pub mnar: f64,
    pub mar: f64,
    pub diff: f64,
    /// `diff / sqrt(se_mnar^2 + se_mar^2)` when both SEs are available.
    pub scaled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub diffs: Vec<ParamDiff>,
    /// `bic(mnar) - bic(mar)`; negative favours the non-ignorable model.
    pub bic_diff: f64,
}

impl SensitivityReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["parameter", "mnar", "mar", "diff", "scaled_diff"])?;
        for d in &self.diffs {
            w.write_record([
                d.name.clone(),
                d.mnar.to_string(),
                d.mar.to_string(),
                d.diff.to_string(),
                d.scaled.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Compares the longitudinal and dropout blocks shared by two fits of the
/// same data that differ only in `H`.
pub fn sensitivity_compare(
    mnar: &FitResult,
    mar: &FitResult,
    se: Option<(&CovarianceReport, &CovarianceReport)>,
    x_names: &[String],
    w_names: &[String],
) -> Result<SensitivityReport> {
    let (a, b) = (&mnar.spec, &mar.spec);
    if a.n_states != b.n_states || a.n_classes != b.n_classes || a.p_x != b.p_x || a.p_w != b.p_w {
        return Err(Error::Mismatch(format!(
            "fits differ in (G, K, p_x, p_w): ({}, {}, {}, {}) vs ({}, {}, {}, {})",
            a.n_states, a.n_classes, a.p_x, a.p_w, b.n_states, b.n_classes, b.p_x, b.p_w
        )));
    }
    if mnar.n_subjects != mar.n_subjects {
        return Err(Error::Mismatch("fits were made on different numbers of subjects".into()));
    }
    let shared = |p: &crate::params::ParameterSet| -> Vec<(String, f64)> {
        let mut v = Vec::new();
        let label = |names: &[String], j: usize| names.get(j).cloned().unwrap_or_else(|| (j + 1).to_string());
        v.extend(p.beta.iter().enumerate().map(|(j, x)| (format!("beta[{}]", label(x_names, j)), *x)));
        v.extend(p.zeta.iter().enumerate().map(|(g, x)| (format!("zeta[{}]", g + 1), *x)));
        v.push(("sigma2".to_string(), p.sigma2));
        v.extend(p.gamma.iter().enumerate().map(|(j, x)| (format!("gamma[{}]", label(w_names, j)), *x)));
        v.extend(p.xi.iter().enumerate().map(|(k, x)| (format!("xi[{}]", k + 1), *x)));
        v
    };
    let diffs = shared(&mnar.theta_hat)
        .into_iter()
        .zip(shared(&mar.theta_hat))
        .map(|((name, x), (_, y))| {
            let scaled = se.and_then(|(sa, sb)| {
                let (ea, eb) = (sa.se_of(&name)?, sb.se_of(&name)?);
                let s = (ea * ea + eb * eb).sqrt();
                (s > 0.0).then(|| (x - y) / s)
            });
            ParamDiff { name, mnar: x, mar: y, diff: x - y, scaled }
        })
        .collect();
    Ok(SensitivityReport { diffs, bic_diff: mnar.bic - mar.bic })
}
