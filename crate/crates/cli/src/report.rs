//! Output files written by the commands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use hmmdrop::{CovarianceReport, FitResult, PanelData, ParameterSet, Posteriors};

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

pub fn write_params_json(path: &Path, params: &ParameterSet) -> Result<()> {
    std::fs::write(path, params.to_json()?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_params_json(path: &Path) -> Result<ParameterSet> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ParameterSet::from_json(&text)?)
}

/// `parameter, block, estimate[, se]` in natural order.
pub fn write_parameter_table(path: &Path, params: &ParameterSet, data: &PanelData, cov: Option<&CovarianceReport>) -> Result<()> {
    let mut w = writer(path)?;
    let names = params.names(&data.x_names, &data.w_names);
    let values = params.natural_vector();
    if cov.is_some() {
        w.write_record(["parameter", "block", "estimate", "se"])?;
    } else {
        w.write_record(["parameter", "block", "estimate"])?;
    }
    for (i, (n, v)) in names.iter().zip(&values).enumerate() {
        let mut rec = vec![n.name.clone(), n.block.name().to_string(), v.to_string()];
        if let Some(c) = cov {
            rec.push(c.se[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "loglik"])?;
    for (i, ll) in fit.loglik_trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), ll.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    values.enumerate().fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b }).0
}

/// Modal upper class, dropout class and per-wave state (1-based).
pub fn write_assignments(path: &Path, data: &PanelData, post: &Posteriors) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["id", "wave", "v", "u", "z"])?;
    for (i, s) in data.subjects.iter().enumerate() {
        let v = argmax((0..post.n_upper()).map(|h| post.e(i, h))) + 1;
        let u = argmax((0..post.n_classes()).map(|k| post.d_marg(i, k))) + 1;
        for t in 0..s.n_obs() {
            let z = argmax((0..post.n_states()).map(|g| post.a_marg(i, t, g))) + 1;
            w.write_record([s.id.clone(), (t + 1).to_string(), v.to_string(), u.to_string(), z.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `class_posteriors.csv` (`e_h`, `d_k` per subject) and
/// `state_posteriors.csv` (`a_g` per subject and wave).
pub fn write_posteriors(dir: &Path, data: &PanelData, post: &Posteriors) -> Result<()> {
    let (g_n, k_n, h_n) = (post.n_states(), post.n_classes(), post.n_upper());
    let mut w = writer(&dir.join("class_posteriors.csv"))?;
    let mut header = vec!["id".to_string()];
    header.extend((1..=h_n).map(|h| format!("e_{h}")));
    header.extend((1..=k_n).map(|k| format!("d_{k}")));
    w.write_record(&header)?;
    for (i, s) in data.subjects.iter().enumerate() {
        let mut rec = vec![s.id.clone()];
        rec.extend((0..h_n).map(|h| post.e(i, h).to_string()));
        rec.extend((0..k_n).map(|k| post.d_marg(i, k).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = writer(&dir.join("state_posteriors.csv"))?;
    let mut header = vec!["id".to_string(), "wave".to_string()];
    header.extend((1..=g_n).map(|g| format!("a_{g}")));
    w.write_record(&header)?;
    for (i, s) in data.subjects.iter().enumerate() {
        for t in 0..s.n_obs() {
            let mut rec = vec![s.id.clone(), (t + 1).to_string()];
            rec.extend((0..g_n).map(|g| post.a_marg(i, t, g).to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Newline-delimited JSON sink shared by parallel starts.
pub struct JsonLines {
    out: std::sync::Mutex<BufWriter<File>>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { out: std::sync::Mutex::new(BufWriter::new(f)) })
    }

    pub fn push(&self, line: &str) {
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(out, "{line}") {
            log::warn!("progress stream: {e}");
        }
    }

    pub fn finish(self) -> Result<()> {
        let mut out = self.out.into_inner().unwrap_or_else(|e| e.into_inner());
        out.flush()?;
        Ok(())
    }
}
