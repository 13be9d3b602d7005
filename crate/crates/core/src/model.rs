//! Panel data, model specification and panel validation.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject's observed sequence.
///
/// `y` and `x` hold the `T_i` observed waves. `r` and `w` hold the
/// `T_i* = min(T_i + 1, T)` missingness indicators and their covariates, so
/// a dropout contributes the wave at which it was first missed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub y: Vec<f64>,
    /// 0 = observed, 1 = dropped out.
    pub r: Vec<u8>,
    pub x: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
}

impl SubjectRecord {
    /// Number of observed responses, `T_i`.
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// Number of missingness indicators entering the likelihood, `T_i*`.
    pub fn n_indicators(&self) -> usize {
        self.r.len()
    }

    pub fn is_completer(&self, n_waves: usize) -> bool {
        self.n_obs() == n_waves
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    /// Planned number of waves `T`.
    pub n_waves: usize,
    pub x_names: Vec<String>,
    pub w_names: Vec<String>,
    pub subjects: Vec<SubjectRecord>,
}

impl PanelData {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn p_x(&self) -> usize {
        self.x_names.len()
    }

    pub fn p_w(&self) -> usize {
        self.w_names.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    /// Returns an error carrying the first few violations when the panel is
    /// not valid.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate_panel(self);
        if report.is_ok() {
            return Ok(());
        }
        let shown: Vec<String> = report.violations.iter().take(5).map(|v| v.to_string()).collect();
        Err(Error::Input(format!(
            "{} panel violation(s): {}",
            report.violations.len(),
            shown.join("; ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    NoObservations,
    TooManyWaves { n_waves: usize },
    NonMonotone,
    IndicatorLength { expected: usize, found: usize },
    MissingDropoutEvent,
    ObservedAfterDropout,
    XRows { expected: usize, found: usize },
    WRows { expected: usize, found: usize },
    XColumns { expected: usize, found: usize },
    WColumns { expected: usize, found: usize },
    NonFinite { what: &'static str },
    DuplicateId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subject: String,
    /// 1-based wave, when the violation is tied to one.
    pub wave: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "subject {}", self.subject)?;
        if let Some(w) = self.wave {
            write!(f, " wave {w}")?;
        }
        write!(f, ": ")?;
        match &self.kind {
            ViolationKind::NoObservations => write!(f, "no observed response"),
            ViolationKind::TooManyWaves { n_waves } => {
                write!(f, "more observed waves than the planned {n_waves}")
            }
            ViolationKind::NonMonotone => write!(f, "non-monotone missingness"),
            ViolationKind::IndicatorLength { expected, found } => {
                write!(f, "expected {expected} missingness indicators, found {found}")
            }
            ViolationKind::MissingDropoutEvent => {
                write!(f, "incomplete sequence without a dropout indicator")
            }
            ViolationKind::ObservedAfterDropout => write!(f, "indicator 0 at or after dropout"),
            ViolationKind::XRows { expected, found } => {
                write!(f, "longitudinal design has {found} rows, expected {expected}")
            }
            ViolationKind::WRows { expected, found } => {
                write!(f, "dropout design has {found} rows, expected {expected}")
            }
            ViolationKind::XColumns { expected, found } => {
                write!(f, "longitudinal covariate row has {found} columns, expected {expected}")
            }
            ViolationKind::WColumns { expected, found } => {
                write!(f, "dropout covariate row has {found} columns, expected {expected}")
            }
            ViolationKind::NonFinite { what } => write!(f, "non-finite {what}"),
            ViolationKind::DuplicateId => write!(f, "duplicate subject id"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub completers: usize,
    pub dropouts: usize,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Dropout pattern of a structurally valid subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Completer,
    /// First missed wave (1-based).
    Dropout { wave: usize },
}

/// Classifies a subject's indicator sequence, or `None` if it is not a
/// valid monotone pattern for a horizon of `n_waves`.
pub fn classify(subject: &SubjectRecord, n_waves: usize) -> Option<Pattern> {
    let t_obs = subject.n_obs();
    if t_obs == 0 || t_obs > n_waves {
        return None;
    }
    let expected = (t_obs + 1).min(n_waves);
    if subject.r.len() != expected {
        return None;
    }
    let observed_ok = subject.r[..t_obs].iter().all(|&v| v == 0);
    if t_obs == n_waves {
        observed_ok.then_some(Pattern::Completer)
    } else {
        (observed_ok && subject.r[t_obs] == 1).then_some(Pattern::Dropout { wave: t_obs + 1 })
    }
}

/// Collects every structural violation in the panel.
pub fn validate_panel(data: &PanelData) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (p_x, p_w) = (data.p_x(), data.p_w());
    let mut seen = HashSet::new();

    for s in &data.subjects {
        let mut push = |wave: Option<usize>, kind: ViolationKind| {
            report.violations.push(Violation { subject: s.id.clone(), wave, kind });
        };
        if !seen.insert(s.id.as_str()) {
            push(None, ViolationKind::DuplicateId);
        }

        // monotonicity of the raw indicator sequence
        if let Some(first) = s.r.iter().position(|&v| v != 0) {
            if let Some(back) = s.r[first..].iter().position(|&v| v == 0) {
                push(Some(first + back + 1), ViolationKind::NonMonotone);
            }
            if s.r[first] > 1 {
                push(Some(first + 1), ViolationKind::NonMonotone);
            }
        }

        let t_obs = s.n_obs();
        if t_obs == 0 {
            push(None, ViolationKind::NoObservations);
        } else if t_obs > data.n_waves {
            push(None, ViolationKind::TooManyWaves { n_waves: data.n_waves });
        } else {
            let expected = (t_obs + 1).min(data.n_waves);
            if s.r.len() != expected {
                push(None, ViolationKind::IndicatorLength { expected, found: s.r.len() });
            } else {
                if let Some(t) = s.r[..t_obs].iter().position(|&v| v != 0) {
                    push(Some(t + 1), ViolationKind::ObservedAfterDropout);
                }
                if t_obs < data.n_waves && s.r[t_obs] != 1 {
                    push(Some(t_obs + 1), ViolationKind::MissingDropoutEvent);
                }
            }
            if s.x.len() != t_obs {
                push(None, ViolationKind::XRows { expected: t_obs, found: s.x.len() });
            }
            if s.w.len() != expected {
                push(None, ViolationKind::WRows { expected, found: s.w.len() });
            }
        }

        for (t, y) in s.y.iter().enumerate() {
            if !y.is_finite() {
                push(Some(t + 1), ViolationKind::NonFinite { what: "response" });
            }
        }
        for (t, row) in s.x.iter().enumerate() {
            if row.len() != p_x {
                push(Some(t + 1), ViolationKind::XColumns { expected: p_x, found: row.len() });
            } else if row.iter().any(|v| !v.is_finite()) {
                push(Some(t + 1), ViolationKind::NonFinite { what: "longitudinal covariate" });
            }
        }
        for (t, row) in s.w.iter().enumerate() {
            if row.len() != p_w {
                push(Some(t + 1), ViolationKind::WColumns { expected: p_w, found: row.len() });
            } else if row.iter().any(|v| !v.is_finite()) {
                push(Some(t + 1), ViolationKind::NonFinite { what: "dropout covariate" });
            }
        }

        match classify(s, data.n_waves) {
            Some(Pattern::Completer) => report.completers += 1,
            Some(Pattern::Dropout { .. }) => report.dropouts += 1,
            None => {}
        }
    }
    report
}

/// Convergence criterion for EM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceNorm {
    /// `|l(r) - l(r-1)| < tol`
    LogLik,
    /// Max-abs change of the unconstrained parameter vector below `tol`.
    Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmControls {
    pub max_iter: usize,
    pub tol: f64,
    pub norm: ConvergenceNorm,
    pub starts: usize,
    pub seed: u64,
}

impl Default for EmControls {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-6, norm: ConvergenceNorm::LogLik, starts: 50, seed: 1 }
    }
}

/// Latent dimensions, covariate dimensions and EM settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Hidden states `G`.
    pub n_states: usize,
    /// Dropout classes `K`.
    pub n_classes: usize,
    /// Upper-level classes `H`.
    pub n_upper: usize,
    pub p_x: usize,
    pub p_w: usize,
    pub em: EmControls,
}

impl ModelSpec {
    pub fn new(n_states: usize, n_classes: usize, n_upper: usize, p_x: usize, p_w: usize) -> Self {
        Self { n_states, n_classes, n_upper, p_x, p_w, em: EmControls::default() }
    }

    pub fn for_data(data: &PanelData, n_states: usize, n_classes: usize, n_upper: usize) -> Self {
        Self::new(n_states, n_classes, n_upper, data.p_x(), data.p_w())
    }

    pub fn with_em(mut self, em: EmControls) -> Self {
        self.em = em;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_classes == 0 || self.n_upper == 0 {
            return Err(Error::InvalidSpec("G, K and H must all be at least 1".into()));
        }
        if !(self.em.tol > 0.0) {
            return Err(Error::InvalidSpec(format!("tolerance must be positive, got {}", self.em.tol)));
        }
        if self.em.starts == 0 {
            return Err(Error::InvalidSpec("at least one start is required".into()));
        }
        Ok(())
    }

    pub fn check_data(&self, data: &PanelData) -> Result<()> {
        if data.p_x() != self.p_x || data.p_w() != self.p_w {
            return Err(Error::Dimension(format!(
                "spec expects p_x={}, p_w={} but data has {}, {}",
                self.p_x,
                self.p_w,
                data.p_x(),
                data.p_w()
            )));
        }
        Ok(())
    }
}
