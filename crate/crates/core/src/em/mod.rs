//! EM estimation: E-step, block M-steps, multistart and convergence control.

mod estep;
mod init;
mod mstep;

pub use estep::{e_step, FitTarget, Posteriors};
pub use init::{initial_parameters, InitBase};
pub use mstep::{
    chain_counts, fit_weighted_logistic, m_step_chain, m_step_dropout, m_step_longitudinal, m_step_mixture,
    weighted_isotonic, ChainCounts, ChainStep, DropoutStep, LongitudinalStep, MixtureStep, XI_CAP,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::to_unconstrained;
use crate::model::{ConvergenceNorm, ModelSpec, PanelData};
use crate::params::{Block, ParameterCounts, ParameterSet};

/// Occupancy below which a start is declared degenerate.
pub const DEGENERATE_MASS: f64 = 1e-8;

/// One line of the progress stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub start: usize,
    pub iter: usize,
    pub loglik: f64,
    /// Max-abs change of each block in the M-step that followed.
    pub change: Vec<(Block, f64)>,
}

impl ProgressEvent {
    pub fn to_json_line(&self) -> String {
        let change: serde_json::Map<String, serde_json::Value> =
            self.change.iter().map(|(b, v)| (b.name().to_string(), serde_json::json!(v))).collect();
        serde_json::json!({
            "start": self.start,
            "iter": self.iter,
            "loglik": self.loglik,
            "change": change,
        })
        .to_string()
    }
}

pub type ProgressFn<'a> = &'a (dyn Fn(&ProgressEvent) + Sync);

#[derive(Clone, Copy)]
pub struct FitOptions<'a> {
    pub target: FitTarget,
    /// Explicit starting points; when `None` they are drawn from `spec.em.seed`.
    pub inits: Option<&'a [ParameterSet]>,
    pub progress: Option<ProgressFn<'a>>,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        Self { target: FitTarget::Joint, inits: None, progress: None }
    }
}

/// Outcome of a single start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub index: usize,
    pub loglik: Option<f64>,
    pub n_iter: usize,
    pub converged: bool,
    /// Why the start was excluded, if it was.
    pub degenerate: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ParameterSet,
    pub loglik: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
    pub start_index: usize,
    pub bic: f64,
    pub aic: f64,
    pub n_params: usize,
    pub n_subjects: usize,
    pub starts: Vec<StartSummary>,
    pub warnings: Vec<String>,
    pub spec: ModelSpec,
}

impl FitResult {
    pub fn degenerate_starts(&self) -> usize {
        self.starts.iter().filter(|s| s.degenerate.is_some()).count()
    }
}

struct StartRun {
    params: ParameterSet,
    loglik: f64,
    trace: Vec<f64>,
    converged: bool,
    warnings: Vec<String>,
}

/// Number of free parameters entering the criterion for `target`.
pub fn target_param_count(spec: &ModelSpec, target: FitTarget) -> usize {
    let c = ParameterCounts::of(spec);
    match target {
        FitTarget::Joint => c.total(),
        FitTarget::LongitudinalOnly => c.beta + c.zeta + c.sigma2 + c.eta0 + c.eta1 + c.tau,
        FitTarget::DropoutOnly => c.gamma + c.xi + c.tau + c.pi,
    }
}

/// Multistart EM for the joint model.
pub fn fit(data: &PanelData, spec: &ModelSpec) -> Result<FitResult> {
    fit_with(data, spec, FitOptions::default())
}

pub fn fit_with(data: &PanelData, spec: &ModelSpec, opts: FitOptions<'_>) -> Result<FitResult> {
    spec.validate()?;
    spec.check_data(data)?;
    data.ensure_valid()?;
    let base = InitBase::from_data(data)?;
    let inits: Vec<ParameterSet> = match opts.inits {
        Some(v) => {
            for p in v {
                p.validate(spec)?;
            }
            v.to_vec()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.em.seed);
            (0..spec.em.starts).map(|_| initial_parameters(&base, spec, &mut rng)).collect()
        }
    };

    let runs: Vec<std::result::Result<StartRun, String>> = inits
        .into_par_iter()
        .enumerate()
        .map(|(idx, init)| run_start(data, spec, init, idx, opts))
        .collect();

    let mut starts = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, &StartRun)> = None;
    for (idx, run) in runs.iter().enumerate() {
        match run {
            Ok(r) => {
                starts.push(StartSummary {
                    index: idx,
                    loglik: Some(r.loglik),
                    n_iter: r.trace.len(),
                    converged: r.converged,
                    degenerate: None,
                });
                if best.is_none_or(|(_, b)| r.loglik > b.loglik) {
                    best = Some((idx, r));
                }
            }
            Err(reason) => {
                log::debug!("start {idx} degenerate: {reason}");
                starts.push(StartSummary { index: idx, loglik: None, n_iter: 0, converged: false, degenerate: Some(reason.clone()) });
            }
        }
    }
    let Some((start_index, run)) = best else {
        return Err(Error::AllStartsDegenerate { starts: starts.len() });
    };

    let mut theta_hat = run.params.clone();
    theta_hat.canonicalize();
    let n = data.n_subjects();
    let n_params = target_param_count(spec, opts.target);
    let loglik = run.loglik;
    let mut warnings = run.warnings.clone();
    if !run.converged {
        warnings.push(format!("best start did not converge within {} iterations", spec.em.max_iter));
    }
    Ok(FitResult {
        theta_hat,
        loglik,
        n_iter: run.trace.len(),
        converged: run.converged,
        loglik_trace: run.trace.clone(),
        start_index,
        bic: -2.0 * loglik + n_params as f64 * (n as f64).ln(),
        aic: -2.0 * loglik + 2.0 * n_params as f64,
        n_params,
        n_subjects: n,
        starts,
        warnings,
        spec: spec.clone(),
    })
}

fn occupancy_problem(post: &Posteriors, target: FitTarget) -> Option<String> {
    let n = post.n_subjects();
    if post.n_upper() > 1 {
        for h in 0..post.n_upper() {
            let mass = (0..n).map(|i| post.e(i, h)).sum::<f64>() / n as f64;
            if mass < DEGENERATE_MASS {
                return Some(format!("upper class {} emptied (tau = {mass:.3e})", h + 1));
            }
        }
    }
    if target != FitTarget::DropoutOnly && post.n_states() > 1 {
        let mut occ = vec![0.0; post.n_states()];
        let mut total = 0.0;
        for i in 0..n {
            for t in 0..post.n_obs(i) {
                for (g, o) in occ.iter_mut().enumerate() {
                    *o += post.a_marg(i, t, g);
                }
                total += 1.0;
            }
        }
        if let Some(g) = occ.iter().position(|o| o / total < DEGENERATE_MASS) {
            return Some(format!("state {} emptied", g + 1));
        }
    }
    None
}

fn params_distance(a: &ParameterSet, b: &ParameterSet) -> f64 {
    let (u, v) = match (to_unconstrained(a), to_unconstrained(b)) {
        (Ok(u), Ok(v)) => (u, v),
        _ => (a.natural_vector(), b.natural_vector()),
    };
    u.iter().zip(&v).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn block_changes(old: &ParameterSet, new: &ParameterSet) -> Vec<(Block, f64)> {
    fn gap(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }
    let flat = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<f64>>();
    let mut eta0_old = old.eta0.alpha.clone();
    eta0_old.extend(&old.eta0.psi);
    let mut eta0_new = new.eta0.alpha.clone();
    eta0_new.extend(&new.eta0.psi);
    let mut eta1_old = flat(&old.eta1.alpha);
    eta1_old.extend(&old.eta1.psi);
    let mut eta1_new = flat(&new.eta1.alpha);
    eta1_new.extend(&new.eta1.psi);
    vec![
        (Block::Beta, gap(&old.beta, &new.beta)),
        (Block::Zeta, gap(&old.zeta, &new.zeta)),
        (Block::Sigma2, (old.sigma2 - new.sigma2).abs()),
        (Block::Gamma, gap(&old.gamma, &new.gamma)),
        (Block::Xi, gap(&old.xi, &new.xi)),
        (Block::Eta0, gap(&eta0_old, &eta0_new)),
        (Block::Eta1, gap(&eta1_old, &eta1_new)),
        (Block::Tau, gap(&old.tau, &new.tau)),
        (Block::Pi, gap(&flat(&old.pi), &flat(&new.pi))),
    ]
}

/// One EM run. `Err` carries the reason the start was declared degenerate.
fn run_start(
    data: &PanelData,
    spec: &ModelSpec,
    init: ParameterSet,
    index: usize,
    opts: FitOptions<'_>,
) -> std::result::Result<StartRun, String> {
    let target = opts.target;
    let mut params = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut warn = |w: String| {
        if !warnings.contains(&w) {
            log::warn!("start {index}: {w}");
            warnings.push(w);
        }
    };
    let mut converged = false;
    let mut pending_params_converged = false;

    for iter in 0..spec.em.max_iter {
        let law = params.chain_law().map_err(|e| e.to_string())?;
        let post = estep::e_step_with(data, &params, &law, target).map_err(|e| e.to_string())?;
        let ll = post.loglik;
        if let Some(&prev) = trace.last() {
            if ll < prev - 1e-8 * (1.0 + prev.abs()) {
                warn(format!("log-likelihood decreased by {:.3e} at iteration {iter}", prev - ll));
            }
        }
        trace.push(ll);
        if pending_params_converged {
            converged = true;
            break;
        }
        if trace.len() >= 2 && spec.em.norm == ConvergenceNorm::LogLik {
            let prev = trace[trace.len() - 2];
            if (ll - prev).abs() < spec.em.tol {
                converged = true;
                break;
            }
        }
        if let Some(reason) = occupancy_problem(&post, target) {
            return Err(reason);
        }

        let mut next = params.clone();
        let mix = m_step_mixture(&post);
        if !mix.dead.is_empty() {
            return Err(format!("upper class {} has no posterior mass", mix.dead[0] + 1));
        }
        next.tau = mix.tau;
        next.pi = mix.pi;
        if target != FitTarget::DropoutOnly {
            let chain = m_step_chain(&post, &params).map_err(|e| e.to_string())?;
            if !chain.converged {
                log::debug!("start {index}: chain M-step stopped at its inner iteration limit");
            }
            next.eta0 = chain.eta0;
            next.eta1 = chain.eta1;
            let long = m_step_longitudinal(data, &post, &params).map_err(|e| e.to_string())?;
            next.beta = long.beta;
            next.zeta = long.zeta;
            next.sigma2 = long.sigma2;
        }
        if target != FitTarget::LongitudinalOnly {
            let drop = m_step_dropout(data, &post, &params).map_err(|e| e.to_string())?;
            if drop.capped {
                warn(format!("dropout intercepts reached the cap of {XI_CAP} (quasi-separation)"));
            }
            next.xi = drop.xi;
            next.gamma = drop.gamma;
        }

        if let Some(cb) = opts.progress {
            cb(&ProgressEvent { start: index, iter, loglik: ll, change: block_changes(&params, &next) });
        }
        if spec.em.norm == ConvergenceNorm::Params && params_distance(&params, &next) < spec.em.tol {
            pending_params_converged = true;
        }
        params = next;
    }
    let loglik = *trace.last().ok_or_else(|| "no iterations were run".to_string())?;
    Ok(StartRun { params, loglik, trace, converged, warnings })
}
