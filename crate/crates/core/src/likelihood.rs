//! Emission and dropout densities, scaled forward/backward recursions and
//! the observed-data log-likelihood.
//!
//! Forward rows are normalized to sum to one at every wave; the log of each
//! normalizer is kept so that unscaled quantities can be recovered. The
//! backward rows are divided by the same normalizers, which makes
//! `sum_g forward[t][g] * backward[t][g] = 1` for every wave.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::latent::ChainLaw;
use crate::math::{clamp_prob, dot, log_logistic, log_sum_exp, LN_2PI, PROB_FLOOR};
use crate::model::{ModelSpec, PanelData, SubjectRecord};
use crate::params::ParameterSet;

const MAX_BRUTE_FORCE_TERMS: f64 = 1e7;

/// `log Normal(y; zeta_g + x'beta, sigma2)`.
pub fn emission_logdensity(y: f64, g: usize, params: &ParameterSet, x_row: &[f64]) -> f64 {
    let resid = y - params.zeta[g] - dot(x_row, &params.beta);
    -0.5 * (LN_2PI + params.sigma2.ln() + resid * resid / params.sigma2)
}

/// Log-probability of one missingness indicator under class `k`, where
/// `logit P(R = 0) = xi_k + w'gamma`.
pub fn dropout_logdensity(r: u8, k: usize, params: &ParameterSet, w_row: &[f64]) -> f64 {
    let eta = params.xi[k] + dot(w_row, &params.gamma);
    indicator_logprob(r, eta)
}

#[inline]
pub(crate) fn indicator_logprob(r: u8, eta: f64) -> f64 {
    let lp = if r == 0 { log_logistic(eta) } else { log_logistic(-eta) };
    lp.max(PROB_FLOOR.ln())
}

/// `sum_t log f(r_t | U = k)` over the subject's `T_i*` indicators.
pub fn subject_dropout_logdensity(subject: &SubjectRecord, k: usize, params: &ParameterSet) -> f64 {
    subject
        .r
        .iter()
        .zip(&subject.w)
        .map(|(&r, w)| dropout_logdensity(r, k, params, w))
        .sum()
}

/// `log f(y_t | Z_t = g)` as a `T_i x G` table.
pub fn emission_table(subject: &SubjectRecord, params: &ParameterSet) -> Vec<Vec<f64>> {
    let half_log = 0.5 * (LN_2PI + params.sigma2.ln());
    let inv = 0.5 / params.sigma2;
    subject
        .y
        .iter()
        .zip(&subject.x)
        .map(|(&y, x)| {
            let base = y - dot(x, &params.beta);
            params
                .zeta
                .iter()
                .map(|z| {
                    let e = base - z;
                    -half_log - e * e * inv
                })
                .collect()
        })
        .collect()
}

/// Scaled forward variables for one subject and upper-level class.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSlice {
    /// Normalized rows, `T_i x G`.
    pub alpha: Vec<Vec<f64>>,
    /// Log of the factor removed at each wave.
    pub log_scale: Vec<f64>,
    // per-wave max of the log emissions and the remaining normalizer
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl ForwardSlice {
    /// `log f(y_1..y_{T_i} | V = h)`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_scale.iter().sum()
    }

    /// Unscaled `log A^{(t)}_g` (0-based `t`).
    pub fn log_forward(&self, t: usize, g: usize) -> f64 {
        self.alpha[t][g].ln() + self.log_scale[..=t].iter().sum::<f64>()
    }
}

/// Forward and backward variables for one subject and class.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub forward: ForwardSlice,
    /// Backward rows scaled by the forward normalizers.
    pub backward: Vec<Vec<f64>>,
}

impl Lattice {
    /// Unscaled `log B^{(t)}_g` (0-based `t`).
    pub fn log_backward(&self, t: usize, g: usize) -> f64 {
        self.backward[t][g].ln() + self.forward.log_scale[t + 1..].iter().sum::<f64>()
    }
}

pub(crate) fn forward_scaled(
    id: &str,
    log_em: &[Vec<f64>],
    delta: &[f64],
    q: &[Vec<f64>],
) -> Result<ForwardSlice> {
    let n_t = log_em.len();
    let g_n = delta.len();
    let mut alpha = Vec::with_capacity(n_t);
    let mut log_scale = Vec::with_capacity(n_t);
    let mut shift = Vec::with_capacity(n_t);
    let mut scale = Vec::with_capacity(n_t);
    let mut row = vec![0.0; g_n];
    for t in 0..n_t {
        let m = log_em[t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for g in 0..g_n {
            let prior = if t == 0 {
                delta[g]
            } else {
                let prev: &Vec<f64> = &alpha[t - 1];
                (0..g_n).map(|j| prev[j] * q[j][g]).sum()
            };
            row[g] = prior * (log_em[t][g] - m).exp();
        }
        let c: f64 = row.iter().sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Underflow { pass: "forward", subject: id.to_string(), wave: t + 1 });
        }
        alpha.push(row.iter().map(|v| v / c).collect());
        shift.push(m);
        scale.push(c);
        log_scale.push(m + c.ln());
    }
    Ok(ForwardSlice { alpha, log_scale, shift, scale })
}

pub(crate) fn backward_scaled(
    id: &str,
    log_em: &[Vec<f64>],
    q: &[Vec<f64>],
    fwd: &ForwardSlice,
) -> Result<Vec<Vec<f64>>> {
    let n_t = log_em.len();
    let g_n = q.len();
    let mut beta = vec![vec![1.0; g_n]; n_t];
    let mut tmp = vec![0.0; g_n];
    for t in (0..n_t.saturating_sub(1)).rev() {
        for (j, v) in tmp.iter_mut().enumerate() {
            *v = (log_em[t + 1][j] - fwd.shift[t + 1]).exp() * beta[t + 1][j];
        }
        let c = fwd.scale[t + 1];
        for g in 0..g_n {
            beta[t][g] = dot(&q[g], &tmp) / c;
        }
        if !beta[t].iter().all(|v| v.is_finite()) || beta[t].iter().all(|&v| v == 0.0) {
            return Err(Error::Underflow { pass: "backward", subject: id.to_string(), wave: t + 1 });
        }
    }
    Ok(beta)
}

/// Forward recursion for `subject` conditional on upper-level class `h`.
pub fn forward_pass(subject: &SubjectRecord, h: usize, params: &ParameterSet) -> Result<ForwardSlice> {
    let law = params.chain_law()?;
    let em = emission_table(subject, params);
    forward_scaled(&subject.id, &em, &law.delta[h], &law.q[h])
}

/// Forward and backward recursions for `subject` conditional on class `h`.
pub fn lattice(subject: &SubjectRecord, h: usize, params: &ParameterSet) -> Result<Lattice> {
    let law = params.chain_law()?;
    let em = emission_table(subject, params);
    let forward = forward_scaled(&subject.id, &em, &law.delta[h], &law.q[h])?;
    let backward = backward_scaled(&subject.id, &em, &law.q[h], &forward)?;
    Ok(Lattice { forward, backward })
}

/// Backward variables matched to the scaling of `forward`.
pub fn backward_pass(
    subject: &SubjectRecord,
    h: usize,
    params: &ParameterSet,
    forward: &ForwardSlice,
) -> Result<Vec<Vec<f64>>> {
    let law = params.chain_law()?;
    let em = emission_table(subject, params);
    backward_scaled(&subject.id, &em, &law.q[h], forward)
}

/// Per-subject building blocks of the likelihood.
#[derive(Debug, Clone)]
pub(crate) struct SubjectTerms {
    /// `log f(y | V = h)` per class.
    pub log_long: Vec<f64>,
    /// `log f(r | U = k)` per dropout class.
    pub log_drop: Vec<f64>,
}

pub(crate) fn subject_terms(subject: &SubjectRecord, params: &ParameterSet, law: &ChainLaw) -> Result<SubjectTerms> {
    let em = emission_table(subject, params);
    let log_long = (0..law.n_upper())
        .map(|h| forward_scaled(&subject.id, &em, &law.delta[h], &law.q[h]).map(|f| f.log_normalizer()))
        .collect::<Result<Vec<_>>>()?;
    let log_drop = (0..params.n_classes()).map(|k| subject_dropout_logdensity(subject, k, params)).collect();
    Ok(SubjectTerms { log_long, log_drop })
}

/// `log sum_k pi_{k|h} f(r | k)` for each class `h`.
pub(crate) fn dropout_mixture(params: &ParameterSet, log_drop: &[f64]) -> Vec<f64> {
    params
        .pi
        .iter()
        .map(|row| {
            let terms: Vec<f64> = row.iter().zip(log_drop).map(|(p, l)| p.ln() + l).collect();
            log_sum_exp(&terms)
        })
        .collect()
}

fn combine(params: &ParameterSet, terms: &SubjectTerms) -> f64 {
    let drop = dropout_mixture(params, &terms.log_drop);
    let per_h: Vec<f64> = (0..params.n_upper())
        .map(|h| params.tau[h].ln() + terms.log_long[h] + drop[h])
        .collect();
    log_sum_exp(&per_h)
}

/// Contribution of each subject to the observed-data log-likelihood.
pub fn subject_logliks(data: &PanelData, params: &ParameterSet) -> Result<Vec<f64>> {
    let law = params.chain_law()?;
    data.subjects
        .par_iter()
        .map(|s| {
            let terms = subject_terms(s, params, &law)?;
            let v = combine(params, &terms);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { subject: s.id.clone() })
            }
        })
        .collect()
}

/// Observed-data log-likelihood, summed over subjects in data order.
pub fn observed_loglik(data: &PanelData, params: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    params.check_dims(spec)?;
    Ok(subject_logliks(data, params)?.iter().sum())
}

/// `sum_i log sum_h tau_h f(y_i | V = h)`: the longitudinal margin.
pub fn longitudinal_loglik(data: &PanelData, params: &ParameterSet) -> Result<f64> {
    let law = params.chain_law()?;
    let mut total = 0.0;
    for s in &data.subjects {
        let em = emission_table(s, params);
        let per_h = (0..law.n_upper())
            .map(|h| {
                forward_scaled(&s.id, &em, &law.delta[h], &law.q[h])
                    .map(|f| params.tau[h].ln() + f.log_normalizer())
            })
            .collect::<Result<Vec<_>>>()?;
        total += log_sum_exp(&per_h);
    }
    Ok(total)
}

/// `sum_i log sum_h tau_h sum_k pi_{k|h} f(r_i | k)`: the dropout margin.
pub fn dropout_loglik(data: &PanelData, params: &ParameterSet) -> f64 {
    data.subjects
        .iter()
        .map(|s| {
            let ld: Vec<f64> = (0..params.n_classes()).map(|k| subject_dropout_logdensity(s, k, params)).collect();
            let mix = dropout_mixture(params, &ld);
            let per_h: Vec<f64> = mix.iter().zip(&params.tau).map(|(m, t)| t.ln() + m).collect();
            log_sum_exp(&per_h)
        })
        .sum()
}

/// Exact log-likelihood by enumerating every `(h, z-path, k)` combination.
pub fn brute_force_loglik(data: &PanelData, params: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    params.check_dims(spec)?;
    let law = params.chain_law()?;
    let (g_n, k_n, h_n) = (spec.n_states, spec.n_classes, spec.n_upper);
    let mut total = 0.0;
    for s in &data.subjects {
        let n_t = s.n_obs();
        let paths = (g_n as f64).powi(n_t as i32) * (k_n * h_n) as f64;
        if paths > MAX_BRUTE_FORCE_TERMS {
            return Err(Error::TooLarge { subject: s.id.clone(), paths });
        }
        let em: Vec<Vec<f64>> = (0..n_t)
            .map(|t| (0..g_n).map(|g| emission_logdensity(s.y[t], g, params, &s.x[t])).collect())
            .collect();
        let ld: Vec<f64> = (0..k_n)
            .map(|k| s.r.iter().zip(&s.w).map(|(&r, w)| dropout_logdensity(r, k, params, w)).sum())
            .collect();
        let mut terms = Vec::new();
        let mut z = vec![0usize; n_t];
        for h in 0..h_n {
            loop {
                let mut lp = law.delta[h][z[0]].ln() + em[0][z[0]];
                for t in 1..n_t {
                    lp += law.q[h][z[t - 1]][z[t]].ln() + em[t][z[t]];
                }
                for k in 0..k_n {
                    terms.push(params.tau[h].ln() + lp + params.pi[h][k].ln() + ld[k]);
                }
                if !next_path(&mut z, g_n) {
                    break;
                }
            }
        }
        total += log_sum_exp(&terms);
    }
    Ok(total)
}

/// Advances `z` to the next path in lexicographic order; false on wrap.
pub(crate) fn next_path(z: &mut [usize], g_n: usize) -> bool {
    for slot in z.iter_mut().rev() {
        *slot += 1;
        if *slot < g_n {
            return true;
        }
        *slot = 0;
    }
    false
}

/// Complete-data log-likelihood of one subject given its latent labels.
pub fn complete_loglik(
    subject: &SubjectRecord,
    v: usize,
    u: usize,
    z: &[usize],
    params: &ParameterSet,
    law: &ChainLaw,
) -> f64 {
    let mut ll = clamp_prob(params.tau[v]).ln() + clamp_prob(params.pi[v][u]).ln();
    ll += clamp_prob(law.delta[v][z[0]]).ln();
    for t in 1..subject.n_obs() {
        ll += clamp_prob(law.q[v][z[t - 1]][z[t]]).ln();
    }
    for t in 0..subject.n_obs() {
        ll += emission_logdensity(subject.y[t], z[t], params, &subject.x[t]);
    }
    ll + subject_dropout_logdensity(subject, u, params)
}
