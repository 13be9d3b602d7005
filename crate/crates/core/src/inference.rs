//! Sandwich covariance of the maximum likelihood estimate.
//!
//! Derivatives are taken numerically on an unconstrained coordinate vector
//! `theta*`: `beta`, `gamma`, `xi` and the class shifts as they are,
//! `zeta` as `(zeta_1, log increments)`, `log sigma2`, thresholds in
//! decrement coordinates, `log(tau_h / tau_1)` and `log(pi_{k|h} / pi_{1|h})`.
//! The covariance is mapped back to the natural parameters by the delta
//! method with an analytic Jacobian.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::latent::{thresholds_from_free, thresholds_to_free, InitialLogits, TransitionLogits};
use crate::likelihood::subject_logliks;
use crate::model::{ModelSpec, PanelData};
use crate::params::{count_free_parameters, ParameterSet};

/// Relative eigenvalue below which the information is treated as singular.
const SINGULAR_TOL: f64 = 1e-12;

fn log_ratios(p: &[f64], what: &str) -> Result<Vec<f64>> {
    if p.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Boundary(format!("sandwich undefined at boundary: {what} has zero mass")));
    }
    Ok(p[1..].iter().map(|v| (v / p[0]).ln()).collect())
}

fn softmax_anchored(free: &[f64]) -> Vec<f64> {
    let m = free.iter().copied().fold(0.0f64, f64::max);
    let mut out: Vec<f64> = std::iter::once(0.0).chain(free.iter().copied()).map(|v| (v - m).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// `theta*` in the order described in the module docs.
pub fn to_unconstrained(theta: &ParameterSet) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(theta.natural_vector().len());
    v.extend(&theta.beta);
    if let Some(&first) = theta.zeta.first() {
        v.push(first);
    }
    for w in theta.zeta.windows(2) {
        let d = w[1] - w[0];
        if !(d > 0.0) {
            return Err(Error::Boundary("sandwich undefined at boundary: tied state intercepts".into()));
        }
        v.push(d.ln());
    }
    if !(theta.sigma2 > 0.0) {
        return Err(Error::Boundary("sandwich undefined at boundary: zero variance".into()));
    }
    v.push(theta.sigma2.ln());
    v.extend(&theta.gamma);
    v.extend(&theta.xi);
    v.extend(thresholds_to_free(&theta.eta0.alpha)?);
    v.extend(&theta.eta0.psi);
    for row in &theta.eta1.alpha {
        v.extend(thresholds_to_free(row)?);
    }
    v.extend(&theta.eta1.psi);
    v.extend(log_ratios(&theta.tau, "tau")?);
    for row in &theta.pi {
        v.extend(log_ratios(row, "pi")?);
    }
    Ok(v)
}

/// Inverse of [`to_unconstrained`] for the dimensions of `spec`.
pub fn from_unconstrained(v: &[f64], spec: &ModelSpec) -> Result<ParameterSet> {
    let expected = count_free_parameters(spec);
    if v.len() != expected {
        return Err(Error::Dimension(format!("unconstrained vector has {} entries, expected {expected}", v.len())));
    }
    let (g, k, h) = (spec.n_states, spec.n_classes, spec.n_upper);
    let mut it = v.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    let beta = take(spec.p_x);
    let zfree = take(g);
    let mut zeta = Vec::with_capacity(g);
    for (j, z) in zfree.iter().enumerate() {
        zeta.push(if j == 0 { *z } else { zeta[j - 1] + z.exp() });
    }
    let sigma2 = take(1)[0].exp();
    let gamma = take(spec.p_w);
    let xi = take(k);
    let alpha0 = thresholds_from_free(&take(g - 1));
    let psi0 = take(h - 1);
    let alpha1 = (0..g).map(|_| thresholds_from_free(&take(g - 1))).collect();
    let psi1 = take(h - 1);
    let tau = softmax_anchored(&take(h - 1));
    let pi = (0..h).map(|_| softmax_anchored(&take(k - 1))).collect();
    Ok(ParameterSet {
        beta,
        zeta,
        sigma2,
        gamma,
        xi,
        eta0: InitialLogits { alpha: alpha0, psi: psi0 },
        eta1: TransitionLogits { alpha: alpha1, psi: psi1 },
        pi,
        tau,
    })
}

/// Names of the `theta*` coordinates.
pub fn unconstrained_names(spec: &ModelSpec, x_names: &[String], w_names: &[String]) -> Vec<String> {
    let (g, k, h) = (spec.n_states, spec.n_classes, spec.n_upper);
    let label = |names: &[String], j: usize| names.get(j).cloned().unwrap_or_else(|| format!("{}", j + 1));
    let mut out = Vec::new();
    out.extend((0..spec.p_x).map(|j| format!("beta[{}]", label(x_names, j))));
    for s in 1..=g {
        out.push(if s == 1 { "zeta[1]".into() } else { format!("log_dzeta[{s}]") });
    }
    out.push("log_sigma2".into());
    out.extend((0..spec.p_w).map(|j| format!("gamma[{}]", label(w_names, j))));
    out.extend((1..=k).map(|c| format!("xi[{c}]")));
    for t in 2..=g {
        out.push(if t == 2 { "alpha0[2]".into() } else { format!("log_dalpha0[{t}]") });
    }
    out.extend((2..=h).map(|c| format!("psi0[{c}]")));
    for from in 1..=g {
        for t in 2..=g {
            out.push(if t == 2 { format!("alpha1[{from}->2]") } else { format!("log_dalpha1[{from}->{t}]") });
        }
    }
    out.extend((2..=h).map(|c| format!("psi1[{c}]")));
    out.extend((2..=h).map(|c| format!("log_tau[{c}/1]")));
    for c in 1..=h {
        out.extend((2..=k).map(|u| format!("log_pi[{u}/1|{c}]")));
    }
    out
}

/// Analytic Jacobian `d theta / d theta*'`, rows in natural-vector order.
pub fn delta_jacobian(theta_star: &[f64], spec: &ModelSpec) -> Result<DMatrix<f64>> {
    let theta = from_unconstrained(theta_star, spec)?;
    let (g, k, h) = (spec.n_states, spec.n_classes, spec.n_upper);
    let n_nat = theta.natural_vector().len();
    let mut m = DMatrix::zeros(n_nat, theta_star.len());
    let (mut r, mut c) = (0usize, 0usize);
    let identity = |m: &mut DMatrix<f64>, r: &mut usize, c: &mut usize, n: usize| {
        for j in 0..n {
            m[(*r + j, *c + j)] = 1.0;
        }
        *r += n;
        *c += n;
    };
    identity(&mut m, &mut r, &mut c, spec.p_x);
    // zeta_g = u_1 + sum_{j=2..g} exp(u_j)
    for row in 0..g {
        m[(r + row, c)] = 1.0;
        for j in 1..=row {
            m[(r + row, c + j)] = theta_star[c + j].exp();
        }
    }
    r += g;
    c += g;
    m[(r, c)] = theta.sigma2;
    r += 1;
    c += 1;
    identity(&mut m, &mut r, &mut c, spec.p_w);
    identity(&mut m, &mut r, &mut c, k);
    // thresholds: alpha_m = f_1 - sum_{j=2..m} exp(f_j)
    let thresholds = |m: &mut DMatrix<f64>, r: &mut usize, c: &mut usize| {
        let thr = g - 1;
        for row in 0..thr {
            m[(*r + row, *c)] = 1.0;
            for j in 1..=row {
                m[(*r + row, *c + j)] = -theta_star[*c + j].exp();
            }
        }
        *r += thr;
        *c += thr;
    };
    thresholds(&mut m, &mut r, &mut c);
    identity(&mut m, &mut r, &mut c, h - 1);
    for _ in 0..g {
        thresholds(&mut m, &mut r, &mut c);
    }
    identity(&mut m, &mut r, &mut c, h - 1);
    // simplex with the first entry as reference: d p_a / d u_b = p_a (1[a=b] - p_b)
    let simplex = |m: &mut DMatrix<f64>, r: &mut usize, c: &mut usize, p: &[f64]| {
        for a in 0..p.len() {
            for b in 1..p.len() {
                let kron = if a == b { 1.0 } else { 0.0 };
                m[(*r + a, *c + b - 1)] = p[a] * (kron - p[b]);
            }
        }
        *r += p.len();
        *c += p.len() - 1;
    };
    simplex(&mut m, &mut r, &mut c, &theta.tau);
    for row in &theta.pi {
        simplex(&mut m, &mut r, &mut c, row);
    }
    debug_assert_eq!((r, c), (n_nat, theta_star.len()));
    Ok(m)
}

fn step_size(x: f64, power: f64) -> f64 {
    f64::EPSILON.powf(power) * x.abs().max(1.0)
}

fn perturbed_logliks(data: &PanelData, spec: &ModelSpec, base: &[f64], moves: &[(usize, f64)]) -> Result<Vec<f64>> {
    let mut v = base.to_vec();
    for &(j, d) in moves {
        v[j] += d;
    }
    subject_logliks(data, &from_unconstrained(&v, spec)?)
}

/// Per-subject scores `S_i(theta*)` as an `n x p` matrix, by central differences.
pub fn subject_scores(data: &PanelData, theta_star: &[f64], spec: &ModelSpec) -> Result<DMatrix<f64>> {
    let n = data.n_subjects();
    let p = theta_star.len();
    let cols: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut h = step_size(theta_star[j], 1.0 / 3.0);
            for attempt in 0..2 {
                let up = perturbed_logliks(data, spec, theta_star, &[(j, h)]);
                let down = perturbed_logliks(data, spec, theta_star, &[(j, -h)]);
                if let (Ok(up), Ok(down)) = (up, down) {
                    let col: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                    if col.iter().all(|v| v.is_finite()) {
                        return Ok(col);
                    }
                }
                if attempt == 0 {
                    h *= 0.1;
                }
            }
            Err(Error::NonFiniteDerivative { coordinate: j })
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, p, |i, j| cols[j][i]))
}

fn total_loglik(data: &PanelData, spec: &ModelSpec, base: &[f64], moves: &[(usize, f64)]) -> Result<f64> {
    let v: f64 = perturbed_logliks(data, spec, base, moves)?.iter().sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteDerivative { coordinate: moves[0].0 })
    }
}

/// Observed information `J`: minus the numerical Jacobian of the total
/// score, from second central differences of the log-likelihood, symmetrized.
pub fn observed_information(data: &PanelData, theta_star: &[f64], spec: &ModelSpec) -> Result<DMatrix<f64>> {
    let p = theta_star.len();
    let h: Vec<f64> = theta_star.iter().map(|x| step_size(*x, 0.25)).collect();
    let f0 = total_loglik(data, spec, theta_star, &[])?;
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (0..=j).map(move |k| (j, k))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(j, k)| {
            if j == k {
                let up = total_loglik(data, spec, theta_star, &[(j, 2.0 * h[j])])?;
                let down = total_loglik(data, spec, theta_star, &[(j, -2.0 * h[j])])?;
                Ok((up - 2.0 * f0 + down) / (4.0 * h[j] * h[j]))
            } else {
                let pp = total_loglik(data, spec, theta_star, &[(j, h[j]), (k, h[k])])?;
                let pm = total_loglik(data, spec, theta_star, &[(j, h[j]), (k, -h[k])])?;
                let mp = total_loglik(data, spec, theta_star, &[(j, -h[j]), (k, h[k])])?;
                let mm = total_loglik(data, spec, theta_star, &[(j, -h[j]), (k, -h[k])])?;
                Ok((pp - pm - mp + mm) / (4.0 * h[j] * h[k]))
            }
        })
        .collect::<Result<_>>()?;
    let mut jm = DMatrix::zeros(p, p);
    for (&(j, k), v) in pairs.iter().zip(values) {
        jm[(j, k)] = -v;
        jm[(k, j)] = -v;
    }
    Ok(jm)
}

/// Inverse of a symmetric matrix, or its pseudo-inverse when the spectrum
/// is (near-)singular. Returns `(inverse, condition, pseudo)`.
pub fn symmetric_inverse(a: &DMatrix<f64>) -> (DMatrix<f64>, f64, bool) {
    let n = a.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 1.0, false);
    }
    let eig = SymmetricEigen::new(a.clone());
    let abs_max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let abs_min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let condition = if abs_min > 0.0 { abs_max / abs_min } else { f64::INFINITY };
    let cutoff = SINGULAR_TOL * abs_max;
    let pseudo = eig.eigenvalues.iter().any(|v| v.abs() <= cutoff);
    let inv_vals = DVector::from_iterator(n, eig.eigenvalues.iter().map(|v| if v.abs() > cutoff { 1.0 / v } else { 0.0 }));
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    (inv, condition, pseudo)
}

#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub theta_star: Vec<f64>,
    pub star_names: Vec<String>,
    /// Minus the Hessian of the log-likelihood in `theta*`.
    pub information: DMatrix<f64>,
    /// `sum_i S_i S_i'`
    pub k_hat: DMatrix<f64>,
    pub score_total: Vec<f64>,
    pub cov_star: DMatrix<f64>,
    pub theta: Vec<f64>,
    pub names: Vec<String>,
    pub cov_theta: DMatrix<f64>,
    /// `sqrt(diag(cov_theta))`; NaN where the diagonal is negative.
    pub se: Vec<f64>,
    /// Natural-scale parameters whose variance came out negative.
    pub negative_variance: Vec<String>,
    /// Ratio of extreme absolute eigenvalues of the information.
    pub condition: f64,
    pub pseudo_inverse_used: bool,
}

impl CovarianceReport {
    /// `(|total score|, |J|_F)`.
    pub fn score_check(&self) -> (f64, f64) {
        let s = self.score_total.iter().map(|v| v * v).sum::<f64>().sqrt();
        (s, self.information.norm())
    }

    /// SE of the natural parameter called `name`.
    pub fn se_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.se[i])
    }

    /// `name, estimate, se` in natural order.
    pub fn write_se_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["parameter", "estimate", "se"])?;
        for ((n, v), s) in self.names.iter().zip(&self.theta).zip(&self.se) {
            w.write_record([n.clone(), v.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Square covariance matrix of the natural parameters with a name column.
    pub fn write_covariance_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["parameter".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (i, n) in self.names.iter().enumerate() {
            let mut row = vec![n.clone()];
            row.extend((0..self.names.len()).map(|j| self.cov_theta[(i, j)].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `J^-1 K J^-1` in `theta*`, then the delta method back to natural parameters.
pub fn sandwich_covariance(data: &PanelData, theta_hat: &ParameterSet, spec: &ModelSpec) -> Result<CovarianceReport> {
    theta_hat.validate(spec)?;
    spec.check_data(data)?;
    let theta_star = to_unconstrained(theta_hat)?;
    let scores = subject_scores(data, &theta_star, spec)?;
    let k_hat = scores.transpose() * &scores;
    let score_total: Vec<f64> = (0..scores.ncols()).map(|j| scores.column(j).sum()).collect();
    let information = observed_information(data, &theta_star, spec)?;
    let (j_inv, condition, pseudo) = symmetric_inverse(&information);
    if pseudo {
        log::warn!("observed information is singular (condition {condition:.3e}); using the pseudo-inverse");
    }
    let mut cov_star = &j_inv * &k_hat * &j_inv;
    cov_star = (&cov_star + cov_star.transpose()) * 0.5;
    let m = delta_jacobian(&theta_star, spec)?;
    let mut cov_theta = &m * &cov_star * m.transpose();
    cov_theta = (&cov_theta + cov_theta.transpose()) * 0.5;
    let names: Vec<String> = theta_hat.names(&data.x_names, &data.w_names).into_iter().map(|n| n.name).collect();
    let mut negative_variance = Vec::new();
    let se = (0..names.len())
        .map(|i| {
            let v = cov_theta[(i, i)];
            if v < 0.0 {
                negative_variance.push(names[i].clone());
                f64::NAN
            } else {
                v.sqrt()
            }
        })
        .collect();
    Ok(CovarianceReport {
        star_names: unconstrained_names(spec, &data.x_names, &data.w_names),
        theta_star,
        information,
        k_hat,
        score_total,
        cov_star,
        theta: theta_hat.natural_vector(),
        names,
        cov_theta,
        se,
        negative_variance,
        condition,
        pseudo_inverse_used: pseudo,
    })
}
