//! The four M-step blocks. Each one returns new values for its own block and
//! leaves the rest of the parameter set untouched.

use nalgebra::{DMatrix, DVector};

use super::estep::Posteriors;
use crate::error::{Error, Result};
use crate::latent::{ordinal_loglik_grad, thresholds_from_free, thresholds_to_free, InitialLogits, TransitionLogits};
use crate::likelihood::indicator_logprob;
use crate::math::{dot, logistic};
use crate::model::PanelData;
use crate::optim::maximize_bfgs;
use crate::params::ParameterSet;

/// Denominator below which an upper-level class is considered empty.
pub const EMPTY_CLASS: f64 = 1e-12;
/// Bound on `|xi_k|` in the dropout block.
pub const XI_CAP: f64 = 30.0;

const CHAIN_INNER_ITER: usize = 200;
const CHAIN_GTOL: f64 = 1e-9;
const ALPHA_BOX: f64 = 40.0;
const LOG_GAP_BOX: (f64, f64) = (-20.0, 6.0);
const PSI_BOX: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureStep {
    pub tau: Vec<f64>,
    pub pi: Vec<Vec<f64>>,
    /// Upper-level classes whose posterior mass vanished; their `pi` row is
    /// set to uniform.
    pub dead: Vec<usize>,
}

/// Closed-form updates of `tau` and `pi`.
pub fn m_step_mixture(post: &Posteriors) -> MixtureStep {
    let (n, k_n, h_n) = (post.n_subjects(), post.n_classes(), post.n_upper());
    let mut tau = vec![0.0; h_n];
    let mut num = vec![vec![0.0; k_n]; h_n];
    for i in 0..n {
        for h in 0..h_n {
            let e = post.e(i, h);
            tau[h] += e;
            for k in 0..k_n {
                num[h][k] += e * post.d_cond(i, h, k);
            }
        }
    }
    let mut dead = Vec::new();
    let pi = num
        .into_iter()
        .enumerate()
        .map(|(h, row)| {
            let den: f64 = row.iter().sum();
            if den < EMPTY_CLASS {
                dead.push(h);
                vec![1.0 / k_n as f64; k_n]
            } else {
                row.iter().map(|v| v / den).collect()
            }
        })
        .collect();
    tau.iter_mut().for_each(|t| *t /= n as f64);
    MixtureStep { tau, pi, dead }
}

/// Expected transition counts: `initial[h][g]` and `transition[h][from][to]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainCounts {
    pub initial: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
}

pub fn chain_counts(post: &Posteriors) -> ChainCounts {
    let (g_n, h_n) = (post.n_states(), post.n_upper());
    let mut initial = vec![vec![0.0; g_n]; h_n];
    let mut transition = vec![vec![vec![0.0; g_n]; g_n]; h_n];
    for i in 0..post.n_subjects() {
        for h in 0..h_n {
            let e = post.e(i, h);
            for g in 0..g_n {
                initial[h][g] += e * post.a_cond(i, h, 0, g);
            }
            for t in 1..post.n_obs(i) {
                for g in 0..g_n {
                    for g2 in 0..g_n {
                        transition[h][g][g2] += e * post.a_trans(i, h, t, g, g2);
                    }
                }
            }
        }
    }
    ChainCounts { initial, transition }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainStep {
    pub eta0: InitialLogits,
    pub eta1: TransitionLogits,
    /// Inner objective after each accepted step, initial and transition parts.
    pub trace0: Vec<f64>,
    pub trace1: Vec<f64>,
    pub converged: bool,
}

/// Ascent on the expected chain terms in decrement coordinates.
pub fn m_step_chain(post: &Posteriors, params: &ParameterSet) -> Result<ChainStep> {
    let counts = chain_counts(post);
    let rows0: Vec<Vec<Vec<f64>>> = counts.initial.into_iter().map(|r| vec![r]).collect();
    let (alpha0, psi0, trace0, ok0) =
        maximize_ordinal(&rows0, std::slice::from_ref(&params.eta0.alpha), &params.eta0.psi)?;
    let (alpha1, psi1, trace1, ok1) = maximize_ordinal(&counts.transition, &params.eta1.alpha, &params.eta1.psi)?;
    Ok(ChainStep {
        eta0: InitialLogits { alpha: alpha0.into_iter().next().unwrap(), psi: psi0 },
        eta1: TransitionLogits { alpha: alpha1, psi: psi1 },
        trace0,
        trace1,
        converged: ok0 && ok1,
    })
}

/// Packs `[free(row_0), ..., free(row_{R-1}), psi]` and maps back with the box applied.
struct OrdinalLayout {
    n_rows: usize,
    thr: usize,
    n_psi: usize,
}

impl OrdinalLayout {
    fn boxed(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut out = x.to_vec();
        let mut active = vec![1.0; x.len()];
        for r in 0..self.n_rows {
            for m in 0..self.thr {
                let j = r * self.thr + m;
                let (lo, hi) = if m == 0 { (-ALPHA_BOX, ALPHA_BOX) } else { LOG_GAP_BOX };
                if x[j] < lo || x[j] > hi {
                    out[j] = x[j].clamp(lo, hi);
                    active[j] = 0.0;
                }
            }
        }
        for j in self.n_rows * self.thr..x.len() {
            if x[j].abs() > PSI_BOX {
                out[j] = x[j].clamp(-PSI_BOX, PSI_BOX);
                active[j] = 0.0;
            }
        }
        (out, active)
    }
}

type OrdinalFit = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, bool);

/// Maximizes `sum_h sum_r sum_g counts[h][r][g] log p_g(alpha_r + psi_h)`.
fn maximize_ordinal(counts: &[Vec<Vec<f64>>], alpha: &[Vec<f64>], psi: &[f64]) -> Result<OrdinalFit> {
    let n_rows = alpha.len();
    let thr = alpha.first().map_or(0, Vec::len);
    let layout = OrdinalLayout { n_rows, thr, n_psi: psi.len() };
    if thr == 0 {
        return Ok((alpha.to_vec(), psi.to_vec(), vec![0.0], true));
    }
    let mut x0 = Vec::with_capacity(n_rows * thr + layout.n_psi);
    for row in alpha {
        x0.extend(thresholds_to_free(row)?);
    }
    x0.extend(psi);
    let (x0, _) = layout.boxed(&x0);

    let mut lambda = vec![0.0; thr];
    let mut g_lambda = vec![0.0; thr];
    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let (xb, active) = layout.boxed(x);
        grad.fill(0.0);
        let mut value = 0.0;
        for r in 0..n_rows {
            let free = &xb[r * thr..(r + 1) * thr];
            let a = thresholds_from_free(free);
            for (h, per_h) in counts.iter().enumerate() {
                let shift = if h == 0 { 0.0 } else { xb[n_rows * thr + h - 1] };
                for m in 0..thr {
                    lambda[m] = a[m] + shift;
                }
                value += ordinal_loglik_grad(&per_h[r], &lambda, &mut g_lambda);
                // chain rule through alpha_m = f_1 - sum_{j<=m} exp(f_j)
                let mut tail = 0.0;
                for m in (0..thr).rev() {
                    tail += g_lambda[m];
                    if m == 0 {
                        grad[r * thr] += tail;
                    } else {
                        grad[r * thr + m] -= free[m].exp() * tail;
                    }
                }
                if h > 0 {
                    grad[n_rows * thr + h - 1] += g_lambda.iter().sum::<f64>();
                }
            }
        }
        for (g, a) in grad.iter_mut().zip(&active) {
            *g *= a;
        }
        value
    };
    let best = maximize_bfgs(objective, &x0, CHAIN_INNER_ITER, CHAIN_GTOL);
    let (xb, _) = layout.boxed(&best.x);
    let alpha_new = (0..n_rows).map(|r| thresholds_from_free(&xb[r * thr..(r + 1) * thr])).collect();
    let psi_new = xb[n_rows * thr..].to_vec();
    Ok((alpha_new, psi_new, best.trace, best.converged))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalStep {
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub sigma2: f64,
    /// True when the unconstrained solution violated the ordering of `zeta`.
    pub ordering_active: bool,
}

/// Weighted sufficient statistics of the stacked `(i, t, g)` regression.
struct LongStats {
    s_g: Vec<f64>,
    s_gy: Vec<f64>,
    s_gx: Vec<Vec<f64>>,
    s_xx: DMatrix<f64>,
    s_xy: DVector<f64>,
}

fn long_stats(data: &PanelData, post: &Posteriors) -> LongStats {
    let (g_n, p) = (post.n_states(), data.p_x());
    let mut st = LongStats {
        s_g: vec![0.0; g_n],
        s_gy: vec![0.0; g_n],
        s_gx: vec![vec![0.0; p]; g_n],
        s_xx: DMatrix::zeros(p, p),
        s_xy: DVector::zeros(p),
    };
    for (i, s) in data.subjects.iter().enumerate() {
        let a = post.a_marg_subject(i);
        for (t, (&y, x)) in s.y.iter().zip(&s.x).enumerate() {
            for g in 0..g_n {
                let w = a[t * g_n + g];
                st.s_g[g] += w;
                st.s_gy[g] += w * y;
                for j in 0..p {
                    st.s_gx[g][j] += w * x[j];
                }
            }
            for j in 0..p {
                st.s_xy[j] += x[j] * y;
                for l in 0..p {
                    st.s_xx[(j, l)] += x[j] * x[l];
                }
            }
        }
    }
    st
}

/// Columns whose Gram-matrix pivot vanishes when added in order.
pub(crate) fn collinear_columns(gram: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let m = gram.nrows();
    let mut kept: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for j in 0..m {
        let mut trial = kept.clone();
        trial.push(j);
        let sub = DMatrix::from_fn(trial.len(), trial.len(), |a, b| gram[(trial[a], trial[b])]);
        let scale = gram[(j, j)].abs().max(f64::MIN_POSITIVE);
        let ok = gram[(j, j)] > 0.0
            && sub.clone().cholesky().is_some_and(|c| {
                let d = c.l()[(trial.len() - 1, trial.len() - 1)];
                d * d > 1e-10 * scale
            });
        if ok {
            kept.push(j);
        } else {
            out.push(names[j].clone());
        }
    }
    out
}

fn design_names(g_n: usize, x_names: &[String]) -> Vec<String> {
    (1..=g_n).map(|g| format!("state{g}")).chain(x_names.iter().cloned()).collect()
}

/// Weighted least squares for `(zeta, beta)` with nondecreasing `zeta`,
/// then `sigma2` as the weighted mean squared residual.
pub fn m_step_longitudinal(data: &PanelData, post: &Posteriors, params: &ParameterSet) -> Result<LongitudinalStep> {
    let (g_n, p) = (post.n_states(), data.p_x());
    let st = long_stats(data, post);
    let m = g_n + p;
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for g in 0..g_n {
        a[(g, g)] = st.s_g[g];
        b[g] = st.s_gy[g];
        for j in 0..p {
            a[(g, g_n + j)] = st.s_gx[g][j];
            a[(g_n + j, g)] = st.s_gx[g][j];
        }
    }
    a.view_mut((g_n, g_n), (p, p)).copy_from(&st.s_xx);
    b.rows_mut(g_n, p).copy_from(&st.s_xy);

    let names = design_names(g_n, &data.x_names);
    let chol = match a.clone().cholesky() {
        Some(c) => c,
        None => return Err(Error::SingularDesign { columns: collinear_columns(&a, &names) }),
    };
    let sol = chol.solve(&b);
    let mut zeta: Vec<f64> = sol.rows(0, g_n).iter().copied().collect();
    let mut beta: Vec<f64> = sol.rows(g_n, p).iter().copied().collect();
    let ordering_active = zeta.windows(2).any(|w| w[0] > w[1]);
    if ordering_active {
        (zeta, beta) = ordered_block_descent(&st, &params.zeta, &params.beta)?;
    }

    let mut sse = 0.0;
    let mut weight = 0.0;
    for (i, s) in data.subjects.iter().enumerate() {
        let a = post.a_marg_subject(i);
        for (t, (&y, x)) in s.y.iter().zip(&s.x).enumerate() {
            let base = y - dot(x, &beta);
            for g in 0..g_n {
                let w = a[t * g_n + g];
                let e = base - zeta[g];
                sse += w * e * e;
                weight += w;
            }
        }
    }
    let sigma2 = sse / weight;
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Boundary(format!("residual variance collapsed to {sigma2}")));
    }
    Ok(LongitudinalStep { beta, zeta, sigma2, ordering_active })
}

/// Alternates a weighted isotonic fit of `zeta` given `beta` with the
/// least-squares `beta` given `zeta`, from a feasible start.
fn ordered_block_descent(st: &LongStats, zeta0: &[f64], beta0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (g_n, p) = (st.s_g.len(), st.s_xy.len());
    let mut zeta = zeta0.to_vec();
    let mut beta = beta0.to_vec();
    let chol = if p > 0 {
        Some(st.s_xx.clone().cholesky().ok_or_else(|| Error::SingularDesign { columns: vec![] })?)
    } else {
        None
    };
    for _ in 0..10_000 {
        let targets: Vec<f64> = (0..g_n)
            .map(|g| if st.s_g[g] > 0.0 { (st.s_gy[g] - dot(&st.s_gx[g], &beta)) / st.s_g[g] } else { zeta[g] })
            .collect();
        let new_zeta = weighted_isotonic(&targets, &st.s_g);
        let mut new_beta = beta.clone();
        if let Some(c) = &chol {
            let mut rhs = st.s_xy.clone();
            for g in 0..g_n {
                for j in 0..p {
                    rhs[j] -= new_zeta[g] * st.s_gx[g][j];
                }
            }
            new_beta = c.solve(&rhs).iter().copied().collect();
        }
        let change = new_zeta
            .iter()
            .zip(&zeta)
            .chain(new_beta.iter().zip(&beta))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        zeta = new_zeta;
        beta = new_beta;
        if change < 1e-13 * (1.0 + zeta.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            break;
        }
    }
    Ok((zeta, beta))
}

/// Pool-adjacent-violators: nondecreasing fit minimizing weighted squared error.
pub fn weighted_isotonic(y: &[f64], w: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &wt) in y.iter().zip(w) {
        let wt = wt.max(1e-300);
        blocks.push((v, wt, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (v2, w2, n2) = blocks.pop().unwrap();
            let last = blocks.last_mut().unwrap();
            let wsum = last.1 + w2;
            last.0 = (last.0 * last.1 + v2 * w2) / wsum;
            last.1 = wsum;
            last.2 += n2;
        }
    }
    blocks.iter().flat_map(|&(v, _, n)| std::iter::repeat_n(v, n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutStep {
    pub gamma: Vec<f64>,
    pub xi: Vec<f64>,
    /// Some `xi_k` hit the cap (quasi-separation).
    pub capped: bool,
    pub iterations: usize,
}

/// Weighted logistic fit of the stacked `(i, t, k)` indicator rows with class
/// weights `weights[i][k]`, over each subject's `T_i*` indicators.
pub fn fit_weighted_logistic<W>(data: &PanelData, weights: W, xi0: &[f64], gamma0: &[f64]) -> Result<DropoutStep>
where
    W: Fn(usize) -> Vec<f64>,
{
    let k_n = xi0.len();
    let p = gamma0.len();
    let m = k_n + p;
    let w_all: Vec<Vec<f64>> = (0..data.n_subjects()).map(&weights).collect();
    let objective = |theta: &[f64]| -> f64 {
        let (xi, gamma) = theta.split_at(k_n);
        let mut f = 0.0;
        for (s, wk) in data.subjects.iter().zip(&w_all) {
            for (&r, w) in s.r.iter().zip(&s.w) {
                let lin = dot(w, gamma);
                for k in 0..k_n {
                    if wk[k] != 0.0 {
                        f += wk[k] * indicator_logprob(r, xi[k] + lin);
                    }
                }
            }
        }
        f
    };

    let mut theta: Vec<f64> = xi0.iter().chain(gamma0).copied().collect();
    for v in &mut theta[..k_n] {
        *v = v.clamp(-XI_CAP, XI_CAP);
    }
    let mut value = objective(&theta);
    let mut capped = false;
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        let (xi, gamma) = theta.split_at(k_n);
        let mut grad = DVector::<f64>::zeros(m);
        let mut info = DMatrix::<f64>::zeros(m, m);
        for (s, wk) in data.subjects.iter().zip(&w_all) {
            for (&r, w) in s.r.iter().zip(&s.w) {
                let lin = dot(w, gamma);
                let stay = if r == 0 { 1.0 } else { 0.0 };
                for k in 0..k_n {
                    let wt = wk[k];
                    if wt == 0.0 {
                        continue;
                    }
                    let pr = logistic(xi[k] + lin);
                    let resid = wt * (stay - pr);
                    let v = wt * pr * (1.0 - pr);
                    grad[k] += resid;
                    info[(k, k)] += v;
                    for j in 0..p {
                        grad[k_n + j] += resid * w[j];
                        info[(k, k_n + j)] += v * w[j];
                        for l in 0..=j {
                            info[(k_n + j, k_n + l)] += v * w[j] * w[l];
                        }
                    }
                }
            }
        }
        for j in 0..p {
            for k in 0..k_n {
                info[(k_n + j, k)] = info[(k, k_n + j)];
            }
            for l in 0..j {
                info[(k_n + l, k_n + j)] = info[(k_n + j, k_n + l)];
            }
        }
        let step = newton_direction(&info, &grad);
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial = theta.clone();
        for _ in 0..60 {
            for j in 0..m {
                trial[j] = theta[j] + t * step[j];
            }
            for v in &mut trial[..k_n] {
                if v.abs() > XI_CAP {
                    *v = v.clamp(-XI_CAP, XI_CAP);
                }
            }
            let f = objective(&trial);
            if f >= value {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        let moved = trial.iter().zip(&theta).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let gain = objective(&trial) - value;
        theta = trial;
        value += gain;
        if moved < 1e-10 || gain <= 1e-14 * value.abs() {
            break;
        }
    }
    if theta[..k_n].iter().any(|v| v.abs() >= XI_CAP) {
        capped = true;
    }
    let (xi, gamma) = theta.split_at(k_n);
    Ok(DropoutStep { gamma: gamma.to_vec(), xi: xi.to_vec(), capped, iterations })
}

/// Newton direction, falling back to Levenberg-Marquardt damping when the
/// information matrix is not positive definite.
fn newton_direction(info: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    if let Some(c) = info.clone().cholesky() {
        return c.solve(grad);
    }
    let scale = info.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut lambda = 1e-8 * scale;
    loop {
        let damped = info + DMatrix::identity(info.nrows(), info.ncols()) * lambda;
        if let Some(c) = damped.cholesky() {
            return c.solve(grad);
        }
        lambda *= 10.0;
    }
}

/// Dropout block update with weights `d_{ik}`.
pub fn m_step_dropout(data: &PanelData, post: &Posteriors, params: &ParameterSet) -> Result<DropoutStep> {
    fit_weighted_logistic(data, |i| post.d_marg_subject(i).to_vec(), &params.xi, &params.gamma)
}
