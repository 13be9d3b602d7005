//! Independent oracles and simulation designs shared by the integration
//! tests and the acceptance harness.
#![allow(dead_code)]

use hmmdrop::likelihood::{dropout_logdensity, emission_logdensity};
use hmmdrop::math::log_sum_exp;
use hmmdrop::simulate::{simulate_panel, CovariateGenerator};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use hmmdrop::{InitialLogits, ModelSpec, PanelData, ParameterSet, SubjectRecord, TransitionLogits};

/// Posterior blocks of one subject obtained by enumerating every
/// `(h, z-path, k)` combination.
pub struct BrutePosterior {
    pub e: Vec<f64>,
    pub d_cond: Vec<Vec<f64>>,
    pub d_marg: Vec<f64>,
    pub a_cond: Vec<Vec<Vec<f64>>>,
    pub a_marg: Vec<Vec<f64>>,
    /// `[h][t][g][g2]` for `t >= 1`; index 0 unused.
    pub a_trans: Vec<Vec<Vec<Vec<f64>>>>,
}

fn paths(g_n: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..g_n).map(move |g| {
                    let mut q = p.clone();
                    q.push(g);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn brute_posterior(s: &SubjectRecord, params: &ParameterSet) -> BrutePosterior {
    let law = params.chain_law().unwrap();
    let (g_n, k_n, h_n) = (params.zeta.len(), params.xi.len(), params.tau.len());
    let n_t = s.y.len();
    let all = paths(g_n, n_t);
    let mut terms = Vec::new();
    let mut labels = Vec::new();
    for h in 0..h_n {
        for (pi, z) in all.iter().enumerate() {
            let mut lz = law.delta[h][z[0]].ln();
            for t in 1..n_t {
                lz += law.q[h][z[t - 1]][z[t]].ln();
            }
            for t in 0..n_t {
                lz += emission_logdensity(s.y[t], z[t], params, &s.x[t]);
            }
            for k in 0..k_n {
                let ld: f64 = s.r.iter().zip(&s.w).map(|(&r, w)| dropout_logdensity(r, k, params, w)).sum();
                terms.push(params.tau[h].ln() + lz + params.pi[h][k].ln() + ld);
                labels.push((h, pi, k));
            }
        }
    }
    let total = log_sum_exp(&terms);
    let mut out = BrutePosterior {
        e: vec![0.0; h_n],
        d_cond: vec![vec![0.0; k_n]; h_n],
        d_marg: vec![0.0; k_n],
        a_cond: vec![vec![vec![0.0; g_n]; n_t]; h_n],
        a_marg: vec![vec![0.0; g_n]; n_t],
        a_trans: vec![vec![vec![vec![0.0; g_n]; g_n]; n_t]; h_n],
    };
    for (lp, &(h, pi, k)) in terms.iter().zip(&labels) {
        let p = (lp - total).exp();
        let z = &all[pi];
        out.e[h] += p;
        out.d_cond[h][k] += p;
        out.d_marg[k] += p;
        for t in 0..n_t {
            out.a_cond[h][t][z[t]] += p;
            out.a_marg[t][z[t]] += p;
            if t > 0 {
                out.a_trans[h][t][z[t - 1]][z[t]] += p;
            }
        }
    }
    for h in 0..h_n {
        let e = out.e[h];
        out.d_cond[h].iter_mut().for_each(|v| *v /= e);
        for t in 0..n_t {
            out.a_cond[h][t].iter_mut().for_each(|v| *v /= e);
            for row in &mut out.a_trans[h][t] {
                row.iter_mut().for_each(|v| *v /= e);
            }
        }
    }
    out
}

/// Largest absolute gap between the E-step output and the brute-force oracle.
pub fn posterior_gap(data: &PanelData, params: &ParameterSet, post: &hmmdrop::Posteriors) -> f64 {
    let mut worst = 0.0f64;
    let mut upd = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for (i, s) in data.subjects.iter().enumerate() {
        let bp = brute_posterior(s, params);
        let (g_n, k_n, h_n) = (params.zeta.len(), params.xi.len(), params.tau.len());
        for h in 0..h_n {
            upd(post.e(i, h), bp.e[h]);
            for k in 0..k_n {
                upd(post.d_cond(i, h, k), bp.d_cond[h][k]);
            }
            for t in 0..s.y.len() {
                for g in 0..g_n {
                    upd(post.a_cond(i, h, t, g), bp.a_cond[h][t][g]);
                    if t > 0 {
                        for g2 in 0..g_n {
                            upd(post.a_trans(i, h, t, g, g2), bp.a_trans[h][t][g][g2]);
                        }
                    }
                }
            }
        }
        for k in 0..k_n {
            upd(post.d_marg(i, k), bp.d_marg[k]);
        }
        for t in 0..s.y.len() {
            for g in 0..g_n {
                upd(post.a_marg(i, t, g), bp.a_marg[t][g]);
            }
        }
    }
    worst
}

/// Covariates of the recovery designs: the response equation gets the wave
/// offset and a subject-level binary column, the dropout equation a
/// standard normal drawn afresh at every wave.
///
/// The dropout equation leaves out the wave offset on purpose. Wave 1 is
/// always observed yet still enters the likelihood, so a time slope there
/// would absorb the forced first-wave stays.
pub struct RecoveryCovariates;

impl CovariateGenerator for RecoveryCovariates {
    fn x_names(&self) -> Vec<String> {
        vec!["time".into(), "b1".into()]
    }

    fn w_names(&self) -> Vec<String> {
        vec!["z1".into()]
    }

    fn draw(&self, rng: &mut ChaCha8Rng, n_waves: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let b = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let x = (0..n_waves).map(|t| vec![t as f64, b]).collect();
        let w = (0..n_waves).map(|_| vec![rng.sample::<f64, _>(StandardNormal)]).collect();
        (x, w)
    }
}

/// Interior truth with separated intercepts and contrasting dropout-class rows.
pub fn recovery_truth() -> (ParameterSet, ModelSpec) {
    let spec = ModelSpec::new(2, 2, 2, 2, 1);
    let params = ParameterSet {
        beta: vec![0.2, -0.5],
        zeta: vec![-1.0, 1.5],
        sigma2: 0.25,
        gamma: vec![0.5],
        xi: vec![1.5, 4.0],
        eta0: InitialLogits { alpha: vec![-0.5], psi: vec![1.5] },
        eta1: TransitionLogits { alpha: vec![vec![-2.0], vec![2.0]], psi: vec![0.8] },
        pi: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
        tau: vec![0.6, 0.4],
    };
    (params, spec)
}

pub fn simulate_design(params: &ParameterSet, spec: &ModelSpec, n: usize, t: usize, seed: u64) -> PanelData {
    simulate_panel(params, spec, n, t, &RecoveryCovariates, seed).unwrap().0
}

/// Published criterion values of a 48-cell grid in long form `(G, K, H, BIC)`.
pub fn reference_grid_cells() -> Vec<(usize, usize, usize, f64)> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/reference_grid_bic.csv");
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap())
        })
        .collect()
}
