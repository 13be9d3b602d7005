//! Starting values for EM.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::mstep::{collinear_columns, fit_weighted_logistic};
use crate::error::{Error, Result};
use crate::latent::{thresholds_from_free, thresholds_to_free, InitialLogits, TransitionLogits};
use crate::math::{dot, quantile_sorted};
use crate::model::{ModelSpec, PanelData};
use crate::params::ParameterSet;

const DIRICHLET_CONCENTRATION: f64 = 20.0;

/// Data summaries shared by all starts.
#[derive(Debug, Clone)]
pub struct InitBase {
    pub beta: Vec<f64>,
    /// Sorted residuals `y - x'beta` (intercept included).
    pub resid: Vec<f64>,
    pub resid_sd: f64,
    pub xi0: f64,
    pub gamma: Vec<f64>,
}

impl InitBase {
    /// Pooled least squares of `y` on `[1, x]` and a pooled logistic fit of
    /// the indicators.
    pub fn from_data(data: &PanelData) -> Result<Self> {
        let p = data.p_x();
        let m = p + 1;
        let mut gram = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        let mut row = vec![0.0; m];
        for s in &data.subjects {
            for (&y, x) in s.y.iter().zip(&s.x) {
                row[0] = 1.0;
                row[1..].copy_from_slice(x);
                for j in 0..m {
                    rhs[j] += row[j] * y;
                    for l in 0..m {
                        gram[(j, l)] += row[j] * row[l];
                    }
                }
            }
        }
        let coef = match gram.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => {
                let names: Vec<String> = std::iter::once("intercept".to_string()).chain(data.x_names.iter().cloned()).collect();
                return Err(Error::SingularDesign { columns: collinear_columns(&gram, &names) });
            }
        };
        let beta: Vec<f64> = coef.iter().skip(1).copied().collect();
        let mut resid: Vec<f64> = data
            .subjects
            .iter()
            .flat_map(|s| s.y.iter().zip(&s.x).map(|(y, x)| y - dot(x, &beta)))
            .collect();
        resid.sort_by(f64::total_cmp);
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / resid.len() as f64;
        let drop = fit_weighted_logistic(data, |_| vec![1.0], &[0.0], &vec![0.0; data.p_w()])?;
        Ok(Self { beta, resid, resid_sd: var.sqrt().max(1e-8), xi0: drop.xi[0], gamma: drop.gamma })
    }
}

fn normal(rng: &mut impl Rng, sd: f64) -> f64 {
    sd * rng.sample::<f64, _>(StandardNormal)
}

fn dirichlet(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let gamma = Gamma::new(DIRICHLET_CONCENTRATION, 1.0).expect("positive shape");
    let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|d| d / total).collect()
}

/// Uniform-probability thresholds `ln((G-g+1)/(g-1))` jittered in free coordinates.
fn near_uniform_thresholds(rng: &mut impl Rng, n_states: usize) -> Vec<f64> {
    let base: Vec<f64> = (2..=n_states)
        .map(|g| ((n_states - g + 1) as f64 / (g - 1) as f64).ln())
        .collect();
    if base.is_empty() {
        return base;
    }
    let mut free = thresholds_to_free(&base).expect("uniform thresholds are decreasing");
    free.iter_mut().for_each(|f| *f += normal(rng, 0.2));
    thresholds_from_free(&free)
}

/// One jittered starting point.
pub fn initial_parameters(base: &InitBase, spec: &ModelSpec, rng: &mut impl Rng) -> ParameterSet {
    let (g_n, k_n, h_n) = (spec.n_states, spec.n_classes, spec.n_upper);
    let sd = base.resid_sd;

    let mut zeta: Vec<f64> = (0..g_n)
        .map(|g| quantile_sorted(&base.resid, (g as f64 + 0.5) / g_n as f64) + normal(rng, 0.1 * sd))
        .collect();
    zeta.sort_by(f64::total_cmp);
    for g in 1..g_n {
        if zeta[g] <= zeta[g - 1] {
            zeta[g] = zeta[g - 1] + 1e-3 * sd;
        }
    }
    // pooled within-group variance around the nearest intercept
    let within = base
        .resid
        .iter()
        .map(|r| zeta.iter().map(|z| (r - z).powi(2)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / base.resid.len() as f64;
    let sigma2 = within.max(1e-3 * sd * sd);

    let mut xi: Vec<f64> = (0..k_n)
        .map(|k| {
            let anchor = if k_n == 1 { 0.0 } else { -2.0 + 4.0 * k as f64 / (k_n - 1) as f64 };
            base.xi0 + anchor + normal(rng, 0.3)
        })
        .collect();
    xi.sort_by(f64::total_cmp);

    let eta0 = InitialLogits {
        alpha: near_uniform_thresholds(rng, g_n),
        psi: (1..h_n).map(|_| normal(rng, 0.3)).collect(),
    };
    let eta1 = TransitionLogits {
        alpha: (0..g_n).map(|_| near_uniform_thresholds(rng, g_n)).collect(),
        psi: (1..h_n).map(|_| normal(rng, 0.3)).collect(),
    };
    let pi = (0..h_n).map(|_| dirichlet(rng, k_n)).collect();
    let tau = dirichlet(rng, h_n);
    ParameterSet { beta: base.beta.clone(), zeta, sigma2, gamma: base.gamma.clone(), xi, eta0, eta1, pi, tau }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_instance, InstanceShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn starts_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for g in 1..=4 {
            let shape = InstanceShape { n: 5, t: 4, g, k: 3, h: 2, p_x: 1, p_w: 1 };
            let (data, spec, _) = random_instance(&mut rng, shape);
            let base = InitBase::from_data(&data).unwrap();
            for _ in 0..5 {
                let p = initial_parameters(&base, &spec, &mut rng);
                p.validate(&spec).unwrap();
            }
        }
    }
}
