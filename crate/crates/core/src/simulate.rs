//! Synthetic panels with ground-truth latent labels.

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{thresholds_from_free, InitialLogits, TransitionLogits};
use crate::math::{dot, logistic};
use crate::model::{ModelSpec, PanelData, SubjectRecord};
use crate::params::ParameterSet;

/// Latent labels of one simulated subject (0-based classes and states).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub v: usize,
    pub u: usize,
    pub z: Vec<usize>,
    /// First missed wave (1-based), `None` for completers.
    pub dropout_wave: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub subjects: Vec<SubjectTruth>,
    pub params: ParameterSet,
    pub seed: u64,
}

/// Produces the covariate rows of one subject for all planned waves.
pub trait CovariateGenerator: Sync {
    fn x_names(&self) -> Vec<String>;
    fn w_names(&self) -> Vec<String>;
    /// `(x rows, w rows)`, each with `n_waves` rows.
    fn draw(&self, rng: &mut ChaCha8Rng, n_waves: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>);
}

/// Wave offset `0..T-1` as "time" plus binary columns drawn once per
/// subject, shared by both equations.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardCovariates {
    pub time: bool,
    /// Success probability of each binary column.
    pub binary: Vec<f64>,
}

impl StandardCovariates {
    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.time {
            v.push("time".to_string());
        }
        v.extend((1..=self.binary.len()).map(|j| format!("b{j}")));
        v
    }

    pub fn width(&self) -> usize {
        self.time as usize + self.binary.len()
    }
}

impl CovariateGenerator for StandardCovariates {
    fn x_names(&self) -> Vec<String> {
        self.names()
    }

    fn w_names(&self) -> Vec<String> {
        self.names()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, n_waves: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let fixed: Vec<f64> = self.binary.iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
        let rows: Vec<Vec<f64>> = (0..n_waves)
            .map(|t| {
                let mut row = Vec::with_capacity(self.width());
                if self.time {
                    row.push(t as f64);
                }
                row.extend(&fixed);
                row
            })
            .collect();
        (rows.clone(), rows)
    }
}

fn draw_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws a panel of `n` subjects over `n_waves` planned waves.
///
/// Wave 1 is always observed. At each later wave the subject stays with
/// probability `logistic(xi_u + w'gamma)`; the first failure ends the
/// sequence and is recorded as the subject's last indicator.
pub fn simulate_panel(
    params: &ParameterSet,
    spec: &ModelSpec,
    n: usize,
    n_waves: usize,
    covariates: &dyn CovariateGenerator,
    seed: u64,
) -> Result<(PanelData, SimTruth)> {
    params.validate(spec)?;
    let x_names = covariates.x_names();
    let w_names = covariates.w_names();
    if x_names.len() != spec.p_x || w_names.len() != spec.p_w {
        return Err(Error::Dimension("covariate generator does not match p_x / p_w".into()));
    }
    if n_waves == 0 {
        return Err(Error::InvalidSpec("at least one wave is required".into()));
    }
    let law = params.chain_law()?;
    let noise = Normal::new(0.0, params.sigma2.sqrt()).map_err(|e| Error::InvalidParams(e.to_string()))?;

    let mut subjects = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let id = format!("{}", i + 1);

        let v = draw_index(&mut rng, &params.tau);
        let u = draw_index(&mut rng, &params.pi[v]);
        let mut z = Vec::with_capacity(n_waves);
        z.push(draw_index(&mut rng, &law.delta[v]));
        for t in 1..n_waves {
            let prev = z[t - 1];
            z.push(draw_index(&mut rng, &law.q[v][prev]));
        }
        let (x_all, w_all) = covariates.draw(&mut rng, n_waves);

        let mut n_obs = n_waves;
        for t in 1..n_waves {
            let stay = logistic(params.xi[u] + dot(&w_all[t], &params.gamma));
            if rng.random::<f64>() >= stay {
                n_obs = t;
                break;
            }
        }
        let n_ind = (n_obs + 1).min(n_waves);
        let y: Vec<f64> = (0..n_obs)
            .map(|t| params.zeta[z[t]] + dot(&x_all[t], &params.beta) + noise.sample(&mut rng))
            .collect();
        let mut r = vec![0u8; n_ind];
        if n_obs < n_waves {
            r[n_obs] = 1;
        }
        z.truncate(n_obs);
        subjects.push(SubjectRecord {
            id: id.clone(),
            y,
            r,
            x: x_all[..n_obs].to_vec(),
            w: w_all[..n_ind].to_vec(),
        });
        truth.push(SubjectTruth {
            id,
            v,
            u,
            z,
            dropout_wave: (n_obs < n_waves).then_some(n_obs + 1),
        });
    }
    Ok((
        PanelData { n_waves, x_names, w_names, subjects },
        SimTruth { subjects: truth, params: params.clone(), seed },
    ))
}

fn dirichlet_like(rng: &mut impl Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn random_thresholds(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    let mut free = vec![rng.random_range(-1.5..1.5)];
    free.extend((1..len).map(|_| rng.random_range(-1.0..0.7)));
    thresholds_from_free(&free)
}

/// Random interior parameters conforming to `spec`.
pub fn random_parameters(rng: &mut impl Rng, spec: &ModelSpec) -> ParameterSet {
    let (g, k, h) = (spec.n_states, spec.n_classes, spec.n_upper);
    let mut normal = |sd: f64| -> f64 { sd * rng.sample::<f64, _>(StandardNormal) };
    let beta = (0..spec.p_x).map(|_| normal(0.5)).collect();
    let mut zeta: Vec<f64> = (0..g).map(|_| normal(1.5)).collect();
    zeta.sort_by(f64::total_cmp);
    let gamma = (0..spec.p_w).map(|_| normal(0.5)).collect();
    let mut xi: Vec<f64> = (0..k).map(|_| normal(1.5)).collect();
    xi.sort_by(f64::total_cmp);
    let psi0 = (1..h).map(|_| normal(0.7)).collect();
    let psi1 = (1..h).map(|_| normal(0.7)).collect();
    let sigma2 = rng.random_range(0.3..1.5);
    let eta0 = InitialLogits { alpha: random_thresholds(rng, g - 1), psi: psi0 };
    let eta1 = TransitionLogits { alpha: (0..g).map(|_| random_thresholds(rng, g - 1)).collect(), psi: psi1 };
    let pi = (0..h).map(|_| dirichlet_like(rng, k, 0.1)).collect();
    let tau = dirichlet_like(rng, h, 0.1);
    ParameterSet { beta, zeta, sigma2, gamma, xi, eta0, eta1, pi, tau }
}

/// Dimensions of a small random oracle instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceShape {
    pub n: usize,
    pub t: usize,
    pub g: usize,
    pub k: usize,
    pub h: usize,
    pub p_x: usize,
    pub p_w: usize,
}

impl InstanceShape {
    /// `n <= 5, T <= 4, G <= 3, K <= 2, H <= 2`.
    pub fn random_small(rng: &mut impl Rng) -> Self {
        Self {
            n: rng.random_range(1..=5),
            t: rng.random_range(1..=4),
            g: rng.random_range(1..=3),
            k: rng.random_range(1..=2),
            h: rng.random_range(1..=2),
            p_x: rng.random_range(0..=2),
            p_w: rng.random_range(0..=2),
        }
    }
}

/// Random parameters plus a structurally valid panel whose responses are
/// not drawn from the model: a generic input for exactness checks.
pub fn random_instance(rng: &mut impl Rng, shape: InstanceShape) -> (PanelData, ModelSpec, ParameterSet) {
    let spec = ModelSpec::new(shape.g, shape.k, shape.h, shape.p_x, shape.p_w);
    let params = random_parameters(rng, &spec);
    let subjects = (0..shape.n)
        .map(|i| {
            let n_obs = rng.random_range(1..=shape.t);
            let n_ind = (n_obs + 1).min(shape.t);
            let mut r = vec![0u8; n_ind];
            if n_obs < shape.t {
                r[n_obs] = 1;
            }
            let mut row = |p: usize| -> Vec<f64> { (0..p).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let x = (0..n_obs).map(|_| row(shape.p_x)).collect();
            let w = (0..n_ind).map(|_| row(shape.p_w)).collect();
            let y = (0..n_obs).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            SubjectRecord { id: format!("s{}", i + 1), y, r, x, w }
        })
        .collect();
    let data = PanelData {
        n_waves: shape.t,
        x_names: (1..=shape.p_x).map(|j| format!("x{j}")).collect(),
        w_names: (1..=shape.p_w).map(|j| format!("w{j}")).collect(),
        subjects,
    };
    (data, spec, params)
}
