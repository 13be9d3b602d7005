//! The full parameter vector of the joint model and its bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{build_chain_law, ChainLaw, InitialLogits, TransitionLogits};
use crate::model::ModelSpec;

const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    /// Longitudinal covariate effects.
    pub beta: Vec<f64>,
    /// State intercepts, nondecreasing.
    pub zeta: Vec<f64>,
    /// Residual variance of the Gaussian emission.
    pub sigma2: f64,
    /// Dropout covariate effects.
    pub gamma: Vec<f64>,
    /// Dropout class intercepts on the logit of staying.
    pub xi: Vec<f64>,
    pub eta0: InitialLogits,
    pub eta1: TransitionLogits,
    /// `pi[h][k] = P(U = k | V = h)`
    pub pi: Vec<Vec<f64>>,
    /// `tau[h] = P(V = h)`
    pub tau: Vec<f64>,
}

/// The nine parameter blocks, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Beta,
    Zeta,
    Sigma2,
    Gamma,
    Xi,
    Eta0,
    Eta1,
    Tau,
    Pi,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::Beta,
        Block::Zeta,
        Block::Sigma2,
        Block::Gamma,
        Block::Xi,
        Block::Eta0,
        Block::Eta1,
        Block::Tau,
        Block::Pi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Beta => "beta",
            Block::Zeta => "zeta",
            Block::Sigma2 => "sigma2",
            Block::Gamma => "gamma",
            Block::Xi => "xi",
            Block::Eta0 => "eta0",
            Block::Eta1 => "eta1",
            Block::Tau => "tau",
            Block::Pi => "pi",
        }
    }
}

/// Free-parameter count of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCounts {
    pub beta: usize,
    pub zeta: usize,
    pub sigma2: usize,
    pub gamma: usize,
    pub xi: usize,
    pub eta0: usize,
    pub eta1: usize,
    pub tau: usize,
    pub pi: usize,
}

impl ParameterCounts {
    pub fn of(spec: &ModelSpec) -> Self {
        let (g, k, h) = (spec.n_states, spec.n_classes, spec.n_upper);
        Self {
            beta: spec.p_x,
            zeta: g,
            sigma2: 1,
            gamma: spec.p_w,
            xi: k,
            eta0: (g - 1) + (h - 1),
            eta1: g * (g - 1) + (h - 1),
            tau: h - 1,
            pi: h * (k - 1),
        }
    }

    pub fn get(&self, block: Block) -> usize {
        match block {
            Block::Beta => self.beta,
            Block::Zeta => self.zeta,
            Block::Sigma2 => self.sigma2,
            Block::Gamma => self.gamma,
            Block::Xi => self.xi,
            Block::Eta0 => self.eta0,
            Block::Eta1 => self.eta1,
            Block::Tau => self.tau,
            Block::Pi => self.pi,
        }
    }

    pub fn total(&self) -> usize {
        Block::ALL.iter().map(|b| self.get(*b)).sum()
    }
}

pub fn count_free_parameters(spec: &ModelSpec) -> usize {
    ParameterCounts::of(spec).total()
}

/// One named entry of the natural-scale parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamName {
    pub block: Block,
    pub name: String,
}

impl ParameterSet {
    pub fn n_states(&self) -> usize {
        self.zeta.len()
    }

    pub fn n_classes(&self) -> usize {
        self.xi.len()
    }

    pub fn n_upper(&self) -> usize {
        self.tau.len()
    }

    pub fn chain_law(&self) -> Result<ChainLaw> {
        build_chain_law(&self.eta0, &self.eta1, self.n_states(), self.n_upper())
    }

    pub fn check_dims(&self, spec: &ModelSpec) -> Result<()> {
        let (g, k, h) = (spec.n_states, spec.n_classes, spec.n_upper);
        let ok = self.beta.len() == spec.p_x
            && self.zeta.len() == g
            && self.gamma.len() == spec.p_w
            && self.xi.len() == k
            && self.eta0.alpha.len() == g - 1
            && self.eta0.psi.len() == h - 1
            && self.eta1.alpha.len() == g
            && self.eta1.alpha.iter().all(|r| r.len() == g - 1)
            && self.eta1.psi.len() == h - 1
            && self.tau.len() == h
            && self.pi.len() == h
            && self.pi.iter().all(|r| r.len() == k);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "parameter set does not conform to G={g}, K={k}, H={h}, p_x={}, p_w={}",
                spec.p_x, spec.p_w
            )))
        }
    }

    /// Checks dimensions and every value invariant except the label order of
    /// `xi` and `tau`, which only holds after [`ParameterSet::canonicalize`].
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        self.check_dims(spec)?;
        let all_finite = self
            .beta
            .iter()
            .chain(&self.zeta)
            .chain(&self.gamma)
            .chain(&self.xi)
            .chain(&self.eta0.alpha)
            .chain(&self.eta0.psi)
            .chain(self.eta1.alpha.iter().flatten())
            .chain(&self.eta1.psi)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidParams("non-finite entry".into()));
        }
        if self.zeta.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidParams("zeta must be nondecreasing".into()));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidParams(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        check_simplex("tau", &self.tau)?;
        for (h, row) in self.pi.iter().enumerate() {
            check_simplex(&format!("pi row {}", h + 1), row)?;
        }
        // thresholds are checked by the chain-law construction
        self.chain_law()?;
        Ok(())
    }

    pub fn is_canonical(&self) -> bool {
        self.xi.windows(2).all(|w| w[0] < w[1]) && self.tau.windows(2).all(|w| w[0] >= w[1])
    }

    /// Resolves label switching: dropout classes sorted by `xi` ascending and
    /// upper-level classes sorted by `tau` descending. The likelihood is
    /// unchanged. Returns `(class_order, upper_order)` as old indices in the
    /// new order.
    pub fn canonicalize(&mut self) -> (Vec<usize>, Vec<usize>) {
        let mut class_order: Vec<usize> = (0..self.xi.len()).collect();
        class_order.sort_by(|&a, &b| self.xi[a].total_cmp(&self.xi[b]));
        self.xi = class_order.iter().map(|&k| self.xi[k]).collect();
        for row in &mut self.pi {
            *row = class_order.iter().map(|&k| row[k]).collect();
        }

        let mut upper_order: Vec<usize> = (0..self.tau.len()).collect();
        upper_order.sort_by(|&a, &b| self.tau[b].total_cmp(&self.tau[a]));
        if upper_order.iter().enumerate().any(|(i, &o)| i != o) {
            self.tau = upper_order.iter().map(|&h| self.tau[h]).collect();
            self.pi = upper_order.iter().map(|&h| self.pi[h].clone()).collect();
            let (base0, psi0) = reanchor(&self.eta0.psi, &upper_order);
            self.eta0.alpha.iter_mut().for_each(|a| *a += base0);
            self.eta0.psi = psi0;
            let (base1, psi1) = reanchor(&self.eta1.psi, &upper_order);
            self.eta1.alpha.iter_mut().flatten().for_each(|a| *a += base1);
            self.eta1.psi = psi1;
        }
        (class_order, upper_order)
    }

    /// Natural-scale values in reporting order; see [`ParameterSet::names`].
    pub fn natural_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(&self.beta);
        v.extend(&self.zeta);
        v.push(self.sigma2);
        v.extend(&self.gamma);
        v.extend(&self.xi);
        v.extend(&self.eta0.alpha);
        v.extend(&self.eta0.psi);
        v.extend(self.eta1.alpha.iter().flatten());
        v.extend(&self.eta1.psi);
        v.extend(&self.tau);
        v.extend(self.pi.iter().flatten());
        v
    }

    /// Names matching [`ParameterSet::natural_vector`].
    pub fn names(&self, x_names: &[String], w_names: &[String]) -> Vec<ParamName> {
        let (g, k, h) = (self.n_states(), self.n_classes(), self.n_upper());
        let mut out = Vec::new();
        let mut push = |block: Block, name: String| out.push(ParamName { block, name });
        for j in 0..self.beta.len() {
            push(Block::Beta, format!("beta[{}]", label(x_names, j)));
        }
        for s in 1..=g {
            push(Block::Zeta, format!("zeta[{s}]"));
        }
        push(Block::Sigma2, "sigma2".into());
        for j in 0..self.gamma.len() {
            push(Block::Gamma, format!("gamma[{}]", label(w_names, j)));
        }
        for c in 1..=k {
            push(Block::Xi, format!("xi[{c}]"));
        }
        for t in 2..=g {
            push(Block::Eta0, format!("alpha0[{t}]"));
        }
        for c in 2..=h {
            push(Block::Eta0, format!("psi0[{c}]"));
        }
        for from in 1..=g {
            for t in 2..=g {
                push(Block::Eta1, format!("alpha1[{from}->{t}]"));
            }
        }
        for c in 2..=h {
            push(Block::Eta1, format!("psi1[{c}]"));
        }
        for c in 1..=h {
            push(Block::Tau, format!("tau[{c}]"));
        }
        for c in 1..=h {
            for u in 1..=k {
                push(Block::Pi, format!("pi[{u}|{c}]"));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Shift of the new first class and the shifts of the remaining classes
/// relative to it, after reordering upper-level classes.
fn reanchor(psi: &[f64], order: &[usize]) -> (f64, Vec<f64>) {
    let full: Vec<f64> = std::iter::once(0.0).chain(psi.iter().copied()).collect();
    let base = full[order[0]];
    (base, order[1..].iter().map(|&h| full[h] - base).collect())
}

fn label(names: &[String], j: usize) -> String {
    names.get(j).cloned().unwrap_or_else(|| (j + 1).to_string())
}

fn check_simplex(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParams(format!("{what} has entries outside [0, 1]")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParams(format!("{what} sums to {s}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::observed_loglik;
    use crate::testutil::{random_instance, InstanceShape};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leiden_sized_count() {
        // 6 + 5 + 1 + 6 + 3 + (4 + 1) + (20 + 1) + 1 + 4
        let spec = ModelSpec::new(5, 3, 2, 6, 6);
        assert_eq!(count_free_parameters(&spec), 52);
        assert_eq!(ParameterCounts::of(&spec).eta0, 5);
    }

    #[test]
    fn degenerate_model_count() {
        // zeta_1, sigma2 and the single dropout intercept xi_1
        assert_eq!(count_free_parameters(&ModelSpec::new(1, 1, 1, 0, 0)), 3);
    }

    #[test]
    fn count_is_additive_over_blocks() {
        for g in 1..6 {
            for k in 1..5 {
                for h in 1..4 {
                    let spec = ModelSpec::new(g, k, h, 2, 3);
                    let c = ParameterCounts::of(&spec);
                    let sum: usize = Block::ALL.iter().map(|b| c.get(*b)).sum();
                    assert_eq!(sum, count_free_parameters(&spec));
                }
            }
        }
    }

    #[test]
    fn canonicalize_preserves_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = InstanceShape { n: 6, t: 4, g: 3, k: 3, h: 3, p_x: 1, p_w: 1 };
        let (data, spec, mut params) = random_instance(&mut rng, shape);
        params.xi = vec![0.5, -1.0, 2.0];
        params.tau = vec![0.2, 0.5, 0.3];
        let before = observed_loglik(&data, &params, &spec).unwrap();
        let (class_order, upper_order) = params.canonicalize();
        assert_eq!(class_order, vec![1, 0, 2]);
        assert_eq!(upper_order, vec![1, 2, 0]);
        assert!(params.is_canonical());
        params.validate(&spec).unwrap();
        let after = observed_loglik(&data, &params, &spec).unwrap();
        assert!((before - after).abs() < 1e-10 * before.abs(), "{before} vs {after}");
    }

    #[test]
    fn names_match_vector_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = InstanceShape { n: 2, t: 3, g: 3, k: 2, h: 2, p_x: 2, p_w: 1 };
        let (data, _, params) = random_instance(&mut rng, shape);
        let names = params.names(&data.x_names, &data.w_names);
        assert_eq!(names.len(), params.natural_vector().len());
        assert_eq!(names[0].name, format!("beta[{}]", data.x_names[0]));
        let blocks: std::collections::HashSet<_> = names.iter().map(|n| n.block).collect();
        assert_eq!(blocks.len(), 9);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = InstanceShape { n: 2, t: 3, g: 2, k: 2, h: 2, p_x: 1, p_w: 1 };
        let (_, spec, params) = random_instance(&mut rng, shape);
        params.validate(&spec).unwrap();
        let mut p = params.clone();
        p.zeta = vec![1.0, 0.0];
        assert!(p.validate(&spec).is_err());
        let mut p = params.clone();
        p.tau = vec![0.5, 0.6];
        assert!(p.validate(&spec).is_err());
        let mut p = params.clone();
        p.sigma2 = 0.0;
        assert!(p.validate(&spec).is_err());
        let mut p = params;
        p.beta.push(0.0);
        assert!(matches!(p.validate(&spec), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = InstanceShape { n: 1, t: 2, g: 3, k: 2, h: 2, p_x: 2, p_w: 2 };
            let (_, _, params) = random_instance(&mut rng, shape);
            let back = ParameterSet::from_json(&params.to_json().unwrap()).unwrap();
            let a: Vec<u64> = params.natural_vector().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.natural_vector().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
