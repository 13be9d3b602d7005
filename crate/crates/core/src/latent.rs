//! Global-logit parameterization of the initial and transition
//! probabilities of the hidden chain, per upper-level class.
//!
//! For a vector of `G - 1` thresholds `alpha` (strictly decreasing) and a
//! class shift `psi`, the cumulative survival probabilities are
//! `P(Z >= g) = logistic(alpha_g + psi)` for `g = 2..G`, with `P(Z >= 1) = 1`.
//! The first upper-level class carries `psi = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{clamp_prob, logistic, logistic_diff};

/// Thresholds and class shifts for the initial distribution (`eta0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialLogits {
    /// `alpha_{0g}`, `g = 2..G`.
    pub alpha: Vec<f64>,
    /// `psi_{0h}`, `h = 2..H`.
    pub psi: Vec<f64>,
}

/// Thresholds per previous state and class shifts for the transitions (`eta1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionLogits {
    /// `alpha[from][g - 2]`: threshold `g = 2..G` for rows leaving state `from`.
    pub alpha: Vec<Vec<f64>>,
    /// `psi_{1h}`, `h = 2..H`.
    pub psi: Vec<f64>,
}

/// Initial vectors and transition matrices for every upper-level class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLaw {
    /// `delta[h][g]`
    pub delta: Vec<Vec<f64>>,
    /// `q[h][from][to]`
    pub q: Vec<Vec<Vec<f64>>>,
}

impl ChainLaw {
    pub fn n_upper(&self) -> usize {
        self.delta.len()
    }

    pub fn n_states(&self) -> usize {
        self.delta.first().map_or(0, Vec::len)
    }

    /// Cumulative logits of `delta[h]` at thresholds `2..G`.
    pub fn initial_logits(&self, h: usize) -> Result<Vec<f64>> {
        cumulative_logits(&self.delta[h])
    }

    /// Cumulative logits of transition row `from` in class `h`.
    pub fn transition_logits(&self, h: usize, from: usize) -> Result<Vec<f64>> {
        cumulative_logits(&self.q[h][from])
    }
}

/// Shift applied to class `h` (0-based) given the free shifts of classes `2..H`.
#[inline]
pub fn class_shift(psi: &[f64], h: usize) -> f64 {
    if h == 0 {
        0.0
    } else {
        psi[h - 1]
    }
}

/// Maps strictly decreasing thresholds and a shift to a probability vector
/// of length `alphas.len() + 1`.
pub fn invert_global_logit(alphas: &[f64], psi: f64) -> Result<Vec<f64>> {
    if let Some(i) = alphas.windows(2).position(|w| !(w[0] > w[1])) {
        return Err(Error::NonDecreasingThresholds { index: i + 1 });
    }
    Ok(probs_from_linear(alphas, psi))
}

fn probs_from_linear(alphas: &[f64], psi: f64) -> Vec<f64> {
    let n = alphas.len() + 1;
    if n == 1 {
        return vec![1.0];
    }
    let lambda = |j: usize| alphas[j] + psi;
    let mut p = Vec::with_capacity(n);
    p.push(logistic(-lambda(0)));
    for j in 1..n - 1 {
        p.push(logistic_diff(lambda(j - 1), lambda(j)));
    }
    p.push(logistic(lambda(n - 2)));
    p
}

/// `log[P(Z >= g) / P(Z < g)]` for `g = 2..G`.
pub fn cumulative_logits(p: &[f64]) -> Result<Vec<f64>> {
    let n = p.len();
    let mut upper = vec![0.0; n + 1];
    for g in (0..n).rev() {
        upper[g] = upper[g + 1] + p[g];
    }
    let mut lower = 0.0;
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for g in 1..n {
        lower += p[g - 1];
        let up = upper[g];
        if !(up > 0.0) || !(lower > 0.0) {
            return Err(Error::InvalidParams(format!(
                "unbounded cumulative logit at threshold {}",
                g + 1
            )));
        }
        out.push((up / lower).ln());
    }
    Ok(out)
}

pub fn build_chain_law(
    eta0: &InitialLogits,
    eta1: &TransitionLogits,
    n_states: usize,
    n_upper: usize,
) -> Result<ChainLaw> {
    let thr = n_states.saturating_sub(1);
    if eta0.alpha.len() != thr
        || eta0.psi.len() != n_upper - 1
        || eta1.psi.len() != n_upper - 1
        || eta1.alpha.len() != n_states
        || eta1.alpha.iter().any(|row| row.len() != thr)
    {
        return Err(Error::Dimension(format!(
            "chain logits do not conform to G={n_states}, H={n_upper}"
        )));
    }
    let mut delta = Vec::with_capacity(n_upper);
    let mut q = Vec::with_capacity(n_upper);
    for h in 0..n_upper {
        delta.push(invert_global_logit(&eta0.alpha, class_shift(&eta0.psi, h))?);
        let shift = class_shift(&eta1.psi, h);
        q.push(
            eta1.alpha
                .iter()
                .map(|row| invert_global_logit(row, shift))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(ChainLaw { delta, q })
}

/// Free coordinates `(alpha_2, log(alpha_2 - alpha_3), ...)` of strictly
/// decreasing thresholds.
pub fn thresholds_to_free(alpha: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(alpha.len());
    if let Some(&first) = alpha.first() {
        out.push(first);
    }
    for (i, w) in alpha.windows(2).enumerate() {
        let d = w[0] - w[1];
        if !(d > 0.0) {
            return Err(Error::NonDecreasingThresholds { index: i + 1 });
        }
        out.push(d.ln());
    }
    Ok(out)
}

pub fn thresholds_from_free(free: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(free.len());
    if let Some(&first) = free.first() {
        out.push(first);
    }
    for k in free.iter().skip(1) {
        let prev = *out.last().unwrap();
        out.push(prev - k.exp());
    }
    out
}

/// `sum_g counts[g] * log p_g(lambda)` for a cumulative-logit vector
/// `lambda` (thresholds `2..G`), writing `d/d lambda` into `grad`.
pub(crate) fn ordinal_loglik_grad(counts: &[f64], lambda: &[f64], grad: &mut [f64]) -> f64 {
    let p = probs_from_linear(lambda, 0.0);
    let value: f64 = counts
        .iter()
        .zip(&p)
        .filter(|(n, _)| **n != 0.0)
        .map(|(n, pg)| n * clamp_prob(*pg).ln())
        .sum();
    for (m, g) in grad.iter_mut().enumerate() {
        let slope = logistic(lambda[m]) * logistic(-lambda[m]);
        let up = if counts[m + 1] != 0.0 { counts[m + 1] / clamp_prob(p[m + 1]) } else { 0.0 };
        let lo = if counts[m] != 0.0 { counts[m] / clamp_prob(p[m]) } else { 0.0 };
        *g = slope * (up - lo);
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn two_states_at_zero_is_even() {
        let p = invert_global_logit(&[0.0], 0.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn three_equal_states() {
        // s2 = logistic(ln 2) = 2/3, s3 = logistic(-ln 2) = 1/3
        let p = invert_global_logit(&[LN2, -LN2], 0.0).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn infinite_shift_puts_mass_on_top() {
        let p = invert_global_logit(&[LN2, -LN2], f64::INFINITY).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_non_decreasing_thresholds() {
        assert!(matches!(
            invert_global_logit(&[0.0, 0.5], 0.0),
            Err(Error::NonDecreasingThresholds { index: 1 })
        ));
    }

    #[test]
    fn cumulative_logit_examples() {
        assert_eq!(cumulative_logits(&[0.5, 0.5]).unwrap(), vec![0.0]);
        let l = cumulative_logits(&[1.0 / 3.0; 3]).unwrap();
        assert!((l[0] - LN2).abs() < 1e-14 && (l[1] + LN2).abs() < 1e-14);
        assert!(cumulative_logits(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn single_state_chain_is_trivial() {
        let eta0 = InitialLogits { alpha: vec![], psi: vec![3.0] };
        let eta1 = TransitionLogits { alpha: vec![vec![]], psi: vec![-1.0] };
        let law = build_chain_law(&eta0, &eta1, 1, 2).unwrap();
        assert_eq!(law.delta, vec![vec![1.0], vec![1.0]]);
        assert_eq!(law.q, vec![vec![vec![1.0]], vec![vec![1.0]]]);
    }

    #[test]
    fn single_upper_class_ignores_nothing() {
        let eta0 = InitialLogits { alpha: vec![0.4, -0.7], psi: vec![] };
        let eta1 = TransitionLogits { alpha: vec![vec![1.0, 0.0]; 3], psi: vec![] };
        let law = build_chain_law(&eta0, &eta1, 3, 1).unwrap();
        assert_eq!(law.n_upper(), 1);
        let l = law.initial_logits(0).unwrap();
        assert!((l[0] - 0.4).abs() < 1e-12 && (l[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn class_shift_is_a_logit_translation() {
        let eta0 = InitialLogits { alpha: vec![1.2, 0.1, -0.9, -2.5], psi: vec![0.83] };
        let eta1 = TransitionLogits { alpha: vec![vec![1.0, 0.0, -1.0, -2.0]; 5], psi: vec![0.0] };
        let law = build_chain_law(&eta0, &eta1, 5, 2).unwrap();
        // compute cumulative logits directly from sums rather than the helper
        for g in 1..5 {
            let lg = |h: usize| {
                let up: f64 = law.delta[h][g..].iter().sum();
                let lo: f64 = law.delta[h][..g].iter().sum();
                (up / lo).ln()
            };
            assert!((lg(1) - lg(0) - 0.83).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_dimensions_are_rejected() {
        let eta0 = InitialLogits { alpha: vec![0.0], psi: vec![] };
        let eta1 = TransitionLogits { alpha: vec![vec![0.0]], psi: vec![] };
        assert!(matches!(build_chain_law(&eta0, &eta1, 2, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn ordinal_gradient_matches_finite_differences() {
        let counts = [3.0, 0.5, 7.0, 2.0];
        let lambda = [1.1, -0.2, -1.7];
        let mut grad = [0.0; 3];
        ordinal_loglik_grad(&counts, &lambda, &mut grad);
        let mut scratch = [0.0; 3];
        for j in 0..3 {
            let h = 1e-6;
            let mut up = lambda;
            up[j] += h;
            let mut dn = lambda;
            dn[j] -= h;
            let fd = (ordinal_loglik_grad(&counts, &up, &mut scratch)
                - ordinal_loglik_grad(&counts, &dn, &mut scratch))
                / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-6, "{j}: {fd} vs {}", grad[j]);
        }
    }

    fn decreasing(len: usize) -> impl Strategy<Value = Vec<f64>> {
        (-3.0..3.0f64, prop::collection::vec(-2.5..1.0f64, len.saturating_sub(1)))
            .prop_map(|(a, ks)| thresholds_from_free(&std::iter::once(a).chain(ks).collect::<Vec<_>>()))
    }

    proptest! {
        #[test]
        fn rows_are_simplexes_and_round_trip(
            (alpha, psi) in (2usize..6).prop_flat_map(|g| (decreasing(g - 1), -3.0..3.0f64))
        ) {
            let p = invert_global_logit(&alpha, psi).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            let back = cumulative_logits(&p).unwrap();
            for (b, a) in back.iter().zip(&alpha) {
                prop_assert!((b - (a + psi)).abs() < 1e-10);
            }
        }

        #[test]
        fn shift_increases_every_upper_tail(alpha in decreasing(4), psi in -3.0..3.0f64, bump in 0.01..2.0f64) {
            let lo = invert_global_logit(&alpha, psi).unwrap();
            let hi = invert_global_logit(&alpha, psi + bump).unwrap();
            for g in 1..lo.len() {
                let a: f64 = lo[g..].iter().sum();
                let b: f64 = hi[g..].iter().sum();
                prop_assert!(b > a);
            }
        }

        #[test]
        fn free_coordinates_round_trip(alpha in decreasing(5)) {
            let free = thresholds_to_free(&alpha).unwrap();
            let back = thresholds_from_free(&free);
            for (a, b) in alpha.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
