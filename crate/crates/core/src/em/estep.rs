//! Posterior expectations of the latent indicators.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::latent::ChainLaw;
use crate::likelihood::{emission_table, indicator_logprob};
use crate::math::{dot, log_sum_exp};
use crate::model::{ModelSpec, PanelData, SubjectRecord};
use crate::params::ParameterSet;

/// Which parts of the likelihood the E-step conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitTarget {
    /// Longitudinal responses and missingness indicators jointly.
    Joint,
    /// Responses only; the dropout block is held fixed and ignored.
    LongitudinalOnly,
    /// Missingness indicators only; the longitudinal block is ignored.
    DropoutOnly,
}

impl FitTarget {
    fn uses_long(self) -> bool {
        self != FitTarget::DropoutOnly
    }

    fn uses_drop(self) -> bool {
        self != FitTarget::LongitudinalOnly
    }
}

/// Posterior expectations for every subject, stored flat and subject-major.
#[derive(Debug, Clone)]
pub struct Posteriors {
    n_states: usize,
    n_classes: usize,
    n_upper: usize,
    wave_offset: Vec<usize>,
    trans_offset: Vec<usize>,
    a_marg: Vec<f64>,
    a_cond: Vec<f64>,
    a_trans: Vec<f64>,
    d_cond: Vec<f64>,
    d_marg: Vec<f64>,
    e: Vec<f64>,
    subject_loglik: Vec<f64>,
    /// Observed-data log-likelihood at the parameters used.
    pub loglik: f64,
}

impl Posteriors {
    pub fn n_subjects(&self) -> usize {
        self.e.len() / self.n_upper
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_upper(&self) -> usize {
        self.n_upper
    }

    pub fn n_obs(&self, i: usize) -> usize {
        self.wave_offset[i + 1] - self.wave_offset[i]
    }

    /// `a_{itg}`: posterior probability of state `g` at wave `t`.
    pub fn a_marg(&self, i: usize, t: usize, g: usize) -> f64 {
        self.a_marg[(self.wave_offset[i] + t) * self.n_states + g]
    }

    /// `a_{itg|h}`: state posterior given `V = h`.
    pub fn a_cond(&self, i: usize, h: usize, t: usize, g: usize) -> f64 {
        let base = self.wave_offset[i] * self.n_upper + h * self.n_obs(i) + t;
        self.a_cond[base * self.n_states + g]
    }

    /// `a_{itgg'|h}` for `t >= 1`: posterior of `Z_{t-1} = g, Z_t = g2` given `V = h`.
    pub fn a_trans(&self, i: usize, h: usize, t: usize, g: usize, g2: usize) -> f64 {
        let n_tr = self.n_obs(i) - 1;
        let base = self.trans_offset[i] * self.n_upper + h * n_tr + (t - 1);
        let gg = self.n_states * self.n_states;
        self.a_trans[base * gg + g * self.n_states + g2]
    }

    /// `d_{ik|h}`
    pub fn d_cond(&self, i: usize, h: usize, k: usize) -> f64 {
        self.d_cond[(i * self.n_upper + h) * self.n_classes + k]
    }

    /// `d_{ik}`
    pub fn d_marg(&self, i: usize, k: usize) -> f64 {
        self.d_marg[i * self.n_classes + k]
    }

    /// `e_{ih}`
    pub fn e(&self, i: usize, h: usize) -> f64 {
        self.e[i * self.n_upper + h]
    }

    pub fn subject_loglik(&self, i: usize) -> f64 {
        self.subject_loglik[i]
    }

    pub(crate) fn a_marg_subject(&self, i: usize) -> &[f64] {
        &self.a_marg[self.wave_offset[i] * self.n_states..self.wave_offset[i + 1] * self.n_states]
    }

    pub(crate) fn d_marg_subject(&self, i: usize) -> &[f64] {
        &self.d_marg[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Overwrites `e_{i.}` and `d_{i.|h}` and refreshes `d_{i.}`.
    #[cfg(test)]
    pub(crate) fn set_upper_for_test(&mut self, i: usize, e: &[f64], d_cond: &[Vec<f64>]) {
        let (k_n, h_n) = (self.n_classes, self.n_upper);
        self.e[i * h_n..(i + 1) * h_n].copy_from_slice(e);
        for h in 0..h_n {
            self.d_cond[(i * h_n + h) * k_n..(i * h_n + h + 1) * k_n].copy_from_slice(&d_cond[h]);
        }
        for k in 0..k_n {
            self.d_marg[i * k_n + k] = (0..h_n).map(|h| e[h] * d_cond[h][k]).sum();
        }
    }

    /// Overwrites the marginal state posterior at one wave.
    #[cfg(test)]
    pub(crate) fn set_state_for_test(&mut self, i: usize, t: usize, a: &[f64]) {
        let g_n = self.n_states;
        let at = (self.wave_offset[i] + t) * g_n;
        self.a_marg[at..at + g_n].copy_from_slice(a);
    }
}

struct Slots<'a> {
    a_marg: &'a mut [f64],
    a_cond: &'a mut [f64],
    a_trans: &'a mut [f64],
    d_cond: &'a mut [f64],
    d_marg: &'a mut [f64],
    e: &'a mut [f64],
    ll: &'a mut f64,
}

struct Scratch {
    em: Vec<f64>,
    shift: Vec<f64>,
    fwd: Vec<f64>,
    bwd: Vec<f64>,
    scale: Vec<f64>,
    tmp: Vec<f64>,
    log_drop: Vec<f64>,
    log_joint: Vec<f64>,
    drop_mix: Vec<f64>,
}

impl Scratch {
    fn new(t_max: usize, g: usize, k: usize, h: usize) -> Self {
        Self {
            em: vec![0.0; t_max * g],
            shift: vec![0.0; t_max],
            fwd: vec![0.0; t_max * g],
            bwd: vec![0.0; t_max * g],
            scale: vec![0.0; t_max],
            tmp: vec![0.0; g],
            log_drop: vec![0.0; k],
            log_joint: vec![0.0; h],
            drop_mix: vec![0.0; k],
        }
    }
}

/// E-step for the joint model.
pub fn e_step(data: &PanelData, params: &ParameterSet, spec: &ModelSpec) -> Result<Posteriors> {
    params.check_dims(spec)?;
    let law = params.chain_law()?;
    e_step_with(data, params, &law, FitTarget::Joint)
}

pub(crate) fn e_step_with(
    data: &PanelData,
    params: &ParameterSet,
    law: &ChainLaw,
    target: FitTarget,
) -> Result<Posteriors> {
    let (g_n, k_n, h_n) = (params.n_states(), params.n_classes(), params.n_upper());
    let n = data.n_subjects();
    let mut wave_offset = Vec::with_capacity(n + 1);
    let mut trans_offset = Vec::with_capacity(n + 1);
    wave_offset.push(0);
    trans_offset.push(0);
    for s in &data.subjects {
        wave_offset.push(wave_offset.last().unwrap() + s.n_obs());
        trans_offset.push(trans_offset.last().unwrap() + s.n_obs().saturating_sub(1));
    }
    let n_waves = wave_offset[n];
    let n_trans = trans_offset[n];
    let mut post = Posteriors {
        n_states: g_n,
        n_classes: k_n,
        n_upper: h_n,
        a_marg: vec![0.0; n_waves * g_n],
        a_cond: vec![0.0; n_waves * h_n * g_n],
        a_trans: vec![0.0; n_trans * h_n * g_n * g_n],
        d_cond: vec![0.0; n * h_n * k_n],
        d_marg: vec![0.0; n * k_n],
        e: vec![0.0; n * h_n],
        subject_loglik: vec![0.0; n],
        loglik: 0.0,
        wave_offset,
        trans_offset,
    };

    let mut slots = Vec::with_capacity(n);
    {
        let (mut am, mut ac, mut at) = (&mut post.a_marg[..], &mut post.a_cond[..], &mut post.a_trans[..]);
        let (mut dc, mut dm, mut ee) = (&mut post.d_cond[..], &mut post.d_marg[..], &mut post.e[..]);
        let mut ll = post.subject_loglik.iter_mut();
        for s in &data.subjects {
            let t = s.n_obs();
            let (a, rest) = std::mem::take(&mut am).split_at_mut(t * g_n);
            am = rest;
            let (b, rest) = std::mem::take(&mut ac).split_at_mut(t * h_n * g_n);
            ac = rest;
            let (c, rest) = std::mem::take(&mut at).split_at_mut(t.saturating_sub(1) * h_n * g_n * g_n);
            at = rest;
            let (d, rest) = std::mem::take(&mut dc).split_at_mut(h_n * k_n);
            dc = rest;
            let (d2, rest) = std::mem::take(&mut dm).split_at_mut(k_n);
            dm = rest;
            let (e, rest) = std::mem::take(&mut ee).split_at_mut(h_n);
            ee = rest;
            slots.push(Slots {
                a_marg: a,
                a_cond: b,
                a_trans: c,
                d_cond: d,
                d_marg: d2,
                e,
                ll: ll.next().unwrap(),
            });
        }
    }

    let t_max = data.subjects.iter().map(|s| s.n_obs()).max().unwrap_or(0);
    slots.par_iter_mut().zip(&data.subjects).try_for_each_init(
        || Scratch::new(t_max, g_n, k_n, h_n),
        |scratch, (slot, s)| subject_posterior(s, params, law, target, scratch, slot),
    )?;
    drop(slots);
    post.loglik = post.subject_loglik.iter().sum();
    Ok(post)
}

fn subject_posterior(
    s: &SubjectRecord,
    params: &ParameterSet,
    law: &ChainLaw,
    target: FitTarget,
    sc: &mut Scratch,
    out: &mut Slots<'_>,
) -> Result<()> {
    let (g_n, k_n, h_n) = (params.n_states(), params.n_classes(), params.n_upper());
    let n_t = s.n_obs();

    // shifted emission densities, shared by every upper-level class
    if target.uses_long() {
        let table = emission_table(s, params);
        for t in 0..n_t {
            let m = table[t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            sc.shift[t] = m;
            for g in 0..g_n {
                sc.em[t * g_n + g] = (table[t][g] - m).exp();
            }
        }
    } else {
        sc.shift[..n_t].fill(0.0);
        sc.em[..n_t * g_n].fill(1.0);
    }

    for k in 0..k_n {
        sc.log_drop[k] = if target.uses_drop() {
            s.r.iter()
                .zip(&s.w)
                .map(|(&r, w)| indicator_logprob(r, params.xi[k] + dot(w, &params.gamma)))
                .sum()
        } else {
            0.0
        };
    }

    for h in 0..h_n {
        let delta = &law.delta[h];
        let q = &law.q[h];
        // forward
        let mut log_norm = 0.0;
        for t in 0..n_t {
            for g in 0..g_n {
                let prior = if t == 0 {
                    delta[g]
                } else {
                    let prev = &sc.fwd[(t - 1) * g_n..t * g_n];
                    (0..g_n).map(|j| prev[j] * q[j][g]).sum()
                };
                sc.fwd[t * g_n + g] = prior * sc.em[t * g_n + g];
            }
            let c: f64 = sc.fwd[t * g_n..(t + 1) * g_n].iter().sum();
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Underflow { pass: "forward", subject: s.id.clone(), wave: t + 1 });
            }
            sc.fwd[t * g_n..(t + 1) * g_n].iter_mut().for_each(|v| *v /= c);
            sc.scale[t] = c;
            log_norm += sc.shift[t] + c.ln();
        }
        // backward
        sc.bwd[(n_t - 1) * g_n..n_t * g_n].fill(1.0);
        for t in (0..n_t - 1).rev() {
            for j in 0..g_n {
                sc.tmp[j] = sc.em[(t + 1) * g_n + j] * sc.bwd[(t + 1) * g_n + j];
            }
            let c = sc.scale[t + 1];
            for g in 0..g_n {
                sc.bwd[t * g_n + g] = dot(&q[g], &sc.tmp) / c;
            }
        }
        // state and transition posteriors given V = h
        let cond = &mut out.a_cond[h * n_t * g_n..(h + 1) * n_t * g_n];
        for t in 0..n_t {
            let row = &mut cond[t * g_n..(t + 1) * g_n];
            for g in 0..g_n {
                row[g] = sc.fwd[t * g_n + g] * sc.bwd[t * g_n + g];
            }
            let z: f64 = row.iter().sum();
            if !(z > 0.0 && z.is_finite()) {
                return Err(Error::DegeneratePosterior { subject: s.id.clone() });
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        if n_t > 1 {
            let gg = g_n * g_n;
            let trans = &mut out.a_trans[h * (n_t - 1) * gg..(h + 1) * (n_t - 1) * gg];
            for t in 1..n_t {
                let block = &mut trans[(t - 1) * gg..t * gg];
                let c = sc.scale[t];
                for g in 0..g_n {
                    let a = sc.fwd[(t - 1) * g_n + g];
                    for g2 in 0..g_n {
                        block[g * g_n + g2] = a * q[g][g2] * sc.em[t * g_n + g2] * sc.bwd[t * g_n + g2] / c;
                    }
                }
                let z: f64 = block.iter().sum();
                if !(z > 0.0 && z.is_finite()) {
                    return Err(Error::DegeneratePosterior { subject: s.id.clone() });
                }
                block.iter_mut().for_each(|v| *v /= z);
            }
        }
        // dropout class posterior given V = h
        for k in 0..k_n {
            sc.drop_mix[k] = params.pi[h][k].ln() + sc.log_drop[k];
        }
        let log_mix = log_sum_exp(&sc.drop_mix[..k_n]);
        for k in 0..k_n {
            out.d_cond[h * k_n + k] = (sc.drop_mix[k] - log_mix).exp();
        }
        sc.log_joint[h] = params.tau[h].ln() + log_norm + log_mix;
    }

    let ll = log_sum_exp(&sc.log_joint[..h_n]);
    if !ll.is_finite() {
        return Err(Error::DegeneratePosterior { subject: s.id.clone() });
    }
    *out.ll = ll;
    for h in 0..h_n {
        out.e[h] = (sc.log_joint[h] - ll).exp();
    }
    out.a_marg.fill(0.0);
    out.d_marg.fill(0.0);
    for h in 0..h_n {
        let eh = out.e[h];
        for (m, c) in out.a_marg.iter_mut().zip(&out.a_cond[h * n_t * g_n..(h + 1) * n_t * g_n]) {
            *m += eh * c;
        }
        for k in 0..k_n {
            out.d_marg[k] += eh * out.d_cond[h * k_n + k];
        }
    }
    Ok(())
}
