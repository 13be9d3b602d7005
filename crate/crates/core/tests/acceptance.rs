//! Acceptance harness. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::sync::Mutex;
use std::time::{Duration, Instant};

use hmmdrop::em::{e_step, fit_with, initial_parameters, FitOptions, FitTarget, InitBase, ProgressEvent};
use hmmdrop::latent::{build_chain_law, class_shift, thresholds_from_free};
use hmmdrop::likelihood::{brute_force_loglik, dropout_loglik, longitudinal_loglik, observed_loglik};
use hmmdrop::params::ParameterCounts;
use hmmdrop::selection::{select, GridCell};
use hmmdrop::simulate::{random_instance, InstanceShape};
use hmmdrop::{sandwich_covariance, EmControls, FitResult, InitialLogits, ModelSpec, PanelData, ParameterSet, TransitionLogits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::{posterior_gap, recovery_truth, simulate_design, reference_grid_cells};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn oracle_instances() -> Vec<(PanelData, ModelSpec, ParameterSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    (0..50)
        .map(|_| {
            let shape = InstanceShape::random_small(&mut rng);
            random_instance(&mut rng, shape)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (data, spec, params) in oracle_instances() {
        let fast = observed_loglik(&data, &params, &spec).unwrap();
        let slow = brute_force_loglik(&data, &params, &spec).unwrap();
        worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
    }
    let took = start.elapsed();
    outcome(
        worst < 1e-10 && took < Duration::from_secs(10),
        format!("max relative gap {worst:.2e} over 50 instances in {:.2}s", took.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for (data, spec, params) in oracle_instances() {
        let post = e_step(&data, &params, &spec).unwrap();
        worst = worst.max(posterior_gap(&data, &params, &post));
    }
    outcome(worst < 1e-10, format!("max absolute posterior gap {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let (truth, _) = recovery_truth();
    let mut worst_drop = 0.0f64;
    let mut iterations = 0usize;
    for rep in 0..20u64 {
        let data = simulate_design(&truth, &ModelSpec::new(2, 2, 2, 2, 1), 200, 6, 3000 + rep);
        let spec = ModelSpec::for_data(&data, 2, 2, 2).with_em(EmControls { starts: 5, seed: rep + 1, ..EmControls::default() });
        let traces: Mutex<Vec<Vec<(usize, f64)>>> = Mutex::new(vec![Vec::new(); 5]);
        let cb = |e: &ProgressEvent| traces.lock().unwrap()[e.start].push((e.iter, e.loglik));
        if let Err(e) = fit_with(&data, &spec, FitOptions { progress: Some(&cb), ..FitOptions::default() }) {
            return outcome(false, format!("replication {rep} failed: {e}"));
        }
        for mut t in traces.into_inner().unwrap() {
            t.sort_by_key(|p| p.0);
            iterations += t.len();
            for w in t.windows(2) {
                worst_drop = worst_drop.max(w[0].1 - w[1].1);
            }
        }
    }
    outcome(
        worst_drop <= 1e-8,
        format!("largest decrease {worst_drop:.2e} over {iterations} iterations of 100 starts"),
    )
}

fn criterion_4() -> Outcome {
    let (mut truth, _) = recovery_truth();
    let spec1 = ModelSpec::new(2, 2, 1, 2, 1);
    truth.tau = vec![1.0];
    truth.pi = vec![vec![0.6, 0.4]];
    truth.eta0.psi.clear();
    truth.eta1.psi.clear();
    let data = simulate_design(&truth, &spec1, 300, 6, 77);

    let mut gap = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = InitBase::from_data(&data).unwrap();
    for _ in 0..10 {
        let p = initial_parameters(&base, &spec1, &mut rng);
        let total = observed_loglik(&data, &p, &spec1).unwrap();
        let parts = longitudinal_loglik(&data, &p).unwrap() + dropout_loglik(&data, &p);
        gap = gap.max((total - parts).abs());
    }

    let em = EmControls { starts: 3, tol: 1e-11, max_iter: 5000, seed: 9, ..EmControls::default() };
    let spec = spec1.clone().with_em(em);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inits: Vec<ParameterSet> = (0..3).map(|_| initial_parameters(&base, &spec, &mut rng)).collect();
    let joint = fit_with(&data, &spec, FitOptions { inits: Some(&inits), ..FitOptions::default() }).unwrap();
    let long = fit_with(
        &data,
        &spec,
        FitOptions { target: FitTarget::LongitudinalOnly, inits: Some(&inits), ..FitOptions::default() },
    )
    .unwrap();
    let coef_gap = joint
        .theta_hat
        .beta
        .iter()
        .zip(&long.theta_hat.beta)
        .chain(joint.theta_hat.zeta.iter().zip(&long.theta_hat.zeta))
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    outcome(
        gap < 1e-8 && coef_gap < 1e-6,
        format!("loglik factorization gap {gap:.2e}; beta/zeta gap to longitudinal-only fit {coef_gap:.2e}"),
    )
}

struct Replication {
    fit: FitResult,
    data: PanelData,
}

fn replications(count: usize, starts: usize) -> Vec<Option<Replication>> {
    let (truth, spec) = recovery_truth();
    (0..count as u64)
        .into_par_iter()
        .map(|rep| {
            let data = simulate_design(&truth, &spec, 500, 6, 9000 + rep);
            let spec = ModelSpec::for_data(&data, 2, 2, 2).with_em(EmControls { starts, seed: 100 + rep, ..EmControls::default() });
            fit_with(&data, &spec, FitOptions::default()).ok().map(|fit| Replication { fit, data })
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_5(reps: &[Option<Replication>], single_fit: Duration) -> Outcome {
    let (truth, _) = recovery_truth();
    let ok: Vec<&Replication> = reps.iter().take(50).flatten().collect();
    if ok.len() < 50 {
        return outcome(false, format!("only {} of 50 replications produced a fit", ok.len()));
    }
    let mut worst = (String::new(), 0.0f64);
    let mut check = |name: String, errs: Vec<f64>| {
        let m = median(errs);
        if m >= worst.1 {
            worst = (name, m);
        }
    };
    for j in 0..truth.beta.len() {
        check(format!("beta[{j}]"), ok.iter().map(|r| (r.fit.theta_hat.beta[j] - truth.beta[j]).abs()).collect());
    }
    for j in 0..truth.gamma.len() {
        check(format!("gamma[{j}]"), ok.iter().map(|r| (r.fit.theta_hat.gamma[j] - truth.gamma[j]).abs()).collect());
    }
    for g in 0..truth.zeta.len() {
        check(format!("zeta[{g}]"), ok.iter().map(|r| (r.fit.theta_hat.zeta[g] - truth.zeta[g]).abs()).collect());
    }
    outcome(
        worst.1 <= 0.1 && single_fit < Duration::from_secs(60),
        format!(
            "worst median absolute error {:.4} ({}); one 10-start fit took {:.2}s",
            worst.1,
            worst.0,
            single_fit.as_secs_f64()
        ),
    )
}

fn criterion_6_and_10(reps: &[Option<Replication>]) -> (Outcome, Outcome) {
    let results: Vec<Option<(Vec<f64>, Vec<f64>, f64, f64, bool)>> = reps
        .par_iter()
        .map(|r| {
            let r = r.as_ref()?;
            let rep = sandwich_covariance(&r.data, &r.fit.theta_hat, &r.fit.spec).ok()?;
            let names = r.fit.theta_hat.names(&r.data.x_names, &r.data.w_names);
            let se: Vec<f64> = (0..r.fit.theta_hat.beta.len()).map(|j| rep.se_of(&names[j].name).unwrap()).collect();
            let (score, scale) = rep.score_check();
            Some((r.fit.theta_hat.beta.clone(), se, score, scale, r.fit.converged))
        })
        .collect();
    let ok: Vec<_> = results.into_iter().flatten().collect();
    let c6 = if ok.len() < 100 {
        outcome(false, format!("only {} of {} replications produced standard errors", ok.len(), reps.len()))
    } else {
        let p = ok[0].0.len();
        let mut worst = 0.0f64;
        let mut parts = Vec::new();
        for j in 0..p {
            let est: Vec<f64> = ok.iter().map(|o| o.0[j]).collect();
            let mean = est.iter().sum::<f64>() / est.len() as f64;
            let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (est.len() - 1) as f64).sqrt();
            let se = ok.iter().map(|o| o.1[j]).sum::<f64>() / ok.len() as f64;
            let rel = (se / sd - 1.0).abs();
            worst = worst.max(rel);
            parts.push(format!("beta[{j}] mean SE {se:.4} vs SD {sd:.4}"));
        }
        outcome(worst <= 0.25, format!("{} replications; {}; worst relative gap {worst:.3}", ok.len(), parts.join(", ")))
    };
    let converged: Vec<_> = ok.iter().take(50).filter(|o| o.4).collect();
    let worst_ratio = converged.iter().map(|o| o.2 / o.3).fold(0.0f64, f64::max);
    let c10 = outcome(
        !converged.is_empty() && worst_ratio < 1e-3,
        format!("{} converged fits; max |score| / |J|_F = {worst_ratio:.2e}", converged.len()),
    );
    (c6, c10)
}

fn criterion_7() -> Outcome {
    let cells = reference_grid_cells().into_iter().map(|(g, k, h, b)| GridCell::from_bic(g, k, h, b)).collect::<Vec<_>>();
    let n = cells.len();
    match select(cells) {
        Ok(r) => {
            let c = r.selected_cell();
            outcome(
                n == 48 && (c.g, c.k, c.h) == (5, 3, 2) && c.bic == 5256.45,
                format!("{n} cells; selected G={} K={} H={} with BIC {}", c.g, c.k, c.h, c.bic),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn criterion_8() -> Outcome {
    let mut bad = Vec::new();
    for g in 2..=5 {
        for h in 1..=3 {
            let c = ParameterCounts::of(&ModelSpec::new(g, 2, h, 0, 0));
            if c.eta0 != (g - 1) + (h - 1) || c.eta1 != g * (g - 1) + (h - 1) {
                bad.push(format!("G={g} H={h}"));
            }
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "12 (G, H) pairs match".into() } else { format!("mismatch at {}", bad.join(", ")) })
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_logit = 0.0f64;
    let mut worst_simplex = 0.0f64;
    for _ in 0..1000 {
        let g_n = rng.random_range(2..=5);
        let h_n = rng.random_range(1..=3);
        let mut thresholds = || {
            let mut free = vec![rng.random_range(-2.0..2.0)];
            free.extend((1..g_n - 1).map(|_| rng.random_range(-1.5..1.0)));
            thresholds_from_free(&free)
        };
        let alpha0 = thresholds();
        let alpha1: Vec<Vec<f64>> = (0..g_n).map(|_| thresholds()).collect();
        let psi0: Vec<f64> = (1..h_n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let psi1: Vec<f64> = (1..h_n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let eta0 = InitialLogits { alpha: alpha0.clone(), psi: psi0.clone() };
        let eta1 = TransitionLogits { alpha: alpha1.clone(), psi: psi1.clone() };
        let law = build_chain_law(&eta0, &eta1, g_n, h_n).unwrap();
        for h in 0..h_n {
            let simplex = |p: &[f64]| (p.iter().sum::<f64>() - 1.0).abs().max(if p.iter().all(|v| *v >= 0.0) { 0.0 } else { 1.0 });
            worst_simplex = worst_simplex.max(simplex(&law.delta[h]));
            let back = law.initial_logits(h).unwrap();
            for (b, a) in back.iter().zip(&alpha0) {
                worst_logit = worst_logit.max((b - (a + class_shift(&psi0, h))).abs());
            }
            for from in 0..g_n {
                worst_simplex = worst_simplex.max(simplex(&law.q[h][from]));
                let back = law.transition_logits(h, from).unwrap();
                for (b, a) in back.iter().zip(&alpha1[from]) {
                    worst_logit = worst_logit.max((b - (a + class_shift(&psi1, h))).abs());
                }
            }
        }
    }
    outcome(
        worst_logit < 1e-10 && worst_simplex < 1e-12,
        format!("max logit gap {worst_logit:.2e}, max simplex defect {worst_simplex:.2e} over 1000 draws"),
    )
}

fn report(failed: &mut usize, id: usize, name: &str, o: Outcome) {
    if !o.pass {
        *failed += 1;
    }
    println!("{} criterion {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut failed = 0;
    report(&mut failed, 1, "oracle equivalence", criterion_1());
    report(&mut failed, 2, "E-step exactness", criterion_2());
    report(&mut failed, 3, "EM monotonicity", criterion_3());
    report(&mut failed, 4, "MAR factorization", criterion_4());
    report(&mut failed, 7, "selection replay", criterion_7());
    report(&mut failed, 8, "parameter counts", criterion_8());
    report(&mut failed, 9, "global-logit round trip", criterion_9());

    let (truth, spec) = recovery_truth();
    let data = simulate_design(&truth, &spec, 500, 6, 8999);
    let timed = ModelSpec::for_data(&data, 2, 2, 2).with_em(EmControls { starts: 10, ..EmControls::default() });
    let t0 = Instant::now();
    let single_ok = fit_with(&data, &timed, FitOptions::default()).is_ok();
    let single = if single_ok { t0.elapsed() } else { Duration::MAX };

    // The timed fit above uses 10 starts; the replications use 3 to keep the
    // harness affordable on one core.
    let reps = replications(100, 3);
    report(&mut failed, 5, "parameter recovery", criterion_5(&reps, single));
    let (c6, c10) = criterion_6_and_10(&reps);
    report(&mut failed, 6, "SE calibration", c6);
    report(&mut failed, 10, "score at optimum", c10);

    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
