mod common;

use hmmdrop::em::{e_step, fit_with, FitOptions};
use hmmdrop::likelihood::observed_loglik;
use hmmdrop::selection::sensitivity_compare;
use hmmdrop::simulate::{random_instance, simulate_panel, InstanceShape};
use hmmdrop::{fit, EmControls, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{RecoveryCovariates, posterior_gap, recovery_truth, simulate_design};

#[test]
fn e_step_matches_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let shape = InstanceShape::random_small(&mut rng);
        let (data, spec, params) = random_instance(&mut rng, shape);
        let post = e_step(&data, &params, &spec).unwrap();
        assert!(posterior_gap(&data, &params, &post) < 1e-10);
    }
}

#[test]
fn dropout_class_relabelling_leaves_likelihood_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape = InstanceShape { n: 6, t: 4, g: 2, k: 2, h: 2, p_x: 1, p_w: 1 };
    let (data, spec, params) = random_instance(&mut rng, shape);
    let mut swapped = params.clone();
    swapped.xi.reverse();
    for row in &mut swapped.pi {
        row.reverse();
    }
    let a = observed_loglik(&data, &params, &spec).unwrap();
    let b = observed_loglik(&data, &swapped, &spec).unwrap();
    assert!((a - b).abs() < 1e-10 * a.abs());
}

#[test]
fn em_trace_is_monotone_and_subject_order_is_irrelevant() {
    let (truth, spec) = recovery_truth();
    let data = simulate_design(&truth, &spec, 120, 5, 41);
    let em = EmControls { starts: 3, seed: 2, ..EmControls::default() };
    let spec = ModelSpec::for_data(&data, 2, 2, 2).with_em(em);
    let a = fit(&data, &spec).unwrap();
    for w in a.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
    }
    let mut reversed = data.clone();
    reversed.subjects.reverse();
    let b = fit(&reversed, &spec).unwrap();
    assert!((a.loglik - b.loglik).abs() < 1e-6 * a.loglik.abs(), "{} vs {}", a.loglik, b.loglik);
}

#[test]
fn modal_states_recover_truth() {
    let (truth, spec) = recovery_truth();
    let (data, sim) = simulate_panel(&truth, &spec, 300, 6, &RecoveryCovariates, 5).unwrap();
    let post = e_step(&data, &truth, &spec).unwrap();
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, s) in data.subjects.iter().enumerate() {
        for t in 0..s.y.len() {
            let map = (0..2).max_by(|&a, &b| post.a_marg(i, t, a).total_cmp(&post.a_marg(i, t, b))).unwrap();
            hit += (map == sim.subjects[i].z[t]) as usize;
            total += 1;
        }
    }
    let rate = hit as f64 / total as f64;
    assert!(rate >= 0.9, "state recovery {rate}");
}

#[test]
fn sensitivity_compares_shared_blocks() {
    let (truth, spec) = recovery_truth();
    let data = simulate_design(&truth, &spec, 150, 5, 8);
    let em = EmControls { starts: 2, seed: 4, ..EmControls::default() };
    let mnar = fit_with(&data, &ModelSpec::for_data(&data, 2, 2, 2).with_em(em.clone()), FitOptions::default()).unwrap();
    let mar = fit_with(&data, &ModelSpec::for_data(&data, 2, 2, 1).with_em(em), FitOptions::default()).unwrap();
    let rep = sensitivity_compare(&mnar, &mar, None, &data.x_names, &data.w_names).unwrap();
    // beta (2) + zeta (2) + sigma2 + gamma (1) + xi (2)
    assert_eq!(rep.diffs.len(), 8);
    assert!((rep.bic_diff - (mnar.bic - mar.bic)).abs() < 1e-9);
    for d in &rep.diffs {
        assert!((d.diff - (d.mnar - d.mar)).abs() < 1e-12);
        assert!(d.scaled.is_none());
    }
}
