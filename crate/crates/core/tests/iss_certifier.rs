use specpred_core::iss_certifier::{
    check_envelopes, fit_certificate, fit_constants, fit_decay_rate, iss_rhs, run_ensemble, Channel, EnsembleConfig,
};
use specpred_core::pipeline::{builtin_config, certify};
use specpred_core::sim_engine::{builtin_scenarios, simulate};
use specpred_core::spectral_model::build_reaction_diffusion;

fn small_ensemble() -> EnsembleConfig {
    EnsembleConfig { free: 3, d1: 2, d2: 2, seed: 5, t_final: 6.0, ..EnsembleConfig::default() }
}

#[test]
fn free_runs_decay_faster_than_kappa() {
    let desc = build_reaction_diffusion(15.0);
    let cert = certify(&desc, &builtin_config()).unwrap();
    for (name, s) in builtin_scenarios(&desc, &cert).unwrap() {
        if !name.ends_with("_free") {
            continue;
        }
        let fit = fit_decay_rate(&simulate(&s).unwrap(), &cert).unwrap();
        assert!(fit.kappa_hat >= cert.kappa, "{name}: {} < {}", fit.kappa_hat, cert.kappa);
        assert!(fit.window_start >= cert.t0 + cert.d0 + cert.delta - 1e-12);
    }
}

#[test]
fn decay_fit_needs_a_disturbance_free_run() {
    let desc = build_reaction_diffusion(15.0);
    let cert = certify(&desc, &builtin_config()).unwrap();
    let (_, s) = builtin_scenarios(&desc, &cert).unwrap().remove(2);
    assert!(fit_decay_rate(&simulate(&s).unwrap(), &cert).is_err());
}

#[test]
fn rhs_without_disturbances_is_the_decay_term() {
    let t: Vec<f64> = (0..500).map(|j| j as f64 * 0.01).collect();
    let zero = vec![0.0; t.len()];
    let rhs = iss_rhs(&t, 0.01, 2.0, &zero, &zero, 0.7, Some(0.3), [3.0, 5.0, 7.0]);
    for (r, &tj) in rhs.iter().zip(&t) {
        assert_eq!(*r, 3.0 * (-0.7 * tj).exp() * 2.0);
    }
}

#[test]
fn rhs_is_monotone_in_the_disturbances() {
    let t: Vec<f64> = (0..400).map(|j| j as f64 * 0.01).collect();
    let d: Vec<f64> = t.iter().map(|x| (3.0 * x).sin().abs()).collect();
    let bigger: Vec<f64> = d.iter().enumerate().map(|(j, v)| v + if j % 7 == 0 { 0.5 } else { 0.0 }).collect();
    for lag in [None, Some(0.25)] {
        let a = iss_rhs(&t, 0.01, 1.0, &d, &d, 0.5, lag, [1.0, 2.0, 3.0]);
        let b = iss_rhs(&t, 0.01, 1.0, &bigger, &bigger, 0.5, lag, [1.0, 2.0, 3.0]);
        assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
    }
}

#[test]
fn fitted_envelopes_hold_on_their_own_ensemble() {
    let desc = build_reaction_diffusion(15.0);
    let cert = certify(&desc, &builtin_config()).unwrap();
    let cfg = small_ensemble();
    let ens = run_ensemble(&desc, &cert, &cfg).unwrap();
    let mut fitted = cert.clone();
    fitted.install_fit(fit_constants(&ens, &cert).unwrap()).unwrap();
    for (ch, tr) in &ens {
        let rep = check_envelopes(tr, &fitted).unwrap();
        // each channel sees only its own constant, fitted at 1.1 x the worst ratio
        for name in ["truncated_iss", "control_sigma"] {
            let r = rep.get(name).unwrap().worst_ratio;
            assert!(r <= 1.0 / 1.1 + 1e-12, "{ch:?} {name} {r}");
        }
        assert!(rep.pass, "{ch:?}");
    }
    // same ensemble through the one-call helper
    let mut again = cert.clone();
    fit_certificate(&desc, &mut again, &cfg).unwrap();
    assert_eq!(again, fitted);
}

#[test]
fn ensemble_channels_follow_the_layout() {
    let desc = build_reaction_diffusion(15.0);
    let cert = certify(&desc, &builtin_config()).unwrap();
    let ens = run_ensemble(&desc, &cert, &small_ensemble()).unwrap();
    let chans: Vec<Channel> = ens.iter().map(|e| e.0).collect();
    assert_eq!(chans, [Channel::Free, Channel::Free, Channel::Free, Channel::D1, Channel::D1, Channel::D2, Channel::D2]);
    for (ch, tr) in &ens {
        let d1 = tr.d1.iter().any(|v| *v != 0.0);
        let d2 = tr.d2.iter().any(|v| *v != 0.0);
        assert_eq!((d1, d2), (*ch == Channel::D1, *ch == Channel::D2));
    }
}
