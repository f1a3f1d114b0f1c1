use specpred_core::lemma2::{lemma2_validate, Lemma2Config, Lemma2Problem, TEST_TRIPLE_SCALE};

fn validation_problem() -> (Lemma2Problem, f64) {
    let eps = 0.5 * Lemma2Problem::test_triple(TEST_TRIPLE_SCALE, 0.25).small_gain_threshold();
    let p = Lemma2Problem::test_triple(TEST_TRIPLE_SCALE, eps);
    let sigma = p.sigma().unwrap().sigma;
    (p, sigma)
}

fn cfg(members: usize) -> Lemma2Config {
    Lemma2Config { members, ..Lemma2Config::default() }
}

#[test]
fn fitted_constants_are_finite_and_at_least_one() {
    let (p, sigma) = validation_problem();
    let r = lemma2_validate(&p, sigma, &cfg(20)).unwrap();
    assert!(r.holds, "{}", r.summary);
    assert!(r.m_fit >= 1.0 && r.m_fit.is_finite());
    assert!(r.n_fit > 0.0 && r.n_fit.is_finite());
    assert!(r.sigma > 0.0 && r.sigma < p.lambda);
}

#[test]
fn doubling_the_ensemble_barely_moves_m() {
    let (p, sigma) = validation_problem();
    let a = lemma2_validate(&p, sigma, &cfg(50)).unwrap();
    let b = lemma2_validate(&p, sigma, &cfg(100)).unwrap();
    assert!(b.m_fit >= a.m_fit);
    assert!((b.m_fit - a.m_fit) / a.m_fit < 0.05, "{} -> {}", a.m_fit, b.m_fit);
}

#[test]
fn smaller_perturbation_gives_smaller_overshoot() {
    let (p, sigma) = validation_problem();
    let half = Lemma2Problem::test_triple(TEST_TRIPLE_SCALE, 0.5 * p.eps);
    let a = lemma2_validate(&p, sigma, &cfg(20)).unwrap();
    let b = lemma2_validate(&half, sigma, &cfg(20)).unwrap();
    assert!(b.m_fit - 1.0 < a.m_fit - 1.0, "{} vs {}", b.m_fit, a.m_fit);
}
