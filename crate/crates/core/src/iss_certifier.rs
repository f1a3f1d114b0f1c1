//! Checks the fading-memory ISS envelopes on trajectories, fits the
//! constants that have no closed form, and extracts empirical decay rates.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::c;
use crate::signals::{DelaySignal, DisturbanceSignal, HermiteTable, Shape};
use crate::sim_engine::{simulate, Scenario, Trajectory};
use crate::spectral_model::SystemDescriptor;
use crate::synthesis::{Certificate, FittedConstants, Provenance};

/// `s_j = max(e^{-kappa dt} s_{j-1}, d_j)`, the grid version of
/// `sup_{tau <= t_j} e^{-kappa (t_j - tau)} d(tau)`.
pub fn fading_memory_sup(values: &[f64], dt: f64, kappa: f64) -> Vec<f64> {
    let q = (-kappa * dt).exp();
    let mut s = 0.0f64;
    values
        .iter()
        .map(|&d| {
            s = (q * s).max(d);
            s
        })
        .collect()
}

/// Fading-memory sup restricted to `tau in [0, max(t - lag, 0)]`. Reads only
/// samples at or before `t - lag`.
pub fn windowed_fading_sup(values: &[f64], dt: f64, kappa: f64, lag: f64) -> Vec<f64> {
    let s = fading_memory_sup(values, dt, kappa);
    let shift = (lag / dt - 1e-9).ceil().max(0.0) as usize;
    (0..values.len())
        .map(|j| {
            let k = j.saturating_sub(shift);
            (-kappa * ((j - k) as f64) * dt).exp() * s[k]
        })
        .collect()
}

/// `C_a e^{-rate t} x0 + C_b S_rate[d1](t) + C_c S_rate[d2](t)`, with the d2
/// sup restricted to `[0, max(t - lag, 0)]` when `lag` is given.
#[allow(clippy::too_many_arguments)]
pub fn iss_rhs(t: &[f64], dt: f64, x0: f64, d1: &[f64], d2: &[f64], rate: f64, lag: Option<f64>, k: [f64; 3]) -> Vec<f64> {
    let s1 = fading_memory_sup(d1, dt, rate);
    let s2 = match lag {
        Some(l) => windowed_fading_sup(d2, dt, rate, l),
        None => fading_memory_sup(d2, dt, rate),
    };
    t.iter()
        .enumerate()
        .map(|(j, &tj)| k[0] * (-rate * tj).exp() * x0 + k[1] * s1[j] + k[2] * s2[j])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Every constant has a closed form.
    TheoremCheck,
    /// At least one constant was fitted from simulations.
    EnvelopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantUse {
    pub name: String,
    pub value: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub name: String,
    pub pass: bool,
    pub worst_ratio: f64,
    pub t_worst: f64,
    pub kind: CheckKind,
    pub constants: Vec<ConstantUse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub pass: bool,
    pub estimates: Vec<EstimateReport>,
}

impl EnvelopeReport {
    pub fn get(&self, name: &str) -> Option<&EstimateReport> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

/// Relative level below which an observation counts as zero.
pub const OBSERVATION_FLOOR: f64 = 1e-9;

/// Signal scale `||X0|| + sup ||d1|| + sup ||d2||` of a trajectory.
pub fn signal_scale(traj: &Trajectory) -> f64 {
    let sup = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    traj.norm_upper.first().copied().unwrap_or(0.0) + sup(traj.d1_norms()) + sup(traj.d2_norms())
}

/// Worst `observed / bound` and where it occurs. Observations at or below
/// `floor` count as zero, so `0 / 0` passes vacuously.
pub fn worst_ratio(t: &[f64], observed: &[f64], bound: &[f64], floor: f64) -> (f64, f64) {
    let mut worst = (0.0, t.first().copied().unwrap_or(0.0));
    for ((&tj, &o), &b) in t.iter().zip(observed).zip(bound) {
        if o <= floor {
            continue;
        }
        let r = if b > 0.0 { o / b } else { f64::INFINITY };
        if r > worst.0 {
            worst = (r, tj);
        }
    }
    worst
}

fn uses(prov: &std::collections::BTreeMap<String, Provenance>, names: &[(&str, f64)]) -> Vec<ConstantUse> {
    names
        .iter()
        .map(|&(n, v)| ConstantUse { name: n.into(), value: v, provenance: prov.get(n).copied().unwrap_or(Provenance::Fitted) })
        .collect()
}

/// Evaluates the state, control, truncated-state and tail envelopes.
pub fn check_envelopes(traj: &Trajectory, cert: &Certificate) -> Result<EnvelopeReport> {
    let fit = cert.fitted.as_ref().ok_or(Error::MissingFit)?;
    let der = cert.derived.as_ref().ok_or(Error::MissingFit)?;
    if traj.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let (dt, t) = (traj.dt, &traj.t);
    let x0 = traj.norm_lower[0];
    let d1 = traj.d1_norms();
    let d2 = traj.d2_norms();
    let lag = cert.d0 - cert.delta;
    let floor = OBSERVATION_FLOOR * signal_scale(traj);
    let (kappa, sigma) = (cert.kappa, cert.sigma.sigma);
    let prov = cert.provenance();
    let uses = |names: &[(&str, f64)]| uses(&prov, names);
    let mut estimates = Vec::new();
    let mut push = |name: &str, observed: &[f64], bound: &[f64], floor: f64, consts: Vec<ConstantUse>| {
        let (w, tw) = worst_ratio(t, observed, bound, floor);
        let kind = if consts.iter().any(|c| c.provenance == Provenance::Fitted) { CheckKind::EnvelopeFit } else { CheckKind::TheoremCheck };
        estimates.push(EstimateReport { name: name.into(), pass: w <= 1.0, worst_ratio: w, t_worst: tw, kind, constants: consts });
    };

    let rhs = iss_rhs(t, dt, x0, &d1, &d2, kappa, Some(lag), [der.c_bar1, der.c_bar2, der.c_bar3]);
    push("state_iss", &traj.norm_upper, &rhs, floor, uses(&[("kappa", kappa), ("c_bar1", der.c_bar1), ("c_bar2", der.c_bar2), ("c_bar3", der.c_bar3)]));

    let un = traj.u_norms();
    let rhs = iss_rhs(t, dt, x0, &d1, &d2, kappa, None, [fit.c_bar4, fit.c_bar5, fit.c_bar6]);
    push("control_iss", &un, &rhs, floor, uses(&[("kappa", kappa), ("c_bar4", fit.c_bar4), ("c_bar5", fit.c_bar5), ("c_bar6", fit.c_bar6)]));

    let yn = traj.y_norms();
    let rhs = iss_rhs(t, dt, x0, &d1, &d2, sigma, Some(lag), [fit.c1, fit.c2, fit.c3]);
    push("truncated_iss", &yn, &rhs, floor, uses(&[("sigma", sigma), ("c1", fit.c1), ("c2", fit.c2), ("c3", fit.c3)]));

    let rhs = iss_rhs(t, dt, x0, &d1, &d2, sigma, None, [fit.c_bar4, fit.c_bar5, fit.c_bar6]);
    push("control_sigma", &un, &rhs, floor, uses(&[("sigma", sigma), ("c_bar4", fit.c_bar4), ("c_bar5", fit.c_bar5), ("c_bar6", fit.c_bar6)]));

    // tail energy against C~1 e^{-2 kappa t} ||X0||^2 + C~2 S1^2 + C~3 S2^2
    let tail = traj.tail_energy();
    let s1 = fading_memory_sup(&d1, dt, kappa);
    let s2 = windowed_fading_sup(&d2, dt, kappa, lag);
    let tc = der.tail;
    let rhs: Vec<f64> = (0..traj.len())
        .map(|j| tc.c_tilde1 * (-2.0 * kappa * t[j]).exp() * x0 * x0 + tc.c_tilde2 * s1[j] * s1[j] + tc.c_tilde3 * s2[j] * s2[j])
        .collect();
    push("tail", &tail, &rhs, floor * floor, uses(&[("kappa", kappa), ("c_tilde1", tc.c_tilde1), ("c_tilde2", tc.c_tilde2), ("c_tilde3", tc.c_tilde3)]));

    let pass = estimates.iter().all(|e| e.pass);
    Ok(EnvelopeReport { pass, estimates })
}

/// Which input a fitting run excites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// `X0 != 0`, `d1 = d2 = 0`
    Free,
    /// `X0 = 0`, `d2 = 0`
    D1,
    /// `X0 = 0`, `d1 = 0`
    D2,
    /// Everything on; never used for fitting.
    Mixed,
}

fn max_ratio(t: &[f64], observed: &[f64], basis: &[f64], floor: f64) -> f64 {
    worst_ratio(t, observed, basis, floor).0
}

/// Fits every constant as 1.1 times the worst ratio over its channel.
pub fn fit_constants(ensemble: &[(Channel, Trajectory)], cert: &Certificate) -> Result<FittedConstants> {
    for (ch, name) in [(Channel::Free, "disturbance-free"), (Channel::D1, "d1-only"), (Channel::D2, "d2-only")] {
        if !ensemble.iter().any(|(c, _)| *c == ch) {
            return Err(Error::MissingChannel(name));
        }
    }
    let lag = cert.d0 - cert.delta;
    let (kappa, sigma) = (cert.kappa, cert.sigma.sigma);
    // [c1, c2, c3, c_bar4, c_bar5, c_bar6, c_bar1, c_bar2, c_bar3]
    let mut worst = [0.0f64; 9];
    for (ch, traj) in ensemble {
        let t = &traj.t;
        let floor = OBSERVATION_FLOOR * signal_scale(traj);
        let yn = traj.y_norms();
        let un = traj.u_norms();
        let xn = &traj.norm_upper;
        let (idx, bases): ([usize; 3], [Vec<f64>; 3]) = match ch {
            Channel::Free => {
                let x0 = traj.norm_lower[0];
                let e = |r: f64| t.iter().map(|&tj| (-r * tj).exp() * x0).collect::<Vec<_>>();
                ([0, 3, 6], [e(sigma), e(sigma), e(kappa)])
            }
            Channel::D1 => {
                let d = traj.d1_norms();
                let s = fading_memory_sup(&d, traj.dt, sigma);
                ([1, 4, 7], [s.clone(), s, fading_memory_sup(&d, traj.dt, kappa)])
            }
            Channel::D2 => {
                let d = traj.d2_norms();
                ([2, 5, 8], [
                    windowed_fading_sup(&d, traj.dt, sigma, lag),
                    fading_memory_sup(&d, traj.dt, sigma),
                    windowed_fading_sup(&d, traj.dt, kappa, lag),
                ])
            }
            Channel::Mixed => continue,
        };
        worst[idx[0]] = worst[idx[0]].max(max_ratio(t, &yn, &bases[0], floor));
        worst[idx[1]] = worst[idx[1]].max(max_ratio(t, &un, &bases[1], floor));
        worst[idx[2]] = worst[idx[2]].max(max_ratio(t, xn, &bases[2], floor));
    }
    if worst.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("fitted constant (an observation exceeds a zero bound)".into()));
    }
    let w = worst.map(|v| 1.1 * v);
    let count = |ch| ensemble.iter().filter(|(c, _)| *c == ch).count();
    Ok(FittedConstants {
        c1: w[0],
        c2: w[1],
        c3: w[2],
        c_bar4: w[3],
        c_bar5: w[4],
        c_bar6: w[5],
        c_bar1_direct: w[6],
        c_bar2_direct: w[7],
        c_bar3_direct: w[8],
        ensemble: format!(
            "{} disturbance-free, {} d1-only, {} d2-only runs; worst ratio x 1.1",
            count(Channel::Free),
            count(Channel::D1),
            count(Channel::D2)
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub kappa_hat: f64,
    pub window_start: f64,
    pub window_end: f64,
    /// The norm reached numerical zero and the window was cut short.
    pub truncated: bool,
}

/// Below this the logarithm of a norm is no longer meaningful.
pub const NUMERICAL_ZERO: f64 = 1e-250;

/// Least-squares slope of `log norm` over `t >= start`; `kappa_hat = -slope`.
pub fn fit_decay_series(t: &[f64], norms: &[f64], start: f64) -> Result<DecayFit> {
    let mut pts = Vec::new();
    let mut truncated = false;
    for (&tj, &n) in t.iter().zip(norms) {
        if tj < start {
            continue;
        }
        if !(n > NUMERICAL_ZERO) {
            truncated = true;
            break;
        }
        pts.push((tj, n.ln()));
    }
    if pts.len() < 2 {
        return Err(Error::InvalidInput("fewer than two usable samples in the decay-fit window".into()));
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    Ok(DecayFit { kappa_hat: -sxy / sxx, window_start: pts[0].0, window_end: pts[pts.len() - 1].0, truncated })
}

/// Decay rate of `||X||_upper` after the transient `t0 + D0 + delta`.
pub fn fit_decay_rate(traj: &Trajectory, cert: &Certificate) -> Result<DecayFit> {
    if traj.d1.iter().chain(&traj.d2).any(|v| *v != 0.0) {
        return Err(Error::InvalidInput("decay-rate fit needs a disturbance-free trajectory".into()));
    }
    fit_decay_series(&traj.t, &traj.norm_upper, cert.t0 + cert.d0 + cert.delta)
}

/// Size and seed of a fitting or validation ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub free: usize,
    pub d1: usize,
    pub d2: usize,
    pub seed: u64,
    pub t_final: f64,
    pub dt: f64,
    /// Stream offset so that disjoint ensembles can share a seed.
    pub stream_offset: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { free: 8, d1: 6, d2: 6, seed: 7, t_final: 10.0, dt: 1e-3, stream_offset: 0 }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, t_final: f64) -> Shape {
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    match rng.gen_range(0..4) {
        0 => Shape::Sinusoid { amplitude: rng.gen_range(0.2..1.0), omega: rng.gen_range(0.2..6.0), phase: rng.gen_range(0.0..2.0 * PI) },
        1 => Shape::SmoothedStep { amplitude: sign * rng.gen_range(0.2..1.0), onset: rng.gen_range(0.0..0.6 * t_final), rise: rng.gen_range(0.1..2.0) },
        2 => Shape::Pulse { amplitude: sign * rng.gen_range(0.2..1.0), start: rng.gen_range(0.0..0.8 * t_final), width: rng.gen_range(0.1..2.0) },
        _ => Shape::ExponentialDecay { amplitude: sign * rng.gen_range(0.2..1.0), rate: rng.gen_range(0.1..3.0) },
    }
}

/// Random disturbance with one or two components per input channel.
pub fn random_disturbance(rng: &mut ChaCha8Rng, m: usize, t_final: f64) -> DisturbanceSignal {
    let mut comps = Vec::new();
    for ch in 0..m {
        for _ in 0..rng.gen_range(1..=2) {
            comps.push(crate::signals::Component { channel: ch, shape: random_shape(rng, t_final) });
        }
    }
    DisturbanceSignal { components: comps }
}

/// Random admissible delay with `|D - D0| <= delta`.
pub fn random_delay(rng: &mut ChaCha8Rng, d0: f64, delta: f64, t_final: f64) -> DelaySignal {
    match rng.gen_range(0..5) {
        0 => DelaySignal::Constant { d0 },
        1 | 2 => DelaySignal::Sinusoid {
            d0,
            amplitude: delta * rng.gen_range(0.0..=1.0),
            omega: rng.gen_range(0.5..6.0),
            phase: rng.gen_range(0.0..2.0 * PI),
        },
        _ => {
            let knots = ((t_final / 0.5).ceil() as usize + 1).max(2);
            let times: Vec<f64> = (0..knots).map(|i| i as f64 * 0.5).collect();
            let values: Vec<f64> = (0..knots).map(|_| delta * rng.gen_range(-1.0..=1.0)).collect();
            DelaySignal::Table { d0, table: HermiteTable::new(times, values).expect("valid knots") }
        }
    }
}

/// Random initial state on the first few modes, scaled like `1/n`.
fn random_state(rng: &mut ChaCha8Rng, n_modes: usize, complex: bool) -> Vec<num_complex::Complex64> {
    let mut x = vec![c(0.0); n_modes];
    for (i, v) in x.iter_mut().enumerate().take(5) {
        let s = 1.0 / (i + 1) as f64;
        let re = rng.gen_range(-1.0..1.0) * s;
        let im = if complex { rng.gen_range(-1.0..1.0) * s } else { 0.0 };
        *v = num_complex::Complex64::new(re, im);
    }
    // keep the unstable part excited
    if x[0].norm() < 0.1 {
        x[0] = c(0.5);
    }
    x
}

/// Deterministic random scenario for member `index` of a stream.
pub fn random_scenario(desc: &SystemDescriptor, cert: &Certificate, channel: Channel, seed: u64, index: u64, t_final: f64, dt: f64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let delay = random_delay(&mut rng, cert.d0, cert.delta, t_final);
    let base = Scenario::new(desc.clone(), cert.clone(), delay, &[], t_final)?.with_dt(dt);
    let n = base.n_modes;
    let complex = desc.field == crate::spectral_model::Field::Complex;
    let m = desc.num_inputs;
    let zero = DisturbanceSignal::zero;
    let s = match channel {
        Channel::Free => Scenario { x0: random_state(&mut rng, n, complex), ..base },
        Channel::D1 => base.with_disturbances(random_disturbance(&mut rng, m, t_final), zero()),
        Channel::D2 => base.with_disturbances(zero(), random_disturbance(&mut rng, m, t_final)),
        Channel::Mixed => {
            let x0 = random_state(&mut rng, n, complex);
            let d1 = random_disturbance(&mut rng, m, t_final);
            let d2 = random_disturbance(&mut rng, m, t_final);
            Scenario { x0, ..base }.with_disturbances(d1, d2)
        }
    };
    s.validate()?;
    Ok(s)
}

/// Channel layout of an ensemble: members are numbered in the order free,
/// d1, d2 and each draws from its own RNG stream.
pub fn ensemble_layout(cfg: &EnsembleConfig) -> Vec<(Channel, u64)> {
    let chans = std::iter::repeat_n(Channel::Free, cfg.free)
        .chain(std::iter::repeat_n(Channel::D1, cfg.d1))
        .chain(std::iter::repeat_n(Channel::D2, cfg.d2));
    chans.enumerate().map(|(i, ch)| (ch, cfg.stream_offset + i as u64)).collect()
}

/// Simulates the fitting ensemble in parallel; order is preserved.
pub fn run_ensemble(desc: &SystemDescriptor, cert: &Certificate, cfg: &EnsembleConfig) -> Result<Vec<(Channel, Trajectory)>> {
    if cfg.free + cfg.d1 + cfg.d2 == 0 {
        return Err(Error::InvalidInput("empty ensemble".into()));
    }
    ensemble_layout(cfg)
        .into_par_iter()
        .map(|(ch, idx)| {
            let s = random_scenario(desc, cert, ch, cfg.seed, idx, cfg.t_final, cfg.dt)?;
            Ok((ch, simulate(&s)?))
        })
        .collect()
}

/// Runs the ensemble, fits the constants and installs them in `cert`.
pub fn fit_certificate(desc: &SystemDescriptor, cert: &mut Certificate, cfg: &EnsembleConfig) -> Result<()> {
    let ens = run_ensemble(desc, cert, cfg)?;
    let fit = fit_constants(&ens, cert)?;
    log::info!("fitted constants from {}", fit.ensemble);
    cert.install_fit(fit)
}
