//! Subcommand bodies. Each returns data; printing and exit codes live in
//! `main`.

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use specpred_core::iss_certifier::{check_envelopes, fit_certificate, fit_decay_rate, EnvelopeReport};
use specpred_core::lemma2::{lemma2_experiment, lemma2_validate, Lemma2Config, Lemma2Problem, Lemma2Report, TEST_TRIPLE_SCALE};
use specpred_core::pipeline::certify;
use specpred_core::signals::DelaySignal;
use specpred_core::sim_engine::{oracle_simulate, simulate, Trajectory};
use specpred_core::spectral_model::SystemDescriptor;
use specpred_core::synthesis::Certificate;

use crate::config::{DescriptorFile, ScenarioFile};

/// Runs `f` on a pool of `jobs` threads (0 picks the machine default).
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(pool.install(f))
}

/// Exact certificate plus, unless `fit` is off, the fitted constants.
pub fn certify_file(file: &DescriptorFile, fit: bool) -> Result<Certificate> {
    let desc = SystemDescriptor::from_doc(&file.system)?;
    let mut cert = certify(&desc, &file.synthesis)?;
    if fit {
        fit_certificate(&desc, &mut cert, &file.fit)?;
    }
    Ok(cert)
}

pub fn simulate_file(scen: &ScenarioFile, cert: &Certificate, oracle: bool) -> Result<Trajectory> {
    let s = scen.build(cert)?;
    Ok(if oracle { oracle_simulate(&s)? } else { simulate(&s)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    pub kappa_hat: f64,
    pub kappa: f64,
    pub window_start: f64,
    pub window_end: f64,
    pub truncated: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayCheck>,
    pub envelopes: EnvelopeReport,
}

fn disturbance_free(tr: &Trajectory) -> bool {
    tr.d1.iter().chain(&tr.d2).all(|v| *v == 0.0)
}

/// Envelope report, plus the decay-rate comparison for disturbance-free
/// runs that start away from zero.
pub fn check_trajectory(tr: &Trajectory, cert: &Certificate) -> Result<CheckReport> {
    let envelopes = check_envelopes(tr, cert)?;
    let mut decay = None;
    let settle = cert.t0 + cert.d0 + cert.delta;
    let tail = tr.t.iter().filter(|&&t| t >= settle).count();
    if disturbance_free(tr) && tr.norm_upper[0] > 0.0 && tail >= 2 {
        let f = fit_decay_rate(tr, cert)?;
        decay = Some(DecayCheck {
            kappa_hat: f.kappa_hat,
            kappa: cert.kappa,
            window_start: f.window_start,
            window_end: f.window_end,
            truncated: f.truncated,
            pass: f.kappa_hat >= cert.kappa,
        });
    }
    let pass = envelopes.pass && decay.as_ref().is_none_or(|d| d.pass);
    Ok(CheckReport { pass, decay, envelopes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Sinusoidal delay amplitude.
    Amplitude,
    /// Sinusoidal delay frequency.
    Omega,
    D1Scale,
    D2Scale,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Amplitude => "amplitude",
            SweepParam::Omega => "omega",
            SweepParam::D1Scale => "d1_scale",
            SweepParam::D2Scale => "d2_scale",
        }
    }
}

/// Range end: a number, or a multiple of the certified uncertainty such as
/// `delta` or `0.5delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Value(f64),
    Delta(f64),
}

impl Bound {
    pub fn resolve(self, cert: &Certificate) -> f64 {
        match self {
            Bound::Value(v) => v,
            Bound::Delta(k) => k * cert.delta,
        }
    }
}

impl FromStr for Bound {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(k) = s.strip_suffix("delta") {
            let k = k.trim().trim_end_matches('*');
            return Ok(Bound::Delta(if k.is_empty() { 1.0 } else { k.parse().with_context(|| format!("bad multiplier in {s:?}"))? }));
        }
        Ok(Bound::Value(s.parse().with_context(|| format!("bad range end {s:?}"))?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub lo: Bound,
    pub hi: Bound,
    pub n: usize,
}

impl FromStr for SweepAxis {
    type Err = anyhow::Error;
    /// `param=lo:hi:n`
    fn from_str(s: &str) -> Result<Self> {
        let (name, range) = s.split_once('=').with_context(|| format!("sweep axis {s:?} must look like param=lo:hi:n"))?;
        let param = match name.trim() {
            "amplitude" => SweepParam::Amplitude,
            "omega" => SweepParam::Omega,
            "d1_scale" => SweepParam::D1Scale,
            "d2_scale" => SweepParam::D2Scale,
            other => bail!("unknown sweep parameter {other:?} (amplitude, omega, d1_scale, d2_scale)"),
        };
        let parts: Vec<&str> = range.split(':').collect();
        let [lo, hi, n] = parts[..] else { bail!("sweep range {range:?} must be lo:hi:n") };
        let n: usize = n.trim().parse().with_context(|| format!("bad point count {n:?}"))?;
        if n == 0 {
            bail!("a sweep needs at least one point");
        }
        Ok(SweepAxis { param, lo: lo.parse()?, hi: hi.parse()?, n })
    }
}

impl SweepAxis {
    pub fn values(&self, cert: &Certificate) -> Vec<f64> {
        let (lo, hi) = (self.lo.resolve(cert), self.hi.resolve(cert));
        if self.n == 1 {
            return vec![lo];
        }
        (0..self.n).map(|i| lo + (hi - lo) * i as f64 / (self.n - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub delay_amplitude: f64,
    pub certified: bool,
    pub kappa_hat: Option<f64>,
    pub kappa: f64,
    /// `(estimate, worst ratio)` in report order.
    pub ratios: Vec<(String, f64)>,
    pub envelope_pass: bool,
    pub pass: bool,
}

/// Relative slack when comparing an amplitude with the certified delta.
const AMPLITUDE_SLACK: f64 = 1e-12;

fn sweep_point(base: &ScenarioFile, cert: &Certificate, param: SweepParam, value: f64) -> Result<SweepRow> {
    let mut scen = base.clone();
    match param {
        SweepParam::Amplitude | SweepParam::Omega => {
            let (omega, phase, amp) = match &base.delay {
                DelaySignal::Sinusoid { omega, phase, amplitude, .. } => (*omega, *phase, *amplitude),
                _ if param == SweepParam::Omega => bail!("an omega sweep needs a sinusoidal delay"),
                _ => (3.0, 0.0, 0.0),
            };
            scen.delay = if param == SweepParam::Amplitude {
                DelaySignal::Sinusoid { d0: cert.d0, amplitude: value, omega, phase }
            } else {
                DelaySignal::Sinusoid { d0: cert.d0, amplitude: amp, omega: value, phase }
            };
        }
        SweepParam::D1Scale => scen.disturbance_d1 = base.disturbance_d1.scaled(value),
        SweepParam::D2Scale => scen.disturbance_d2 = base.disturbance_d2.scaled(value),
    }
    let amplitude = scen.delay.amplitude();
    let certified = amplitude <= cert.delta * (1.0 + AMPLITUDE_SLACK);
    scen.integration.certified = certified;
    let tr = simulate_file(&scen, cert, false)?;
    let rep = check_trajectory(&tr, cert)?;
    Ok(SweepRow {
        param: param.name().into(),
        value,
        delay_amplitude: amplitude,
        certified,
        kappa_hat: rep.decay.as_ref().map(|d| d.kappa_hat),
        kappa: cert.kappa,
        ratios: rep.envelopes.estimates.iter().map(|e| (e.name.clone(), e.worst_ratio)).collect(),
        envelope_pass: rep.envelopes.pass,
        pass: rep.pass,
    })
}

/// One row per grid point, in grid order. Amplitude sweeps get one more row
/// at `1.5 delta`, run in uncertified mode.
pub fn sweep(base: &ScenarioFile, cert: &Certificate, axis: &SweepAxis) -> Result<Vec<SweepRow>> {
    if cert.fitted.is_none() {
        bail!("the certificate has no fitted constants; run `certify` without --no-fit first");
    }
    let mut values = axis.values(cert);
    if axis.param == SweepParam::Amplitude {
        values.push(1.5 * cert.delta);
    }
    values.par_iter().map(|&v| sweep_point(base, cert, axis.param, v)).collect()
}

/// Certified rows decide the outcome; uncertified rows are informational.
pub fn sweep_passes(rows: &[SweepRow]) -> bool {
    rows.iter().filter(|r| r.certified).all(|r| r.pass)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names: Vec<String> = rows.first().map(|r| r.ratios.iter().map(|(n, _)| format!("{n}_ratio")).collect()).unwrap_or_default();
    let mut head = vec!["param", "value", "delay_amplitude", "status", "kappa_hat", "kappa"].into_iter().map(String::from).collect::<Vec<_>>();
    head.extend(names);
    head.extend(["envelope_pass".to_string(), "pass".to_string()]);
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![
            r.param.clone(),
            format!("{:?}", r.value),
            format!("{:?}", r.delay_amplitude),
            if r.certified { "certified" } else { "uncertified" }.to_string(),
            r.kappa_hat.map(|k| format!("{k:?}")).unwrap_or_default(),
            format!("{:?}", r.kappa),
        ];
        rec.extend(r.ratios.iter().map(|(_, v)| format!("{v:?}")));
        rec.push(r.envelope_pass.to_string());
        rec.push(r.pass.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma2Args {
    pub c_scale: f64,
    /// Defaults to half the small-gain threshold.
    pub eps: Option<f64>,
    /// Optional second run past the threshold, expected to fail.
    pub falsify_eps: Option<f64>,
    pub config: Lemma2Config,
}

impl Default for Lemma2Args {
    fn default() -> Self {
        Lemma2Args { c_scale: TEST_TRIPLE_SCALE, eps: None, falsify_eps: None, config: Lemma2Config::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Outcome {
    pub pass: bool,
    pub threshold: f64,
    pub validation: Lemma2Report,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub falsification: Option<Lemma2Report>,
}

/// Validates the reference triple and, when asked, probes a larger `eps`
/// with the same `sigma`. Passes when the validation finds no
/// counterexample and the probe (if any) finds one.
pub fn lemma2_run(args: &Lemma2Args) -> Result<Lemma2Outcome> {
    let threshold = Lemma2Problem::test_triple(args.c_scale, 0.25).small_gain_threshold();
    let eps = args.eps.unwrap_or(0.5 * threshold);
    let problem = Lemma2Problem::test_triple(args.c_scale, eps);
    let sigma = problem.sigma()?.sigma;
    let validation = lemma2_validate(&problem, sigma, &args.config)?;
    let falsification = match args.falsify_eps {
        Some(e) => Some(lemma2_experiment(&Lemma2Problem::test_triple(args.c_scale, e), sigma, &args.config)?),
        None => None,
    };
    let pass = validation.holds && falsification.as_ref().is_none_or(|f| !f.holds);
    Ok(Lemma2Outcome { pass, threshold, validation, falsification })
}
