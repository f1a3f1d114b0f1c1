//! Empirical check of the delay-perturbation estimate
//! `||x(t)|| <= M e^{-sigma t} sup ||x0|| + N sup e^{-sigma (t - tau)} ||p(tau)||`
//! for `x' = A x + q C [x(t - r - eps d(t)) - x(t - r)] + p`.
//!
//! A finite ensemble can only falsify the estimate. A report that "holds"
//! means no member exceeded the fitted envelope.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::iss_certifier::{fading_memory_sup, worst_ratio};
use crate::linalg::{self, c, CMatrix};
use crate::synthesis::{sigma_rate, small_gain_lhs, SigmaRate};

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma2Problem {
    pub a: CMatrix,
    pub c: CMatrix,
    pub r: f64,
    pub eps: f64,
    /// `||e^{At}|| <= m_lambda e^{-lambda t}`
    pub m_lambda: f64,
    pub lambda: f64,
}

/// `||C||` of the reference triple; large enough that the delay mismatch is
/// visible, small enough to leave a usable range of `eps`.
pub const TEST_TRIPLE_SCALE: f64 = 5.0;

impl Lemma2Problem {
    /// `A = diag(-1, -2)`, `C = scale I`, `r = 0.5`, with `M_lambda = 1` and
    /// `lambda = 1` exact for the diagonal `A`.
    pub fn test_triple(c_scale: f64, eps: f64) -> Self {
        let a = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(-1.0), c(-2.0)]));
        let cm = CMatrix::identity(2, 2) * c(c_scale);
        Lemma2Problem { a, c: cm, r: 0.5, eps, m_lambda: 1.0, lambda: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Shapes, ranges, and the claimed envelope of `A` on a grid.
    pub fn validate_shape(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 || self.a.ncols() != n || self.c.shape() != (n, n) {
            return Err(Error::InvalidInput("A and C must be square of equal size".into()));
        }
        if !(self.eps > 0.0 && self.eps < self.r) {
            return Err(Error::InvalidInput(format!("need 0 < eps < r (eps = {}, r = {})", self.eps, self.r)));
        }
        if !(self.m_lambda >= 1.0 && self.lambda > 0.0) {
            return Err(Error::InvalidInput("need M_lambda >= 1 and lambda > 0".into()));
        }
        for k in 0..=200 {
            let t = k as f64 * 0.05;
            let lhs = linalg::norm2(&linalg::expm(&(&self.a * c(t))));
            if lhs > self.m_lambda * (-self.lambda * t).exp() * (1.0 + 1e-9) + 1e-14 {
                return Err(Error::InvalidInput(format!("||e^(At)|| = {lhs} exceeds the stated envelope at t = {t}")));
            }
        }
        Ok(())
    }

    pub fn small_gain_lhs(&self) -> f64 {
        small_gain_lhs(self.m_lambda, linalg::norm2(&self.c), linalg::norm2(&self.a), self.lambda, self.eps)
    }

    pub fn small_gain_holds(&self) -> bool {
        self.small_gain_lhs() < self.lambda
    }

    /// Largest `eps` in `(0, r)` with the small-gain inequality strict, found
    /// by bisection; `r` when it holds throughout.
    pub fn small_gain_threshold(&self) -> f64 {
        let at = |e: f64| Lemma2Problem { eps: e, ..self.clone() }.small_gain_holds();
        if at(self.r) {
            return self.r;
        }
        let (mut lo, mut hi) = (0.0, self.r);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if at(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn sigma(&self) -> Result<SigmaRate> {
        sigma_rate(self.m_lambda, linalg::norm2(&self.c), linalg::norm2(&self.a), self.lambda, self.r, self.eps)
    }
}

/// Admissible signals for one ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    /// `d(t) = tanh(sharpness sin(omega t + phase))`
    pub d_omega: f64,
    pub d_phase: f64,
    pub d_sharpness: f64,
    /// `q(t) = cos(q_omega t)`; zero means `q = 1`.
    pub q_omega: f64,
    /// Per component: amplitude, period, duty fraction.
    pub pulses: Vec<(f64, f64, f64)>,
    /// History `x0(s) = base + wave cos(nu s + phi)`.
    pub base: Vec<f64>,
    pub wave: Vec<f64>,
    pub nu: f64,
    pub phi: f64,
}

impl Member {
    pub fn d(&self, t: f64) -> f64 {
        (self.d_sharpness * (self.d_omega * t + self.d_phase).sin()).tanh()
    }

    pub fn q(&self, t: f64) -> f64 {
        if self.q_omega == 0.0 {
            1.0
        } else {
            (self.q_omega * t).cos()
        }
    }

    pub fn p(&self, t: f64) -> Vec<f64> {
        self.pulses
            .iter()
            .map(|&(amp, period, duty)| if amp != 0.0 && (t / period).fract() < duty { amp } else { 0.0 })
            .collect()
    }

    pub fn history(&self, s: f64) -> Vec<Complex64> {
        let w = (self.nu * s + self.phi).cos();
        self.base.iter().zip(&self.wave).map(|(b, a)| c(b + a * w)).collect()
    }

    pub fn is_forced(&self) -> bool {
        self.pulses.iter().any(|p| p.0 != 0.0)
    }
}

/// Member `index` of the stream `seed`. Even members carry an initial history
/// and no forcing, odd members start from zero and are forced.
pub fn random_member(dim: usize, seed: u64, index: u64) -> Member {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let forced = index % 2 == 1;
    let d_omega = rng.gen_range(0.5..8.0);
    let d_phase = rng.gen_range(0.0..2.0 * PI);
    let q_omega = if rng.gen_bool(0.3) { rng.gen_range(0.2..4.0) } else { 0.0 };
    let pulses = (0..dim)
        .map(|_| if forced { (rng.gen_range(-1.0..1.0), rng.gen_range(0.5..3.0), rng.gen_range(0.1..0.5)) } else { (0.0, 1.0, 0.0) })
        .collect();
    let (base, wave, nu, phi) = if forced {
        (vec![0.0; dim], vec![0.0; dim], 0.0, 0.0)
    } else {
        // constant, offset-plus-wave and pure-wave histories in equal parts;
        // fast waves make the delay mismatch visible right from t = 0
        let kind = rng.gen_range(0..3);
        let base = (0..dim).map(|_| if kind == 2 { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
        let wave = (0..dim).map(|_| if kind == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
        (base, wave, rng.gen_range(1.0..40.0), rng.gen_range(0.0..2.0 * PI))
    };
    Member { d_omega, d_phase, d_sharpness: 20.0, q_omega, pulses, base, wave, nu, phi }
}

/// Sampled solution of one member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberRun {
    pub t: Vec<f64>,
    pub x: Vec<Vec<Complex64>>,
    pub x_norm: Vec<f64>,
    pub p_norm: Vec<f64>,
    /// `sup ||x0(s)||` over `[-r - eps, 0]`, sampled on the step grid.
    pub history_sup: f64,
}

/// Classical RK4 for the delay system. Delayed states come from cubic
/// Lagrange interpolation of the step grid, with the history function used
/// for non-positive grid indices.
pub fn simulate_member(problem: &Lemma2Problem, member: &Member, t_final: f64, h: f64) -> Result<MemberRun> {
    let n = problem.dim();
    if member.base.len() != n || member.pulses.len() != n {
        return Err(Error::InvalidInput("member dimension does not match the problem".into()));
    }
    if !(h > 0.0) || problem.r - problem.eps < 3.0 * h {
        return Err(Error::InvalidInput("step must satisfy 3h <= r - eps".into()));
    }
    let steps = (t_final / h).round() as usize;
    let lo = -((problem.r + problem.eps) / h).ceil() as i64 - 2;
    let history_sup = (lo..=0).map(|k| linalg::vec_norm(&member.history(k as f64 * h))).fold(0.0, f64::max);
    let mut xs: Vec<Vec<Complex64>> = Vec::with_capacity(steps + 1);
    xs.push(member.history(0.0));

    let sample = |xs: &Vec<Vec<Complex64>>, k: i64| -> Vec<Complex64> {
        if k <= 0 {
            member.history(k as f64 * h)
        } else {
            xs[k as usize].clone()
        }
    };
    let delayed = |xs: &Vec<Vec<Complex64>>, tau: f64| -> Vec<Complex64> {
        let s = tau / h;
        let k0 = s.floor() as i64 - 1;
        let mut out = vec![c(0.0); n];
        for i in 0..4 {
            let ki = k0 + i;
            let mut w = 1.0;
            for j in 0..4 {
                if j != i {
                    w *= (s - (k0 + j) as f64) / ((i - j) as f64);
                }
            }
            for (o, v) in out.iter_mut().zip(sample(xs, ki)) {
                *o += v * w;
            }
        }
        out
    };
    let rhs = |xs: &Vec<Vec<Complex64>>, t: f64, x: &[Complex64]| -> Vec<Complex64> {
        let late = delayed(xs, t - problem.r - problem.eps * member.d(t));
        let nominal = delayed(xs, t - problem.r);
        let diff: Vec<Complex64> = late.iter().zip(&nominal).map(|(a, b)| a - b).collect();
        let q = member.q(t);
        let p = member.p(t);
        (0..n)
            .map(|i| {
                let mut acc = c(p[i]);
                for j in 0..n {
                    acc += problem.a[(i, j)] * x[j] + problem.c[(i, j)] * diff[j] * q;
                }
                acc
            })
            .collect()
    };
    let axpy = |x: &[Complex64], k: &[Complex64], s: f64| -> Vec<Complex64> { x.iter().zip(k).map(|(a, b)| a + b * s).collect() };
    for step in 0..steps {
        let t = step as f64 * h;
        let x = xs[step].clone();
        let k1 = rhs(&xs, t, &x);
        let k2 = rhs(&xs, t + 0.5 * h, &axpy(&x, &k1, 0.5 * h));
        let k3 = rhs(&xs, t + 0.5 * h, &axpy(&x, &k2, 0.5 * h));
        let k4 = rhs(&xs, t + h, &axpy(&x, &k3, h));
        let next: Vec<Complex64> = (0..n).map(|i| x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0)).collect();
        if next.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Diverged { step: step + 1, t: t + h });
        }
        xs.push(next);
    }
    let t: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
    let x_norm = xs.iter().map(|x| linalg::vec_norm(x)).collect();
    let p_norm = t.iter().map(|&s| member.p(s).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok(MemberRun { t, x: xs, x_norm, p_norm, history_sup })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Config {
    pub members: usize,
    pub seed: u64,
    /// Constants are fitted on `[0, t_fit]`.
    pub t_fit: f64,
    /// The fitted envelope is then checked on `[0, extension * t_fit]`.
    pub extension: f64,
    /// Headroom allowed on the extended horizon.
    pub margin: f64,
    pub h: f64,
}

impl Default for Lemma2Config {
    fn default() -> Self {
        Lemma2Config { members: 50, seed: 11, t_fit: 10.0, extension: 2.0, margin: 1.1, h: 2e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub sigma: f64,
    pub eps: f64,
    pub small_gain_lhs: f64,
    pub small_gain_holds: bool,
    pub m_lambda: f64,
    pub members: usize,
    pub m_fit: f64,
    pub n_fit: f64,
    /// Worst ratio of any member against the fitted envelope on the
    /// extended horizon; above `margin` is a counterexample.
    pub extension_ratio: f64,
    pub margin: f64,
    pub worst_member: usize,
    pub t_worst: f64,
    pub holds: bool,
    pub summary: String,
}

fn member_ratios(run: &MemberRun, member: &Member, sigma: f64, h: f64, t_end: f64, m: f64, nn: f64) -> (f64, f64) {
    let len = run.t.iter().take_while(|&&t| t <= t_end + 0.5 * h).count();
    let t = &run.t[..len];
    let obs = &run.x_norm[..len];
    let bound: Vec<f64> = if member.is_forced() {
        fading_memory_sup(&run.p_norm[..len], h, sigma).iter().map(|s| nn * s).collect()
    } else {
        t.iter().map(|&s| m * (-sigma * s).exp() * run.history_sup).collect()
    };
    let scale = run.history_sup + run.p_norm.iter().fold(0.0, |a: f64, &b| a.max(b));
    worst_ratio(t, obs, &bound, 1e-12 * scale)
}

/// Fits `(M, N)` on `[0, t_fit]` and checks the envelope on the extended
/// horizon. Does not require the small-gain condition, which lets the same
/// experiment probe the falsification direction.
pub fn lemma2_experiment(problem: &Lemma2Problem, sigma: f64, cfg: &Lemma2Config) -> Result<Lemma2Report> {
    problem.validate_shape()?;
    if cfg.members < 2 || !(cfg.extension >= 1.0) || !(cfg.margin >= 1.0) || !(cfg.t_fit > 0.0) {
        return Err(Error::InvalidInput("need at least two members, t_fit > 0, extension >= 1 and margin >= 1".into()));
    }
    if !(sigma > 0.0 && sigma < problem.lambda) {
        return Err(Error::InvalidInput(format!("sigma must lie in (0, lambda), got {sigma}")));
    }
    let t_end = cfg.t_fit * cfg.extension;
    let members: Vec<Member> = (0..cfg.members as u64).map(|i| random_member(problem.dim(), cfg.seed, i)).collect();
    let runs: Vec<std::result::Result<MemberRun, Error>> = members.par_iter().map(|m| simulate_member(problem, m, t_end, cfg.h)).collect();

    // a member that blows up is a counterexample on its own
    let blown = runs.iter().position(|r| r.is_err());
    let (mut m_fit, mut n_fit) = (0.0f64, 0.0f64);
    for (run, member) in runs.iter().zip(&members) {
        if let Ok(run) = run {
            let unit = member_ratios(run, member, sigma, cfg.h, cfg.t_fit, 1.0, 1.0).0;
            if member.is_forced() {
                n_fit = n_fit.max(unit);
            } else {
                m_fit = m_fit.max(unit);
            }
        }
    }
    let mut worst = (0.0, 0usize, 0.0);
    for (i, (run, member)) in runs.iter().zip(&members).enumerate() {
        match run {
            Ok(run) => {
                let (w, tw) = member_ratios(run, member, sigma, cfg.h, t_end, m_fit, n_fit);
                if w > worst.0 {
                    worst = (w, i, tw);
                }
            }
            Err(Error::Diverged { t, .. }) => {
                if worst.0 < f64::INFINITY {
                    worst = (f64::INFINITY, i, *t);
                }
            }
            Err(e) => return Err(e.clone()),
        }
    }
    let holds = blown.is_none() && worst.0 <= cfg.margin && m_fit.is_finite() && n_fit.is_finite();
    let summary = if holds {
        format!("no counterexample among {} members: M = {m_fit:.6}, N = {n_fit:.6} at sigma = {sigma:.6} cover [0, {t_end}] within a factor {}", cfg.members, cfg.margin)
    } else {
        format!("counterexample: member {} exceeds the envelope fitted on [0, {}] by a factor {:.3e} at t = {:.3}", worst.1, cfg.t_fit, worst.0, worst.2)
    };
    Ok(Lemma2Report {
        sigma,
        eps: problem.eps,
        small_gain_lhs: problem.small_gain_lhs(),
        small_gain_holds: problem.small_gain_holds(),
        m_lambda: problem.m_lambda,
        members: cfg.members,
        m_fit,
        n_fit,
        extension_ratio: worst.0,
        margin: cfg.margin,
        worst_member: worst.1,
        t_worst: worst.2,
        holds,
        summary,
    })
}

/// Like [`lemma2_experiment`], but refuses problems outside the small-gain
/// regime.
pub fn lemma2_validate(problem: &Lemma2Problem, sigma: f64, cfg: &Lemma2Config) -> Result<Lemma2Report> {
    if !problem.small_gain_holds() {
        return Err(Error::SmallGain(format!("M ||C|| (e^(||A|| eps) - e^(-lambda eps)) = {} >= lambda = {}", problem.small_gain_lhs(), problem.lambda)));
    }
    lemma2_experiment(problem, sigma, cfg)
}
