//! Closed-loop simulation in modal coordinates.
//!
//! The primary engine advances every mode by its exact variation-of-constants
//! step with the boundary input `v(t) = u(t - D(t)) + d1(t)` taken piecewise
//! linear. The oracle engine is classical RK4 on a 20x finer grid with its own
//! trapezoidal predictor, cubic history interpolation and direct solve of the
//! implicit control law.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::controller::{ControlHistory, Controller, ControllerConfig, TransitionSignal};
use crate::error::{Error, Result};
use crate::expint::SegmentWeights;
use crate::linalg::{self, c, CMatrix};
use crate::signals::{make_delay, make_disturbance, DelaySignal, DisturbanceSignal, Shape};
use crate::spectral_model::SystemDescriptor;
use crate::synthesis::Certificate;

/// Hard cap on the default number of simulated modes.
pub const MAX_DEFAULT_MODES: usize = 400;

/// Smallest `n` with `Re lambda_n <= -factor * alpha`, at least `N0 + 1` and
/// at most [`MAX_DEFAULT_MODES`] (or the number of modes of a finite plant).
pub fn default_n_modes(desc: &SystemDescriptor, cert: &Certificate, factor: f64) -> usize {
    let cap = desc.mode_limit().map_or(MAX_DEFAULT_MODES, |l| l.min(MAX_DEFAULT_MODES));
    let floor = (cert.n0 + 1).min(cap);
    (floor..=cap)
        .find(|&n| desc.eigenvalue(n).is_some_and(|l| l.re <= -factor * cert.alpha))
        .unwrap_or(cap)
}

/// Factor in [`default_n_modes`] used when a scenario does not fix the mode count.
pub const DEFAULT_MODE_FACTOR: f64 = 50.0;

/// Everything that determines one closed-loop run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub descriptor: SystemDescriptor,
    pub certificate: Certificate,
    pub delay: DelaySignal,
    pub d1: DisturbanceSignal,
    pub d2: DisturbanceSignal,
    /// `c_n(0)` for `n <= n_modes`.
    pub x0: Vec<Complex64>,
    pub n_modes: usize,
    pub dt: f64,
    pub t_final: f64,
    pub controller: ControllerConfig,
    /// Delay amplitude must stay within the certified uncertainty.
    pub certified: bool,
}

impl Scenario {
    /// Scenario with the default mode count, `dt = 1e-3` and zero disturbances.
    pub fn new(descriptor: SystemDescriptor, certificate: Certificate, delay: DelaySignal, x0: &[Complex64], t_final: f64) -> Result<Self> {
        Self::assemble(descriptor, certificate, delay, x0, t_final, true)
    }

    /// Like [`Scenario::new`], but the delay amplitude may exceed the
    /// certified uncertainty.
    pub fn uncertified(descriptor: SystemDescriptor, certificate: Certificate, delay: DelaySignal, x0: &[Complex64], t_final: f64) -> Result<Self> {
        Self::assemble(descriptor, certificate, delay, x0, t_final, false)
    }

    fn assemble(descriptor: SystemDescriptor, certificate: Certificate, delay: DelaySignal, x0: &[Complex64], t_final: f64, certified: bool) -> Result<Self> {
        let n_modes = default_n_modes(&descriptor, &certificate, DEFAULT_MODE_FACTOR).max(x0.len());
        let mut x = x0.to_vec();
        x.resize(n_modes, c(0.0));
        let s = Scenario {
            descriptor,
            certificate,
            delay,
            d1: DisturbanceSignal::zero(),
            d2: DisturbanceSignal::zero(),
            x0: x,
            n_modes,
            dt: 1e-3,
            t_final,
            controller: ControllerConfig::default(),
            certified,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_disturbances(mut self, d1: DisturbanceSignal, d2: DisturbanceSignal) -> Self {
        self.d1 = d1;
        self.d2 = d2;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self.controller.dt = dt;
        self
    }

    /// Changes the mode count, padding or truncating the initial state.
    pub fn with_modes(mut self, n_modes: usize) -> Self {
        self.n_modes = n_modes;
        self.x0.resize(n_modes, c(0.0));
        self
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let cert = &self.certificate;
        let m = self.descriptor.num_inputs;
        if cert.num_inputs != m {
            return Err(Error::InvalidInput("certificate and descriptor disagree on the input count".into()));
        }
        if self.n_modes < cert.n0 {
            return Err(Error::InvalidInput(format!("n_modes = {} is below N0 = {}", self.n_modes, cert.n0)));
        }
        if let Some(limit) = self.descriptor.mode_limit() {
            if self.n_modes > limit {
                return Err(Error::InvalidInput(format!("the plant has only {limit} modes")));
            }
        }
        if self.x0.len() != self.n_modes || self.x0.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("initial state must hold n_modes finite coefficients".into()));
        }
        if !(self.dt > 0.0) || !(self.t_final >= 0.0) || !self.t_final.is_finite() {
            return Err(Error::InvalidInput("dt must be positive and T finite".into()));
        }
        let steps = self.steps();
        if (steps as f64 * self.dt - self.t_final).abs() > 1e-9 * self.t_final.max(1.0) {
            return Err(Error::InvalidInput(format!("T = {} is not a multiple of dt = {}", self.t_final, self.dt)));
        }
        if (self.controller.dt - self.dt).abs() > 1e-15 * self.dt {
            return Err(Error::InvalidInput("controller dt must equal the integration dt".into()));
        }
        if (self.delay.d0() - cert.d0).abs() > 1e-12 * cert.d0 {
            return Err(Error::InvalidInput(format!("delay D0 = {} differs from the certificate D0 = {}", self.delay.d0(), cert.d0)));
        }
        make_delay(self.delay.clone(), self.certified.then_some(cert.delta))?;
        if self.delay.d0() - self.delay.amplitude() < self.dt {
            return Err(Error::InvalidInput("the delay must stay above dt".into()));
        }
        make_disturbance(self.d1.clone(), m)?;
        make_disturbance(self.d2.clone(), m)?;
        Ok(())
    }
}

/// Sampled closed-loop run. Vector quantities are stored row-major, one row
/// per time sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t: Vec<f64>,
    pub n_modes: usize,
    pub n0: usize,
    pub m: usize,
    pub coeffs: Vec<Complex64>,
    pub z: Vec<Complex64>,
    pub u: Vec<Complex64>,
    pub v: Vec<Complex64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub delay: Vec<f64>,
    pub norm_lower: Vec<f64>,
    pub norm_upper: Vec<f64>,
    pub max_iters: usize,
    pub max_residual: f64,
}

impl Trajectory {
    fn with_capacity(dt: f64, len: usize, n_modes: usize, n0: usize, m: usize) -> Self {
        Trajectory {
            dt,
            t: Vec::with_capacity(len),
            n_modes,
            n0,
            m,
            coeffs: Vec::with_capacity(len * n_modes),
            z: Vec::with_capacity(len * n0),
            u: Vec::with_capacity(len * m),
            v: Vec::with_capacity(len * m),
            d1: Vec::with_capacity(len * m),
            d2: Vec::with_capacity(len * m),
            delay: Vec::with_capacity(len),
            norm_lower: Vec::with_capacity(len),
            norm_upper: Vec::with_capacity(len),
            max_iters: 0,
            max_residual: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn c(&self, j: usize) -> &[Complex64] {
        &self.coeffs[j * self.n_modes..(j + 1) * self.n_modes]
    }

    /// First `N0` modal coefficients.
    pub fn y(&self, j: usize) -> &[Complex64] {
        &self.coeffs[j * self.n_modes..j * self.n_modes + self.n0]
    }

    pub fn z(&self, j: usize) -> &[Complex64] {
        &self.z[j * self.n0..(j + 1) * self.n0]
    }

    pub fn u(&self, j: usize) -> &[Complex64] {
        &self.u[j * self.m..(j + 1) * self.m]
    }

    pub fn v(&self, j: usize) -> &[Complex64] {
        &self.v[j * self.m..(j + 1) * self.m]
    }

    pub fn d1(&self, j: usize) -> &[f64] {
        &self.d1[j * self.m..(j + 1) * self.m]
    }

    pub fn d2(&self, j: usize) -> &[f64] {
        &self.d2[j * self.m..(j + 1) * self.m]
    }

    /// Euclidean norms of a row-major vector channel.
    pub fn norms_of(data: &[Complex64], width: usize) -> Vec<f64> {
        data.chunks(width.max(1)).map(linalg::vec_norm).collect()
    }

    pub fn real_norms_of(data: &[f64], width: usize) -> Vec<f64> {
        data.chunks(width.max(1)).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
    }

    pub fn y_norms(&self) -> Vec<f64> {
        (0..self.len()).map(|j| linalg::vec_norm(self.y(j))).collect()
    }

    pub fn u_norms(&self) -> Vec<f64> {
        Self::norms_of(&self.u, self.m)
    }

    pub fn d1_norms(&self) -> Vec<f64> {
        Self::real_norms_of(&self.d1, self.m)
    }

    pub fn d2_norms(&self) -> Vec<f64> {
        Self::real_norms_of(&self.d2, self.m)
    }

    /// `sum_{n > N0} |c_n|^2` per sample.
    pub fn tail_energy(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.c(j)[self.n0..].iter().map(|z| z.norm_sqr()).sum()).collect()
    }

    /// Control history with `u = 0` before `t = 0`.
    pub fn control_history(&self, span: f64) -> Result<ControlHistory> {
        let mut h = ControlHistory::unbounded(self.dt, self.m, span)?;
        for j in 0..self.len() {
            h.push(self.u(j).to_vec());
        }
        Ok(h)
    }
}

/// `(sqrt(m_R sum |c_n|^2), sqrt(M_R sum |c_n|^2))`
pub fn state_norm(coeffs: &[Complex64], riesz_lower: f64, riesz_upper: f64) -> (f64, f64) {
    let s: f64 = coeffs.iter().map(|z| z.norm_sqr()).sum();
    ((riesz_lower * s).sqrt(), (riesz_upper * s).sqrt())
}

fn complexify(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| c(v)).collect()
}

fn input_matrix(s: &Scenario) -> Result<CMatrix> {
    let rows = s.descriptor.input_rows(s.n_modes)?;
    Ok(DMatrix::from_fn(s.n_modes, s.descriptor.num_inputs, |i, j| rows[i][j]))
}

/// Exponential-integrator simulation of the closed loop.
pub fn simulate(s: &Scenario) -> Result<Trajectory> {
    s.validate()?;
    let cert = &s.certificate;
    let (n, n0, m) = (s.n_modes, cert.n0, cert.num_inputs);
    let lambdas = s.descriptor.modes(n)?;
    let bmat = input_matrix(s)?;
    let weights: Vec<SegmentWeights> = lambdas.iter().map(|l| SegmentWeights::new(*l, s.dt)).collect();
    let mut ctrl = Controller::new(cert, s.delay.amplitude(), s.controller)?;
    let steps = s.steps();
    let mut traj = Trajectory::with_capacity(s.dt, steps + 1, n, n0, m);

    let mut state = s.x0.clone();
    let mut d1 = vec![0.0; m];
    let mut d2 = vec![0.0; m];
    let mut delayed = vec![c(0.0); m];
    let mut v_now = vec![c(0.0); m];
    let mut v_next = vec![c(0.0); m];

    let record = |traj: &mut Trajectory, j: usize, state: &[Complex64], out: &crate::controller::StepOutcome, v: &[Complex64], d1: &[f64], d2: &[f64], delay: f64| {
        traj.t.push(j as f64 * s.dt);
        traj.coeffs.extend_from_slice(state);
        traj.z.extend(state[..n0].iter().zip(&out.predictor).map(|(a, b)| a + b));
        traj.u.extend_from_slice(&out.u);
        traj.v.extend_from_slice(v);
        traj.d1.extend_from_slice(d1);
        traj.d2.extend_from_slice(d2);
        traj.delay.push(delay);
        let (lo, hi) = state_norm(state, cert.riesz_lower, cert.riesz_upper);
        traj.norm_lower.push(lo);
        traj.norm_upper.push(hi);
        traj.max_iters = traj.max_iters.max(out.iters);
        traj.max_residual = traj.max_residual.max(out.residual);
    };

    // v(t_j) = u(t_j - D(t_j)) + d1(t_j); needs u up to t_j - D(t_j) only
    let boundary_input = |ctrl: &Controller, t: f64, d1: &mut [f64], delayed: &mut [Complex64], v: &mut [Complex64]| -> Result<f64> {
        let (d, _) = s.delay.eval(t);
        ctrl.history().value_into(t - d, delayed)?;
        s.d1.eval_into(t, d1);
        for k in 0..m {
            v[k] = delayed[k] + d1[k];
        }
        Ok(d)
    };

    s.d2.eval_into(0.0, &mut d2);
    let mut out = ctrl.step(&state[..n0], &complexify(&d2))?;
    let mut delay = boundary_input(&ctrl, 0.0, &mut d1, &mut delayed, &mut v_now)?;
    record(&mut traj, 0, &state, &out, &v_now, &d1, &d2, delay);

    for j in 0..steps {
        let t_next = (j + 1) as f64 * s.dt;
        let delay_next = boundary_input(&ctrl, t_next, &mut d1, &mut delayed, &mut v_next)?;
        for i in 0..n {
            let (mut fa, mut fb) = (c(0.0), c(0.0));
            for k in 0..m {
                fa += bmat[(i, k)] * v_now[k];
                fb += bmat[(i, k)] * v_next[k];
            }
            let w = &weights[i];
            state[i] = w.decay * state[i] + w.left * fa + w.right * fb;
        }
        if state.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Diverged { step: j + 1, t: t_next });
        }
        s.d2.eval_into(t_next, &mut d2);
        out = ctrl.step(&state[..n0], &complexify(&d2))?;
        delay = delay_next;
        record(&mut traj, j + 1, &state, &out, &v_next, &d1, &d2, delay);
        std::mem::swap(&mut v_now, &mut v_next);
    }
    log::debug!("simulated {} steps, max fixed-point iterations {}, max residual {:e}", steps, traj.max_iters, traj.max_residual);
    Ok(traj)
}

/// Oracle refinement factor.
pub const ORACLE_REFINE: usize = 20;
const CHUNK: usize = 64;

/// Trapezoidal predictor integral for one mode over a sliding window, using
/// block sums so that every exponential factor stays bounded.
struct WindowQuadrature {
    lambda: Complex64,
    h: f64,
    /// `D0 / h`
    nd: f64,
    g: Vec<Complex64>,
    chunks: Vec<Complex64>,
    /// `e^{j h lambda}` for `j < CHUNK`
    pow: Vec<Complex64>,
}

impl WindowQuadrature {
    fn new(lambda: Complex64, h: f64, d0: f64) -> Self {
        let pow = (0..CHUNK).map(|j| (lambda * (j as f64 * h)).exp()).collect();
        WindowQuadrature { lambda, h, nd: d0 / h, g: Vec::new(), chunks: Vec::new(), pow }
    }

    fn g_at(&self, i: i64) -> Complex64 {
        if i < 0 {
            c(0.0)
        } else {
            self.g[i as usize]
        }
    }

    /// `e^{(k - nd) h lambda}`
    fn factor(&self, k: f64) -> Complex64 {
        (self.lambda * ((k - self.nd) * self.h)).exp()
    }

    fn push(&mut self, gi: Complex64) {
        self.g.push(gi);
        if self.g.len().is_multiple_of(CHUNK) {
            let start = self.g.len() - CHUNK;
            let s: Complex64 = (0..CHUNK).map(|r| self.pow[CHUNK - 1 - r] * self.g[start + r]).sum();
            self.chunks.push(s);
        }
    }

    /// `sum_{i=a}^{b} e^{(n - i - nd) h lambda} g_i`, using stored samples only.
    fn plain_sum(&self, n: i64, a: i64, b: i64) -> Complex64 {
        let a = a.max(0);
        if b < a {
            return c(0.0);
        }
        let mut acc = c(0.0);
        let mut i = a;
        while i <= b {
            let ci = i as usize / CHUNK;
            if (i as usize).is_multiple_of(CHUNK) && ((ci + 1) * CHUNK) as i64 - 1 <= b && ci < self.chunks.len() {
                let last = ((ci + 1) * CHUNK) as i64 - 1;
                acc += self.factor((n - last) as f64) * self.chunks[ci];
                i = last + 1;
            } else {
                acc += self.factor((n - i) as f64) * self.g_at(i);
                i += 1;
            }
        }
        acc
    }

    /// Predictor integral at sample `n` without the contribution of `g_n`.
    fn rest(&self, n: i64) -> Complex64 {
        let w = n as f64 - self.nd;
        let i0 = (w - 1e-9).ceil() as i64;
        let h = self.h;
        // interior nodes carry weight h, the node i0 carries h/2 plus the
        // partial piece [w, i0]
        let mut acc = self.plain_sum(n, i0 + 1, n - 1) * h;
        if i0 < n {
            acc += self.factor((n - i0) as f64) * self.g_at(i0) * (0.5 * h);
        }
        let frac = i0 as f64 - w;
        if frac > 1e-9 {
            // linear value at the window start, trapezoid on the partial piece
            let k = i0 - 1;
            let gw = self.g_at(k) * frac + self.g_at(i0) * (1.0 - frac);
            acc += (gw + self.factor((n - i0) as f64) * self.g_at(i0)) * (0.5 * frac * h);
        }
        acc
    }

    /// Weight of `g_n` in the predictor integral at sample `n`.
    fn self_weight(&self) -> Complex64 {
        self.factor(0.0) * (0.5 * self.h)
    }
}

/// Cubic Lagrange interpolation on uniform samples, zero before index 0.
fn cubic_at(samples: &[Vec<Complex64>], h: f64, t: f64, out: &mut [Complex64]) -> Result<()> {
    let p = t / h;
    let k = p.floor() as i64;
    let x = p - k as f64;
    if k + 2 >= samples.len() as i64 && !(x == 0.0 && k < samples.len() as i64) {
        return Err(Error::InsufficientHistory { requested: t, first: 0.0, last: (samples.len() as f64 - 1.0) * h });
    }
    let w = [
        -x * (x - 1.0) * (x - 2.0) / 6.0,
        (x + 1.0) * (x - 1.0) * (x - 2.0) / 2.0,
        -(x + 1.0) * x * (x - 2.0) / 2.0,
        (x + 1.0) * x * (x - 1.0) / 6.0,
    ];
    out.iter_mut().for_each(|o| *o = c(0.0));
    for (r, wr) in w.iter().enumerate() {
        let i = k - 1 + r as i64;
        if i < 0 || *wr == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(&samples[i as usize]) {
            *o += v * *wr;
        }
    }
    Ok(())
}

/// RK4 reference simulation on a grid `ORACLE_REFINE` times finer; the output
/// is sampled on the scenario grid.
pub fn oracle_simulate(s: &Scenario) -> Result<Trajectory> {
    s.validate()?;
    let cert = &s.certificate;
    let (n, n0, m) = (s.n_modes, cert.n0, cert.num_inputs);
    let lambdas = s.descriptor.modes(n)?;
    let bmat = input_matrix(s)?;
    let h = s.dt / ORACLE_REFINE as f64;
    let fine_steps = s.steps() * ORACLE_REFINE;
    let transition = TransitionSignal::new(cert.t0)?;
    let mut quad: Vec<WindowQuadrature> = cert.lambdas.iter().map(|l| WindowQuadrature::new(*l, h, cert.d0)).collect();
    let mut traj = Trajectory::with_capacity(s.dt, s.steps() + 1, n, n0, m);
    let mut u_fine: Vec<Vec<Complex64>> = Vec::with_capacity(fine_steps + 1);
    let mut state = s.x0.clone();
    let mut d1 = vec![0.0; m];
    let mut d2 = vec![0.0; m];
    let mut ud = vec![c(0.0); m];

    // self-coupling of the implicit law through the current sample
    let wself: Vec<Complex64> = quad.iter().map(|q| q.self_weight()).collect();

    let eval_v = |u_fine: &Vec<Vec<Complex64>>, t: f64, ud: &mut [Complex64], d1: &mut [f64]| -> Result<Vec<Complex64>> {
        let (d, _) = s.delay.eval(t);
        cubic_at(u_fine, h, t - d, ud)?;
        s.d1.eval_into(t, d1);
        Ok((0..m).map(|k| ud[k] + d1[k]).collect())
    };
    let rhs = |state: &[Complex64], v: &[Complex64]| -> Vec<Complex64> {
        (0..n)
            .map(|i| lambdas[i] * state[i] + (0..m).map(|k| bmat[(i, k)] * v[k]).sum::<Complex64>())
            .collect()
    };

    for i in 0..=fine_steps {
        let t = i as f64 * h;
        // control at t_i: (I - phi K W B) u = phi (K (Y + P_rest) + d2)
        let (phi, _) = transition.eval(t);
        s.d2.eval_into(t, &mut d2);
        let rest: Vec<Complex64> = quad.iter().map(|q| q.rest(i as i64)).collect();
        let u: Vec<Complex64> = if phi == 0.0 {
            vec![c(0.0); m]
        } else {
            let mut lhs = DMatrix::<Complex64>::identity(m, m);
            let mut rhs_v = DVector::<Complex64>::zeros(m);
            for a in 0..m {
                let mut acc = c(d2[a]);
                for k in 0..n0 {
                    acc += cert.k[(a, k)] * (state[k] + rest[k]);
                }
                rhs_v[a] = acc * phi;
                for b in 0..m {
                    let g: Complex64 = (0..n0).map(|k| cert.k[(a, k)] * wself[k] * cert.b[(k, b)]).sum();
                    lhs[(a, b)] -= g * phi;
                }
            }
            let sol = lhs.lu().solve(&rhs_v).ok_or_else(|| Error::NonFinite("oracle control solve".into()))?;
            sol.iter().copied().collect()
        };
        for (k, q) in quad.iter_mut().enumerate() {
            let g: Complex64 = (0..m).map(|b| cert.b[(k, b)] * u[b]).sum();
            q.push(g);
        }
        u_fine.push(u.clone());

        if i % ORACLE_REFINE == 0 {
            let v = eval_v(&u_fine, t, &mut ud, &mut d1)?;
            traj.t.push(t);
            traj.coeffs.extend_from_slice(&state);
            for k in 0..n0 {
                traj.z.push(state[k] + rest[k] + wself[k] * (0..m).map(|b| cert.b[(k, b)] * u[b]).sum::<Complex64>());
            }
            traj.u.extend_from_slice(&u);
            traj.v.extend_from_slice(&v);
            traj.d1.extend_from_slice(&d1);
            traj.d2.extend_from_slice(&d2);
            traj.delay.push(s.delay.eval(t).0);
            let (lo, hi) = state_norm(&state, cert.riesz_lower, cert.riesz_upper);
            traj.norm_lower.push(lo);
            traj.norm_upper.push(hi);
        }
        if i == fine_steps {
            break;
        }

        let v1 = eval_v(&u_fine, t, &mut ud, &mut d1)?;
        let v2 = eval_v(&u_fine, t + 0.5 * h, &mut ud, &mut d1)?;
        let v4 = eval_v(&u_fine, t + h, &mut ud, &mut d1)?;
        let k1 = rhs(&state, &v1);
        let s2: Vec<Complex64> = (0..n).map(|j| state[j] + k1[j] * (0.5 * h)).collect();
        let k2 = rhs(&s2, &v2);
        let s3: Vec<Complex64> = (0..n).map(|j| state[j] + k2[j] * (0.5 * h)).collect();
        let k3 = rhs(&s3, &v2);
        let s4: Vec<Complex64> = (0..n).map(|j| state[j] + k3[j] * h).collect();
        let k4 = rhs(&s4, &v4);
        for j in 0..n {
            state[j] += (k1[j] + (k2[j] + k3[j]) * 2.0 + k4[j]) * (h / 6.0);
        }
        if state.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Diverged { step: i + 1, t: t + h });
        }
    }
    Ok(traj)
}

/// Artstein variable and the finite-difference residual of its dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtsteinOutput {
    /// `Z(t_j)`, row-major `N0` per sample.
    pub z: Vec<Complex64>,
    /// Residual norm at interior samples `j = 1 .. len - 2`.
    pub residual: Vec<f64>,
}

impl ArtsteinOutput {
    pub fn max_residual(&self) -> f64 {
        self.residual.iter().copied().fold(0.0, f64::max)
    }

    pub fn rms_residual(&self) -> f64 {
        if self.residual.is_empty() {
            return 0.0;
        }
        (self.residual.iter().map(|r| r * r).sum::<f64>() / self.residual.len() as f64).sqrt()
    }
}

/// `Z(t) = Y(t) + int_{t-D0}^t e^{(t-D0-s) A} B u(s) ds` from the recorded
/// control, and the residual of
/// `Z' = (A + phi e^{-D0 A} B K) Z + B K {[phi Z](t-D) - [phi Z](t-D0)} + B d1
///       + phi e^{-D0 A} B d2 + B {[phi d2](t-D) - [phi d2](t-D0)}`
/// by central differences.
pub fn artstein_transform(traj: &Trajectory, cert: &Certificate) -> Result<ArtsteinOutput> {
    let (n0, m, len) = (traj.n0, traj.m, traj.len());
    if n0 != cert.n0 || m != cert.num_inputs {
        return Err(Error::InvalidInput("trajectory does not match the certificate".into()));
    }
    // samples sit on the grid, so the controller's quadrature weights apply
    let weights = crate::controller::predictor_weights(&cert.lambdas, cert.d0, traj.dt);
    let bu: Vec<Complex64> = (0..len)
        .flat_map(|j| (0..n0).map(move |k| (0..m).map(|a| cert.b[(k, a)] * traj.u(j)[a]).sum::<Complex64>()))
        .collect();
    let mut z = Vec::with_capacity(len * n0);
    for j in 0..len {
        for k in 0..n0 {
            let p: Complex64 = weights.iter().enumerate().take(j + 1).map(|(i, w)| w[k] * bu[(j - i) * n0 + k]).sum();
            z.push(traj.y(j)[k] + p);
        }
    }
    let transition = TransitionSignal::new(cert.t0)?;
    let bt: Vec<Complex64> = cert.lambdas.iter().map(|l| (-l * cert.d0).exp()).collect();
    // w_j = phi_j (K Z_j + d2_j): the control rebuilt from Z
    let mut w = ControlHistory::unbounded(traj.dt, m, cert.d0 + traj.delay.iter().copied().fold(0.0, f64::max))?;
    for j in 0..len {
        let (phi, _) = transition.eval(traj.t[j]);
        let row: Vec<Complex64> = (0..m)
            .map(|a| phi * ((0..n0).map(|k| cert.k[(a, k)] * z[j * n0 + k]).sum::<Complex64>() + traj.d2(j)[a]))
            .collect();
        w.push(row);
    }
    let mut residual = Vec::with_capacity(len.saturating_sub(2));
    let mut now = vec![c(0.0); m];
    let mut late = vec![c(0.0); m];
    let mut nominal = vec![c(0.0); m];
    for j in 1..len.saturating_sub(1) {
        let t = traj.t[j];
        w.value_into(t, &mut now)?;
        w.value_into(t - traj.delay[j], &mut late)?;
        w.value_into(t - cert.d0, &mut nominal)?;
        let mut r2 = 0.0;
        for k in 0..n0 {
            let fd = (z[(j + 1) * n0 + k] - z[(j - 1) * n0 + k]) / (2.0 * traj.dt);
            let mut rhs = cert.lambdas[k] * z[j * n0 + k];
            for a in 0..m {
                // phi e^{-D0 A} B (K Z + d2) = e^{-D0 A} B w(t)
                rhs += bt[k] * cert.b[(k, a)] * now[a];
                rhs += cert.b[(k, a)] * (late[a] - nominal[a] + traj.d1(j)[a]);
            }
            r2 += (fd - rhs).norm_sqr();
        }
        residual.push(r2.sqrt());
    }
    Ok(ArtsteinOutput { z, residual })
}

/// The five reference scenarios on the `c = 15` reaction-diffusion plant.
pub fn builtin_scenarios(desc: &SystemDescriptor, cert: &Certificate) -> Result<Vec<(&'static str, Scenario)>> {
    let x0 = [c(1.0), c(0.5), c(-0.25)];
    let constant = DelaySignal::Constant { d0: cert.d0 };
    let sinus = DelaySignal::Sinusoid { d0: cert.d0, amplitude: cert.delta, omega: 3.0, phase: 0.0 };
    let d1 = DisturbanceSignal::single(Shape::Sinusoid { amplitude: 0.5, omega: 2.0, phase: 0.0 });
    let d2 = DisturbanceSignal::single(Shape::SmoothedStep { amplitude: 0.5, onset: 2.0, rise: 1.0 });
    let base = |delay: &DelaySignal| Scenario::new(desc.clone(), cert.clone(), delay.clone(), &x0, 10.0);
    Ok(vec![
        ("constant_delay_free", base(&constant)?),
        ("sinusoid_delay_free", base(&sinus)?),
        ("constant_delay_d1", base(&constant)?.with_disturbances(d1.clone(), DisturbanceSignal::zero())),
        ("sinusoid_delay_d2", base(&sinus)?.with_disturbances(DisturbanceSignal::zero(), d2.clone())),
        ("sinusoid_delay_d1_d2", base(&sinus)?.with_disturbances(d1, d2)),
    ])
}
