//! Runtime realization of the implicit predictor feedback
//! `u(t) = phi(t) { K Y(t) + d2(t) + K int_{max(t-D0,0)}^t e^{(t-s-D0) A} B u(s) ds }`.

use std::collections::VecDeque;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::expint::SegmentWeights;
use crate::linalg::{self, c, CMatrix};
use crate::synthesis::Certificate;

/// Cubic smoothstep `3 s^2 - 2 s^3` on `s in [0, 1]`, clamped outside.
pub fn smoothstep(s: f64) -> (f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0)
    } else if s >= 1.0 {
        (1.0, 0.0)
    } else {
        (s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s))
    }
}

/// C¹ ramp from 0 to 1 over `[0, t0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSignal {
    pub t0: f64,
}

impl TransitionSignal {
    pub fn new(t0: f64) -> Result<Self> {
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(Error::InvalidInput(format!("transition horizon must be positive (got {t0})")));
        }
        Ok(TransitionSignal { t0 })
    }

    /// `(phi(t), phi'(t))`
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let (v, d) = smoothstep(t / self.t0);
        (v, d / self.t0)
    }
}

/// Uniformly sampled control history, linear in between samples.
///
/// Sample `k` sits at `t = k dt`; the buffer is pre-loaded with zeros at
/// negative indices so that `u = 0` on `[-D0 - delta - dt, 0)`.
#[derive(Debug, Clone)]
pub struct ControlHistory {
    dt: f64,
    m: usize,
    first_index: i64,
    samples: VecDeque<Vec<Complex64>>,
    capacity: usize,
}

impl ControlHistory {
    /// `span` is the length of the window that must stay readable behind the
    /// newest sample.
    pub fn new(dt: f64, m: usize, span: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || !(span >= 0.0 && span.is_finite()) {
            return Err(Error::InvalidInput(format!("history needs dt > 0 and finite span (dt = {dt}, span = {span})")));
        }
        let pre = (span / dt).ceil() as usize + 2;
        let samples: VecDeque<Vec<Complex64>> = (0..pre).map(|_| vec![c(0.0); m]).collect();
        Ok(ControlHistory { dt, m, first_index: -(pre as i64), samples, capacity: pre + 2 })
    }

    /// Unbounded history (nothing is ever dropped).
    pub fn unbounded(dt: f64, m: usize, span: f64) -> Result<Self> {
        let mut h = Self::new(dt, m, span)?;
        h.capacity = usize::MAX;
        Ok(h)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn num_inputs(&self) -> usize {
        self.m
    }

    fn last_index(&self) -> i64 {
        self.first_index + self.samples.len() as i64 - 1
    }

    pub fn first_time(&self) -> f64 {
        self.first_index as f64 * self.dt
    }

    pub fn last_time(&self) -> f64 {
        self.last_index() as f64 * self.dt
    }

    /// Index of the next sample to be pushed.
    pub fn next_index(&self) -> i64 {
        self.last_index() + 1
    }

    pub fn push(&mut self, u: Vec<Complex64>) {
        debug_assert_eq!(u.len(), self.m);
        self.samples.push_back(u);
        while self.samples.len() > self.capacity {
            self.samples.pop_front();
            self.first_index += 1;
        }
    }

    /// Sample at index `k`.
    pub fn sample(&self, k: i64) -> Option<&[Complex64]> {
        if k < self.first_index || k > self.last_index() {
            return None;
        }
        self.samples.get((k - self.first_index) as usize).map(|v| v.as_slice())
    }

    fn insufficient(&self, t: f64) -> Error {
        Error::InsufficientHistory { requested: t, first: self.first_time(), last: self.last_time() }
    }

    /// Linear interpolant at time `t`.
    pub fn value_at(&self, t: f64) -> Result<Vec<Complex64>> {
        let mut out = vec![c(0.0); self.m];
        self.value_into(t, &mut out)?;
        Ok(out)
    }

    pub fn value_into(&self, t: f64, out: &mut [Complex64]) -> Result<()> {
        let pos = t / self.dt;
        let slack = 1e-9;
        if !(pos >= self.first_index as f64 - slack && pos <= self.last_index() as f64 + slack) {
            return Err(self.insufficient(t));
        }
        let k = (pos.floor() as i64).clamp(self.first_index, self.last_index());
        let frac = (pos - k as f64).clamp(0.0, 1.0);
        let a = self.sample(k).expect("index checked");
        match self.sample(k + 1) {
            Some(b) if frac > 0.0 => {
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    *o = x * (1.0 - frac) + y * frac;
                }
            }
            _ => out.copy_from_slice(a),
        }
        Ok(())
    }
}

/// `int_{max(t - D0, 0)}^t e^{(t - s - D0) lambda_n} (B u(s))_n ds` for the
/// piecewise-linear interpolant of `u`, exact per segment.
pub fn predictor_integral(history: &ControlHistory, t: f64, lambdas: &[Complex64], b: &CMatrix, d0: f64) -> Result<Vec<Complex64>> {
    let lo = (t - d0).max(0.0);
    if t < 0.0 {
        return Ok(vec![c(0.0); lambdas.len()]);
    }
    let dt = history.dt();
    if lo < history.first_time() - 1e-9 * dt || t > history.last_time() + 1e-9 * dt {
        return Err(history.insufficient(if lo < history.first_time() { lo } else { t }));
    }
    // breakpoints: the window ends plus every sample strictly inside
    let mut pts = vec![lo];
    let mut k = (lo / dt).floor() as i64 + 1;
    while (k as f64) * dt < t - 1e-12 * dt {
        if (k as f64) * dt > lo + 1e-12 * dt {
            pts.push(k as f64 * dt);
        }
        k += 1;
    }
    pts.push(t);
    let mut out = vec![c(0.0); lambdas.len()];
    let mut ua = history.value_at(pts[0])?;
    for w in pts.windows(2) {
        let (a, bnd) = (w[0], w[1]);
        let ub = history.value_at(bnd)?;
        let h = bnd - a;
        if h > 0.0 {
            for (n, lam) in lambdas.iter().enumerate() {
                let bu_a: Complex64 = (0..b.ncols()).map(|j| b[(n, j)] * ua[j]).sum();
                let bu_b: Complex64 = (0..b.ncols()).map(|j| b[(n, j)] * ub[j]).sum();
                let sw = SegmentWeights::new(*lam, h);
                out[n] += (lam * (t - bnd - d0)).exp() * (sw.left * bu_a + sw.right * bu_b);
            }
        }
        ua = ub;
    }
    Ok(out)
}

/// Step size and iteration controls of the implicit solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub dt: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { dt: 1e-3, max_iters: 50, tol: 1e-12 }
    }
}

/// Outcome of one implicit solve.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub u: Vec<Complex64>,
    /// Predictor integral at this step, including the current `u`.
    pub predictor: Vec<Complex64>,
    pub iters: usize,
    pub residual: f64,
}

/// Predictor feedback on a uniform grid `t_j = j dt`.
#[derive(Debug, Clone)]
pub struct Controller {
    lambdas: Vec<Complex64>,
    b: CMatrix,
    k: CMatrix,
    transition: TransitionSignal,
    cfg: ControllerConfig,
    /// `weights[i][n]` multiplies `(B u(t - i dt))_n` in the predictor integral.
    weights: Vec<Vec<Complex64>>,
    /// `K diag(w_0) B`: sensitivity of the predictor term to the current `u`.
    self_gain: CMatrix,
    contraction: f64,
    history: ControlHistory,
    next: i64,
}

/// Per-sample weights of the predictor integral over `[t - D0, t]` on a grid
/// with step `dt`. The last segment may be partial.
pub fn predictor_weights(lambdas: &[Complex64], d0: f64, dt: f64) -> Vec<Vec<Complex64>> {
    let full = (d0 / dt + 1e-9).floor() as usize;
    let rem = d0 - full as f64 * dt;
    let has_partial = rem > 1e-9 * dt;
    let len = full + if has_partial { 2 } else { 1 };
    let mut w = vec![vec![c(0.0); lambdas.len()]; len];
    for (n, lam) in lambdas.iter().enumerate() {
        let sw = SegmentWeights::new(*lam, dt);
        for i in 0..full {
            // segment [t - (i+1) dt, t - i dt]
            let scale = (lam * (i as f64 * dt - d0)).exp();
            w[i][n] += scale * sw.right;
            w[i + 1][n] += scale * sw.left;
        }
        if has_partial {
            // segment [t - D0, t - full dt], left value interpolated
            let sp = SegmentWeights::new(*lam, rem);
            let scale = (lam * -rem).exp();
            let f = rem / dt;
            w[full][n] += scale * (sp.right + sp.left * (1.0 - f));
            w[full + 1][n] += scale * sp.left * f;
        }
    }
    w
}

impl Controller {
    /// `delta` sizes the retained history so delayed reads down to
    /// `t - D0 - delta` stay available.
    pub fn new(cert: &Certificate, delta: f64, cfg: ControllerConfig) -> Result<Self> {
        if !(cfg.dt > 0.0 && cfg.dt.is_finite()) || cfg.max_iters == 0 || !(cfg.tol > 0.0) {
            return Err(Error::InvalidInput("controller needs dt > 0, max_iters >= 1, tol > 0".into()));
        }
        let lambdas = cert.lambdas.clone();
        let weights = predictor_weights(&lambdas, cert.d0, cfg.dt);
        let mut kw = cert.k.clone();
        for n in 0..lambdas.len() {
            for i in 0..kw.nrows() {
                kw[(i, n)] *= weights[0][n];
            }
        }
        let self_gain = &kw * &cert.b;
        let contraction = linalg::norm2(&self_gain);
        if !(contraction < 1.0) {
            return Err(Error::Contraction { factor: contraction });
        }
        let m = cert.num_inputs;
        let history = ControlHistory::new(cfg.dt, m, cert.d0 + delta.max(0.0) + cfg.dt)?;
        Ok(Controller {
            lambdas,
            b: cert.b.clone(),
            k: cert.k.clone(),
            transition: TransitionSignal::new(cert.t0)?,
            cfg,
            weights,
            self_gain,
            contraction,
            next: 0,
            history,
        })
    }

    pub fn contraction_factor(&self) -> f64 {
        self.contraction
    }

    pub fn history(&self) -> &ControlHistory {
        &self.history
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> i64 {
        self.next
    }

    /// Predictor integral at the current step excluding the contribution of
    /// the current sample.
    fn predictor_rest(&self) -> Vec<Complex64> {
        let nmodes = self.lambdas.len();
        let mut p = vec![c(0.0); nmodes];
        for (i, w) in self.weights.iter().enumerate().skip(1) {
            let u = self.history.sample(self.next - i as i64).expect("history spans the predictor window");
            for n in 0..nmodes {
                let bu: Complex64 = (0..self.b.ncols()).map(|j| self.b[(n, j)] * u[j]).sum();
                p[n] += w[n] * bu;
            }
        }
        p
    }

    /// Solves the implicit law at `t_j = j dt` for the next index `j`, pushes
    /// `u(t_j)` into the history and returns it.
    pub fn step(&mut self, y: &[Complex64], d2: &[Complex64]) -> Result<StepOutcome> {
        let t = self.next as f64 * self.cfg.dt;
        let m = self.history.num_inputs();
        let (phi, _) = self.transition.eval(t);
        let rest = self.predictor_rest();
        let mut iters = 0;
        let u = if phi == 0.0 {
            vec![c(0.0); m]
        } else {
            let arg: Vec<Complex64> = y.iter().zip(&rest).map(|(a, b)| a + b).collect();
            // affine map u -> g + G u
            let g: Vec<Complex64> = (0..m)
                .map(|i| phi * ((0..arg.len()).map(|n| self.k[(i, n)] * arg[n]).sum::<Complex64>() + d2[i]))
                .collect();
            let apply = |u: &[Complex64]| -> Vec<Complex64> {
                (0..m).map(|i| g[i] + phi * (0..m).map(|j| self.self_gain[(i, j)] * u[j]).sum::<Complex64>()).collect()
            };
            let mut u = self.history.sample(self.next - 1).map(|s| s.to_vec()).unwrap_or_else(|| vec![c(0.0); m]);
            loop {
                let nu = apply(&u);
                iters += 1;
                let step = linalg::vec_norm(&nu.iter().zip(&u).map(|(a, b)| a - b).collect::<Vec<_>>());
                u = nu;
                if !step.is_finite() {
                    return Err(Error::NonFinite(format!("control at t = {t}")));
                }
                if step <= self.cfg.tol * linalg::vec_norm(&u).max(1.0) {
                    break;
                }
                if iters >= self.cfg.max_iters {
                    return Err(Error::ControllerDiverged { t, iters, step });
                }
            }
            u
        };
        let mut predictor = rest;
        for (n, pn) in predictor.iter_mut().enumerate() {
            let bu: Complex64 = (0..self.b.ncols()).map(|j| self.b[(n, j)] * u[j]).sum();
            *pn += self.weights[0][n] * bu;
        }
        // residual of u = phi { K (Y + P[u]) + d2 }
        let r: Vec<Complex64> = (0..m)
            .map(|i| {
                let kz: Complex64 = (0..y.len()).map(|n| self.k[(i, n)] * (y[n] + predictor[n])).sum();
                u[i] - phi * (kz + d2[i])
            })
            .collect();
        let residual = linalg::vec_norm(&r);
        self.history.push(u.clone());
        self.next += 1;
        Ok(StepOutcome { u, predictor, iters, residual })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn transition_values() {
        let s = TransitionSignal::new(2.0).unwrap();
        assert_eq!(s.eval(-1.0), (0.0, 0.0));
        assert_eq!(s.eval(0.0), (0.0, 0.0));
        assert_eq!(s.eval(2.0), (1.0, 0.0));
        assert_eq!(s.eval(5.0).0, 1.0);
        assert_eq!(s.eval(1.0).0, 0.5);
        // derivative continuity at the ends
        assert!(s.eval(1e-9).1.abs() < 1e-8 && s.eval(2.0 - 1e-9).1.abs() < 1e-8);
        // derivative against a central difference
        let h = 1e-6;
        let fd = (s.eval(0.7 + h).0 - s.eval(0.7 - h).0) / (2.0 * h);
        assert!((fd - s.eval(0.7).1).abs() < 1e-8);
    }

    fn filled(dt: f64, n: usize, f: impl Fn(f64) -> f64) -> ControlHistory {
        let mut h = ControlHistory::unbounded(dt, 1, 1.0).unwrap();
        for j in 0..n {
            h.push(vec![c(f(j as f64 * dt))]);
        }
        h
    }

    #[test]
    fn history_is_zero_before_start_and_interpolates() {
        let h = filled(0.1, 11, |t| t * t);
        assert_eq!(h.value_at(-0.55).unwrap()[0], c(0.0));
        let v = h.value_at(0.25).unwrap()[0].re;
        assert!((v - 0.5 * (0.04 + 0.09)).abs() < 1e-15);
        assert!(h.value_at(1.2).is_err());
        assert!(h.value_at(-5.0).is_err());
    }

    #[test]
    fn ring_buffer_drops_old_samples() {
        let mut h = ControlHistory::new(0.1, 1, 0.5).unwrap();
        for j in 0..100 {
            h.push(vec![c(j as f64)]);
        }
        assert!(h.value_at(9.9).is_ok());
        assert!(h.value_at(9.9 - 0.5).is_ok());
        assert!(matches!(h.value_at(1.0), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn predictor_integral_zero_history() {
        let h = filled(0.01, 200, |_| 0.0);
        let b = DMatrix::from_element(1, 1, c(1.0));
        assert_eq!(predictor_integral(&h, 1.5, &[c(-2.0)], &b, 0.5).unwrap()[0], c(0.0));
    }

    #[test]
    fn predictor_integral_constant_input() {
        let u0 = 0.7;
        let b = DMatrix::from_element(1, 1, c(1.5));
        let h = filled(0.01, 300, |_| u0);
        for &(lam, t, d0) in &[(-2.0f64, 1.0f64, 0.5f64), (3.0, 0.3, 0.5), (0.5, 2.0, 0.37)] {
            let got = predictor_integral(&h, t, &[c(lam)], &b, d0).unwrap()[0].re;
            let oracle = (-d0 * lam).exp() * ((lam * t.min(d0)).exp() - 1.0) / lam * 1.5 * u0;
            assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        }
    }

    #[test]
    fn predictor_integral_ramp_at_zero_rate() {
        let b = DMatrix::from_element(1, 1, c(1.0));
        let h = filled(0.01, 101, |t| t);
        let got = predictor_integral(&h, 1.0, &[c(0.0)], &b, 1.0).unwrap()[0].re;
        assert!((got - 0.5).abs() < 1e-14);
    }

    #[test]
    fn grid_weights_match_generic_integral() {
        let lambdas = [c(5.13), c(-3.0), c(0.0)];
        let b = DMatrix::from_row_slice(3, 1, &[c(1.0), c(-2.0), c(0.5)]);
        for &d0 in &[0.5, 0.4537] {
            let dt = 0.01;
            let h = filled(dt, 400, |t| (3.0 * t).sin() + t);
            let w = predictor_weights(&lambdas, d0, dt);
            let j = 300i64;
            let t = j as f64 * dt;
            let generic = predictor_integral(&h, t, &lambdas, &b, d0).unwrap();
            for n in 0..3 {
                let fast: Complex64 = w
                    .iter()
                    .enumerate()
                    .map(|(i, wi)| wi[n] * b[(n, 0)] * h.sample(j - i as i64).unwrap()[0])
                    .sum();
                assert!((fast - generic[n]).norm() < 1e-12, "mode {n}, d0 {d0}");
            }
        }
    }

    fn builtin() -> Certificate {
        use crate::pipeline::{builtin_config, certify};
        certify(&crate::spectral_model::build_reaction_diffusion(15.0), &builtin_config()).unwrap()
    }

    #[test]
    fn control_is_zero_at_start() {
        let cert = builtin();
        let mut ctrl = Controller::new(&cert, cert.delta, ControllerConfig::default()).unwrap();
        let out = ctrl.step(&[c(1.0)], &[c(0.3)]).unwrap();
        assert_eq!(out.u, vec![c(0.0)]);
    }

    #[test]
    fn scalar_fixed_point_matches_closed_form() {
        let cert = builtin();
        let cfg = ControllerConfig::default();
        let mut ctrl = Controller::new(&cert, cert.delta, cfg).unwrap();
        let (k, b) = (cert.k[(0, 0)], cert.b[(0, 0)]);
        let w0 = predictor_weights(&cert.lambdas, cert.d0, cfg.dt)[0][0];
        let tr = TransitionSignal::new(cert.t0).unwrap();
        for j in 0..400 {
            let t = j as f64 * cfg.dt;
            let y = c((2.0 * t).cos());
            let d2 = c(0.2 * t);
            let rest = ctrl.predictor_rest()[0];
            let phi = tr.eval(t).0;
            let oracle = phi * (k * (y + rest) + d2) / (1.0 - phi * k * w0 * b);
            let out = ctrl.step(&[y], &[d2]).unwrap();
            assert!((out.u[0] - oracle).norm() <= 1e-12 * oracle.norm().max(1.0), "t = {t}");
            assert!(out.residual < 1e-12 * out.u[0].norm().max(1.0));
        }
    }

    #[test]
    fn zero_gain_passes_the_disturbance_through() {
        let mut cert = builtin();
        cert.k[(0, 0)] = c(0.0);
        let mut ctrl = Controller::new(&cert, cert.delta, ControllerConfig::default()).unwrap();
        let tr = TransitionSignal::new(cert.t0).unwrap();
        for j in 0..2000 {
            let t = j as f64 * 1e-3;
            let d2 = c((3.0 * t).sin());
            let out = ctrl.step(&[c(5.0)], &[d2]).unwrap();
            assert_eq!(out.u[0], d2 * tr.eval(t).0);
        }
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let cert = builtin();
        let mut ctrl = Controller::new(&cert, cert.delta, ControllerConfig::default()).unwrap();
        for _ in 0..3000 {
            assert_eq!(ctrl.step(&[c(0.0)], &[c(0.0)]).unwrap().u, vec![c(0.0)]);
        }
    }

    #[test]
    fn oversized_step_fails_the_contraction_check() {
        let cert = builtin();
        let cfg = ControllerConfig { dt: 0.2, ..Default::default() };
        assert!(matches!(Controller::new(&cert, cert.delta, cfg), Err(Error::Contraction { .. })));
    }

    #[test]
    fn step_reads_only_the_past() {
        let cert = builtin();
        let mut ctrl = Controller::new(&cert, cert.delta, ControllerConfig::default()).unwrap();
        for j in 0..1500 {
            ctrl.step(&[c(1.0)], &[c(0.0)]).unwrap();
            assert!((ctrl.history().last_time() - j as f64 * 1e-3).abs() < 1e-12);
        }
    }
}
