//! Gain synthesis and the numeric certificate.
//!
//! The gain places the poles of `A_cl = A + e^{-D0 A} B K`. The decay envelope
//! `(M_lambda, lambda)` of `A_cl` feeds the small-gain margin on the delay
//! uncertainty, the decay rate `sigma` of the truncated loop, and finally the
//! tail constants that bound the modes left out of the truncated model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMatrix};
use crate::spectral_model::{Field, TruncatedModel};

/// `e^{-D0 A} B` for diagonal `A`.
pub fn predicted_input(model: &TruncatedModel, d0: f64) -> CMatrix {
    let mut b = model.b.clone();
    for (i, lam) in model.lambdas.iter().enumerate() {
        let s = (-lam * d0).exp();
        for j in 0..b.ncols() {
            b[(i, j)] *= s;
        }
    }
    b
}

/// `A + e^{-D0 A} B K`.
pub fn closed_loop(model: &TruncatedModel, k: &CMatrix, d0: f64) -> CMatrix {
    model.a_matrix() + predicted_input(model, d0) * k
}

fn check_targets(field: Field, targets: &[Complex64]) -> Result<()> {
    if let Some(p) = targets.iter().find(|p| !(p.re < 0.0) || !p.im.is_finite()) {
        return Err(Error::InvalidInput(format!("target pole {p} is not in the open left half plane")));
    }
    if field == Field::Real {
        let conj: Vec<Complex64> = targets.iter().map(|p| p.conj()).collect();
        let scale = targets.iter().map(|p| p.norm()).fold(1.0, f64::max);
        if linalg::multiset_distance(targets, &conj) > 1e-12 * scale {
            return Err(Error::InvalidInput("target poles must be closed under conjugation for a real plant".into()));
        }
    }
    Ok(())
}

/// Single-input pole placement for diagonal `A` with distinct eigenvalues.
///
/// With `b~ = e^{-D0 A} B`, matching the characteristic polynomial of
/// `A + b~ K` at each `lambda_i` gives
/// `K_i = -prod_k (lambda_i - p_k) / (b~_i prod_{j != i} (lambda_i - lambda_j))`.
pub fn place_gain(model: &TruncatedModel, d0: f64, targets: &[Complex64], field: Field) -> Result<CMatrix> {
    let m = model.num_inputs();
    if m != 1 {
        return Err(Error::MultiInput { m });
    }
    if !(d0 > 0.0 && d0.is_finite()) {
        return Err(Error::InvalidInput(format!("nominal delay must be positive (got {d0})")));
    }
    let n = model.n0;
    if targets.len() != n {
        return Err(Error::InvalidInput(format!("{} target poles for {n} modes", targets.len())));
    }
    check_targets(field, targets)?;
    if let Some(i) = (0..n).find(|&i| model.b[(i, 0)] == c(0.0)) {
        return Err(Error::Uncontrollable { mode: i + 1 });
    }
    let bt = predicted_input(model, d0);
    let lam = &model.lambdas;
    let mut k = DMatrix::from_element(1, n, c(0.0));
    for i in 0..n {
        let num: Complex64 = targets.iter().map(|p| lam[i] - p).product();
        let den: Complex64 = (0..n).filter(|&j| j != i).map(|j| lam[i] - lam[j]).product();
        k[(0, i)] = -num / (bt[(i, 0)] * den);
    }
    if field == Field::Real {
        for z in k.iter_mut() {
            z.im = 0.0;
        }
    }
    if k.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::PlacementFailed("non-finite gain".into()));
    }
    let placed = linalg::eigenvalues(&closed_loop(model, &k, d0))?;
    let scale = targets.iter().chain(lam.iter()).map(|p| p.norm()).fold(1.0, f64::max);
    let err = linalg::multiset_distance(&placed, targets);
    if err > 1e-8 * scale {
        return Err(Error::PlacementFailed(format!("closed-loop eigenvalues miss the targets by {err:e}")));
    }
    log::debug!("placed {n} poles, eigenvalue error {err:e}");
    Ok(k)
}

/// `||e^{A t}|| <= M_lambda e^{-lambda t}` for `t >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayEnvelope {
    pub m_lambda: f64,
    /// Grid supremum before inflation.
    pub m_raw: f64,
    pub lambda: f64,
    pub abscissa: f64,
    pub t_check: f64,
}

/// Smallest `T` past which the Schur bound
/// `||e^{A t}|| e^{lambda t} <= e^{-beta t} sum_{k<n} (nu t)^k / k!` stays below 1.
fn schur_tail_horizon(a: &CMatrix, beta: f64) -> Result<f64> {
    let t = linalg::schur_triangular(a)?;
    let n = t.nrows();
    let mut strict = t.clone();
    for i in 0..n {
        strict[(i, i)] = c(0.0);
    }
    let nu = linalg::frobenius(&strict);
    let bound = |t: f64| {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..n {
            term *= nu * t / k as f64;
            sum += term;
        }
        (-beta * t).exp() * sum
    };
    // every term is decreasing past (n - 1) / beta
    let mut lo = (n as f64 - 1.0) / beta;
    if bound(lo) <= 1.0 {
        return Ok(lo.max(1.0 / beta));
    }
    let mut hi = lo.max(1.0 / beta);
    while bound(hi) > 1.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::InvalidInput("decay envelope horizon overflow".into()));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if bound(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// `lambda = fraction * |abscissa|` and the sampled supremum of
/// `||e^{A t}|| e^{lambda t}`, inflated by 5%.
///
/// The grid step keeps `e^{(||A|| + lambda) h} <= 1.04`, so the continuous
/// supremum is within 4% of the grid maximum. Past `t_check` the Schur bound
/// keeps the weighted norm below 1.
pub fn decay_envelope(a_cl: &CMatrix, lambda_fraction: f64, t_check: Option<f64>) -> Result<DecayEnvelope> {
    if !(lambda_fraction > 0.0 && lambda_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("lambda fraction must lie in (0, 1) (got {lambda_fraction})")));
    }
    if a_cl.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("closed-loop matrix".into()));
    }
    let abscissa = linalg::spectral_abscissa(a_cl)?;
    if !(abscissa < 0.0) {
        return Err(Error::NotHurwitz { abscissa });
    }
    let lambda = lambda_fraction * -abscissa;
    let horizon = schur_tail_horizon(a_cl, -abscissa - lambda)?;
    let t_check = t_check.map_or(horizon, |t| t.max(horizon));
    let norm_a = linalg::norm2(a_cl);
    let h = 1.04f64.ln() / (norm_a + lambda);
    let steps = (t_check / h).ceil() as usize;
    let step = linalg::expm(&(a_cl * c(h)));
    let mut m_raw: f64 = 1.0;
    let mut e = DMatrix::identity(a_cl.nrows(), a_cl.ncols());
    for j in 1..=steps {
        let t = j as f64 * h;
        e = if j % 256 == 0 { linalg::expm(&(a_cl * c(t))) } else { &e * &step };
        let w = (lambda * t).exp();
        // Frobenius dominates the 2-norm, so most points skip the SVD
        if linalg::frobenius(&e) * w > m_raw {
            m_raw = m_raw.max(linalg::norm2(&e) * w);
        }
    }
    let m_lambda = (1.05 * m_raw).max(1.0);
    log::debug!("decay envelope: lambda = {lambda}, M = {m_lambda}, T_check = {t_check}, {steps} samples");
    Ok(DecayEnvelope { m_lambda, m_raw, lambda, abscissa, t_check })
}

/// Left side of the small-gain inequality:
/// `M ||BK|| (e^{||A_cl|| delta} - e^{-lambda delta})`.
pub fn small_gain_lhs(m_lambda: f64, bk_norm: f64, norm_acl: f64, lambda: f64, delta: f64) -> f64 {
    m_lambda * bk_norm * ((norm_acl * delta).exp() - (-lambda * delta).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayMargin {
    /// Root of `LHS(delta) = lambda`; infinite when `||BK|| = 0`.
    pub delta_star: f64,
    pub delta_max: f64,
    /// `||BK|| = 0`: the margin is not constrained by the small-gain condition.
    pub degenerate: bool,
}

/// Solves `LHS(delta) = lambda` by bisection down to floating-point resolution.
pub fn delta_margin(norm_acl: f64, bk_norm: f64, m_lambda: f64, lambda: f64, d0: f64) -> Result<DelayMargin> {
    if !(bk_norm >= 0.0) || !(m_lambda >= 1.0) || !(lambda > 0.0) || !(norm_acl >= 0.0) || !(d0 > 0.0) {
        return Err(Error::InvalidInput("delay margin needs M >= 1, lambda > 0, ||BK|| >= 0 and D0 > 0".into()));
    }
    let cap = d0 * (1.0 - 1e-6);
    if bk_norm == 0.0 {
        return Ok(DelayMargin { delta_star: f64::INFINITY, delta_max: cap, degenerate: true });
    }
    let f = |d: f64| small_gain_lhs(m_lambda, bk_norm, norm_acl, lambda, d) - lambda;
    let mut hi = 1.0 / (m_lambda * bk_norm * (norm_acl + lambda)).max(1e-300);
    while f(hi) <= 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::SmallGain("no root of the small-gain equation".into()));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 2.0 * f64::EPSILON * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let delta_star = if f(lo).abs() <= f(hi).abs() { lo } else { hi };
    Ok(DelayMargin { delta_star, delta_max: delta_star.min(cap), degenerate: false })
}

/// Loop gain of the perturbed delay system as a function of the decay rate:
/// `(M ||C|| / (lambda - sigma)) e^{sigma r} [e^{sigma eps}(e^{||A|| eps} - 1) + 1 - e^{-(lambda - sigma) eps}]`.
pub fn delta_tilde(m_lambda: f64, c_norm: f64, norm_a: f64, lambda: f64, r: f64, eps: f64, sigma: f64) -> f64 {
    let gap = lambda - sigma;
    if gap <= 0.0 {
        return f64::INFINITY;
    }
    m_lambda * c_norm / gap
        * (sigma * r).exp()
        * ((sigma * eps).exp() * (norm_a * eps).exp_m1() - (-gap * eps).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaRate {
    pub sigma: f64,
    pub delta_tilde: f64,
}

const SIGMA_THRESHOLD: f64 = 1.0 - 1e-6;

/// Largest `sigma < lambda` with `delta_tilde(sigma) <= 1 - 1e-6`, times 0.99.
pub fn sigma_rate(m_lambda: f64, c_norm: f64, norm_a: f64, lambda: f64, r: f64, eps: f64) -> Result<SigmaRate> {
    if !(lambda > 0.0) || !(r > 0.0) || !(eps >= 0.0) || !(c_norm >= 0.0) {
        return Err(Error::InvalidInput("sigma rate needs lambda > 0, r > 0, eps >= 0, ||C|| >= 0".into()));
    }
    let g = |s: f64| delta_tilde(m_lambda, c_norm, norm_a, lambda, r, eps, s);
    let at_zero = g(0.0);
    if !(at_zero <= SIGMA_THRESHOLD) {
        return Err(Error::SmallGain(format!("loop gain at sigma = 0 is {at_zero} >= 1")));
    }
    let (mut lo, mut hi) = (0.0, lambda);
    while hi - lo > 2.0 * f64::EPSILON * lambda {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) <= SIGMA_THRESHOLD {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = 0.99 * lo;
    Ok(SigmaRate { sigma, delta_tilde: g(sigma) })
}

/// Inputs of the tail constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailInputs {
    pub alpha: f64,
    pub xi: f64,
    pub riesz_lower: f64,
    pub num_inputs: usize,
    pub kappa: f64,
    pub d0: f64,
    pub delta: f64,
    /// `sum_k ||B e_k||^2`
    pub lift_sq: f64,
    /// `sum_k ||A B e_k||^2`
    pub lift_image_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailConstants {
    pub c_tilde0: f64,
    pub c_tilde1: f64,
    pub c_tilde2: f64,
    pub c_tilde3: f64,
}

pub fn c_tilde0(alpha: f64, xi: f64, lift_sq: f64, lift_image_sq: f64) -> f64 {
    alpha * alpha * xi * xi * lift_sq + lift_image_sq
}

/// Tail constants from the control-estimate constants `C̄4..C̄6`.
pub fn tail_constants(inp: &TailInputs, c_bar4: f64, c_bar5: f64, c_bar6: f64) -> Result<TailConstants> {
    let TailInputs { alpha, xi, riesz_lower: m_r, num_inputs, kappa, d0, delta, lift_sq, lift_image_sq } = *inp;
    if !(kappa > 0.0 && kappa < alpha) {
        return Err(Error::InvalidInput(format!("kappa = {kappa} must lie in (0, alpha = {alpha})")));
    }
    if !(m_r > 0.0) {
        return Err(Error::InvalidInput("m_R must be positive".into()));
    }
    let m = num_inputs as f64;
    let c0 = c_tilde0(alpha, xi, lift_sq, lift_image_sq);
    let gap_sq = (alpha - kappa) * (alpha - kappa);
    let grow = (kappa * (d0 + delta)).exp();
    let c1 = 4.0 / m_r * (1.0 + 2.0 * m * c_bar4 * c_bar4 * grow * grow * c0 / gap_sq);
    let c2 = 8.0 * m * (1.0 + c_bar5 * grow).powi(2) * c0 / (m_r * gap_sq);
    let c3 = 8.0 * m * c_bar6 * c_bar6 * grow * grow * c0 / (m_r * gap_sq);
    Ok(TailConstants { c_tilde0: c0, c_tilde1: c1, c_tilde2: c2, c_tilde3: c3 })
}

/// `sqrt(M_R) (C_i + sqrt(C~_i))`.
pub fn assemble(riesz_upper: f64, c_i: f64, c_tilde_i: f64) -> f64 {
    riesz_upper.sqrt() * (c_i + c_tilde_i.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    Fitted,
}

/// Constants with no closed form, fitted from simulation ensembles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedConstants {
    /// Truncated-state estimate at rate `sigma`.
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Control estimate.
    pub c_bar4: f64,
    pub c_bar5: f64,
    pub c_bar6: f64,
    /// Direct fits of the full-state estimate, for comparison with the
    /// assembled constants.
    pub c_bar1_direct: f64,
    pub c_bar2_direct: f64,
    pub c_bar3_direct: f64,
    pub ensemble: String,
}

/// Everything derived from the fitted constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub tail: TailConstants,
    pub c_bar1: f64,
    pub c_bar2: f64,
    pub c_bar3: f64,
}

/// Numeric content of the stability theorem for one plant and gain.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub field: Field,
    pub n0: usize,
    pub num_inputs: usize,
    pub lambdas: Vec<Complex64>,
    pub b: CMatrix,
    pub k: CMatrix,
    pub d0: f64,
    pub t0: f64,
    pub a_cl: CMatrix,
    pub norm_a: f64,
    pub norm_a_cl: f64,
    pub bk_norm: f64,
    pub envelope: DecayEnvelope,
    pub margin: DelayMargin,
    /// Fraction of `delta_max` given up so the small-gain inequality is strict.
    pub delta_margin: f64,
    /// Certified delay uncertainty `delta_max (1 - delta_margin)`.
    pub delta: f64,
    pub sigma: SigmaRate,
    pub kappa_fraction: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub xi: f64,
    pub xi_exact: bool,
    pub riesz_lower: f64,
    pub riesz_upper: f64,
    pub lift_sq: f64,
    pub lift_image_sq: f64,
    pub fitted: Option<FittedConstants>,
    pub derived: Option<DerivedConstants>,
}

impl Certificate {
    pub fn m_lambda(&self) -> f64 {
        self.envelope.m_lambda
    }

    pub fn lambda(&self) -> f64 {
        self.envelope.lambda
    }

    pub fn delta_max(&self) -> f64 {
        self.margin.delta_max
    }

    pub fn a_matrix(&self) -> CMatrix {
        DMatrix::from_diagonal(&DVector::from_vec(self.lambdas.clone()))
    }

    pub fn tail_inputs(&self) -> TailInputs {
        TailInputs {
            alpha: self.alpha,
            xi: self.xi,
            riesz_lower: self.riesz_lower,
            num_inputs: self.num_inputs,
            kappa: self.kappa,
            d0: self.d0,
            delta: self.delta,
            lift_sq: self.lift_sq,
            lift_image_sq: self.lift_image_sq,
        }
    }

    pub fn c_tilde0(&self) -> f64 {
        c_tilde0(self.alpha, self.xi, self.lift_sq, self.lift_image_sq)
    }

    /// Stores fitted constants and recomputes everything derived from them.
    pub fn install_fit(&mut self, fit: FittedConstants) -> Result<()> {
        let tail = tail_constants(&self.tail_inputs(), fit.c_bar4, fit.c_bar5, fit.c_bar6)?;
        let r = self.riesz_upper;
        self.derived = Some(DerivedConstants {
            tail,
            c_bar1: assemble(r, fit.c1, tail.c_tilde1),
            c_bar2: assemble(r, fit.c2, tail.c_tilde2),
            c_bar3: assemble(r, fit.c3, tail.c_tilde3),
        });
        self.fitted = Some(fit);
        Ok(())
    }

    /// Whether each named constant is computed from a closed form or fitted.
    pub fn provenance(&self) -> BTreeMap<String, Provenance> {
        use Provenance::*;
        let mut p = BTreeMap::new();
        for name in [
            "K", "A_cl", "M_lambda", "lambda", "delta_star", "delta_max", "delta", "sigma", "kappa", "epsilon", "alpha",
            "c_tilde0",
        ] {
            p.insert(name.to_string(), Exact);
        }
        p.insert("xi".into(), if self.xi_exact { Exact } else { Fitted });
        if self.fitted.is_some() {
            for name in [
                "c1", "c2", "c3", "c_bar4", "c_bar5", "c_bar6", "c_tilde1", "c_tilde2", "c_tilde3", "c_bar1", "c_bar2",
                "c_bar3",
            ] {
                p.insert(name.to_string(), Fitted);
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.d0,
            self.t0,
            self.norm_a,
            self.norm_a_cl,
            self.bk_norm,
            self.envelope.m_lambda,
            self.envelope.lambda,
            self.margin.delta_max,
            self.delta,
            self.sigma.sigma,
            self.kappa,
            self.epsilon,
            self.alpha,
            self.xi,
        ];
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("certificate scalar".into()));
        }
        if self.k.nrows() != self.num_inputs || self.k.ncols() != self.n0 || self.a_cl.shape() != (self.n0, self.n0) {
            return Err(Error::InvalidInput("certificate matrix shapes disagree with N0 and m".into()));
        }
        if self.b.shape() != (self.n0, self.num_inputs) || self.lambdas.len() != self.n0 {
            return Err(Error::InvalidInput("certificate model shapes disagree with N0 and m".into()));
        }
        if !(self.delta > 0.0 && self.delta < self.d0) {
            return Err(Error::InvalidInput(format!("certified delta {} outside (0, D0)", self.delta)));
        }
        if !(self.kappa > 0.0 && self.kappa < self.alpha.min(self.sigma.sigma)) {
            return Err(Error::InvalidInput("kappa outside (0, min(alpha, sigma))".into()));
        }
        Ok(())
    }
}

type Pair = [f64; 2];

fn mat_doc(m: &CMatrix) -> Vec<Vec<Pair>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect()
}

fn mat_from_doc(rows: &[Vec<Pair>], what: &str) -> Result<CMatrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidInput(format!("ragged matrix `{what}`")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| Complex64::new(rows[i][j][0], rows[i][j][1])))
}

/// Structured-text form of a [`Certificate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateDoc {
    pub field: Field,
    pub n0: usize,
    pub num_inputs: usize,
    pub d0: f64,
    pub t0: f64,
    pub lambdas: Vec<Pair>,
    pub b: Vec<Vec<Pair>>,
    pub k: Vec<Vec<Pair>>,
    pub a_cl: Vec<Vec<Pair>>,
    pub norm_a: f64,
    pub norm_a_cl: f64,
    pub bk_norm: f64,
    pub envelope: DecayEnvelope,
    pub margin: DelayMargin,
    pub delta_margin: f64,
    pub delta: f64,
    pub sigma: SigmaRate,
    pub kappa_fraction: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub xi: f64,
    pub xi_exact: bool,
    pub riesz_lower: f64,
    pub riesz_upper: f64,
    pub lift_sq: f64,
    pub lift_image_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted: Option<FittedConstants>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<DerivedConstants>,
    /// Informational; recomputed on load.
    #[serde(default)]
    pub provenance: BTreeMap<String, Provenance>,
}

impl From<&Certificate> for CertificateDoc {
    fn from(c: &Certificate) -> Self {
        CertificateDoc {
            field: c.field,
            n0: c.n0,
            num_inputs: c.num_inputs,
            d0: c.d0,
            t0: c.t0,
            lambdas: c.lambdas.iter().map(|z| [z.re, z.im]).collect(),
            b: mat_doc(&c.b),
            k: mat_doc(&c.k),
            a_cl: mat_doc(&c.a_cl),
            norm_a: c.norm_a,
            norm_a_cl: c.norm_a_cl,
            bk_norm: c.bk_norm,
            envelope: c.envelope,
            margin: c.margin,
            delta_margin: c.delta_margin,
            delta: c.delta,
            sigma: c.sigma,
            kappa_fraction: c.kappa_fraction,
            kappa: c.kappa,
            epsilon: c.epsilon,
            alpha: c.alpha,
            xi: c.xi,
            xi_exact: c.xi_exact,
            riesz_lower: c.riesz_lower,
            riesz_upper: c.riesz_upper,
            lift_sq: c.lift_sq,
            lift_image_sq: c.lift_image_sq,
            fitted: c.fitted.clone(),
            derived: c.derived,
            provenance: c.provenance(),
        }
    }
}

impl TryFrom<CertificateDoc> for Certificate {
    type Error = Error;

    fn try_from(d: CertificateDoc) -> Result<Self> {
        let cert = Certificate {
            field: d.field,
            n0: d.n0,
            num_inputs: d.num_inputs,
            lambdas: d.lambdas.iter().map(|p| Complex64::new(p[0], p[1])).collect(),
            b: mat_from_doc(&d.b, "b")?,
            k: mat_from_doc(&d.k, "k")?,
            d0: d.d0,
            t0: d.t0,
            a_cl: mat_from_doc(&d.a_cl, "a_cl")?,
            norm_a: d.norm_a,
            norm_a_cl: d.norm_a_cl,
            bk_norm: d.bk_norm,
            envelope: d.envelope,
            margin: d.margin,
            delta_margin: d.delta_margin,
            delta: d.delta,
            sigma: d.sigma,
            kappa_fraction: d.kappa_fraction,
            kappa: d.kappa,
            epsilon: d.epsilon,
            alpha: d.alpha,
            xi: d.xi,
            xi_exact: d.xi_exact,
            riesz_lower: d.riesz_lower,
            riesz_upper: d.riesz_upper,
            lift_sq: d.lift_sq,
            lift_image_sq: d.lift_image_sq,
            fitted: d.fitted,
            derived: d.derived,
        };
        cert.validate()?;
        Ok(cert)
    }
}

impl Serialize for Certificate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CertificateDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Certificate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = CertificateDoc::deserialize(d)?;
        Certificate::try_from(doc).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral_model::{build_reaction_diffusion, classify_modes, truncated_model};
    use std::f64::consts::PI;

    fn scalar_model(a: f64, b: f64) -> TruncatedModel {
        TruncatedModel {
            lambdas: vec![c(a)],
            b: DMatrix::from_element(1, 1, c(b)),
            n0: 1,
            alpha: 1.0,
            xi: 1.0,
            xi_exact: true,
        }
    }

    #[test]
    fn scalar_gain_matches_closed_form() {
        for &(a, b, d0, p) in &[(5.13, 4.44, 0.5, 2.0), (-1.0, 0.3, 1.2, 0.5), (0.0, -2.0, 0.1, 7.0)] {
            let k = place_gain(&scalar_model(a, b), d0, &[c(-p)], Field::Real).unwrap();
            let oracle = -(p + a) * (d0 * a).exp() / b;
            assert!((k[(0, 0)].re - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn reaction_diffusion_gain_places_pole() {
        let d = build_reaction_diffusion(15.0);
        let m = truncated_model(&d, &classify_modes(&d, 50, None).unwrap()).unwrap();
        let k = place_gain(&m, 0.5, &[c(-2.0)], Field::Real).unwrap();
        let ev = linalg::eigenvalues(&closed_loop(&m, &k, 0.5)).unwrap();
        assert!((ev[0] - c(-2.0)).norm() < 1e-8);
    }

    #[test]
    fn multi_mode_placement() {
        let d = build_reaction_diffusion(60.0);
        let cls = classify_modes(&d, 50, None).unwrap();
        assert_eq!(cls.n0, 2);
        let m = truncated_model(&d, &cls).unwrap();
        let targets = [c(-3.0), c(-5.0)];
        let k = place_gain(&m, 0.2, &targets, Field::Real).unwrap();
        let ev = linalg::eigenvalues(&closed_loop(&m, &k, 0.2)).unwrap();
        assert!(linalg::multiset_distance(&ev, &targets) < 1e-8);

        let cx = [Complex64::new(-2.0, 1.0), Complex64::new(-2.0, -1.0)];
        let k = place_gain(&m, 0.2, &cx, Field::Real).unwrap();
        assert!(k.iter().all(|z| z.im == 0.0));
        let ev = linalg::eigenvalues(&closed_loop(&m, &k, 0.2)).unwrap();
        assert!(linalg::multiset_distance(&ev, &cx) < 1e-8);
    }

    #[test]
    fn placement_errors() {
        assert!(matches!(
            place_gain(&scalar_model(1.0, 0.0), 0.5, &[c(-1.0)], Field::Real),
            Err(Error::Uncontrollable { mode: 1 })
        ));
        let mut two = scalar_model(1.0, 1.0);
        two.b = DMatrix::from_element(1, 2, c(1.0));
        assert!(matches!(place_gain(&two, 0.5, &[c(-1.0)], Field::Real), Err(Error::MultiInput { m: 2 })));
        assert!(place_gain(&scalar_model(1.0, 1.0), 0.5, &[c(1.0)], Field::Real).is_err());
    }

    #[test]
    fn scalar_envelope() {
        let a = DMatrix::from_element(1, 1, c(-2.0));
        let env = decay_envelope(&a, 0.95, None).unwrap();
        assert!((env.lambda - 1.9).abs() < 1e-14);
        assert_eq!(env.m_raw, 1.0);
        assert!((env.m_lambda - 1.05).abs() < 1e-14);
    }

    #[test]
    fn normal_envelope_is_unit_before_inflation() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![c(-1.0), c(-4.0), Complex64::new(-2.0, 3.0)]));
        for frac in [0.2, 0.5, 0.95] {
            let env = decay_envelope(&a, frac, None).unwrap();
            assert!((env.m_raw - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn defective_envelope_against_brute_sampling() {
        let a = DMatrix::from_row_slice(2, 2, &[c(-1.0), c(10.0), c(0.0), c(-1.0)]);
        let env = decay_envelope(&a, 0.95, None).unwrap();
        assert!(env.m_lambda > 1.0);
        // closed form: e^{At} = e^{-t} [[1, 10t], [0, 1]]
        let mut brute: f64 = 0.0;
        for i in 0..200_000 {
            let t = env.t_check * i as f64 / 200_000.0;
            let n = DMatrix::from_row_slice(2, 2, &[c(1.0), c(10.0 * t), c(0.0), c(1.0)]);
            brute = brute.max(linalg::norm2(&n) * (-t).exp() * (env.lambda * t).exp());
        }
        assert!(env.m_raw <= brute * (1.0 + 1e-9));
        assert!(env.m_lambda >= brute);
    }

    #[test]
    fn envelope_rejects_unstable() {
        let a = DMatrix::from_element(1, 1, c(0.5));
        assert!(matches!(decay_envelope(&a, 0.95, None), Err(Error::NotHurwitz { .. })));
    }

    #[test]
    fn small_gain_root() {
        // e^{2 d} - e^{-d} = 1  <=>  x^3 - x - 1 = 0 with x = e^d
        let plastic = 1.324_717_957_244_746f64;
        let dm = delta_margin(2.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        assert!((dm.delta_star - plastic.ln()).abs() < 1e-12);
        let lhs = small_gain_lhs(1.0, 1.0, 2.0, 1.0, dm.delta_star);
        assert!((lhs - 1.0).abs() <= 1e-10);
        assert!(small_gain_lhs(1.0, 1.0, 2.0, 1.0, 1.01 * dm.delta_star) > 1.0);
        assert_eq!(small_gain_lhs(1.0, 1.0, 2.0, 1.0, 0.0), 0.0);

        let doubled = delta_margin(2.0, 2.0, 1.0, 1.0, 10.0).unwrap();
        assert!(doubled.delta_max < dm.delta_max);

        let capped = delta_margin(2.0, 1.0, 1.0, 1.0, 0.1).unwrap();
        assert!((capped.delta_max - 0.1 * (1.0 - 1e-6)).abs() < 1e-15);

        let free = delta_margin(2.0, 0.0, 1.0, 1.0, 0.5).unwrap();
        assert!(free.degenerate);
        assert_eq!(free.delta_max, 0.5 * (1.0 - 1e-6));
    }

    #[test]
    fn sigma_rate_bracketing() {
        let s = sigma_rate(1.0, 1.0, 2.0, 1.0, 0.5, 0.1).unwrap();
        assert!(s.sigma > 0.0);
        assert!(s.delta_tilde <= 1.0 - 1e-6);
        let probe = s.sigma / 0.99 * 1.01;
        if probe < 1.0 {
            assert!(delta_tilde(1.0, 1.0, 2.0, 1.0, 0.5, 0.1, probe) > 1.0 - 1e-6);
        }
        let zero = sigma_rate(1.0, 1.0, 2.0, 1.0, 0.5, 0.0).unwrap();
        assert!((zero.sigma - 0.99).abs() < 1e-9);
        assert_eq!(zero.delta_tilde, 0.0);
    }

    #[test]
    fn sigma_decreases_with_eps_and_delta_tilde_increases_with_sigma() {
        let mut prev = f64::INFINITY;
        for i in 1..=20 {
            let eps = 0.01 * i as f64;
            if let Ok(s) = sigma_rate(1.0, 1.0, 2.0, 1.0, 0.5, eps) {
                assert!(s.sigma < prev);
                prev = s.sigma;
            }
        }
        let mut last = 0.0;
        for i in 0..100 {
            let v = delta_tilde(1.0, 1.0, 2.0, 1.0, 0.5, 0.1, i as f64 / 100.0);
            assert!(v > last);
            last = v;
        }
        assert!(matches!(sigma_rate(1.0, 1.0, 2.0, 1.0, 0.5, 0.3), Err(Error::SmallGain(_))));
    }

    // Second transcription of the tail constants, written out term by term.
    #[allow(clippy::too_many_arguments)]
    fn tail_oracle(alpha: f64, xi: f64, mr: f64, m: f64, kappa: f64, d0: f64, delta: f64, be: f64, abe: f64, c4: f64, c5: f64, c6: f64) -> [f64; 4] {
        let t0 = alpha.powi(2) * xi.powi(2) * be + abe;
        let e = (2.0 * kappa * (d0 + delta)).exp();
        let den = mr * (alpha - kappa).powi(2);
        let t1 = 4.0 / mr + 8.0 * m * c4.powi(2) * e * t0 / den;
        let t2 = 8.0 * m * (1.0 + c5 * e.sqrt()).powi(2) * t0 / den;
        let t3 = 8.0 * m * c6.powi(2) * e * t0 / den;
        [t0, t1, t2, t3]
    }

    #[test]
    fn tail_constants_dual_transcription() {
        let inp = TailInputs {
            alpha: 1.0,
            xi: 1.0,
            riesz_lower: 1.0,
            num_inputs: 1,
            kappa: 0.5,
            d0: 1.0,
            delta: 1.0,
            lift_sq: 1.0,
            lift_image_sq: 1.0,
        };
        let t = tail_constants(&inp, 1.0, 1.0, 1.0).unwrap();
        let o = tail_oracle(1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        for (a, b) in [t.c_tilde0, t.c_tilde1, t.c_tilde2, t.c_tilde3].iter().zip(o) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
        let inp2 = TailInputs { alpha: 24.5, xi: 1.3, riesz_lower: 0.7, num_inputs: 2, kappa: 0.4, d0: 0.5, delta: 0.01, lift_sq: 0.33, lift_image_sq: 75.0 };
        let t = tail_constants(&inp2, 3.0, 2.0, 5.0).unwrap();
        let o = tail_oracle(24.5, 1.3, 0.7, 2.0, 0.4, 0.5, 0.01, 0.33, 75.0, 3.0, 2.0, 5.0);
        for (a, b) in [t.c_tilde0, t.c_tilde1, t.c_tilde2, t.c_tilde3].iter().zip(o) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn tail_constants_collapse_and_monotonicity() {
        let inp = TailInputs { alpha: 2.0, xi: 0.0, riesz_lower: 0.5, num_inputs: 1, kappa: 1.0, d0: 1.0, delta: 0.1, lift_sq: 1.0, lift_image_sq: 0.0 };
        let t = tail_constants(&inp, 3.0, 3.0, 3.0).unwrap();
        assert_eq!((t.c_tilde0, t.c_tilde2, t.c_tilde3), (0.0, 0.0, 0.0));
        assert_eq!(t.c_tilde1, 4.0 / 0.5);
        let inp = TailInputs { xi: 1.0, ..inp };
        let mut prev = 0.0;
        for i in 0..10 {
            let v = tail_constants(&inp, i as f64, 1.0, 1.0).unwrap().c_tilde1;
            assert!(v > prev);
            prev = v;
        }
        assert!(tail_constants(&TailInputs { kappa: 2.0, ..inp }, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn assembly() {
        assert_eq!(assemble(4.0, 1.0, 9.0), 8.0);
        assert!((PI - assemble(1.0, PI, 0.0)).abs() < 1e-15);
    }
}
