//! End-to-end certification: classify modes, place the gain, and compute the
//! exact part of the certificate.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix};
use crate::spectral_model::{classify_modes, truncated_model, SystemDescriptor};
use crate::synthesis::{self, Certificate};

/// Synthesis settings. Everything except the nominal delay has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub d0: f64,
    #[serde(default = "default_t0")]
    pub t0: f64,
    /// `[re, im]` pairs; defaults to `-2, -3, ..., -(N0 + 1)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_poles: Option<Vec<[f64; 2]>>,
    /// Manual gain, `m x N0` of `[re, im]`; required for multi-input plants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default = "default_lambda_fraction")]
    pub lambda_fraction: f64,
    #[serde(default = "default_kappa_fraction")]
    pub kappa_fraction: f64,
    #[serde(default = "default_delta_margin")]
    pub delta_margin: f64,
    #[serde(default = "default_scan_depth")]
    pub scan_depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_request: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_check: Option<f64>,
}

fn default_t0() -> f64 {
    1.0
}
fn default_lambda_fraction() -> f64 {
    0.95
}
fn default_kappa_fraction() -> f64 {
    0.5
}
fn default_delta_margin() -> f64 {
    0.5
}
fn default_scan_depth() -> usize {
    50
}

impl SynthesisConfig {
    pub fn new(d0: f64) -> Self {
        SynthesisConfig {
            d0,
            t0: default_t0(),
            target_poles: None,
            gain: None,
            lambda_fraction: default_lambda_fraction(),
            kappa_fraction: default_kappa_fraction(),
            delta_margin: default_delta_margin(),
            scan_depth: default_scan_depth(),
            alpha_request: None,
            t_check: None,
        }
    }

    pub fn with_poles(mut self, poles: &[f64]) -> Self {
        self.target_poles = Some(poles.iter().map(|&p| [p, 0.0]).collect());
        self
    }
}

/// Certificate of the reaction-diffusion plant used throughout the examples:
/// `c = 15`, `D0 = 0.5`, closed-loop pole `-2`, `t0 = 1`.
pub fn builtin_config() -> SynthesisConfig {
    SynthesisConfig::new(0.5).with_poles(&[-2.0])
}

/// Exact part of the certificate. Fitted constants are added later by the
/// certifier.
pub fn certify(desc: &SystemDescriptor, cfg: &SynthesisConfig) -> Result<Certificate> {
    desc.validate()?;
    if !(cfg.d0 > 0.0 && cfg.d0.is_finite()) || !(cfg.t0 > 0.0 && cfg.t0.is_finite()) {
        return Err(Error::InvalidInput("D0 and t0 must be positive".into()));
    }
    if !(cfg.kappa_fraction > 0.0 && cfg.kappa_fraction < 1.0) || !(cfg.delta_margin > 0.0 && cfg.delta_margin < 1.0) {
        return Err(Error::InvalidInput("kappa_fraction and delta_margin must lie in (0, 1)".into()));
    }
    let cls = classify_modes(desc, cfg.scan_depth, cfg.alpha_request)?;
    let model = truncated_model(desc, &cls)?;
    let k: CMatrix = match &cfg.gain {
        Some(rows) => {
            let m = rows.len();
            if m != desc.num_inputs || rows.iter().any(|r| r.len() != cls.n0) {
                return Err(Error::InvalidInput(format!("manual gain must be {} x {}", desc.num_inputs, cls.n0)));
            }
            CMatrix::from_fn(m, cls.n0, |i, j| Complex64::new(rows[i][j][0], rows[i][j][1]))
        }
        None => {
            let targets: Vec<Complex64> = match &cfg.target_poles {
                Some(p) => p.iter().map(|z| Complex64::new(z[0], z[1])).collect(),
                None => (0..cls.n0).map(|i| Complex64::new(-(i as f64) - 2.0, 0.0)).collect(),
            };
            synthesis::place_gain(&model, cfg.d0, &targets, desc.field)?
        }
    };
    let a_cl = synthesis::closed_loop(&model, &k, cfg.d0);
    let envelope = synthesis::decay_envelope(&a_cl, cfg.lambda_fraction, cfg.t_check)?;
    let norm_a = linalg::norm2(&model.a_matrix());
    let norm_a_cl = linalg::norm2(&a_cl);
    let bk_norm = linalg::norm2(&(&model.b * &k));
    let margin = synthesis::delta_margin(norm_a_cl, bk_norm, envelope.m_lambda, envelope.lambda, cfg.d0)?;
    let delta = margin.delta_max * (1.0 - cfg.delta_margin);
    let sigma = synthesis::sigma_rate(envelope.m_lambda, bk_norm, norm_a_cl, envelope.lambda, cfg.d0, delta)?;
    let kappa = cfg.kappa_fraction * cls.alpha.min(sigma.sigma);
    let lift = desc
        .lift_norms()
        .ok_or_else(|| Error::InvalidInput("explicit plants need `lift_norms` for the tail constants".into()))?;
    let cert = Certificate {
        field: desc.field,
        n0: cls.n0,
        num_inputs: desc.num_inputs,
        lambdas: model.lambdas.clone(),
        b: model.b.clone(),
        k,
        d0: cfg.d0,
        t0: cfg.t0,
        a_cl,
        norm_a,
        norm_a_cl,
        bk_norm,
        envelope,
        margin,
        delta_margin: cfg.delta_margin,
        delta,
        sigma,
        kappa_fraction: cfg.kappa_fraction,
        kappa,
        epsilon: kappa / cls.alpha,
        alpha: cls.alpha,
        xi: cls.xi,
        xi_exact: cls.xi_exact,
        riesz_lower: desc.riesz_lower,
        riesz_upper: desc.riesz_upper,
        lift_sq: lift.iter().map(|p| p.0 * p.0).sum(),
        lift_image_sq: lift.iter().map(|p| p.1 * p.1).sum(),
        fitted: None,
        derived: None,
    };
    cert.validate()?;
    log::info!(
        "certified N0 = {}, delta_max = {:e}, delta = {:e}, sigma = {}, kappa = {}",
        cert.n0,
        cert.margin.delta_max,
        cert.delta,
        cert.sigma.sigma,
        cert.kappa
    );
    Ok(cert)
}
