//! Structured-text input files: descriptor, scenario, and the helpers that
//! turn them into core types.

use anyhow::{bail, Context, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use specpred_core::controller::ControllerConfig;
use specpred_core::iss_certifier::EnsembleConfig;
use specpred_core::pipeline::{builtin_config, SynthesisConfig};
use specpred_core::signals::{DelaySignal, DisturbanceSignal};
use specpred_core::sim_engine::Scenario;
use specpred_core::spectral_model::{build_reaction_diffusion, DescriptorDoc, SystemDescriptor};
use specpred_core::synthesis::Certificate;

/// Reaction coefficient of the built-in plant.
pub const BUILTIN_REACTION: f64 = 15.0;

pub fn builtin_system() -> DescriptorDoc {
    build_reaction_diffusion(BUILTIN_REACTION).to_doc()
}

/// Input of `certify`: the plant plus synthesis and fitting settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorFile {
    pub system: DescriptorDoc,
    #[serde(default = "builtin_config")]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub fit: EnsembleConfig,
}

impl DescriptorFile {
    pub fn builtin() -> Self {
        DescriptorFile { system: builtin_system(), synthesis: builtin_config(), fit: EnsembleConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateRef {
    /// Relative paths resolve against the scenario file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// A modal coefficient, written either as a real number or `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coeff {
    Real(f64),
    Complex([f64; 2]),
}

impl Coeff {
    pub fn value(self) -> Complex64 {
        match self {
            Coeff::Real(r) => Complex64::new(r, 0.0),
            Coeff::Complex([re, im]) => Complex64::new(re, im),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Initial {
    #[serde(default)]
    pub coeffs: Vec<Coeff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Integration {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub t_final: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_modes: Option<usize>,
    /// Reject delays whose amplitude exceeds the certified uncertainty.
    #[serde(default = "yes")]
    pub certified: bool,
}

fn default_dt() -> f64 {
    1e-3
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerDoc {
    /// Must equal `integration.dt` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_iters() -> usize {
    ControllerConfig::default().max_iters
}

fn default_tol() -> f64 {
    ControllerConfig::default().tol
}

impl Default for ControllerDoc {
    fn default() -> Self {
        ControllerDoc { dt: None, max_iters: default_iters(), tol: default_tol() }
    }
}

/// Input of `simulate`, `check` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default = "builtin_system")]
    pub system: DescriptorDoc,
    #[serde(default)]
    pub certificate: CertificateRef,
    pub delay: DelaySignal,
    #[serde(default)]
    pub disturbance_d1: DisturbanceSignal,
    #[serde(default)]
    pub disturbance_d2: DisturbanceSignal,
    #[serde(default)]
    pub initial: Initial,
    pub integration: Integration,
    #[serde(default)]
    pub controller: ControllerDoc,
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Parses a TOML file; errors carry the file name plus the line and key.
pub fn parse_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn write_toml<T: Serialize>(value: &T) -> Result<String> {
    Ok(toml::to_string(value)?)
}

pub fn load_certificate(path: &Path) -> Result<Certificate> {
    parse_file(path)
}

impl ScenarioFile {
    pub fn descriptor(&self) -> Result<SystemDescriptor> {
        Ok(SystemDescriptor::from_doc(&self.system)?)
    }

    /// Certificate from `--certificate`, else from `[certificate] path`.
    pub fn resolve_certificate(&self, flag: Option<&Path>, scenario_path: Option<&Path>) -> Result<Certificate> {
        if let Some(p) = flag {
            return load_certificate(p);
        }
        let Some(rel) = &self.certificate.path else {
            bail!("no certificate: pass --certificate or set [certificate] path in the scenario");
        };
        let base = scenario_path.and_then(Path::parent).unwrap_or(Path::new("."));
        load_certificate(&base.join(rel))
    }

    pub fn build(&self, cert: &Certificate) -> Result<Scenario> {
        let desc = self.descriptor()?;
        let x0: Vec<Complex64> = self.initial.coeffs.iter().map(|c| c.value()).collect();
        if let Some(dt) = self.controller.dt {
            if dt != self.integration.dt {
                bail!("controller.dt = {dt} must equal integration.dt = {}", self.integration.dt);
            }
        }
        let make = if self.integration.certified { Scenario::new } else { Scenario::uncertified };
        let mut s = make(desc, cert.clone(), self.delay.clone(), &x0, self.integration.t_final)?
            .with_disturbances(self.disturbance_d1.clone(), self.disturbance_d2.clone())
            .with_dt(self.integration.dt);
        if let Some(n) = self.integration.n_modes {
            if n < x0.len() {
                bail!("integration.n_modes = {n} is below the {} initial coefficients", x0.len());
            }
            s = s.with_modes(n);
        }
        s.controller.max_iters = self.controller.max_iters;
        s.controller.tol = self.controller.tol;
        s.validate()?;
        Ok(s)
    }
}
