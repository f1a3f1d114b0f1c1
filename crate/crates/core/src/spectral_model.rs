//! Modal description of diagonal boundary control systems.
//!
//! A plant enters through its eigen-data: eigenvalues `lambda_n`, the modal
//! input coefficients `b_{n,k} = -lambda_n <B e_k, psi_n> + <A B e_k, psi_n>`
//! and the Riesz constants `m_R <= M_R` of the eigenvector basis. The
//! truncated model keeps the first `N0` modes; the remaining modes must sit in
//! the half plane `Re lambda <= -alpha` with `|lambda / Re lambda| <= xi`.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, CMatrix};

/// Default panel count for composite Simpson quadrature on `[0, 1]`.
pub const DEFAULT_PANELS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Real,
    Complex,
}

/// Uniform grid on `[a, b]` with an even number of Simpson panels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    pub a: f64,
    pub b: f64,
    pub panels: usize,
}

impl SpatialGrid {
    pub fn new(a: f64, b: f64, panels: usize) -> Result<Self> {
        if panels == 0 || !panels.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!("Simpson needs an even, positive panel count (got {panels})")));
        }
        if !(b > a) {
            return Err(Error::InvalidInput(format!("empty interval [{a}, {b}]")));
        }
        Ok(SpatialGrid { a, b, panels })
    }

    pub fn unit(panels: usize) -> Result<Self> {
        Self::new(0.0, 1.0, panels)
    }

    pub fn len(&self) -> usize {
        self.panels + 1
    }

    /// A grid always has at least three points.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        (self.b - self.a) / self.panels as f64
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.step();
        (0..self.len()).map(move |i| self.a + i as f64 * h)
    }

    pub fn sample<F: Fn(f64) -> Complex64>(&self, f: F) -> Vec<Complex64> {
        self.points().map(f).collect()
    }
}

/// Composite Simpson rule over samples on `grid`.
pub fn simpson(grid: &SpatialGrid, samples: &[Complex64]) -> Result<Complex64> {
    if samples.len() != grid.len() {
        return Err(Error::GridMismatch(format!("{} samples for a grid of {} points", samples.len(), grid.len())));
    }
    let n = samples.len() - 1;
    let mut acc = samples[0] + samples[n];
    for (i, s) in samples.iter().enumerate().take(n).skip(1) {
        acc += s * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    Ok(acc * (grid.step() / 3.0))
}

/// `<f, g> = int f conj(g)` by Simpson quadrature.
pub fn inner(grid: &SpatialGrid, f: &[Complex64], g: &[Complex64]) -> Result<Complex64> {
    if f.len() != g.len() {
        return Err(Error::GridMismatch(format!("inner product of {} and {} samples", f.len(), g.len())));
    }
    let prod: Vec<Complex64> = f.iter().zip(g).map(|(a, b)| a * b.conj()).collect();
    simpson(grid, &prod)
}

fn check_finite(what: &str, v: &[Complex64]) -> Result<()> {
    if v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} samples")))
    }
}

/// Sampled lifting data `(B e_k, A B e_k)` for each input channel `k`.
#[derive(Debug, Clone)]
pub struct LiftingSamples {
    pub grid: SpatialGrid,
    pub lift: Vec<Vec<Complex64>>,
    pub lift_image: Vec<Vec<Complex64>>,
}

/// Modal input coefficients with the quadrature metadata that produced them.
#[derive(Debug, Clone)]
pub struct ModalCoefficients {
    /// `coeffs[n - 1][k - 1] = b_{n,k}`
    pub coeffs: Vec<Vec<Complex64>>,
    pub rule: &'static str,
    pub panels: usize,
}

/// `b_{n,k} = -lambda_n <B e_k, psi_n> + <A B e_k, psi_n>` by quadrature.
pub fn modal_input_coeffs(
    lifting: &LiftingSamples,
    eigvecs: &[Vec<Complex64>],
    lambdas: &[Complex64],
) -> Result<ModalCoefficients> {
    if eigvecs.len() != lambdas.len() {
        return Err(Error::GridMismatch(format!("{} eigenvectors for {} eigenvalues", eigvecs.len(), lambdas.len())));
    }
    if lifting.lift.len() != lifting.lift_image.len() {
        return Err(Error::GridMismatch("lifting and lifting image channel counts differ".into()));
    }
    let grid = &lifting.grid;
    for (k, (l, li)) in lifting.lift.iter().zip(&lifting.lift_image).enumerate() {
        if l.len() != grid.len() || li.len() != grid.len() {
            return Err(Error::GridMismatch(format!("lifting channel {} does not match the grid", k + 1)));
        }
        check_finite("lifting", l)?;
        check_finite("lifting image", li)?;
    }
    let mut coeffs = Vec::with_capacity(lambdas.len());
    for (psi, &lam) in eigvecs.iter().zip(lambdas) {
        if psi.len() != grid.len() {
            return Err(Error::GridMismatch("eigenvector samples do not match the grid".into()));
        }
        check_finite("eigenvector", psi)?;
        let mut row = Vec::with_capacity(lifting.lift.len());
        for (l, li) in lifting.lift.iter().zip(&lifting.lift_image) {
            row.push(-lam * inner(grid, l, psi)? + inner(grid, li, psi)?);
        }
        coeffs.push(row);
    }
    Ok(ModalCoefficients { coeffs, rule: "composite Simpson", panels: grid.panels })
}

/// Eigenvalue law of the plant.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantKind {
    /// `z_t = z_xx + c z` on `(0, 1)`, `z(0) = 0`, `z(1) = v`;
    /// `lambda_n = c - n^2 pi^2`, `b_n = sqrt(2) (-1)^{n+1} n pi`.
    ReactionDiffusion { c: f64 },
    /// Finite explicit eigen-data; modes beyond the list do not exist.
    Explicit {
        eigenvalues: Vec<Complex64>,
        b: Vec<Vec<Complex64>>,
        /// `(||B e_k||, ||A B e_k||)` per channel, when known.
        lift_norms: Option<Vec<(f64, f64)>>,
    },
}

/// A diagonal boundary control system in modal coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemDescriptor {
    pub kind: PlantKind,
    pub num_inputs: usize,
    pub riesz_lower: f64,
    pub riesz_upper: f64,
    pub field: Field,
}

pub fn reaction_diffusion_eigenvalue(c: f64, n: usize) -> f64 {
    let k = n as f64 * PI;
    c - k * k
}

/// Analytic input coefficient for Dirichlet actuation at `x = 1` with lifting
/// `(B w)(x) = x w`.
pub fn reaction_diffusion_b(n: usize) -> f64 {
    let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
    SQRT_2 * sign * n as f64 * PI
}

/// `psi_n(x) = sqrt(2) sin(n pi x)` sampled on `grid`.
pub fn reaction_diffusion_eigvecs(n_max: usize, grid: &SpatialGrid) -> Vec<Vec<Complex64>> {
    (1..=n_max)
        .map(|n| grid.sample(|x| c(SQRT_2 * (n as f64 * PI * x).sin())))
        .collect()
}

/// Lifting `(B w)(x) = x w` and `(A B w)(x) = c x w` sampled on `grid`.
pub fn reaction_diffusion_lifting(c_react: f64, grid: SpatialGrid) -> LiftingSamples {
    LiftingSamples {
        grid,
        lift: vec![grid.sample(c)],
        lift_image: vec![grid.sample(|x| c(c_react * x))],
    }
}

pub fn build_reaction_diffusion(c_react: f64) -> SystemDescriptor {
    SystemDescriptor {
        kind: PlantKind::ReactionDiffusion { c: c_react },
        num_inputs: 1,
        riesz_lower: 1.0,
        riesz_upper: 1.0,
        field: Field::Real,
    }
}

impl SystemDescriptor {
    pub fn explicit(
        eigenvalues: Vec<Complex64>,
        b: Vec<Vec<Complex64>>,
        riesz_lower: f64,
        riesz_upper: f64,
    ) -> Result<Self> {
        let num_inputs = b.first().map(|r| r.len()).unwrap_or(0);
        let real = eigenvalues.iter().chain(b.iter().flatten()).all(|z| z.im == 0.0);
        let d = SystemDescriptor {
            kind: PlantKind::Explicit { eigenvalues, b, lift_norms: None },
            num_inputs,
            riesz_lower,
            riesz_upper,
            field: if real { Field::Real } else { Field::Complex },
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_lift_norms(mut self, norms: Vec<(f64, f64)>) -> Result<Self> {
        if let PlantKind::Explicit { lift_norms, .. } = &mut self.kind {
            *lift_norms = Some(norms);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.riesz_lower > 0.0) || !(self.riesz_upper >= self.riesz_lower) || !self.riesz_upper.is_finite() {
            return Err(Error::InvalidInput(format!(
                "Riesz constants must satisfy 0 < m_R <= M_R (got {}, {})",
                self.riesz_lower, self.riesz_upper
            )));
        }
        if self.num_inputs == 0 {
            return Err(Error::InvalidInput("at least one input channel is required".into()));
        }
        match &self.kind {
            PlantKind::ReactionDiffusion { c } => {
                if !c.is_finite() {
                    return Err(Error::NonFinite("reaction coefficient".into()));
                }
                if self.num_inputs != 1 {
                    return Err(Error::InvalidInput("the reaction-diffusion plant has one input".into()));
                }
            }
            PlantKind::Explicit { eigenvalues, b, lift_norms } => {
                if eigenvalues.is_empty() || eigenvalues.len() != b.len() {
                    return Err(Error::InvalidInput(format!(
                        "{} eigenvalues but {} rows of input coefficients",
                        eigenvalues.len(),
                        b.len()
                    )));
                }
                if b.iter().any(|r| r.len() != self.num_inputs) {
                    return Err(Error::InvalidInput("ragged input coefficient rows".into()));
                }
                check_finite("eigenvalue", eigenvalues)?;
                for r in b {
                    check_finite("input coefficient", r)?;
                }
                for i in 0..eigenvalues.len() {
                    for j in 0..i {
                        if eigenvalues[i] == eigenvalues[j] {
                            return Err(Error::InvalidInput(format!("eigenvalues {} and {} coincide", j + 1, i + 1)));
                        }
                    }
                }
                if self.field == Field::Real && eigenvalues.iter().chain(b.iter().flatten()).any(|z| z.im != 0.0) {
                    return Err(Error::InvalidInput("real field requires real eigen-data".into()));
                }
                if let Some(n) = lift_norms {
                    if n.len() != self.num_inputs || n.iter().any(|(a, b)| !(*a >= 0.0 && *b >= 0.0)) {
                        return Err(Error::InvalidInput("lift norms need one non-negative pair per input".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of modes, when finite.
    pub fn mode_limit(&self) -> Option<usize> {
        match &self.kind {
            PlantKind::ReactionDiffusion { .. } => None,
            PlantKind::Explicit { eigenvalues, .. } => Some(eigenvalues.len()),
        }
    }

    /// `lambda_n` for `n >= 1`.
    pub fn eigenvalue(&self, n: usize) -> Option<Complex64> {
        assert!(n >= 1, "modes are indexed from 1");
        match &self.kind {
            PlantKind::ReactionDiffusion { c: cr } => Some(c(reaction_diffusion_eigenvalue(*cr, n))),
            PlantKind::Explicit { eigenvalues, .. } => eigenvalues.get(n - 1).copied(),
        }
    }

    /// `b_{n,k}` for `n, k >= 1`.
    pub fn input_coeff(&self, n: usize, k: usize) -> Option<Complex64> {
        assert!(n >= 1 && k >= 1, "modes and inputs are indexed from 1");
        if k > self.num_inputs {
            return None;
        }
        match &self.kind {
            PlantKind::ReactionDiffusion { .. } => Some(c(reaction_diffusion_b(n))),
            PlantKind::Explicit { b, .. } => b.get(n - 1).map(|r| r[k - 1]),
        }
    }

    /// Spectrum is real and `|lambda / Re lambda| = 1` holds exactly.
    pub fn real_spectrum(&self) -> bool {
        match &self.kind {
            PlantKind::ReactionDiffusion { .. } => true,
            PlantKind::Explicit { eigenvalues, .. } => eigenvalues.iter().all(|z| z.im == 0.0),
        }
    }

    /// `(||B e_k||, ||A B e_k||)` per input channel.
    pub fn lift_norms(&self) -> Option<Vec<(f64, f64)>> {
        match &self.kind {
            PlantKind::ReactionDiffusion { c: cr } => {
                let grid = SpatialGrid::unit(DEFAULT_PANELS).ok()?;
                let l = reaction_diffusion_lifting(*cr, grid);
                let a = inner(&grid, &l.lift[0], &l.lift[0]).ok()?.re.sqrt();
                let b = inner(&grid, &l.lift_image[0], &l.lift_image[0]).ok()?.re.sqrt();
                Some(vec![(a, b)])
            }
            PlantKind::Explicit { lift_norms, .. } => lift_norms.clone(),
        }
    }

    pub fn modes(&self, count: usize) -> Result<Vec<Complex64>> {
        (1..=count)
            .map(|n| self.eigenvalue(n).ok_or_else(|| Error::InvalidInput(format!("plant has no mode {n}"))))
            .collect()
    }

    pub fn input_rows(&self, count: usize) -> Result<Vec<Vec<Complex64>>> {
        (1..=count)
            .map(|n| {
                (1..=self.num_inputs)
                    .map(|k| self.input_coeff(n, k).ok_or_else(|| Error::InvalidInput(format!("plant has no mode {n}"))))
                    .collect()
            })
            .collect()
    }

    pub fn to_doc(&self) -> DescriptorDoc {
        let pair = |z: &Complex64| [z.re, z.im];
        match &self.kind {
            PlantKind::ReactionDiffusion { c } => DescriptorDoc {
                kind: "reaction_diffusion".into(),
                c: Some(*c),
                m: self.num_inputs,
                riesz_lower: self.riesz_lower,
                riesz_upper: self.riesz_upper,
                explicit_eigenvalues: None,
                explicit_b: None,
                lift_norms: None,
            },
            PlantKind::Explicit { eigenvalues, b, lift_norms } => DescriptorDoc {
                kind: "explicit".into(),
                c: None,
                m: self.num_inputs,
                riesz_lower: self.riesz_lower,
                riesz_upper: self.riesz_upper,
                explicit_eigenvalues: Some(eigenvalues.iter().map(pair).collect()),
                explicit_b: Some(b.iter().map(|r| r.iter().map(pair).collect()).collect()),
                lift_norms: lift_norms.as_ref().map(|v| v.iter().map(|&(a, b)| [a, b]).collect()),
            },
        }
    }

    pub fn from_doc(doc: &DescriptorDoc) -> Result<Self> {
        let z = |p: &[f64; 2]| Complex64::new(p[0], p[1]);
        let d = match doc.kind.as_str() {
            "reaction_diffusion" => {
                let c = doc.c.ok_or_else(|| Error::InvalidInput("reaction_diffusion needs key `c`".into()))?;
                SystemDescriptor {
                    kind: PlantKind::ReactionDiffusion { c },
                    num_inputs: doc.m,
                    riesz_lower: doc.riesz_lower,
                    riesz_upper: doc.riesz_upper,
                    field: Field::Real,
                }
            }
            "explicit" => {
                let ev = doc
                    .explicit_eigenvalues
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("explicit kind needs key `explicit_eigenvalues`".into()))?;
                let b = doc
                    .explicit_b
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("explicit kind needs key `explicit_b`".into()))?;
                let eigenvalues: Vec<Complex64> = ev.iter().map(z).collect();
                let b: Vec<Vec<Complex64>> = b.iter().map(|r| r.iter().map(z).collect()).collect();
                let real = eigenvalues.iter().chain(b.iter().flatten()).all(|w| w.im == 0.0);
                SystemDescriptor {
                    kind: PlantKind::Explicit {
                        eigenvalues,
                        b,
                        lift_norms: doc.lift_norms.as_ref().map(|v| v.iter().map(|p| (p[0], p[1])).collect()),
                    },
                    num_inputs: doc.m,
                    riesz_lower: doc.riesz_lower,
                    riesz_upper: doc.riesz_upper,
                    field: if real { Field::Real } else { Field::Complex },
                }
            }
            other => return Err(Error::InvalidInput(format!("unknown plant kind `{other}`"))),
        };
        d.validate()?;
        Ok(d)
    }
}

/// Structured-text form of a [`SystemDescriptor`]. Complex numbers are
/// `[re, im]` pairs; `explicit_b` is indexed `[n][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorDoc {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default = "unit")]
    pub riesz_lower: f64,
    #[serde(default = "unit")]
    pub riesz_upper: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_eigenvalues: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_b: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lift_norms: Option<Vec<[f64; 2]>>,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

/// Result of splitting the spectrum into the truncated part and the tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeClassification {
    pub n0: usize,
    pub alpha: f64,
    pub xi: f64,
    /// `xi` is exact (real spectrum) rather than a finite-scan estimate.
    pub xi_exact: bool,
    pub scan_depth: usize,
}

/// Picks the smallest `N0 >= 1` whose scanned tail satisfies `Re lambda <= -alpha`.
pub fn classify_modes(desc: &SystemDescriptor, scan_depth: usize, alpha_request: Option<f64>) -> Result<ModeClassification> {
    if scan_depth < 2 {
        return Err(Error::InvalidInput("scan depth must be at least 2".into()));
    }
    if let Some(a) = alpha_request {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidInput(format!("requested alpha must be positive (got {a})")));
        }
    }
    let depth = desc.mode_limit().map_or(scan_depth, |l| l.min(scan_depth));
    if depth < 2 {
        return Err(Error::NoAdmissibleN0 { scan_depth, alpha: alpha_request });
    }
    let lambdas = desc.modes(depth)?;
    let front = lambdas[depth - 1];
    if front.re >= 0.0 {
        return Err(Error::TailAssumption(format!(
            "Re lambda_{depth} = {} >= 0 at the scan front; increase the scan depth",
            front.re
        )));
    }
    // suffix maxima of Re lambda over n > N0
    let mut suffix_max = vec![f64::NEG_INFINITY; depth + 1];
    for i in (0..depth).rev() {
        suffix_max[i] = suffix_max[i + 1].max(lambdas[i].re);
    }
    for n0 in 1..depth {
        let worst = suffix_max[n0];
        let alpha = match alpha_request {
            Some(a) if worst <= -a => a,
            Some(_) => continue,
            None if worst < 0.0 => -worst,
            None => continue,
        };
        let xi = lambdas[n0..].iter().map(|z| (z / z.re).norm()).fold(0.0, f64::max);
        let xi_exact = desc.real_spectrum();
        return Ok(ModeClassification { n0, alpha, xi: if xi_exact { 1.0 } else { xi }, xi_exact, scan_depth: depth });
    }
    Err(Error::NoAdmissibleN0 { scan_depth, alpha: alpha_request })
}

/// The finite-dimensional part `(A_{N0}, B_{N0})` plus the tail sector data.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedModel {
    /// Diagonal of `A_{N0}`.
    pub lambdas: Vec<Complex64>,
    /// `N0 x m`
    pub b: CMatrix,
    pub n0: usize,
    pub alpha: f64,
    pub xi: f64,
    pub xi_exact: bool,
}

impl TruncatedModel {
    pub fn a_matrix(&self) -> CMatrix {
        DMatrix::from_diagonal(&DVector::from_vec(self.lambdas.clone()))
    }

    pub fn num_inputs(&self) -> usize {
        self.b.ncols()
    }
}

pub fn truncated_model(desc: &SystemDescriptor, cls: &ModeClassification) -> Result<TruncatedModel> {
    let lambdas = desc.modes(cls.n0)?;
    let rows = desc.input_rows(cls.n0)?;
    let b = DMatrix::from_fn(cls.n0, desc.num_inputs, |i, j| rows[i][j]);
    Ok(TruncatedModel { lambdas, b, n0: cls.n0, alpha: cls.alpha, xi: cls.xi, xi_exact: cls.xi_exact })
}
