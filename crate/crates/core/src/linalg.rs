//! Dense complex linear algebra on small matrices.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

pub fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Induced 2-norm (largest singular value).
pub fn norm2(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().fold(0.0, |a: f64, &s| a.max(s))
}

pub fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn vec_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn expm(m: &CMatrix) -> CMatrix {
    m.clone().exp()
}

/// Complex Schur form `m = Q T Q*`; returns `T`.
pub fn schur_triangular(m: &CMatrix) -> Result<CMatrix> {
    nalgebra::linalg::Schur::try_new(m.clone(), 1e-15, 10_000)
        .map(|s| s.unpack().1)
        .ok_or_else(|| Error::InvalidInput("Schur decomposition did not converge".into()))
}

pub fn eigenvalues(m: &CMatrix) -> Result<Vec<Complex64>> {
    let t = schur_triangular(m)?;
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

pub fn spectral_abscissa(m: &CMatrix) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().fold(f64::NEG_INFINITY, |a, z| a.max(z.re)))
}

/// Matches two multisets of complex numbers greedily and returns the largest
/// pairwise distance.
pub fn multiset_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for x in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, y)| (j, (x - y).norm()))
            .fold((usize::MAX, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}
