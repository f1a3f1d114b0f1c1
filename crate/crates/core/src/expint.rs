//! Exponential moments used by the exact per-segment integrators.
//!
//! For a step of length `h` and rate `lambda`, with `z = lambda * h`:
//!
//! ```text
//! phi1(z) = (e^z - 1) / z          = sum_k z^k / (k+1)!
//! phi2(z) = (e^z - 1 - z) / z^2    = sum_k z^k / (k+2)!
//! ```
//!
//! so that `int_0^h e^{lambda (h - s)} ds = h phi1(z)` and
//! `int_0^h e^{lambda (h - s)} s ds = h^2 phi2(z)`.

use num_complex::Complex64;

/// Below this modulus the closed forms lose digits to cancellation and the
/// Taylor series is used instead.
const SERIES_RADIUS: f64 = 0.5;

fn series(z: Complex64, shift: u32) -> Complex64 {
    // sum_{k>=0} z^k / (k + shift)!
    let mut denom = 1.0;
    for i in 2..=shift {
        denom *= i as f64;
    }
    let mut term = Complex64::new(1.0 / denom, 0.0);
    let mut acc = term;
    for k in 1..40u32 {
        term = term * z / (k + shift) as f64;
        acc += term;
        if term.norm() < 1e-18 * acc.norm() {
            break;
        }
    }
    acc
}

pub fn phi1(z: Complex64) -> Complex64 {
    if z.norm() < SERIES_RADIUS {
        series(z, 1)
    } else {
        (z.exp() - 1.0) / z
    }
}

pub fn phi2(z: Complex64) -> Complex64 {
    if z.norm() < SERIES_RADIUS {
        series(z, 2)
    } else {
        (z.exp() - 1.0 - z) / (z * z)
    }
}

/// Per-rate constants for integrating `e^{lambda (b - s)} w(s)` over a
/// segment of length `h` when `w` is linear on the segment.
#[derive(Debug, Clone, Copy)]
pub struct SegmentWeights {
    /// `e^{lambda h}`
    pub decay: Complex64,
    /// weight of the left endpoint value
    pub left: Complex64,
    /// weight of the right endpoint value
    pub right: Complex64,
}

impl SegmentWeights {
    /// `int_a^b e^{lambda (b - s)} w(s) ds = left * w(a) + right * w(b)` for
    /// linear `w` and `b - a = h`.
    pub fn new(lambda: Complex64, h: f64) -> Self {
        let z = lambda * h;
        let p1 = phi1(z);
        let p2 = phi2(z);
        // int_0^h e^{lambda sigma} (1 - sigma/h) d sigma = h phi2,
        // int_0^h e^{lambda sigma} sigma/h d sigma = h (phi1 - phi2).
        SegmentWeights {
            decay: z.exp(),
            left: (p1 - p2) * h,
            right: p2 * h,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(f: impl Fn(f64) -> Complex64, h: f64) -> Complex64 {
        // composite Simpson, fine enough for these smooth integrands
        let n = 20_000;
        let dx = h / n as f64;
        let mut acc = f(0.0) + f(h);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += f(i as f64 * dx) * w;
        }
        acc * dx / 3.0
    }

    #[test]
    fn phi_functions_are_continuous_across_the_series_switch() {
        for &r in &[0.499_999_9, 0.500_000_1] {
            for &ang in &[0.0, 1.0, std::f64::consts::PI] {
                let z = Complex64::from_polar(r, ang);
                let closed1 = (z.exp() - 1.0) / z;
                let closed2 = (z.exp() - 1.0 - z) / (z * z);
                assert!((phi1(z) - closed1).norm() < 1e-14);
                assert!((phi2(z) - closed2).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn phi_at_zero() {
        assert_eq!(phi1(Complex64::new(0.0, 0.0)), Complex64::new(1.0, 0.0));
        assert_eq!(phi2(Complex64::new(0.0, 0.0)), Complex64::new(0.5, 0.0));
    }

    #[test]
    fn segment_weights_match_quadrature() {
        for &(lr, li, h) in &[(-3.0, 0.0, 0.1), (2.0, 1.0, 0.3), (1e-9, 0.0, 1e-3), (-1500.0, 0.0, 1e-3)] {
            let lam = Complex64::new(lr, li);
            let w = SegmentWeights::new(lam, h);
            let (wa, wb) = (Complex64::new(0.7, -0.2), Complex64::new(-1.3, 0.4));
            let exact = quad(|s| (lam * (h - s)).exp() * (wa + (wb - wa) * (s / h)), h);
            let got = w.left * wa + w.right * wb;
            assert!((got - exact).norm() < 1e-10 * (1.0 + exact.norm()), "{lam} {h}: {got} vs {exact}");
        }
    }
}
