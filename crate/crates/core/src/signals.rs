//! Delay and disturbance signals. Every signal is C¹ and returns its value
//! together with its derivative.

use serde::{Deserialize, Serialize};

use crate::controller::smoothstep;
use crate::error::{Error, Result};

/// Monotone piecewise cubic Hermite interpolant (Fritsch-Carlson slopes),
/// held constant outside the knot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableDoc", into = "TableDoc")]
pub struct HermiteTable {
    times: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableDoc {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl TryFrom<TableDoc> for HermiteTable {
    type Error = Error;
    fn try_from(d: TableDoc) -> Result<Self> {
        HermiteTable::new(d.times, d.values)
    }
}

impl From<HermiteTable> for TableDoc {
    fn from(t: HermiteTable) -> Self {
        TableDoc { times: t.times, values: t.values }
    }
}

impl HermiteTable {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::InvalidInput("a table needs at least two (time, value) pairs".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("table times must be finite and strictly increasing".into()));
        }
        let n = times.len();
        let sec: Vec<f64> = (0..n - 1).map(|i| (values[i + 1] - values[i]) / (times[i + 1] - times[i])).collect();
        let mut slopes = vec![0.0; n];
        for i in 1..n - 1 {
            if sec[i - 1] * sec[i] > 0.0 {
                let (h0, h1) = (times[i] - times[i - 1], times[i + 1] - times[i]);
                let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
                slopes[i] = (w1 + w2) / (w1 / sec[i - 1] + w2 / sec[i]);
            }
        }
        // flat ends keep the extension C¹
        Ok(HermiteTable { times, values, slopes })
    }

    pub fn eval(&self, t: f64) -> (f64, f64) {
        let n = self.times.len();
        if t <= self.times[0] {
            return (self.values[0], 0.0);
        }
        if t >= self.times[n - 1] {
            return (self.values[n - 1], 0.0);
        }
        let i = self.times.partition_point(|&x| x <= t) - 1;
        let h = self.times[i + 1] - self.times[i];
        let s = (t - self.times[i]) / h;
        let (y0, y1, m0, m1) = (self.values[i], self.values[i + 1], self.slopes[i], self.slopes[i + 1]);
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        let v = h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1;
        let d = (6.0 * s * s - 6.0 * s) * (y0 - y1) / h + (3.0 * s * s - 4.0 * s + 1.0) * m0 + (3.0 * s * s - 2.0 * s) * m1;
        (v, d)
    }

    pub fn min_max(&self) -> (f64, f64) {
        // monotone slopes keep the interpolant within the knot values
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Time-varying input delay `D(t)` with `|D(t) - D0| <= amplitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelaySignal {
    Constant { d0: f64 },
    Sinusoid { d0: f64, amplitude: f64, omega: f64, #[serde(default)] phase: f64 },
    /// `D(t) = d0 + table(t)`
    Table { d0: f64, table: HermiteTable },
}

impl DelaySignal {
    pub fn d0(&self) -> f64 {
        match self {
            DelaySignal::Constant { d0 } | DelaySignal::Sinusoid { d0, .. } | DelaySignal::Table { d0, .. } => *d0,
        }
    }

    /// `sup_t |D(t) - D0|`
    pub fn amplitude(&self) -> f64 {
        match self {
            DelaySignal::Constant { .. } => 0.0,
            DelaySignal::Sinusoid { amplitude, .. } => amplitude.abs(),
            DelaySignal::Table { table, .. } => {
                let (lo, hi) = table.min_max();
                lo.abs().max(hi.abs())
            }
        }
    }

    /// `(D(t), D'(t))`
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match self {
            DelaySignal::Constant { d0 } => (*d0, 0.0),
            DelaySignal::Sinusoid { d0, amplitude, omega, phase } => {
                let arg = omega * t + phase;
                (d0 + amplitude * arg.sin(), amplitude * omega * arg.cos())
            }
            DelaySignal::Table { d0, table } => {
                let (v, d) = table.eval(t);
                (d0 + v, d)
            }
        }
    }
}

/// Builds a delay signal, rejecting amplitudes above the certified `delta`
/// when `certified` is set.
pub fn make_delay(signal: DelaySignal, certified_delta: Option<f64>) -> Result<DelaySignal> {
    let d0 = signal.d0();
    let amp = signal.amplitude();
    if !(d0 > 0.0 && d0.is_finite()) || !amp.is_finite() {
        return Err(Error::InvalidInput(format!("delay needs finite D0 > 0 (got {d0})")));
    }
    if amp >= d0 {
        return Err(Error::InvalidInput(format!("delay amplitude {amp} would make D(t) non-positive")));
    }
    if let Some(delta) = certified_delta {
        if amp > delta * (1.0 + 1e-12) {
            return Err(Error::Uncertified { amplitude: amp, delta });
        }
    }
    Ok(signal)
}

/// One scalar component of a disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Zero,
    Sinusoid { amplitude: f64, omega: f64, #[serde(default)] phase: f64 },
    /// `amplitude * smoothstep((t - onset) / rise)`
    SmoothedStep { amplitude: f64, onset: f64, rise: f64 },
    ExponentialDecay { amplitude: f64, rate: f64 },
    /// Smooth bump supported on `[start, start + width]`.
    Pulse { amplitude: f64, start: f64, width: f64 },
    Table { table: HermiteTable },
}

impl Shape {
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match self {
            Shape::Zero => (0.0, 0.0),
            Shape::Sinusoid { amplitude, omega, phase } => {
                let arg = omega * t + phase;
                (amplitude * arg.sin(), amplitude * omega * arg.cos())
            }
            Shape::SmoothedStep { amplitude, onset, rise } => {
                let (v, d) = smoothstep((t - onset) / rise);
                (amplitude * v, amplitude * d / rise)
            }
            Shape::ExponentialDecay { amplitude, rate } => {
                if t < 0.0 {
                    (0.0, 0.0)
                } else {
                    let e = amplitude * (-rate * t).exp();
                    (e, -rate * e)
                }
            }
            Shape::Pulse { amplitude, start, width } => {
                let half = 0.5 * width;
                let s = t - start;
                if s <= 0.0 || s >= *width {
                    (0.0, 0.0)
                } else if s <= half {
                    let (v, d) = smoothstep(s / half);
                    (amplitude * v, amplitude * d / half)
                } else {
                    let (v, d) = smoothstep((width - s) / half);
                    (amplitude * v, -amplitude * d / half)
                }
            }
            Shape::Table { table } => table.eval(t),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Zero | Shape::Table { .. } => true,
            Shape::Sinusoid { amplitude, omega, phase } => [amplitude, omega, phase].iter().all(|v| v.is_finite()),
            Shape::SmoothedStep { amplitude, onset, rise } => amplitude.is_finite() && onset.is_finite() && *rise > 0.0,
            Shape::ExponentialDecay { amplitude, rate } => amplitude.is_finite() && rate.is_finite(),
            Shape::Pulse { amplitude, start, width } => amplitude.is_finite() && start.is_finite() && *width > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid disturbance component {self:?}")))
        }
    }
}

/// A component acting on one input channel (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    #[serde(default)]
    pub channel: usize,
    #[serde(flatten)]
    pub shape: Shape,
}

/// `m`-dimensional disturbance, the sum of its components.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DisturbanceSignal {
    #[serde(default)]
    pub components: Vec<Component>,
}

impl DisturbanceSignal {
    pub fn zero() -> Self {
        DisturbanceSignal { components: Vec::new() }
    }

    pub fn single(shape: Shape) -> Self {
        DisturbanceSignal { components: vec![Component { channel: 0, shape }] }
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|c| matches!(c.shape, Shape::Zero))
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in &self.components {
            out[c.channel] += c.shape.eval(t).0;
        }
    }

    pub fn eval(&self, t: f64, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        self.eval_into(t, &mut out);
        out
    }

    /// Scales every component, used to check homogeneity.
    pub fn scaled(&self, k: f64) -> Self {
        let comps = self
            .components
            .iter()
            .map(|c| {
                let shape = match &c.shape {
                    Shape::Zero => Shape::Zero,
                    Shape::Sinusoid { amplitude, omega, phase } => Shape::Sinusoid { amplitude: k * amplitude, omega: *omega, phase: *phase },
                    Shape::SmoothedStep { amplitude, onset, rise } => Shape::SmoothedStep { amplitude: k * amplitude, onset: *onset, rise: *rise },
                    Shape::ExponentialDecay { amplitude, rate } => Shape::ExponentialDecay { amplitude: k * amplitude, rate: *rate },
                    Shape::Pulse { amplitude, start, width } => Shape::Pulse { amplitude: k * amplitude, start: *start, width: *width },
                    Shape::Table { table } => Shape::Table {
                        table: HermiteTable::new(table.times.clone(), table.values.iter().map(|v| k * v).collect())
                            .expect("scaling keeps a valid table"),
                    },
                };
                Component { channel: c.channel, shape }
            })
            .collect();
        DisturbanceSignal { components: comps }
    }

    /// Sum of two disturbances.
    pub fn plus(&self, other: &Self) -> Self {
        DisturbanceSignal { components: self.components.iter().chain(&other.components).cloned().collect() }
    }
}

pub fn make_disturbance(signal: DisturbanceSignal, m: usize) -> Result<DisturbanceSignal> {
    for c in &signal.components {
        if c.channel >= m {
            return Err(Error::InvalidInput(format!("disturbance channel {} but the plant has {m} inputs", c.channel)));
        }
        c.shape.validate()?;
    }
    Ok(signal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, t: f64) -> f64 {
        let h = 1e-6;
        (f(t + h) - f(t - h)) / (2.0 * h)
    }

    #[test]
    fn constant_delay() {
        let d = make_delay(DelaySignal::Constant { d0: 0.5 }, Some(0.0)).unwrap();
        for t in [0.0, 1.0, 7.3] {
            assert_eq!(d.eval(t), (0.5, 0.0));
        }
    }

    #[test]
    fn sinusoid_delay_range() {
        let d = DelaySignal::Sinusoid { d0: 0.5, amplitude: 0.01, omega: 2.0, phase: 0.0 };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..100_000 {
            let v = d.eval(i as f64 * 1e-4).0;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!(lo >= 0.49 - 1e-15 && hi <= 0.51 + 1e-15);
        assert!((lo - 0.49).abs() < 1e-9 && (hi - 0.51).abs() < 1e-9);
        assert!(matches!(make_delay(d.clone(), Some(0.005)), Err(Error::Uncertified { .. })));
        assert!(make_delay(d, Some(0.01)).is_ok());
    }

    #[test]
    fn zero_disturbance() {
        let z = make_disturbance(DisturbanceSignal::zero(), 1).unwrap();
        assert!(z.is_zero());
        for t in [0.0, 2.0, 100.0] {
            assert_eq!(z.eval(t, 1), vec![0.0]);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let shapes = [
            Shape::Sinusoid { amplitude: 2.0, omega: 3.0, phase: 0.3 },
            Shape::SmoothedStep { amplitude: 1.5, onset: 1.0, rise: 2.0 },
            Shape::ExponentialDecay { amplitude: 1.0, rate: 0.7 },
            Shape::Pulse { amplitude: 1.0, start: 0.5, width: 1.0 },
            Shape::Table { table: HermiteTable::new(vec![0.0, 1.0, 2.0, 4.0], vec![0.0, 1.0, -0.5, 0.2]).unwrap() },
        ];
        for s in &shapes {
            for t in [0.2, 0.77, 1.3, 2.9] {
                let (_, d) = s.eval(t);
                assert!((fd(|x| s.eval(x).0, t) - d).abs() < 1e-6, "{s:?} at {t}");
            }
        }
    }

    #[test]
    fn table_is_monotone_between_monotone_knots() {
        let t = HermiteTable::new(vec![0.0, 1.0, 1.5, 3.0], vec![0.0, 0.1, 1.0, 1.1]).unwrap();
        let mut prev = -1.0;
        for i in 0..=3000 {
            let v = t.eval(i as f64 * 1e-3).0;
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn pulse_support() {
        let p = Shape::Pulse { amplitude: 2.0, start: 1.0, width: 0.4 };
        assert_eq!(p.eval(0.99).0, 0.0);
        assert_eq!(p.eval(1.41).0, 0.0);
        assert!((p.eval(1.2).0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn disturbance_round_trip() {
        let d = DisturbanceSignal {
            components: vec![
                Component { channel: 0, shape: Shape::Sinusoid { amplitude: 1.0, omega: 2.0, phase: 0.0 } },
                Component { channel: 0, shape: Shape::SmoothedStep { amplitude: 0.5, onset: 1.0, rise: 0.5 } },
            ],
        };
        let text = toml::to_string(&d).unwrap();
        assert_eq!(toml::from_str::<DisturbanceSignal>(&text).unwrap(), d);
    }
}
