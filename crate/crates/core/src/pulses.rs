//! Drive envelopes, the bare-cavity filter, and the fields derived from a cavity drive.
//!
//! Envelopes are complex amplitudes in the rotating frame, normalised so that
//! `|β(t)|²` is a photon flux. A carrier detuned by `Δ` from the frame picks up
//! a phase `e^{−iΔ(t − t_ref)}` with `t_ref` the pulse centre (Gaussian) or start.
//!
//! The filtered field `α = −(β∗f)` is computed from the equivalent first-order ODE
//! `α̇ = −(iω₀ + κ/2)α − √κ β` with exponential-integrator steps, which is exact for
//! the exponential kernel up to the quadrature of `β` inside each step.

use std::io::{Read, Write};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::hilbert::SystemParams;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Relative amplitude at which a Gaussian is treated as switched off.
const GAUSSIAN_SUPPORT_SIGMAS: f64 = 7.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub frame_frequency: f64,
}

impl FrameConfig {
    pub fn new(frame_frequency: f64) -> Result<Self> {
        if !frame_frequency.is_finite() {
            return Err(Error::param("frame_frequency", "must be finite"));
        }
        Ok(Self { frame_frequency })
    }

    /// Default frame: rotating at the cavity frequency.
    pub fn cavity(params: &SystemParams) -> Self {
        Self {
            frame_frequency: params.omega0,
        }
    }
}

/// Complex drive envelope.
#[derive(Clone, Debug, PartialEq)]
pub enum PulseEnvelope {
    /// `A·exp(−(t−t₀)²/(2w²))`.
    Gaussian {
        amplitude: C64,
        center: f64,
        width: f64,
        detuning: f64,
    },
    /// `A` on `[start, stop)`.
    Square {
        amplitude: C64,
        start: f64,
        stop: f64,
        detuning: f64,
    },
    /// `A·sin²(π(t−start)/(2·ramp))` during the ramp, `A` afterwards.
    RampedConstant {
        amplitude: C64,
        start: f64,
        ramp: f64,
        detuning: f64,
    },
    Tabulated(TabulatedEnvelope),
}

impl PulseEnvelope {
    pub fn gaussian(amplitude: C64, center: f64, width: f64) -> Self {
        PulseEnvelope::Gaussian {
            amplitude,
            center,
            width,
            detuning: 0.0,
        }
    }

    pub fn square(amplitude: C64, start: f64, stop: f64) -> Self {
        PulseEnvelope::Square {
            amplitude,
            start,
            stop,
            detuning: 0.0,
        }
    }

    pub fn ramped_constant(amplitude: C64, start: f64, ramp: f64) -> Self {
        PulseEnvelope::RampedConstant {
            amplitude,
            start,
            ramp,
            detuning: 0.0,
        }
    }

    /// Constant amplitude switched on in the infinite past (continuous-wave drive).
    pub fn constant(amplitude: C64) -> Self {
        PulseEnvelope::RampedConstant {
            amplitude,
            start: f64::NEG_INFINITY,
            ramp: 0.0,
            detuning: 0.0,
        }
    }

    /// Constant on-frame amplitude for all times, if this envelope is one.
    pub fn as_constant(&self) -> Option<C64> {
        match self {
            PulseEnvelope::RampedConstant {
                amplitude,
                start,
                detuning,
                ..
            } if *start == f64::NEG_INFINITY && *detuning == 0.0 => Some(*amplitude),
            _ => None,
        }
    }

    /// Builder-style carrier detuning from the frame. No effect on tabulated envelopes.
    pub fn with_detuning(mut self, delta: f64) -> Self {
        match &mut self {
            PulseEnvelope::Gaussian { detuning, .. }
            | PulseEnvelope::Square { detuning, .. }
            | PulseEnvelope::RampedConstant { detuning, .. } => *detuning = delta,
            PulseEnvelope::Tabulated(_) => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |field: &'static str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(field, "must be finite"))
            }
        };
        match self {
            PulseEnvelope::Gaussian {
                amplitude,
                center,
                width,
                detuning,
            } => {
                finite("amplitude", amplitude.norm())?;
                finite("center", *center)?;
                finite("detuning", *detuning)?;
                if !(width.is_finite() && *width > 0.0) {
                    return Err(Error::param("width", "must be > 0"));
                }
            }
            PulseEnvelope::Square {
                amplitude,
                start,
                stop,
                detuning,
            } => {
                finite("amplitude", amplitude.norm())?;
                finite("start", *start)?;
                finite("stop", *stop)?;
                finite("detuning", *detuning)?;
                if stop <= start {
                    return Err(Error::param("stop", "must be later than start"));
                }
            }
            PulseEnvelope::RampedConstant {
                amplitude,
                start,
                ramp,
                detuning,
            } => {
                finite("amplitude", amplitude.norm())?;
                finite("detuning", *detuning)?;
                if *start == f64::NEG_INFINITY {
                    if *detuning != 0.0 || *ramp != 0.0 {
                        return Err(Error::param(
                            "start",
                            "a drive on since t = -inf must be on-frame with no ramp",
                        ));
                    }
                } else {
                    finite("start", *start)?;
                }
                if !(ramp.is_finite() && *ramp >= 0.0) {
                    return Err(Error::param("ramp", "must be >= 0"));
                }
            }
            PulseEnvelope::Tabulated(_) => {}
        }
        Ok(())
    }

    pub fn sample(&self, t: f64) -> C64 {
        match self {
            PulseEnvelope::Gaussian {
                amplitude,
                center,
                width,
                detuning,
            } => {
                let x = (t - center) / width;
                if x.abs() > GAUSSIAN_SUPPORT_SIGMAS {
                    return ZERO;
                }
                amplitude * (-0.5 * x * x).exp() * carrier(*detuning, t - center)
            }
            PulseEnvelope::Square {
                amplitude,
                start,
                stop,
                detuning,
            } => {
                if (t >= *start || coincide(t, *start)) && t < *stop && !coincide(t, *stop) {
                    amplitude * carrier(*detuning, t - start)
                } else {
                    ZERO
                }
            }
            PulseEnvelope::RampedConstant {
                amplitude,
                start,
                ramp,
                detuning,
            } => {
                if t < *start && !coincide(t, *start) {
                    return ZERO;
                }
                let shape = if t < start + ramp {
                    let s = (std::f64::consts::FRAC_PI_2 * (t - start) / ramp).sin();
                    s * s
                } else {
                    1.0
                };
                amplitude * shape * carrier(*detuning, t - start)
            }
            PulseEnvelope::Tabulated(tab) => tab.sample(t),
        }
    }

    /// Left limit at `t`. Differs from [`PulseEnvelope::sample`], which is
    /// right-continuous, only at the switch-on and switch-off instants.
    pub fn sample_left(&self, t: f64) -> C64 {
        match self {
            PulseEnvelope::Square {
                amplitude,
                start,
                stop,
                detuning,
            } => {
                if t > *start && !coincide(t, *start) && (t <= *stop || coincide(t, *stop)) {
                    amplitude * carrier(*detuning, t - start)
                } else {
                    ZERO
                }
            }
            PulseEnvelope::RampedConstant { start, .. } if t <= *start || coincide(t, *start) => ZERO,
            _ => self.sample(t),
        }
    }

    /// Interval outside which the envelope vanishes. Either end may be infinite.
    pub fn support(&self) -> (f64, f64) {
        match self {
            PulseEnvelope::Gaussian { center, width, .. } => (
                center - GAUSSIAN_SUPPORT_SIGMAS * width,
                center + GAUSSIAN_SUPPORT_SIGMAS * width,
            ),
            PulseEnvelope::Square { start, stop, .. } => (*start, *stop),
            PulseEnvelope::RampedConstant { start, .. } => (*start, f64::INFINITY),
            PulseEnvelope::Tabulated(tab) => (tab.times[0], *tab.times.last().unwrap()),
        }
    }

    /// Points where the envelope or its derivative may jump, sorted ascending.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            PulseEnvelope::Gaussian { .. } => {
                let (lo, hi) = self.support();
                vec![lo, hi]
            }
            PulseEnvelope::Square { start, stop, .. } => vec![*start, *stop],
            PulseEnvelope::RampedConstant { start, ramp, .. } => {
                if !start.is_finite() {
                    vec![]
                } else if *ramp > 0.0 {
                    vec![*start, start + ramp]
                } else {
                    vec![*start]
                }
            }
            PulseEnvelope::Tabulated(tab) => tab.times.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            PulseEnvelope::Gaussian { amplitude, .. }
            | PulseEnvelope::Square { amplitude, .. }
            | PulseEnvelope::RampedConstant { amplitude, .. } => *amplitude == ZERO,
            PulseEnvelope::Tabulated(tab) => tab.values.iter().all(|v| *v == ZERO),
        }
    }

    /// Samples the envelope at every node of `grid` (including half steps).
    pub fn tabulate(&self, grid: &TimeGrid) -> TabulatedEnvelope {
        let times = grid.half_step_times();
        let values = times.iter().map(|&t| self.sample(t)).collect();
        TabulatedEnvelope { times, values }
    }
}

/// Equal up to accumulated rounding in grid times.
fn coincide(a: f64, b: f64) -> bool {
    b.is_finite() && (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn carrier(detuning: f64, t: f64) -> C64 {
    if detuning == 0.0 {
        C64::new(1.0, 0.0)
    } else {
        C64::from_polar(1.0, -detuning * t)
    }
}

/// Piecewise-linear envelope through `(t_i, v_i)`; zero outside the table.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedEnvelope {
    times: Vec<f64>,
    values: Vec<C64>,
}

impl TabulatedEnvelope {
    pub fn new(times: Vec<f64>, values: Vec<C64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::param(
                "tabulated",
                format!("{} times but {} values", times.len(), values.len()),
            ));
        }
        if let Some(k) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::param(
                "tabulated",
                format!("time column must be strictly increasing (row {})", k + 1),
            ));
        }
        if times.iter().any(|t| !t.is_finite()) || values.iter().any(|v| !v.norm().is_finite()) {
            return Err(Error::param("tabulated", "non-finite entry"));
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn sample(&self, t: f64) -> C64 {
        let n = self.times.len();
        let (first, last) = (self.times[0], self.times[n - 1]);
        let tol = 1e-9 * (last - first).abs().max(1.0) / n as f64;
        if t < first - tol || t > last + tol {
            return ZERO;
        }
        match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => self.values[i],
            Err(i) => {
                // Snap onto a node when `t` is a rounding error away from it.
                if i < n && (self.times[i] - t).abs() <= tol {
                    return self.values[i];
                }
                if i > 0 && (t - self.times[i - 1]).abs() <= tol {
                    return self.values[i - 1];
                }
                if i == 0 || i == n {
                    return ZERO;
                }
                let (t0, t1) = (self.times[i - 1], self.times[i]);
                let w = (t - t0) / (t1 - t0);
                self.values[i - 1] * (1.0 - w) + self.values[i] * w
            }
        }
    }

    /// Applies `f(t, value)` at every node.
    pub fn map_values(&self, f: impl Fn(f64, C64) -> C64) -> Self {
        Self {
            times: self.times.clone(),
            values: self
                .times
                .iter()
                .zip(&self.values)
                .map(|(&t, &v)| f(t, v))
                .collect(),
        }
    }

    /// Writes `t,re,im` rows with a header line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "re", "im"])?;
        for (t, v) in self.times.iter().zip(&self.values) {
            w.write_record([fmt_f64(*t), fmt_f64(v.re), fmt_f64(v.im)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`TabulatedEnvelope::write_csv`]; the header row is optional.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != 3 {
                return Err(Error::param(
                    "tabulated",
                    format!("row {row}: expected 3 columns (t, re, im), found {}", record.len()),
                ));
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                record.iter().map(|s| s.parse::<f64>()).collect();
            match parsed {
                Ok(v) => {
                    times.push(v[0]);
                    values.push(C64::new(v[1], v[2]));
                }
                Err(_) if row == 0 => continue,
                Err(e) => {
                    return Err(Error::param("tabulated", format!("row {row}: {e}")));
                }
            }
        }
        Self::new(times, values)
    }
}

/// Shortest round-trip representation, so CSV output is deterministic and lossless.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Impulse response of the bare cavity, `f(t) = √κ e^{−(iω₀+κ/2)t} Θ(t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterKernel {
    pub kappa: f64,
    /// Cavity frequency relative to the frame.
    pub omega0: f64,
}

impl FilterKernel {
    /// Complex decay rate `iω₀ + κ/2`.
    pub fn rate(&self) -> C64 {
        C64::new(self.kappa / 2.0, self.omega0)
    }

    pub fn evaluate(&self, t: f64) -> C64 {
        if t < 0.0 {
            ZERO
        } else {
            self.kappa.sqrt() * (-self.rate() * t).exp()
        }
    }
}

pub fn cavity_filter(params: &SystemParams, frame: &FrameConfig) -> Result<FilterKernel> {
    if !(params.kappa > 0.0) {
        return Err(Error::param("kappa", "the cavity filter needs kappa > 0"));
    }
    Ok(FilterKernel {
        kappa: params.kappa,
        omega0: params.omega0 - frame.frame_frequency,
    })
}

// Five-point Gauss–Legendre rule on [-1, 1].
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664_0,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664_0,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// `∫_a^b e^{−λ(b−s)} β(s) ds`, split at the envelope's breakpoints.
fn weighted_step_integral(beta: &PulseEnvelope, breaks: &[f64], rate: C64, a: f64, b: f64) -> C64 {
    let lo = breaks.partition_point(|&x| x <= a);
    let hi = breaks.partition_point(|&x| x < b);
    let mut edges = Vec::with_capacity(hi.saturating_sub(lo) + 2);
    edges.push(a);
    edges.extend_from_slice(&breaks[lo..hi.max(lo)]);
    edges.push(b);
    let mut acc = ZERO;
    for w in edges.windows(2) {
        let (l, r) = (w[0], w[1]);
        if r <= l {
            continue;
        }
        let half = 0.5 * (r - l);
        let mid = 0.5 * (r + l);
        for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS) {
            // Sample strictly inside the piece so one-sided limits are used at jumps.
            let s = mid + half * x;
            acc += (-rate * (b - s)).exp() * beta.sample(s) * (wt * half);
        }
    }
    acc
}

/// `α(t) = −∫₀^∞ f(s) β(t−s) ds`, tabulated on the grid's half-step nodes.
///
/// If `β` starts before the grid, the convolution is pre-integrated from the start of
/// its support so that `α` at the first node already carries its history.
pub fn filtered_field(
    beta: &PulseEnvelope,
    kernel: &FilterKernel,
    grid: &TimeGrid,
) -> Result<TabulatedEnvelope> {
    let limit = 0.1 / kernel.kappa;
    if grid.dt() > limit * (1.0 + 1e-12) {
        return Err(Error::GridTooCoarse {
            dt: grid.dt(),
            limit,
        });
    }
    let times = grid.half_step_times();
    let h = 0.5 * grid.dt();
    let rate = kernel.rate();
    let propagator = (-rate * h).exp();
    let drive_gain = -kernel.kappa.sqrt();
    let breaks = beta.breakpoints();

    let step = |alpha: C64, a: f64, b: f64| {
        let decay = if b - a == h {
            propagator
        } else {
            (-rate * (b - a)).exp()
        };
        decay * alpha + drive_gain * weighted_step_integral(beta, &breaks, rate, a, b)
    };

    let mut alpha = ZERO;
    let (support_start, _) = beta.support();
    let t0 = times[0];
    if let Some(b0) = beta.as_constant() {
        // Stationary response of the filter to a drive switched on at -inf.
        alpha = drive_gain * b0 / rate;
    } else if support_start < t0 {
        let n_pre = ((t0 - support_start) / h).ceil() as usize;
        let pre_start = t0 - n_pre as f64 * h;
        for k in 0..n_pre {
            let a = pre_start + k as f64 * h;
            alpha = step(alpha, a, a + h);
        }
    }

    let mut values = Vec::with_capacity(times.len());
    values.push(alpha);
    for w in times.windows(2) {
        alpha = step(alpha, w[0], w[1]);
        values.push(alpha);
    }
    TabulatedEnvelope::new(times, values)
}

/// `ξ(t) = β(t) + √κ α(t)` on the nodes of `alpha`.
pub fn compensation_field(
    beta: &PulseEnvelope,
    alpha: &TabulatedEnvelope,
    params: &SystemParams,
) -> Result<TabulatedEnvelope> {
    if let PulseEnvelope::Tabulated(tab) = beta {
        if tab.times != alpha.times {
            return Err(Error::GridMismatch(format!(
                "beta has {} nodes on [{}, {}], alpha has {} on [{}, {}]",
                tab.times.len(),
                tab.times[0],
                tab.times.last().unwrap(),
                alpha.times.len(),
                alpha.times[0],
                alpha.times.last().unwrap()
            )));
        }
    }
    let root_kappa = params.kappa.sqrt();
    Ok(alpha.map_values(|t, a| beta.sample(t) + root_kappa * a))
}

/// `ζ(t) = g·α(t)/√γ`: the atom drive that reproduces the cavity drive in the displaced frame.
pub fn equivalent_atom_drive(
    alpha: &TabulatedEnvelope,
    params: &SystemParams,
) -> Result<TabulatedEnvelope> {
    if !(params.gamma > 0.0) {
        return Err(Error::Undefined(
            "the equivalent atom drive g·α/√γ is undefined for gamma = 0".into(),
        ));
    }
    let scale = params.g / params.gamma.sqrt();
    Ok(alpha.map_values(|_, a| a * scale))
}
