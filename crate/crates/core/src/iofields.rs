//! Output channels and their statistics.
//!
//! Every output field is written as `O(t) = μ(t) + P`: a c-number coherent offset
//! plus a system operator. Vacuum reservoir inputs drop out of normally ordered
//! statistics and are only tracked as a flag.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    regress, CorrelationKind, CorrelationTable, DensityMatrix, Liouvillian, TimeGrid,
};
use crate::error::{Error, Result};
use crate::hilbert::{trace_of_product, OperatorMatrix};
use crate::pulses::{fmt_f64, PulseEnvelope};

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelLabel {
    /// Cavity output.
    BOut,
    /// Atom (side-mode) output.
    COut,
    /// Drop-filter port carrying the doubled compensation field.
    DOut,
    /// Drop-filter port where the coherent offset cancels.
    EOut,
}

impl ChannelLabel {
    pub const ALL: [ChannelLabel; 4] = [Self::BOut, Self::COut, Self::DOut, Self::EOut];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::BOut => "b_out",
            Self::COut => "c_out",
            Self::DOut => "d_out",
            Self::EOut => "e_out",
        }
    }
}

impl fmt::Display for ChannelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::param("channel", format!("unknown channel `{s}`")))
    }
}

/// Linear combination `Σ c_k p_k(t)` of envelopes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoherentOffset {
    terms: Vec<(C64, PulseEnvelope)>,
}

impl CoherentOffset {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_envelope(p: PulseEnvelope) -> Self {
        Self::zero().plus(C64::new(1.0, 0.0), p)
    }

    pub fn plus(mut self, coeff: C64, p: PulseEnvelope) -> Self {
        if coeff != ZERO && !p.is_zero() {
            self.terms.push((coeff, p));
        }
        self
    }

    pub fn scaled(mut self, s: C64) -> Self {
        if s == ZERO {
            return Self::zero();
        }
        for (c, _) in &mut self.terms {
            *c *= s;
        }
        self
    }

    /// `a·self + b·other`.
    pub fn combine(self, a: C64, other: Self, b: C64) -> Self {
        let mut out = self.scaled(a);
        out.terms.extend(other.scaled(b).terms);
        out
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn sample(&self, t: f64) -> C64 {
        self.terms.iter().map(|(c, p)| c * p.sample(t)).sum()
    }

    /// Left limit at `t`; differs from [`CoherentOffset::sample`] only at pulse edges.
    pub fn sample_left(&self, t: f64) -> C64 {
        self.terms.iter().map(|(c, p)| c * p.sample_left(t)).sum()
    }

    pub fn terms(&self) -> &[(C64, PulseEnvelope)] {
        &self.terms
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOperator {
    pub label: ChannelLabel,
    pub system_part: OperatorMatrix,
    pub offset: CoherentOffset,
    /// The channel also carries vacuum reservoir input, which is invisible to
    /// normally ordered statistics.
    pub vacuum_part: bool,
}

impl ChannelOperator {
    pub fn new(label: ChannelLabel, system_part: OperatorMatrix, offset: CoherentOffset) -> Self {
        Self {
            label,
            system_part,
            offset,
            vacuum_part: true,
        }
    }

    /// Pure vacuum on a space of dimension `dim`.
    pub fn vacuum(label: ChannelLabel, dim: usize) -> Self {
        Self::new(label, OperatorMatrix::zeros(dim, dim), CoherentOffset::zero())
    }

    pub fn has_system_part(&self) -> bool {
        self.system_part.iter().any(|z| *z != ZERO)
    }

    /// `μ(t)·1 + P`.
    pub fn operator_at(&self, t: f64) -> OperatorMatrix {
        let mut o = self.system_part.clone();
        let mu = self.offset.sample(t);
        if mu != ZERO {
            for i in 0..o.nrows() {
                o[(i, i)] += mu;
            }
        }
        o
    }

    /// Operators whose expectations feed [`mean_field`] and [`flux`]: `P` and `P†P`.
    pub fn moment_operators(&self) -> [OperatorMatrix; 2] {
        let p = self.system_part.clone();
        let pdp = p.adjoint() * &p;
        [p, pdp]
    }

    pub fn mean_field_at(&self, t: f64, rho: &DensityMatrix) -> C64 {
        self.offset.sample(t) + trace_of_product(&self.system_part, rho.matrix())
    }

    pub fn flux_at(&self, t: f64, rho: &DensityMatrix) -> f64 {
        let [p, pdp] = self.moment_operators();
        let m = ChannelMoment {
            p: trace_of_product(&p, rho.matrix()),
            pdp: trace_of_product(&pdp, rho.matrix()).re,
        };
        flux_from(self.offset.sample(t), m)
    }
}

/// `⟨P⟩` and `⟨P†P⟩` at one time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChannelMoment {
    pub p: C64,
    pub pdp: f64,
}

fn flux_from(mu: C64, m: ChannelMoment) -> f64 {
    mu.norm_sqr() + m.pdp + 2.0 * (mu.conj() * m.p).re
}

/// `μ(t) + ⟨P⟩(t)` on `times`.
pub fn mean_field(ch: &ChannelOperator, times: &[f64], moments: &[ChannelMoment]) -> Vec<C64> {
    times
        .iter()
        .zip(moments)
        .map(|(&t, m)| ch.offset.sample(t) + m.p)
        .collect()
}

/// `|μ|² + ⟨P†P⟩ + 2Re(μ*⟨P⟩)` on `times`.
pub fn flux(ch: &ChannelOperator, times: &[f64], moments: &[ChannelMoment]) -> Vec<f64> {
    times
        .iter()
        .zip(moments)
        .map(|(&t, m)| flux_from(ch.offset.sample(t), *m))
        .collect()
}

/// As [`flux`], with the offset taken as its left limit at each time.
pub fn flux_left(ch: &ChannelOperator, times: &[f64], moments: &[ChannelMoment]) -> Vec<f64> {
    times
        .iter()
        .zip(moments)
        .map(|(&t, m)| flux_from(ch.offset.sample_left(t), *m))
        .collect()
}

/// 50:50 beamsplitter: `e = (in1 − in2)/√2`, `d = (in1 + in2)/√2`.
pub fn beamsplitter(in1: &ChannelOperator, in2: &ChannelOperator) -> (ChannelOperator, ChannelOperator) {
    let r = C64::from(std::f64::consts::FRAC_1_SQRT_2);
    let out = |label, sign: f64| ChannelOperator {
        label,
        system_part: (&in1.system_part + &in2.system_part * C64::from(sign)) * r,
        offset: in1
            .offset
            .clone()
            .combine(r, in2.offset.clone(), r * sign),
        vacuum_part: in1.vacuum_part || in2.vacuum_part,
    };
    (out(ChannelLabel::EOut, -1.0), out(ChannelLabel::DOut, 1.0))
}

/// Composite Simpson rule on uniform samples; an odd number of intervals closes
/// with a 3/8 panel.
pub fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    match n {
        0 | 1 => 0.0,
        2 => 0.5 * h * (values[0] + values[1]),
        3 => h / 3.0 * (values[0] + 4.0 * values[1] + values[2]),
        _ => {
            let intervals = n - 1;
            let even_end = if intervals % 2 == 0 { n } else { n - 3 };
            let mut acc = 0.0;
            let mut k = 0;
            while k + 2 < even_end {
                acc += h / 3.0 * (values[k] + 4.0 * values[k + 1] + values[k + 2]);
                k += 2;
            }
            if intervals % 2 == 1 {
                let s = &values[n - 4..];
                acc += 3.0 * h / 8.0 * (s[0] + 3.0 * s[1] + 3.0 * s[2] + s[3]);
            }
            acc
        }
    }
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[values.len() - 1]))
}

/// `g2(t, τ) = G2(t, τ) / (F(t) F(t+τ))` where both fluxes exceed `threshold`.
pub fn normalized_g2(g2: &CorrelationTable, flux: &[f64], threshold: f64) -> Vec<Vec<Option<f64>>> {
    g2.t_indices
        .iter()
        .zip(&g2.values)
        .map(|(&k, row)| {
            row.iter()
                .enumerate()
                .map(|(j, v)| {
                    let k2 = k + j * g2.tau_stride;
                    let (f1, f2) = (flux[k], *flux.get(k2)?);
                    let v = (*v)?;
                    (f1 > threshold && f2 > threshold).then(|| v.re / (f1 * f2))
                })
                .collect()
        })
        .collect()
}

/// Sliced `g2(τ) = ∫G2(t,τ)dt / ∫F(t)F(t+τ)dt` over the table's `t` rows,
/// which must be uniformly spaced.
pub fn sliced_g2(g2: &CorrelationTable, flux: &[f64]) -> Vec<Option<f64>> {
    let n_tau = g2.tau.len();
    (0..n_tau)
        .map(|j| {
            let mut num = Vec::new();
            let mut den = Vec::new();
            for (&k, row) in g2.t_indices.iter().zip(&g2.values) {
                let k2 = k + j * g2.tau_stride;
                match (row[j], flux.get(k2)) {
                    (Some(v), Some(f2)) => {
                        num.push(v.re);
                        den.push(flux[k] * f2);
                    }
                    _ => {
                        num.push(0.0);
                        den.push(0.0);
                    }
                }
            }
            let h = row_spacing(&g2.t);
            let d = trapezoid(&den, h);
            (d > 0.0).then(|| trapezoid(&num, h) / d)
        })
        .collect()
}

/// Integrated `2∫∫_{τ≥0} G2 dt dτ / (∫F dt)²`.
pub fn integrated_g2(g2: &CorrelationTable, flux: &[f64], dt: f64) -> Option<f64> {
    let h_t = row_spacing(&g2.t);
    let h_tau = g2.tau_stride as f64 * dt;
    let per_t: Vec<f64> = g2
        .values
        .iter()
        .map(|row| {
            let col: Vec<f64> = row.iter().map(|v| v.map_or(0.0, |z| z.re)).collect();
            trapezoid(&col, h_tau)
        })
        .collect();
    let total = simpson(flux, dt);
    (total > 0.0).then(|| 2.0 * trapezoid(&per_t, h_t) / (total * total))
}

fn row_spacing(t: &[f64]) -> f64 {
    if t.len() < 2 {
        1.0
    } else {
        (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64
    }
}

/// Emission spectrum of a channel.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    /// Frequencies relative to the frame.
    pub omega: Vec<f64>,
    /// Incoherent density; `∫ density dω` is the incoherent flux.
    pub density: Vec<f64>,
    /// Weight of the coherent delta peak at the carrier (`ω = 0` in the frame).
    pub coherent_weight: f64,
    /// `⟨O†O⟩`, the total flux (CW) or emitted photon number (pulsed).
    pub total: f64,
}

/// Upper bound on regression steps when waiting for correlations to decay.
const MAX_SPECTRUM_STEPS: usize = 2_000_000;

/// CW spectrum from the steady state `rho_ss` of the constant generator `gen`.
///
/// `g1(τ) = ⟨O†(0)O(τ)⟩` is propagated until its incoherent part has decayed to
/// `e^{-8}` of its initial size, and then Fourier transformed:
/// `S(ω) = (1/π) Re ∫₀^∞ [g1(τ) − |⟨O⟩|²] e^{iωτ} dτ`.
pub fn emission_spectrum(
    ch: &ChannelOperator,
    gen: &Liouvillian,
    rho_ss: &DensityMatrix,
    dt: f64,
    omega: &[f64],
) -> Result<Spectrum> {
    let p = gen.params();
    if p.kappa <= 0.0 && p.gamma <= 0.0 {
        return Err(Error::NonDecaying);
    }
    if !(dt > 0.0) {
        return Err(Error::param("dt", "must be > 0"));
    }
    let o = ch.operator_at(0.0);
    let mean = trace_of_product(&o, rho_ss.matrix());
    let coherent = mean.norm_sqr();
    let mut x = rho_ss.matrix() * o.adjoint();
    let total = trace_of_product(&o, &x).re;
    let inc0 = (total - coherent).max(0.0);

    // Slowest decay rate of any coherence sets the window.
    let slowest = [p.kappa, p.gamma]
        .into_iter()
        .filter(|r| *r > 0.0)
        .fold(f64::INFINITY, f64::min)
        / 2.0;
    let n_min = ((8.0 / slowest) / dt).ceil() as usize;
    let cutoff = (-8.0_f64).exp() * inc0;
    let mut g1: Vec<C64> = Vec::new();
    let chunk = n_min.max(16);
    let mut t0 = 0.0;
    loop {
        let start = g1.len();
        let mut local = Vec::with_capacity(chunk + 1);
        regress(gen, t0, dt, chunk, &mut x, false, |m, _, xm| {
            if start == 0 || m > 0 {
                local.push(trace_of_product(&o, xm) - coherent);
            }
        });
        g1.extend(local);
        t0 += chunk as f64 * dt;
        let tail = &g1[g1.len().saturating_sub(chunk / 4)..];
        let tail_max = tail.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if tail_max <= cutoff || inc0 == 0.0 {
            break;
        }
        if g1.len() > MAX_SPECTRUM_STEPS {
            return Err(Error::NonDecaying);
        }
    }
    let density = fourier_half_line(&g1, dt, omega);
    Ok(Spectrum {
        omega: omega.to_vec(),
        density,
        coherent_weight: coherent,
        total,
    })
}

/// Pulsed spectrum `S(ω) = (1/π) Re ∫dt ∫₀^∞dτ G1(t,τ) e^{iωτ}` from a g1 table
/// whose `t` rows are uniformly spaced. No coherent part is split off.
pub fn pulsed_spectrum(g1: &CorrelationTable, omega: &[f64]) -> Result<Spectrum> {
    if g1.kind != CorrelationKind::G1 {
        return Err(Error::param("kind", "pulsed spectrum needs a g1 table"));
    }
    let h_t = row_spacing(&g1.t);
    let h_tau = if g1.tau.len() > 1 { g1.tau[1] - g1.tau[0] } else { 1.0 };
    let rows: Vec<Vec<f64>> = g1
        .values
        .iter()
        .map(|row| {
            let series: Vec<C64> = row.iter().map(|v| v.unwrap_or(ZERO)).collect();
            fourier_half_line(&series, h_tau, omega)
        })
        .collect();
    let density = (0..omega.len())
        .map(|w| trapezoid(&rows.iter().map(|r| r[w]).collect::<Vec<_>>(), h_t))
        .collect();
    let total = trapezoid(
        &g1.values
            .iter()
            .map(|row| row.first().copied().flatten().map_or(0.0, |z| z.re))
            .collect::<Vec<_>>(),
        h_t,
    );
    Ok(Spectrum {
        omega: omega.to_vec(),
        density,
        coherent_weight: 0.0,
        total,
    })
}

/// `(1/π) Re ∫₀^T f(τ) e^{iωτ} dτ` by the trapezoid rule.
fn fourier_half_line(f: &[C64], h: f64, omega: &[f64]) -> Vec<f64> {
    omega
        .iter()
        .map(|&w| {
            let step = C64::from_polar(1.0, w * h);
            let mut phase = C64::new(1.0, 0.0);
            let mut acc = ZERO;
            let last = f.len().saturating_sub(1);
            for (k, v) in f.iter().enumerate() {
                let wt = if k == 0 || k == last { 0.5 } else { 1.0 };
                acc += v * phase * wt;
                phase *= step;
            }
            (acc * h).re / std::f64::consts::PI
        })
        .collect()
}

/// `t,re,im` rows.
pub fn write_complex_series<W: Write>(w: W, times: &[f64], values: &[C64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "re", "im"])?;
    for (t, v) in times.iter().zip(values) {
        out.write_record([fmt_f64(*t), fmt_f64(v.re), fmt_f64(v.im)])?;
    }
    out.flush()?;
    Ok(())
}

/// `t,value` rows.
pub fn write_real_series<W: Write>(w: W, times: &[f64], values: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "value"])?;
    for (t, v) in times.iter().zip(values) {
        out.write_record([fmt_f64(*t), fmt_f64(*v)])?;
    }
    out.flush()?;
    Ok(())
}

/// One row per index of equally long `columns`, under `header`.
pub fn write_columns<W: Write>(w: W, header: &[&str], columns: &[Vec<f64>]) -> Result<()> {
    if header.len() != columns.len() {
        return Err(Error::DimensionMismatch {
            expected: header.len(),
            found: columns.len(),
        });
    }
    let rows = columns.first().map_or(0, Vec::len);
    if let Some(bad) = columns.iter().find(|c| c.len() != rows) {
        return Err(Error::DimensionMismatch {
            expected: rows,
            found: bad.len(),
        });
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for k in 0..rows {
        out.write_record(columns.iter().map(|c| fmt_f64(c[k])))?;
    }
    out.flush()?;
    Ok(())
}

/// `t,tau,re,im` rows; undefined entries are skipped.
pub fn write_correlation<W: Write>(w: W, table: &CorrelationTable) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "tau", "re", "im"])?;
    for (t, row) in table.t.iter().zip(&table.values) {
        for (tau, v) in table.tau.iter().zip(row) {
            if let Some(v) = v {
                out.write_record([fmt_f64(*t), fmt_f64(*tau), fmt_f64(v.re), fmt_f64(v.im)])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// `t,tau,g2` rows; undefined entries are skipped.
pub fn write_normalized_g2<W: Write>(w: W, table: &CorrelationTable, g2: &[Vec<Option<f64>>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "tau", "g2"])?;
    for (t, row) in table.t.iter().zip(g2) {
        for (tau, v) in table.tau.iter().zip(row) {
            if let Some(v) = v {
                out.write_record([fmt_f64(*t), fmt_f64(*tau), fmt_f64(*v)])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// `omega,density` rows, with `omega` shifted by `frame_frequency`.
pub fn write_spectrum<W: Write>(w: W, spectrum: &Spectrum, frame_frequency: f64) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["omega", "density"])?;
    for (om, s) in spectrum.omega.iter().zip(&spectrum.density) {
        out.write_record([fmt_f64(om + frame_frequency), fmt_f64(*s)])?;
    }
    out.flush()?;
    Ok(())
}

/// Samples a grid-aligned expectation series into channel moments.
pub fn channel_moments(p: &[C64], pdp: &[C64]) -> Vec<ChannelMoment> {
    p.iter()
        .zip(pdp)
        .map(|(p, q)| ChannelMoment { p: *p, pdp: q.re })
        .collect()
}

/// Cumulative photon number `∫₀^{t_k} F dt` at every even grid index and at the end (Simpson).
pub fn cumulative_photons(flux: &[f64], grid: &TimeGrid) -> Vec<(usize, f64)> {
    cumulative_photons_split(flux, flux, &[], grid.dt())
}

/// Cumulative Simpson integral of a series with jumps at the grid indices `cuts`.
/// `right[k]` is the value just after `t_k`, `left[k]` the value just before; each
/// segment between cuts is integrated on its own. Reports the running total at every
/// even offset into a segment and at each segment end.
pub fn cumulative_photons_split(right: &[f64], left: &[f64], cuts: &[usize], h: f64) -> Vec<(usize, f64)> {
    let n = right.len();
    let mut out = vec![(0, 0.0)];
    if n < 2 {
        return out;
    }
    let mut ends: Vec<usize> = cuts.iter().copied().filter(|&k| k > 0 && k < n - 1).collect();
    ends.push(n - 1);
    ends.sort_unstable();
    ends.dedup();
    let mut base = 0.0;
    let mut s = 0;
    for e in ends {
        let mut vals = right[s..e].to_vec();
        vals.push(left[e]);
        let mut acc = 0.0;
        let mut k = 2;
        while k <= vals.len() - 1 {
            acc += h / 3.0 * (vals[k - 2] + 4.0 * vals[k - 1] + vals[k]);
            if s + k < e {
                out.push((s + k, base + acc));
            }
            k += 2;
        }
        base += simpson(&vals, h);
        out.push((e, base));
        s = e;
    }
    out
}
