//! Lindblad dynamics of the driven Jaynes–Cummings system.
//!
//! The generator is
//!
//! ```text
//! dρ/dt = −i[H + H_d(t), ρ] + κ D[a]ρ + γ D[σ]ρ,
//! H_d(t) = i√κ(β*a − βa†) + i√γ(ζ*σ − ζσ†),
//! ```
//!
//! with `β` the coherent amplitude in the cavity reservoir and `ζ` the one in the
//! atom reservoir. The sign of `H_d` makes the Ehrenfest equations pick up
//! `−√κβ` in `d⟨a⟩/dt` and `+√γζ⟨σ_z⟩` in `d⟨σ⟩/dt`, so a bare cavity builds up
//! exactly `⟨a⟩ = α = −(β∗f)`.
//!
//! Integration is fixed-step RK4. Every operator in the model is banded with
//! half-bandwidth 2 in the photon-major basis; the right-hand side exploits that.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hilbert::{
    self, annihilation, atom_excitation, lowering, sigma_z, trace_of_product, OperatorMatrix,
    SpaceConfig, SystemParams,
};
use crate::iofields::ChannelOperator;
use crate::pulses::{FrameConfig, PulseEnvelope};

const ZERO: C64 = C64::new(0.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Hermitian, unit-trace, positive semidefinite state.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix(OperatorMatrix);

impl DensityMatrix {
    pub const HERMITICITY_TOL: f64 = 1e-10;
    pub const TRACE_TOL: f64 = 1e-8;
    pub const POSITIVITY_TOL: f64 = 1e-8;

    pub fn new(m: OperatorMatrix) -> Result<Self> {
        let rho = Self(m);
        rho.check(f64::NAN)?;
        Ok(rho)
    }

    /// Wraps a matrix without checking the state invariants.
    pub fn new_unchecked(m: OperatorMatrix) -> Self {
        Self(m)
    }

    pub fn vacuum(space: SpaceConfig) -> Self {
        Self::fock(space, 0, false)
    }

    pub fn fock(space: SpaceConfig, photons: usize, excited: bool) -> Self {
        let mut m = space.zeros();
        let i = space.index(photons, excited);
        m[(i, i)] = C64::new(1.0, 0.0);
        Self(m)
    }

    pub fn matrix(&self) -> &OperatorMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> OperatorMatrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        hilbert::max_abs(&(&self.0 - self.0.adjoint()))
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let mut herm = (&self.0 + self.0.adjoint()) * C64::new(0.5, 0.0);
        // The eigensolver loses accuracy on entries near the underflow range; clearing
        // them shifts eigenvalues by at most dim·FLUSH.
        const FLUSH: f64 = 1e-30;
        for z in herm.iter_mut() {
            if z.norm() < FLUSH {
                *z = ZERO;
            }
        }
        herm.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Population of the top Fock level.
    pub fn top_level_population(&self, space: SpaceConfig) -> f64 {
        let n = space.n_max();
        let (i, j) = (space.index(n, false), space.index(n, true));
        self.0[(i, i)].re + self.0[(j, j)].re
    }

    fn check(&self, time: f64) -> Result<()> {
        if self.0.nrows() != self.0.ncols() {
            return Err(Error::InvariantViolation {
                time,
                what: format!("non-square {}x{}", self.0.nrows(), self.0.ncols()),
            });
        }
        Self::check_values(time, self.hermiticity_error(), self.trace(), self.min_eigenvalue())
    }

    fn check_values(time: f64, herm: f64, trace: C64, min_ev: f64) -> Result<()> {
        let violation = |what: String| Err(Error::InvariantViolation { time, what });
        if !(herm <= Self::HERMITICITY_TOL) {
            return violation(format!("hermiticity error {herm:.3e}"));
        }
        let drift = (trace - C64::new(1.0, 0.0)).norm();
        if !(drift <= Self::TRACE_TOL) {
            return violation(format!("trace drift {drift:.3e}"));
        }
        if !(min_ev >= -Self::POSITIVITY_TOL) {
            return violation(format!("minimum eigenvalue {min_ev:.3e}"));
        }
        Ok(())
    }

    /// Checkpoint dump: `u64` dimension, then `dim²` entries in row-major order,
    /// each as `(re, im)` `f64` pairs; everything little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        w.write_all(&(d as u64).to_le_bytes())?;
        for i in 0..d {
            for j in 0..d {
                let z = self.0[(i, j)];
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`DensityMatrix::write_binary`] without validating it.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let d = u64::from_le_bytes(word) as usize;
        if d == 0 || d > 1 << 16 {
            return Err(Error::Io(format!("implausible checkpoint dimension {d}")));
        }
        let mut m = OperatorMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                r.read_exact(&mut word)?;
                let re = f64::from_le_bytes(word);
                r.read_exact(&mut word)?;
                let im = f64::from_le_bytes(word);
                m[(i, j)] = C64::new(re, im);
            }
        }
        Ok(Self(m))
    }
}

/// Uniform grid `t_k = t_start + k·dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    t_start: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub const MAX_STEPS: usize = 50_000_000;

    /// The step count is `(t_end − t_start)/dt` rounded up, so the grid may overshoot
    /// `t_end` by less than one step.
    pub fn new(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::param("t_end", "grid bounds must be finite"));
        }
        if !(t_end > t_start) {
            return Err(Error::param("t_end", "must be later than t_start"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::param("dt", "must be > 0"));
        }
        let ratio = (t_end - t_start) / dt;
        let n = if (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) {
            ratio.round()
        } else {
            ratio.ceil()
        };
        if n > Self::MAX_STEPS as f64 {
            return Err(Error::param(
                "dt",
                format!("{n} steps exceeds the limit of {}", Self::MAX_STEPS),
            ));
        }
        Ok(Self {
            t_start,
            dt,
            n_steps: n as usize,
        })
    }

    pub fn with_steps(t_start: f64, dt: f64, n_steps: usize) -> Result<Self> {
        Self::new(t_start, t_start + dt * n_steps as f64, dt)
    }

    /// Default step `min(0.02/κ, 0.02/γ, 0.02·2π/g)` over the nonzero rates.
    pub fn default_step(params: &SystemParams) -> f64 {
        let mut dt: f64 = 0.02;
        let mut any = false;
        for (rate, scale) in [
            (params.kappa, 0.02),
            (params.gamma, 0.02),
            (params.g, 0.02 * std::f64::consts::TAU),
        ] {
            if rate > 0.0 {
                dt = if any { dt.min(scale / rate) } else { scale / rate };
                any = true;
            }
        }
        dt
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// All RK4 stage times: the grid points and the midpoints between them.
    pub fn half_step_times(&self) -> Vec<f64> {
        let h = 0.5 * self.dt;
        (0..=2 * self.n_steps)
            .map(|k| self.t_start + k as f64 * h)
            .collect()
    }

    /// Same span with half the step.
    pub fn refined(&self) -> Self {
        Self {
            t_start: self.t_start,
            dt: 0.5 * self.dt,
            n_steps: 2 * self.n_steps,
        }
    }

    /// Index of the grid point at `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = ((t - self.t_start) / self.dt).round();
        if k < 0.0 || k > self.n_steps as f64 {
            return None;
        }
        let k = k as usize;
        ((self.time(k) - t).abs() <= 1e-9 * self.dt).then_some(k)
    }
}

/// Side from which drives are sampled at a switching instant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Limit {
    Left,
    Right,
}

/// Coherent reservoir amplitudes entering as c-number drives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DriveTerms {
    /// `β(t)` in the cavity reservoir.
    pub cavity: Option<PulseEnvelope>,
    /// `ζ(t)` in the atom reservoir.
    pub atom: Option<PulseEnvelope>,
}

impl DriveTerms {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn cavity(beta: PulseEnvelope) -> Self {
        Self {
            cavity: Some(beta),
            atom: None,
        }
    }

    pub fn atom(zeta: PulseEnvelope) -> Self {
        Self {
            cavity: None,
            atom: Some(zeta),
        }
    }

    /// `(β(t), ζ(t))`, zero where absent.
    pub fn amplitudes(&self, t: f64) -> (C64, C64) {
        self.amplitudes_at(t, Limit::Right)
    }

    fn amplitudes_at(&self, t: f64, side: Limit) -> (C64, C64) {
        let sample = |e: &Option<PulseEnvelope>| {
            e.as_ref().map_or(ZERO, |p| match side {
                Limit::Right => p.sample(t),
                Limit::Left => p.sample_left(t),
            })
        };
        (sample(&self.cavity), sample(&self.atom))
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .cavity
            .iter()
            .chain(self.atom.iter())
            .filter(|p| !matches!(p, PulseEnvelope::Tabulated(_)))
            .flat_map(|p| p.breakpoints())
            .collect();
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b
    }
}

/// `H_d(t) = i√κ(β*a − βa†) + i√γ(ζ*σ − ζσ†)`.
pub fn drive_hamiltonian(
    terms: &DriveTerms,
    t: f64,
    space: SpaceConfig,
    params: &SystemParams,
) -> OperatorMatrix {
    let (beta, zeta) = terms.amplitudes(t);
    let mut h = space.zeros();
    if beta != ZERO {
        let a = annihilation(space);
        h += (&a * beta.conj() - a.adjoint() * beta) * (I * params.kappa.sqrt());
    }
    if zeta != ZERO {
        let s = lowering(space);
        h += (&s * zeta.conj() - s.adjoint() * zeta) * (I * params.gamma.sqrt());
    }
    h
}

/// Time-dependent Lindblad generator for one drive configuration.
/// Half-bandwidth of every operator in the generator.
const BW: usize = 2;

#[derive(Clone, Debug)]
pub struct Liouvillian {
    space: SpaceConfig,
    params: SystemParams,
    a: OperatorMatrix,
    sigma: OperatorMatrix,
    hamiltonian: OperatorMatrix,
    terms: DriveTerms,
    /// `√(⌊i/2⌋ + 1)`: the nonzero of row `i` of `a`.
    ladder: Vec<f64>,
    /// Diagonals of `h_eff`, laid out as in [`Liouvillian::effective_band`].
    band: [Vec<C64>; 2 * BW + 1],
}

impl Liouvillian {
    /// `params` are lab-frame; the generator works in `frame`.
    pub fn new(
        params: &SystemParams,
        frame: &FrameConfig,
        space: SpaceConfig,
        terms: DriveTerms,
    ) -> Result<Self> {
        params.validate()?;
        for p in terms.cavity.iter().chain(terms.atom.iter()) {
            p.validate()?;
        }
        let framed = params.in_frame(frame);
        let a = annihilation(space);
        let sigma = lowering(space);
        let hamiltonian = hilbert::jc_hamiltonian(&framed, space);
        let damping = hilbert::photon_number(space) * C64::from(params.kappa)
            + atom_excitation(space) * C64::from(params.gamma);
        let h_eff = &hamiltonian - damping * C64::new(0.0, 0.5);
        let ladder = (0..space.dim()).map(|i| ((i / 2 + 1) as f64).sqrt()).collect();
        let d = space.dim();
        let band = std::array::from_fn(|o| {
            (0..d)
                .map(|i| {
                    let m = i + o;
                    if (BW..d + BW).contains(&m) {
                        h_eff[(i, m - BW)]
                    } else {
                        ZERO
                    }
                })
                .collect()
        });
        Ok(Self {
            space,
            params: framed,
            a,
            sigma,
            hamiltonian,
            terms,
            ladder,
            band,
        })
    }

    pub fn space(&self) -> SpaceConfig {
        self.space
    }

    /// Parameters with frequencies relative to the frame.
    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn terms(&self) -> &DriveTerms {
        &self.terms
    }

    pub fn annihilation(&self) -> &OperatorMatrix {
        &self.a
    }

    pub fn lowering(&self) -> &OperatorMatrix {
        &self.sigma
    }

    /// Undriven rotating-frame Hamiltonian.
    pub fn hamiltonian(&self) -> &OperatorMatrix {
        &self.hamiltonian
    }

    /// Non-Hermitian `H_eff + H_d(t)`.
    fn effective(&self, t: f64, side: Limit) -> OperatorMatrix {
        let d = self.space.dim();
        let band = self.effective_band(t, side);
        let mut k = self.space.zeros();
        for (o, diag) in band.iter().enumerate() {
            for i in 0..d {
                let m = i + o;
                if (BW..d + BW).contains(&m) {
                    k[(i, m - BW)] = diag[i];
                }
            }
        }
        k
    }

    /// Diagonals of `H_eff + H_d(t)`: `band[o][i] = K[i, i + o − 2]`, zero off the matrix.
    fn effective_band(&self, t: f64, side: Limit) -> [Vec<C64>; 2 * BW + 1] {
        let mut band = self.band.clone();
        let (beta, zeta) = self.terms.amplitudes_at(t, side);
        let d = self.space.dim();
        if beta != ZERO {
            // i√κ(β*a − βa†): a has a_{i,i+2} = ladder[i].
            let rk = self.params.kappa.sqrt();
            for i in 0..d.saturating_sub(2) {
                let c = self.ladder[i] * rk;
                band[BW + 2][i] += I * beta.conj() * c;
                band[BW - 2][i + 2] -= I * beta * c;
            }
        }
        if zeta != ZERO {
            let rg = self.params.gamma.sqrt();
            for i in (0..d).step_by(2) {
                band[BW + 1][i] += I * zeta.conj() * rg;
                band[BW - 1][i + 1] -= I * zeta * rg;
            }
        }
        band
    }

    /// `out = L_t(x)`, valid for any (not necessarily Hermitian) `x`.
    pub fn apply(&self, t: f64, x: &OperatorMatrix, out: &mut OperatorMatrix) {
        self.apply_at(t, Limit::Right, x, out, false)
    }

    /// As [`Liouvillian::apply`], with drives taken as left limits at `t`.
    pub fn apply_left(&self, t: f64, x: &OperatorMatrix, out: &mut OperatorMatrix) {
        self.apply_at(t, Limit::Left, x, out, false)
    }

    /// With `hermitian`, `x` must be Hermitian; only the upper triangle is computed
    /// and the lower one mirrored.
    fn apply_at(&self, t: f64, side: Limit, x: &OperatorMatrix, out: &mut OperatorMatrix, hermitian: bool) {
        let d = self.space.dim();
        let mut band = self.effective_band(t, side);
        for v in band.iter_mut().flatten() {
            *v *= -I;
        }
        let xs = x.as_slice();
        let os = out.as_mut_slice();
        let kappa = self.params.kappa;
        let gamma = C64::from(self.params.gamma);
        // Column-major: m[(i, j)] = data[i + j*d].
        for j in 0..d {
            let rows = if hermitian { j + 1 } else { d };
            let col = &mut os[j * d..j * d + rows];
            let xj = &xs[j * d..(j + 1) * d];
            col.fill(ZERO);
            for (o, diag) in band.iter().enumerate() {
                // −i(Kx)_{ij} = −i Σ_o K[i, i+o] x[i+o, j]
                let lo = BW.saturating_sub(o);
                let hi = (d + BW).saturating_sub(o).min(rows);
                if lo < hi {
                    for ((ci, ki), xi) in col[lo..hi].iter_mut().zip(&diag[lo..hi]).zip(&xj[lo + o - BW..]) {
                        *ci += ki * xi;
                    }
                }
                // +i(xK†)_{ij} = +i Σ_o x[i, j+o] conj(K[j, j+o]), with the band already holding −iK
                let m = j + o;
                if (BW..d + BW).contains(&m) {
                    let c = diag[j].conj();
                    if c != ZERO {
                        let xm = &xs[(m - BW) * d..(m - BW) * d + rows];
                        for (ci, xi) in col.iter_mut().zip(xm) {
                            *ci += c * xi;
                        }
                    }
                }
            }
            // κ a x a†
            if j + 2 < d {
                let c = kappa * self.ladder[j];
                let xm = &xs[(j + 2) * d..(j + 3) * d];
                for i in 0..rows.min(d - 2) {
                    col[i] += xm[i + 2] * (c * self.ladder[i]);
                }
            }
            // γ σ x σ†
            if j % 2 == 0 {
                let xm = &xs[(j + 1) * d..(j + 2) * d];
                for i in (0..rows).step_by(2) {
                    col[i] += xm[i + 1] * gamma;
                }
            }
        }
        if hermitian {
            for j in 0..d {
                for i in 0..j {
                    os[j + i * d] = os[i + j * d].conj();
                }
            }
        }
    }

    /// Dense superoperator on column-stacked `vec(ρ)` (index `i + j·dim`).
    pub fn superoperator(&self, t: f64) -> DMatrix<C64> {
        let d = self.space.dim();
        let k = self.effective(t, Limit::Right);
        let mut l = DMatrix::<C64>::zeros(d * d, d * d);
        for i in 0..d {
            for j in 0..d {
                let row = i + j * d;
                for m in 0..d {
                    // −i K x
                    let kim = k[(i, m)];
                    if kim != ZERO {
                        l[(row, m + j * d)] += -I * kim;
                    }
                    // +i x K†
                    let kjm = k[(j, m)];
                    if kjm != ZERO {
                        l[(row, i + m * d)] += I * kjm.conj();
                    }
                }
                if i + 2 < d && j + 2 < d {
                    l[(row, (i + 2) + (j + 2) * d)] +=
                        C64::from(self.params.kappa * self.ladder[i] * self.ladder[j]);
                }
                if i % 2 == 0 && j % 2 == 0 {
                    l[(row, (i + 1) + (j + 1) * d)] += C64::from(self.params.gamma);
                }
            }
        }
        l
    }
}

/// One-shot right-hand side `dρ/dt` for callers without a prebuilt generator.
pub fn lindblad_rhs(
    rho: &DensityMatrix,
    t: f64,
    params: &SystemParams,
    frame: &FrameConfig,
    space: SpaceConfig,
    terms: &DriveTerms,
) -> Result<OperatorMatrix> {
    if rho.dim() != space.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            found: rho.dim(),
        });
    }
    let gen = Liouvillian::new(params, frame, space, terms.clone())?;
    let mut out = space.zeros();
    gen.apply(t, rho.matrix(), &mut out);
    Ok(out)
}

/// RK4 stepper with preallocated stage buffers.
#[derive(Clone, Debug)]
pub struct Rk4 {
    k1: OperatorMatrix,
    k2: OperatorMatrix,
    k3: OperatorMatrix,
    k4: OperatorMatrix,
    tmp: OperatorMatrix,
    hermitian: bool,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        let z = OperatorMatrix::zeros(dim, dim);
        Self {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z,
            hermitian: false,
        }
    }

    /// Stepper for Hermitian states, which the generator keeps Hermitian; about
    /// half the work of [`Rk4::new`].
    pub fn hermitian(dim: usize) -> Self {
        Self {
            hermitian: true,
            ..Self::new(dim)
        }
    }

    pub fn step(&mut self, gen: &Liouvillian, t: f64, dt: f64, x: &mut OperatorMatrix) {
        let h = self.hermitian;
        gen.apply_at(t, Limit::Right, x, &mut self.k1, h);
        shifted(&mut self.tmp, x, 0.5 * dt, &self.k1);
        gen.apply_at(t + 0.5 * dt, Limit::Right, &self.tmp, &mut self.k2, h);
        shifted(&mut self.tmp, x, 0.5 * dt, &self.k2);
        gen.apply_at(t + 0.5 * dt, Limit::Right, &self.tmp, &mut self.k3, h);
        shifted(&mut self.tmp, x, dt, &self.k3);
        // The last stage closes the step, so it sees drives switched on or off at t + dt
        // from inside the step.
        gen.apply_at(t + dt, Limit::Left, &self.tmp, &mut self.k4, h);
        let (sixth, third) = (dt / 6.0, dt / 3.0);
        let ks = [&self.k1, &self.k2, &self.k3, &self.k4].map(|k| k.as_slice());
        for (i, xi) in x.as_mut_slice().iter_mut().enumerate() {
            *xi += (ks[0][i] + ks[3][i]) * sixth + (ks[1][i] + ks[2][i]) * third;
        }
    }
}

/// `out = x + h·k`.
fn shifted(out: &mut OperatorMatrix, x: &OperatorMatrix, h: f64, k: &OperatorMatrix) {
    for ((o, xi), ki) in out.as_mut_slice().iter_mut().zip(x.as_slice()).zip(k.as_slice()) {
        *o = xi + ki * h;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvolveOptions {
    /// Store the full state every this many steps (0: only the endpoints).
    pub checkpoint_stride: usize,
    /// Abort when the top Fock level holds more than this population.
    pub truncation_tolerance: Option<f64>,
    /// Hermiticity and positivity are checked every this many steps and at the end.
    pub invariant_stride: usize,
    /// Re-run at `dt/2` and report the largest change in any observable.
    pub step_halving: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            checkpoint_stride: 0,
            truncation_tolerance: Some(1e-6),
            invariant_stride: 50,
            step_halving: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub max_trace_drift: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
    pub max_top_population: f64,
    pub step_halving_error: Option<f64>,
}

impl Diagnostics {
    fn new() -> Self {
        Self {
            min_eigenvalue: f64::INFINITY,
            ..Default::default()
        }
    }
}

/// Integrates from `rho0` over `grid`, calling `observe(k, t_k, ρ(t_k))` at every grid point.
pub fn evolve_with<F>(
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    gen: &Liouvillian,
    options: &EvolveOptions,
    mut observe: F,
) -> Result<Diagnostics>
where
    F: FnMut(usize, f64, &OperatorMatrix),
{
    let space = gen.space();
    if rho0.dim() != space.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            found: rho0.dim(),
        });
    }
    rho0.check(grid.t_start())?;
    let mut diag = Diagnostics::new();
    let mut rho = rho0.matrix().clone();
    let mut stepper = Rk4::hermitian(space.dim());
    let stride = options.invariant_stride.max(1);
    for k in 0..=grid.n_steps() {
        let t = grid.time(k);
        if k > 0 {
            stepper.step(gen, grid.time(k - 1), grid.dt(), &mut rho);
        }
        let drift = (rho.trace() - C64::new(1.0, 0.0)).norm();
        diag.max_trace_drift = diag.max_trace_drift.max(drift);
        if !(drift <= DensityMatrix::TRACE_TOL) {
            return Err(Error::InvariantViolation {
                time: t,
                what: format!("trace drift {drift:.3e}"),
            });
        }
        let state = DensityMatrix::new_unchecked(rho);
        let top = state.top_level_population(space);
        diag.max_top_population = diag.max_top_population.max(top);
        if let Some(tol) = options.truncation_tolerance {
            if top > tol {
                return Err(Error::TruncationBreach {
                    time: t,
                    population: top,
                    n_max: space.n_max(),
                    tolerance: tol,
                });
            }
        }
        if k % stride == 0 || k == grid.n_steps() {
            let herm = state.hermiticity_error();
            let min_ev = state.min_eigenvalue();
            diag.max_hermiticity_error = diag.max_hermiticity_error.max(herm);
            diag.min_eigenvalue = diag.min_eigenvalue.min(min_ev);
            DensityMatrix::check_values(t, herm, state.trace(), min_ev)?;
        }
        rho = state.into_matrix();
        observe(k, t, &rho);
    }
    Ok(diag)
}

/// Sampled solution of [`evolve`].
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: TimeGrid,
    /// `expectations[i][k] = tr(observables[i] · ρ(t_k))`.
    pub expectations: Vec<Vec<C64>>,
    pub checkpoints: BTreeMap<usize, DensityMatrix>,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.grid.times()
    }

    pub fn checkpoint(&self, k: usize) -> Result<&DensityMatrix> {
        self.checkpoints.get(&k).ok_or(Error::MissingCheckpoint(k))
    }

    pub fn final_state(&self) -> &DensityMatrix {
        self.checkpoints
            .get(&self.grid.n_steps())
            .expect("final state is always stored")
    }
}

/// `ρ ↦ tr(Aρ)` over the nonzero entries of `A`.
struct SparseTrace(Vec<(usize, C64)>);

impl SparseTrace {
    fn new(a: &OperatorMatrix) -> Self {
        let d = a.nrows();
        let mut entries = Vec::new();
        for k in 0..d {
            for i in 0..d {
                let v = a[(i, k)];
                if v != ZERO {
                    entries.push((k + i * d, v));
                }
            }
        }
        Self(entries)
    }

    fn apply(&self, rho: &OperatorMatrix) -> C64 {
        let r = rho.as_slice();
        self.0.iter().map(|&(idx, v)| v * r[idx]).sum()
    }
}

pub fn evolve(
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    gen: &Liouvillian,
    observables: &[OperatorMatrix],
    options: &EvolveOptions,
) -> Result<Trajectory> {
    for op in observables {
        if op.nrows() != gen.space().dim() {
            return Err(Error::DimensionMismatch {
                expected: gen.space().dim(),
                found: op.nrows(),
            });
        }
    }
    let n = grid.n_steps();
    let sparse: Vec<SparseTrace> = observables.iter().map(SparseTrace::new).collect();
    let mut expectations = vec![Vec::with_capacity(n + 1); observables.len()];
    let mut checkpoints = BTreeMap::new();
    let mut diagnostics = evolve_with(rho0, grid, gen, options, |k, _, rho| {
        for (series, op) in expectations.iter_mut().zip(&sparse) {
            series.push(op.apply(rho));
        }
        let stored = k == 0
            || k == n
            || (options.checkpoint_stride > 0 && k % options.checkpoint_stride == 0);
        if stored {
            checkpoints.insert(k, DensityMatrix::new_unchecked(rho.clone()));
        }
    })?;

    if options.step_halving && !observables.is_empty() {
        let fine = grid.refined();
        let mut worst = 0.0_f64;
        let fine_opts = EvolveOptions {
            step_halving: false,
            checkpoint_stride: 0,
            ..*options
        };
        evolve_with(rho0, &fine, gen, &fine_opts, |k, _, rho| {
            if k % 2 == 0 {
                for (series, op) in expectations.iter().zip(&sparse) {
                    worst = worst.max((op.apply(rho) - series[k / 2]).norm());
                }
            }
        })?;
        diagnostics.step_halving_error = Some(worst);
    }

    Ok(Trajectory {
        grid: *grid,
        expectations,
        checkpoints,
        diagnostics,
    })
}

/// Constant reservoir amplitudes for steady-state solves.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConstantDrive {
    pub cavity: C64,
    pub atom: C64,
}

impl ConstantDrive {
    pub fn terms(&self) -> DriveTerms {
        let wrap = |z: C64| (z != ZERO).then(|| PulseEnvelope::constant(z));
        DriveTerms {
            cavity: wrap(self.cavity),
            atom: wrap(self.atom),
        }
    }
}

/// Solves `L ρ = 0, tr ρ = 1` by a dense LU solve with the first row replaced by the trace.
pub fn steady_state(
    params: &SystemParams,
    frame: &FrameConfig,
    space: SpaceConfig,
    drive: ConstantDrive,
) -> Result<DensityMatrix> {
    if params.kappa <= 0.0 && params.gamma <= 0.0 {
        return Err(Error::SingularSystem(
            "no dissipation (kappa = gamma = 0): the steady state is not unique".into(),
        ));
    }
    let gen = Liouvillian::new(params, frame, space, drive.terms())?;
    steady_state_of(&gen)
}

/// Steady state of an already-built generator whose drives are constant.
pub fn steady_state_of(gen: &Liouvillian) -> Result<DensityMatrix> {
    let d = gen.space().dim();
    let mut l = gen.superoperator(0.0);
    for c in 0..d * d {
        l[(0, c)] = ZERO;
    }
    for m in 0..d {
        l[(0, m + m * d)] = C64::new(1.0, 0.0);
    }
    let mut rhs = nalgebra::DVector::<C64>::zeros(d * d);
    rhs[0] = C64::new(1.0, 0.0);
    let v = l
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("LU solve failed".into()))?;
    if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::SingularSystem("non-finite solution".into()));
    }
    let m = OperatorMatrix::from_column_slice(d, d, v.as_slice());
    let herm = (&m + m.adjoint()) * C64::from(0.5);
    DensityMatrix::new(herm).map_err(|e| match e {
        Error::InvariantViolation { what, .. } => Error::InvariantViolation {
            time: f64::INFINITY,
            what,
        },
        other => other,
    })
}

/// `max |L_t(ρ)|`.
pub fn generator_residual(gen: &Liouvillian, t: f64, rho: &DensityMatrix) -> f64 {
    let mut out = OperatorMatrix::zeros(rho.dim(), rho.dim());
    gen.apply(t, rho.matrix(), &mut out);
    hilbert::max_abs(&out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    /// `⟨O†(t) O(t+τ)⟩`.
    G1,
    /// `⟨O†(t) O†(t+τ) O(t+τ) O(t)⟩`.
    G2,
}

/// `(t, τ)` sample points, both on the integration grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionGrid {
    pub t_indices: Vec<usize>,
    pub tau_stride: usize,
    pub n_tau: usize,
}

impl RegressionGrid {
    /// `t_values` must lie on `grid`; `tau_spacing` must be a positive multiple of `dt`.
    pub fn new(grid: &TimeGrid, t_values: &[f64], tau_spacing: f64, n_tau: usize) -> Result<Self> {
        let ratio = tau_spacing / grid.dt();
        let stride = ratio.round();
        if !(stride >= 1.0) || (ratio - stride).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::TauGrid {
                spacing: tau_spacing,
                dt: grid.dt(),
            });
        }
        let t_indices = t_values
            .iter()
            .map(|&t| {
                grid.index_of(t)
                    .ok_or_else(|| Error::param("t_list", format!("t = {t} is not a grid point")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            t_indices,
            tau_stride: stride as usize,
            n_tau,
        })
    }

    /// `n_t` evenly spread indices on `[k_lo, k_hi]`, each a multiple of `align`.
    pub fn spread(k_lo: usize, k_hi: usize, n_t: usize, align: usize, tau_stride: usize, n_tau: usize) -> Self {
        let align = align.max(1);
        let mut t_indices: Vec<usize> = (0..n_t)
            .map(|i| {
                let k = k_lo as f64 + (k_hi - k_lo) as f64 * i as f64 / (n_t.max(2) - 1) as f64;
                (((k / align as f64).round() as usize) * align).min(k_hi / align * align)
            })
            .collect();
        t_indices.dedup();
        Self {
            t_indices,
            tau_stride: tau_stride.max(1),
            n_tau,
        }
    }
}

/// Two-time correlation samples; `None` where `t + τ` runs past the grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationTable {
    pub kind: CorrelationKind,
    pub t_indices: Vec<usize>,
    pub tau_stride: usize,
    pub t: Vec<f64>,
    pub tau: Vec<f64>,
    pub values: Vec<Vec<Option<C64>>>,
}

/// Propagates `x` under the generator from `t0`, calling `visit(m, t0 + m·dt, x)` for
/// `m = 0..=n_steps`. Pass `hermitian` only when `x` is Hermitian.
pub fn regress<F>(
    gen: &Liouvillian,
    t0: f64,
    dt: f64,
    n_steps: usize,
    x: &mut OperatorMatrix,
    hermitian: bool,
    mut visit: F,
) where
    F: FnMut(usize, f64, &OperatorMatrix),
{
    let mut stepper = if hermitian {
        Rk4::hermitian(x.nrows())
    } else {
        Rk4::new(x.nrows())
    };
    visit(0, t0, x);
    for m in 1..=n_steps {
        let t = t0 + (m - 1) as f64 * dt;
        stepper.step(gen, t, dt, x);
        visit(m, t0 + m as f64 * dt, x);
    }
}

/// Quantum-regression evaluation of g1/G2 for a channel `O(t) = μ(t) + P`.
///
/// The c-number offset enters the regressed operators directly, so every cross term
/// between offset and system part is included exactly. Each `t` row is an
/// independent propagation and rows run in parallel.
pub fn two_time_correlation(
    kind: CorrelationKind,
    channel: &ChannelOperator,
    trajectory: &Trajectory,
    gen: &Liouvillian,
    points: &RegressionGrid,
) -> Result<CorrelationTable> {
    let grid = &trajectory.grid;
    let dim = gen.space().dim();
    if channel.system_part.nrows() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: channel.system_part.nrows(),
        });
    }
    if points.tau_stride == 0 {
        return Err(Error::TauGrid {
            spacing: 0.0,
            dt: grid.dt(),
        });
    }
    let starts = points
        .t_indices
        .iter()
        .map(|&k| trajectory.checkpoint(k).map(|rho| (k, rho)))
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<Vec<Option<C64>>> = starts
        .par_iter()
        .map(|&(k, rho)| {
            let t = grid.time(k);
            let o_t = channel.operator_at(t);
            let mut x = match kind {
                CorrelationKind::G1 => rho.matrix() * o_t.adjoint(),
                CorrelationKind::G2 => &o_t * rho.matrix() * o_t.adjoint(),
            };
            let mut row = vec![None; points.n_tau];
            let reachable = grid.n_steps() - k;
            let n_steps = ((points.n_tau.max(1) - 1) * points.tau_stride).min(reachable);
            let hermitian = kind == CorrelationKind::G2;
            regress(gen, t, grid.dt(), n_steps, &mut x, hermitian, |m, s, x| {
                if m % points.tau_stride == 0 {
                    let o_s = channel.operator_at(s);
                    let b = match kind {
                        CorrelationKind::G1 => o_s,
                        CorrelationKind::G2 => o_s.adjoint() * &o_s,
                    };
                    row[m / points.tau_stride] = Some(trace_of_product(&b, x));
                }
            });
            row
        })
        .collect();

    Ok(CorrelationTable {
        kind,
        t_indices: points.t_indices.clone(),
        tau_stride: points.tau_stride,
        t: points.t_indices.iter().map(|&k| grid.time(k)).collect(),
        tau: (0..points.n_tau)
            .map(|j| (j * points.tau_stride) as f64 * grid.dt())
            .collect(),
        values: rows,
    })
}

/// Observables needed by [`ehrenfest_residuals`], in order:
/// `a, σ, N, σ_z a, σ†a, σ_z`.
pub fn ehrenfest_observables(space: SpaceConfig) -> Vec<OperatorMatrix> {
    let a = annihilation(space);
    let s = lowering(space);
    let z = sigma_z(space);
    vec![
        a.clone(),
        s.clone(),
        atom_excitation(space),
        &z * &a,
        s.adjoint() * &a,
        z,
    ]
}

/// Largest mismatch between numerically differentiated moments and the closed
/// Langevin right-hand sides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EhrenfestReport {
    pub cavity_field: f64,
    pub atom_coherence: f64,
    pub atom_population: f64,
}

impl EhrenfestReport {
    pub fn max(&self) -> f64 {
        self.cavity_field.max(self.atom_coherence).max(self.atom_population)
    }
}

/// Compares five-point-stencil derivatives of `⟨a⟩, ⟨σ⟩, ⟨N⟩` against
///
/// ```text
/// d⟨a⟩/dt = −(iω₀ + κ/2)⟨a⟩ + g⟨σ⟩ − √κβ
/// d⟨σ⟩/dt = −(iΩ + γ/2)⟨σ⟩ + g⟨σ_z a⟩ + √γζ⟨σ_z⟩
/// d⟨N⟩/dt = −γ⟨N⟩ − g(⟨σ†a⟩ + c.c.) − √γ(ζ*⟨σ⟩ + c.c.)
/// ```
///
/// `series` holds the expectations of [`ehrenfest_observables`] on every grid point.
/// Stencils straddling a drive breakpoint are skipped.
pub fn ehrenfest_residuals(gen: &Liouvillian, grid: &TimeGrid, series: &[Vec<C64>]) -> EhrenfestReport {
    let p = gen.params();
    let (rk, rg) = (p.kappa.sqrt(), p.gamma.sqrt());
    let h = grid.dt();
    let breaks = gen.terms().breakpoints();
    let mut report = EhrenfestReport::default();
    let n = grid.n_steps();
    if n < 4 {
        return report;
    }
    let deriv = |s: &[C64], k: usize| {
        (s[k - 2] - s[k - 1] * 8.0 + s[k + 1] * 8.0 - s[k + 2]) / (12.0 * h)
    };
    for k in 2..=n - 2 {
        let (lo, hi) = (grid.time(k - 2), grid.time(k + 2));
        if breaks.iter().any(|&b| b > lo && b < hi) {
            continue;
        }
        let t = grid.time(k);
        let (beta, zeta) = gen.terms().amplitudes(t);
        let (a, s, nn, za, sda, z) = (
            series[0][k],
            series[1][k],
            series[2][k],
            series[3][k],
            series[4][k],
            series[5][k],
        );
        let rhs_a = -C64::new(p.kappa / 2.0, p.omega0) * a + p.g * s - rk * beta;
        let rhs_s = -C64::new(p.gamma / 2.0, p.omega_atom) * s + p.g * za + rg * zeta * z;
        let rhs_n = -p.gamma * nn
            - p.g * (sda + sda.conj())
            - rg * (zeta.conj() * s + (zeta.conj() * s).conj());
        report.cavity_field = report.cavity_field.max((deriv(&series[0], k) - rhs_a).norm());
        report.atom_coherence = report.atom_coherence.max((deriv(&series[1], k) - rhs_s).norm());
        report.atom_population = report
            .atom_population
            .max((deriv(&series[2], k) - rhs_n).norm());
    }
    report
}
