//! Truncated Fock ⊗ qubit space and the operators that act on it.
//!
//! Basis states are ordered photon-major, atom-minor: `index = 2·n + q`,
//! where `n` is the photon number and `q = 0` (ground) or `q = 1` (excited).
//! This ordering is fixed so that serialized matrices compare across runs.
//! With it every operator built here is banded with half-bandwidth 2.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::dynamics::DensityMatrix;
use crate::error::{Error, Result};
use crate::pulses::FrameConfig;

/// Dense complex operator on the truncated space.
pub type OperatorMatrix = DMatrix<C64>;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct SpaceConfig {
    n_max: usize,
}

impl SpaceConfig {
    pub fn new(n_max: usize) -> Result<Self> {
        if n_max < 1 {
            return Err(Error::param("n_max", "must be at least 1"));
        }
        Ok(Self { n_max })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        2 * (self.n_max + 1)
    }

    /// Basis index of `|n, q⟩`.
    pub fn index(&self, photons: usize, excited: bool) -> usize {
        debug_assert!(photons <= self.n_max);
        2 * photons + excited as usize
    }

    /// Inverse of [`SpaceConfig::index`].
    pub fn decompose(&self, index: usize) -> (usize, bool) {
        debug_assert!(index < self.dim());
        (index / 2, index % 2 == 1)
    }

    pub fn identity(&self) -> OperatorMatrix {
        OperatorMatrix::identity(self.dim(), self.dim())
    }

    pub fn zeros(&self) -> OperatorMatrix {
        OperatorMatrix::zeros(self.dim(), self.dim())
    }

    /// Projector onto the top Fock level (both atomic states).
    pub fn top_level_projector(&self) -> OperatorMatrix {
        let mut p = self.zeros();
        for excited in [false, true] {
            let i = self.index(self.n_max, excited);
            p[(i, i)] = ONE;
        }
        p
    }
}

impl TryFrom<u32> for SpaceConfig {
    type Error = Error;

    fn try_from(n_max: u32) -> Result<Self> {
        SpaceConfig::new(n_max as usize)
    }
}

impl From<SpaceConfig> for u32 {
    fn from(s: SpaceConfig) -> u32 {
        s.n_max as u32
    }
}

/// Physical parameters of the driven Jaynes–Cummings system, in natural units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    /// Cavity frequency.
    pub omega0: f64,
    /// Atomic transition frequency.
    pub omega_atom: f64,
    /// Atom–cavity coupling rate.
    pub g: f64,
    /// Cavity energy decay rate into reservoir `b`.
    pub kappa: f64,
    /// Atomic decay rate into reservoir `c`.
    pub gamma: f64,
}

impl SystemParams {
    /// Resonant system with both frequencies at zero (i.e. already in the cavity frame).
    pub fn resonant(g: f64, kappa: f64, gamma: f64) -> Self {
        Self {
            omega0: 0.0,
            omega_atom: 0.0,
            g,
            kappa,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("omega0", self.omega0), ("omega_atom", self.omega_atom)] {
            if !v.is_finite() {
                return Err(Error::param(field, "must be finite"));
            }
        }
        for (field, v) in [("g", self.g), ("kappa", self.kappa), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// The same system with both frequencies shifted into the rotating frame.
    pub fn in_frame(&self, frame: &FrameConfig) -> Self {
        Self {
            omega0: self.omega0 - frame.frame_frequency,
            omega_atom: self.omega_atom - frame.frame_frequency,
            ..*self
        }
    }
}

/// Cavity annihilation operator `a`.
pub fn annihilation(space: SpaceConfig) -> OperatorMatrix {
    let mut a = space.zeros();
    for n in 1..=space.n_max() {
        let amp = C64::from((n as f64).sqrt());
        for excited in [false, true] {
            a[(space.index(n - 1, excited), space.index(n, excited))] = amp;
        }
    }
    a
}

/// Atomic lowering operator `σ = |g⟩⟨e|`, identity on the photon number.
pub fn lowering(space: SpaceConfig) -> OperatorMatrix {
    let mut s = space.zeros();
    for n in 0..=space.n_max() {
        s[(space.index(n, false), space.index(n, true))] = ONE;
    }
    s
}

/// `σ_z = σ†σ − σσ†`.
pub fn sigma_z(space: SpaceConfig) -> OperatorMatrix {
    let s = lowering(space);
    let sd = s.adjoint();
    &sd * &s - &s * &sd
}

/// `a†a`.
pub fn photon_number(space: SpaceConfig) -> OperatorMatrix {
    OperatorMatrix::from_fn(space.dim(), space.dim(), |i, j| {
        if i == j {
            C64::from(space.decompose(i).0 as f64)
        } else {
            ZERO
        }
    })
}

/// Atomic excitation `N = σ†σ = (σ_z + 1)/2`.
pub fn atom_excitation(space: SpaceConfig) -> OperatorMatrix {
    OperatorMatrix::from_fn(space.dim(), space.dim(), |i, j| {
        if i == j && space.decompose(i).1 {
            ONE
        } else {
            ZERO
        }
    })
}

/// `H = ω₀ a†a + Ω σ†σ + i g (a†σ − σ†a)` with the frequencies of `params` taken as given.
///
/// Pass `params.in_frame(..)` to build the rotating-frame Hamiltonian.
pub fn jc_hamiltonian(params: &SystemParams, space: SpaceConfig) -> OperatorMatrix {
    let a = annihilation(space);
    let s = lowering(space);
    let coupling = &a.adjoint() * &s - &s.adjoint() * &a;
    photon_number(space) * C64::from(params.omega0)
        + atom_excitation(space) * C64::from(params.omega_atom)
        + coupling * C64::new(0.0, params.g)
}

/// Truncated displacement operator `exp(α a† − α* a)`.
///
/// Exact only while the displaced state stays well below the cutoff; see
/// [`displacement_near_cutoff`].
pub fn displacement(space: SpaceConfig, alpha: C64) -> OperatorMatrix {
    if alpha == ZERO {
        return space.identity();
    }
    let a = annihilation(space);
    let generator = a.adjoint() * alpha - a * alpha.conj();
    generator.exp()
}

/// True when `|α|²` comes within `4√n_max` of the truncation.
pub fn displacement_near_cutoff(space: SpaceConfig, alpha: C64) -> bool {
    let n_max = space.n_max() as f64;
    alpha.norm_sqr() > n_max - 4.0 * n_max.sqrt()
}

/// `tr(op · ρ)`.
pub fn expectation(rho: &DensityMatrix, op: &OperatorMatrix) -> Result<C64> {
    let m = rho.matrix();
    if op.nrows() != m.nrows() || op.ncols() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: op.nrows(),
        });
    }
    Ok(trace_of_product(op, m))
}

/// `tr(A·B)` without forming the product.
pub fn trace_of_product(a: &OperatorMatrix, b: &OperatorMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn commutator(a: &OperatorMatrix, b: &OperatorMatrix) -> OperatorMatrix {
    a * b - b * a
}

/// Largest element-wise modulus.
pub fn max_abs(m: &OperatorMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}
