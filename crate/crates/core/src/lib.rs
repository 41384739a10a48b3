//! Simulation of the pulsed, driven Jaynes–Cummings system with input–output channels.
//!
//! Driving the cavity with a coherent pulse `β(t)` is equivalent, in a frame displaced
//! by the field `α(t)` the bare cavity would build up, to driving the atom with
//! `ζ(t) = gα(t)/√γ`. The crate integrates the Lindblad master equation for all of
//! these drive configurations and checks the equivalence numerically.

pub mod dynamics;
pub mod error;
pub mod hilbert;
pub mod iofields;
pub mod pulses;
pub mod scenarios;

pub use num_complex::Complex64 as C64;

pub use dynamics::{
    drive_hamiltonian, ehrenfest_residuals, evolve, evolve_with, lindblad_rhs, steady_state,
    two_time_correlation, ConstantDrive, CorrelationKind, CorrelationTable, DensityMatrix,
    Diagnostics, DriveTerms, EvolveOptions, Liouvillian, RegressionGrid, TimeGrid, Trajectory,
};
pub use error::{Error, Result};
pub use hilbert::{OperatorMatrix, SpaceConfig, SystemParams};
pub use iofields::{beamsplitter, ChannelLabel, ChannelOperator, CoherentOffset, Spectrum};
pub use pulses::{
    cavity_filter, compensation_field, equivalent_atom_drive, filtered_field, FilterKernel,
    FrameConfig, PulseEnvelope, TabulatedEnvelope,
};
pub use scenarios::{
    run, truncation_sweep, verify_displacement_identity, verify_homodyne_cancellation,
    ConvergenceTable, CorrelationShape, DerivedFields, DriveConfig, DriveVariant,
    EquivalenceReport, HomodyneTolerances, OutputRecord, RunOptions,
};
