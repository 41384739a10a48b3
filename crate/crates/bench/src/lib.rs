//! Fixtures shared by the benchmarks.

use jcpulse_core::scenarios::{drive_terms, headline_config};
use jcpulse_core::{DensityMatrix, DriveConfig, Liouvillian, OperatorMatrix, SpaceConfig, C64};

/// The reference cavity-driven configuration at truncation `n_max`.
pub fn headline(n_max: usize) -> DriveConfig {
    let cfg = headline_config("cavity_drive").expect("headline config");
    cfg.with_space(SpaceConfig::new(n_max).expect("valid n_max"))
}

/// Generator of [`headline`].
pub fn generator(cfg: &DriveConfig) -> Liouvillian {
    let derived = cfg.derived_fields().expect("derived fields");
    let terms = drive_terms(cfg, &derived).expect("drive terms");
    Liouvillian::new(&cfg.params, &cfg.frame, cfg.space, terms).expect("generator")
}

/// A dense, Hermitian, unit-trace matrix to apply the generator to.
pub fn mixed_state(space: SpaceConfig) -> DensityMatrix {
    let d = space.dim();
    let v = OperatorMatrix::from_fn(d, 1, |i, _| C64::new(1.0 / (1.0 + i as f64), 0.3 * i as f64 / d as f64));
    let m = &v * v.adjoint();
    let tr = m.trace();
    DensityMatrix::new(m / tr).expect("valid state")
}
