//! TOML run configuration.
//!
//! See `docs/config.md` for the schema. Every physics parameter must be given
//! explicitly; unknown keys are rejected.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use jcpulse_core::{
    ChannelLabel, DriveConfig, DriveVariant, FrameConfig, HomodyneTolerances, PulseEnvelope,
    SpaceConfig, SystemParams, TabulatedEnvelope, TimeGrid, C64,
};
use serde::Deserialize;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Files a run can produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Artifact {
    Timeseries,
    G2,
    Spectrum,
    EquivalenceReport,
    Convergence,
}

impl Artifact {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Timeseries => "timeseries",
            Self::G2 => "g2",
            Self::Spectrum => "spectrum",
            Self::EquivalenceReport => "equivalence-report",
            Self::Convergence => "convergence",
        }
    }
}

/// Regression grid for `g2` and spectra.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationSettings {
    pub n_t: usize,
    pub n_tau: usize,
    /// τ spacing in grid steps.
    pub tau_stride: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub flux_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSettings {
    /// Frequencies relative to the frame.
    pub omega: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceSettings {
    pub n_max: Vec<usize>,
    pub tolerance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifySettings {
    pub displacement_tolerance: f64,
    pub homodyne: HomodyneTolerances,
}

/// A validated run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub source: PathBuf,
    pub drive: DriveConfig,
    /// Relative to the output root.
    pub output_dir: PathBuf,
    pub artifacts: BTreeSet<Artifact>,
    pub channels: Vec<ChannelLabel>,
    pub correlation: CorrelationSettings,
    pub spectrum: SpectrumSettings,
    pub convergence: ConvergenceSettings,
    pub verify: VerifySettings,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[allow(dead_code)]
    schema_version: u32,
    params: SystemParams,
    #[serde(default)]
    frame: RawFrame,
    space: RawSpace,
    #[serde(default)]
    grid: RawGrid,
    drive: RawDrive,
    #[serde(default)]
    output: RawOutput,
    #[serde(default)]
    correlation: RawCorrelation,
    #[serde(default)]
    spectrum: RawSpectrum,
    #[serde(default)]
    convergence: RawConvergence,
    #[serde(default)]
    verify: RawVerify,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    frequency: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpace {
    n_max: usize,
    truncation_tolerance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    t_start: Option<f64>,
    t_end: Option<f64>,
    dt: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum VariantName {
    AtomDrive,
    CavityDrive,
    DisplacedFrame,
    DropFilter,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDrive {
    variant: VariantName,
    compensation: Option<bool>,
    pulse: RawPulse,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
enum Amplitude {
    Real(f64),
    Complex([f64; 2]),
}

impl Amplitude {
    fn value(self) -> C64 {
        match self {
            Self::Real(re) => C64::new(re, 0.0),
            Self::Complex([re, im]) => C64::new(re, im),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawPulse {
    Gaussian {
        amplitude: Amplitude,
        center: f64,
        width: f64,
        detuning: Option<f64>,
        carrier: Option<f64>,
    },
    Square {
        amplitude: Amplitude,
        start: f64,
        stop: f64,
        detuning: Option<f64>,
        carrier: Option<f64>,
    },
    RampedConstant {
        amplitude: Amplitude,
        start: f64,
        ramp: f64,
        detuning: Option<f64>,
        carrier: Option<f64>,
    },
    Tabulated {
        file: PathBuf,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<PathBuf>,
    artifacts: Option<Vec<Artifact>>,
    channels: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorrelation {
    n_t: Option<usize>,
    n_tau: Option<usize>,
    tau_spacing: Option<f64>,
    t_lo: Option<f64>,
    t_hi: Option<f64>,
    flux_floor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpectrum {
    omega_min: Option<f64>,
    omega_max: Option<f64>,
    points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConvergence {
    n_max: Option<Vec<usize>>,
    tolerance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerify {
    displacement_tolerance: Option<f64>,
    ratio_tolerance: Option<f64>,
    g2_tolerance: Option<f64>,
    flux_floor: Option<f64>,
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(path, "", format!("cannot read: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let mut spec = parse_str(&text, base, &stem).map_err(|e| e.with_file(path))?;
    spec.source = path.to_path_buf();
    Ok(spec)
}

/// Parses configuration text; relative file references resolve against `base`.
pub fn parse_str(text: &str, base: &Path, name: &str) -> Result<RunSpec, CliError> {
    let value: toml::Table = toml::from_str(text).map_err(|e| CliError::config("", "", e.message().to_string()))?;
    match value.get("schema_version") {
        None => return Err(CliError::config("", "schema_version", "missing")),
        Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
        Some(other) => {
            return Err(CliError::config(
                "",
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {other}"),
            ))
        }
    }
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let key = e.span().map(|s| key_at(text, s.start)).unwrap_or_default();
        CliError::config("", key, e.message().to_string())
    })?;
    build(raw, base, name)
}

/// Best-effort dotted key of the TOML entry covering byte offset `pos`.
fn key_at(text: &str, pos: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if offset > pos {
            break;
        }
        let trimmed = line.trim();
        if let Some(s) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = s.trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
    }
    match (section.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

fn core_err(section: &str, e: jcpulse_core::Error) -> CliError {
    match e {
        jcpulse_core::Error::InvalidParameter { field, reason } => {
            CliError::config("", format!("{section}.{field}"), reason)
        }
        other => CliError::config("", section, other.to_string()),
    }
}

fn positive(key: &str, v: f64) -> Result<f64, CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(CliError::config("", key, format!("must be finite and > 0, got {v}")))
    }
}

fn build(raw: RawConfig, base: &Path, name: &str) -> Result<RunSpec, CliError> {
    let params = raw.params;
    params.validate().map_err(|e| core_err("params", e))?;
    let frame_frequency = raw.frame.frequency.unwrap_or(params.omega0);
    let frame = FrameConfig::new(frame_frequency).map_err(|_| CliError::config("", "frame.frequency", "must be finite"))?;
    let space = SpaceConfig::new(raw.space.n_max).map_err(|e| core_err("space", e))?;

    let pulse = build_pulse(raw.drive.pulse, base, frame_frequency)?;
    let grid = build_grid(&raw.grid, &params, &pulse)?;
    let cavity_driven = !matches!(raw.drive.variant, VariantName::AtomDrive);
    let pulse = match pulse {
        PulseEnvelope::Tabulated(table) if cavity_driven => {
            let times = grid.half_step_times();
            let values = times.iter().map(|&t| table.sample(t)).collect();
            PulseEnvelope::Tabulated(TabulatedEnvelope::new(times, values).map_err(|e| core_err("drive.pulse", e))?)
        }
        other => other,
    };
    let variant = match (raw.drive.variant, raw.drive.compensation) {
        (VariantName::DropFilter, c) => DriveVariant::DropFilter {
            beta: pulse,
            compensation: c.unwrap_or(true),
        },
        (_, Some(_)) => {
            return Err(CliError::config(
                "",
                "drive.compensation",
                "only the drop_filter variant has a compensation field",
            ))
        }
        (VariantName::AtomDrive, None) => DriveVariant::AtomDrive { zeta: pulse },
        (VariantName::CavityDrive, None) => DriveVariant::CavityDrive { beta: pulse },
        (VariantName::DisplacedFrame, None) => DriveVariant::DisplacedFrame { beta: pulse },
    };

    let mut drive = DriveConfig::new(variant, params, space, grid, frame).map_err(|e| match e {
        jcpulse_core::Error::GridTooCoarse { .. } => CliError::config("", "grid.dt", e.to_string()),
        jcpulse_core::Error::InvalidParameter { field, reason } => {
            let section = match field {
                "kappa" | "gamma" | "g" | "omega0" | "omega_atom" => "params",
                _ => "drive.pulse",
            };
            CliError::config("", format!("{section}.{field}"), reason)
        }
        other => CliError::config("", "drive", other.to_string()),
    })?;
    if let Some(tol) = raw.space.truncation_tolerance {
        drive.truncation_tolerance = positive("space.truncation_tolerance", tol)?;
    }

    let available = drive.variant.channels();
    let channels = match raw.output.channels {
        None => available.to_vec(),
        Some(list) => {
            let mut out = Vec::new();
            for s in list {
                let label: ChannelLabel = s
                    .parse()
                    .map_err(|_| CliError::config("", "output.channels", format!("unknown channel `{s}`")))?;
                if !available.contains(&label) {
                    return Err(CliError::config(
                        "",
                        "output.channels",
                        format!("{label} is not produced by the {} variant", drive.variant.name()),
                    ));
                }
                if !out.contains(&label) {
                    out.push(label);
                }
            }
            out
        }
    };
    let artifacts: BTreeSet<Artifact> = raw
        .output
        .artifacts
        .unwrap_or_else(|| vec![Artifact::Timeseries])
        .into_iter()
        .collect();
    if artifacts.contains(&Artifact::EquivalenceReport) && matches!(drive.variant, DriveVariant::AtomDrive { .. }) {
        return Err(CliError::config(
            "",
            "output.artifacts",
            "equivalence-report needs a cavity-driven variant",
        ));
    }

    let correlation = build_correlation(&raw.correlation, &drive.grid)?;
    let spectrum = build_spectrum(&raw.spectrum, &params)?;
    let convergence = ConvergenceSettings {
        n_max: raw
            .convergence
            .n_max
            .unwrap_or_else(|| vec![space.n_max(), space.n_max() + 5]),
        tolerance: positive("convergence.tolerance", raw.convergence.tolerance.unwrap_or(1e-7))?,
    };
    check_sweep("convergence.n_max", &convergence.n_max)?;
    let defaults = HomodyneTolerances::default();
    let verify = VerifySettings {
        displacement_tolerance: positive(
            "verify.displacement_tolerance",
            raw.verify
                .displacement_tolerance
                .unwrap_or(jcpulse_core::scenarios::DISPLACEMENT_TOLERANCE),
        )?,
        homodyne: HomodyneTolerances {
            ratio: positive("verify.ratio_tolerance", raw.verify.ratio_tolerance.unwrap_or(defaults.ratio))?,
            g2: positive("verify.g2_tolerance", raw.verify.g2_tolerance.unwrap_or(defaults.g2))?,
            flux_floor: positive("verify.flux_floor", raw.verify.flux_floor.unwrap_or(defaults.flux_floor))?,
        },
    };
    let output_dir = raw.output.directory.unwrap_or_else(|| PathBuf::from(name));
    if output_dir.is_absolute() || output_dir.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(CliError::config(
            "",
            "output.directory",
            "must be a relative path inside the output root",
        ));
    }
    Ok(RunSpec {
        name: name.to_string(),
        source: PathBuf::new(),
        drive,
        output_dir,
        artifacts,
        channels,
        correlation,
        spectrum,
        convergence,
        verify,
    })
}

/// Truncations of a sweep: at least two, strictly increasing.
pub fn check_sweep(key: &str, n_max: &[usize]) -> Result<(), CliError> {
    if n_max.len() < 2 {
        return Err(CliError::config("", key, "a sweep needs at least two truncations"));
    }
    if n_max.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::config("", key, "truncations must increase strictly"));
    }
    Ok(())
}

fn detuning_of(detuning: Option<f64>, carrier: Option<f64>, frame_frequency: f64) -> Result<f64, CliError> {
    match (detuning, carrier) {
        (Some(_), Some(_)) => Err(CliError::config(
            "",
            "drive.pulse.carrier",
            "inconsistent frame: give either `detuning` (relative to the frame) or `carrier` (absolute), not both",
        )),
        (Some(d), None) => Ok(d),
        (None, Some(c)) => Ok(c - frame_frequency),
        (None, None) => Ok(0.0),
    }
}

fn build_pulse(raw: RawPulse, base: &Path, frame_frequency: f64) -> Result<PulseEnvelope, CliError> {
    let pulse = match raw {
        RawPulse::Gaussian {
            amplitude,
            center,
            width,
            detuning,
            carrier,
        } => PulseEnvelope::gaussian(amplitude.value(), center, width)
            .with_detuning(detuning_of(detuning, carrier, frame_frequency)?),
        RawPulse::Square {
            amplitude,
            start,
            stop,
            detuning,
            carrier,
        } => PulseEnvelope::square(amplitude.value(), start, stop)
            .with_detuning(detuning_of(detuning, carrier, frame_frequency)?),
        RawPulse::RampedConstant {
            amplitude,
            start,
            ramp,
            detuning,
            carrier,
        } => PulseEnvelope::ramped_constant(amplitude.value(), start, ramp)
            .with_detuning(detuning_of(detuning, carrier, frame_frequency)?),
        RawPulse::Tabulated { file } => {
            let path = base.join(&file);
            let reader = fs::File::open(&path).map_err(|e| {
                CliError::config("", "drive.pulse.file", format!("cannot open {}: {e}", path.display()))
            })?;
            let table = TabulatedEnvelope::read_csv(reader)
                .map_err(|e| CliError::config("", "drive.pulse.file", format!("{}: {e}", path.display())))?;
            PulseEnvelope::Tabulated(table)
        }
    };
    pulse.validate().map_err(|e| core_err("drive.pulse", e))?;
    Ok(pulse)
}

fn build_grid(raw: &RawGrid, params: &SystemParams, pulse: &PulseEnvelope) -> Result<TimeGrid, CliError> {
    let t_start = raw.t_start.unwrap_or(0.0);
    let dt = match raw.dt {
        Some(dt) => positive("grid.dt", dt)?,
        None => TimeGrid::default_step(params),
    };
    let t_end = match raw.t_end {
        Some(t) => t,
        None => {
            let (_, end) = pulse.support();
            let slowest = [params.kappa, params.gamma]
                .into_iter()
                .filter(|r| *r > 0.0)
                .fold(f64::INFINITY, f64::min);
            if !end.is_finite() || !slowest.is_finite() {
                return Err(CliError::config(
                    "",
                    "grid.t_end",
                    "required when the pulse never ends or nothing decays",
                ));
            }
            end.max(t_start) + 10.0 / slowest
        }
    };
    TimeGrid::new(t_start, t_end, dt).map_err(|e| core_err("grid", e))
}

fn build_correlation(raw: &RawCorrelation, grid: &TimeGrid) -> Result<CorrelationSettings, CliError> {
    let n_t = raw.n_t.unwrap_or(20);
    let n_tau = raw.n_tau.unwrap_or(20);
    if n_t == 0 || n_tau == 0 {
        return Err(CliError::config("", "correlation", "n_t and n_tau must be >= 1"));
    }
    let tau_stride = match raw.tau_spacing {
        None => 10,
        Some(spacing) => {
            let ratio = positive("correlation.tau_spacing", spacing)? / grid.dt();
            let stride = ratio.round();
            if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio.max(1.0) {
                return Err(CliError::config(
                    "",
                    "correlation.tau_spacing",
                    format!("must be a positive integer multiple of dt = {}", grid.dt()),
                ));
            }
            stride as usize
        }
    };
    let t_lo = raw.t_lo.unwrap_or(grid.t_start());
    let t_hi = raw.t_hi.unwrap_or(grid.t_end());
    if !(t_lo.is_finite() && t_hi.is_finite() && t_lo <= t_hi) {
        return Err(CliError::config("", "correlation.t_hi", "need finite t_lo <= t_hi"));
    }
    let flux_floor = positive("correlation.flux_floor", raw.flux_floor.unwrap_or(1e-8))?;
    Ok(CorrelationSettings {
        n_t,
        n_tau,
        tau_stride,
        t_lo,
        t_hi,
        flux_floor,
    })
}

fn build_spectrum(raw: &RawSpectrum, params: &SystemParams) -> Result<SpectrumSettings, CliError> {
    let half = params.g + 4.0 * params.kappa.max(params.gamma).max(0.25);
    let lo = raw.omega_min.unwrap_or(-half);
    let hi = raw.omega_max.unwrap_or(half);
    let points = raw.points.unwrap_or(401);
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(CliError::config("", "spectrum.omega_max", "need finite omega_min < omega_max"));
    }
    if points < 2 {
        return Err(CliError::config("", "spectrum.points", "must be >= 2"));
    }
    let step = (hi - lo) / (points - 1) as f64;
    Ok(SpectrumSettings {
        omega: (0..points).map(|k| lo + step * k as f64).collect(),
    })
}
