//! Runs a [`RunSpec`] and writes its artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use jcpulse_core::iofields::{integrated_g2, pulsed_spectrum, sliced_g2, write_columns, write_correlation, write_normalized_g2, write_spectrum};
use jcpulse_core::scenarios::RunDiagnostics;
use jcpulse_core::{
    run, truncation_sweep, verify_displacement_identity, verify_homodyne_cancellation,
    CorrelationKind, CorrelationShape, DriveVariant, EquivalenceReport,
    OutputRecord, RunOptions,
};
use serde::Serialize;

use crate::config::{check_sweep, Artifact, RunSpec, SCHEMA_VERSION};
use crate::error::{exit, CliError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Everything listed under `output.artifacts`.
    Run,
    /// The equivalence check of the variant only.
    Verify,
    /// A truncation sweep over the given `n_max` values.
    Sweep(Vec<usize>),
}

impl Mode {
    fn name(&self) -> &'static str {
        match self {
            Self::Run => "run",
            Self::Verify => "verify",
            Self::Sweep(_) => "sweep",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub artifact: String,
    pub description: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub generator: String,
    pub run: String,
    pub mode: String,
    pub passed: bool,
    pub files: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ChannelSummary {
    pub photons: f64,
    /// Flux-weighted `g2(τ = 0)`.
    pub g2_zero: Option<f64>,
    /// Pulse-integrated `g2`.
    pub g2_integrated: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridSummary {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_steps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceSummary {
    pub check: String,
    pub passed: bool,
    pub informational: bool,
    pub displacement_residual: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceSummary {
    pub n_max: Vec<usize>,
    pub final_change: f64,
    pub tolerance: f64,
    pub monotone: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub run: String,
    pub mode: String,
    pub variant: String,
    pub n_max: usize,
    pub frame_frequency: f64,
    pub grid: GridSummary,
    pub channels: BTreeMap<String, ChannelSummary>,
    pub diagnostics: Option<RunDiagnostics>,
    pub equivalence: Option<EquivalenceSummary>,
    pub convergence: Option<ConvergenceSummary>,
    pub passed: bool,
}

/// What [`execute`] produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub files: Vec<ManifestEntry>,
    pub runtime: Duration,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        if self.summary.passed {
            exit::PASS
        } else {
            exit::VERIFICATION_FAILED
        }
    }

    /// One-screen human summary.
    pub fn render(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} `{}`: {} variant, n_max {}, t in [{}, {}] with dt {} ({} steps), {:.2} s",
            s.mode,
            s.run,
            s.variant,
            s.n_max,
            s.grid.t_start,
            s.grid.t_end,
            s.grid.dt,
            s.grid.n_steps,
            self.runtime.as_secs_f64()
        );
        if !s.channels.is_empty() {
            let _ = writeln!(out, "  {:<8} {:>14} {:>14} {:>14}", "channel", "photons", "g2(0)", "g2 (pulse)");
            for (name, c) in &s.channels {
                let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"));
                let _ = writeln!(
                    out,
                    "  {:<8} {:>14.6e} {:>14} {:>14}",
                    name,
                    c.photons,
                    opt(c.g2_zero),
                    opt(c.g2_integrated)
                );
            }
        }
        if let Some(d) = &s.diagnostics {
            let _ = writeln!(
                out,
                "  trace drift {:.2e}, min eigenvalue {:.2e}, top-level population {:.2e}, photon balance {:.2e}, Ehrenfest {:.2e}",
                d.evolution.max_trace_drift,
                d.evolution.min_eigenvalue,
                d.evolution.max_top_population,
                d.photon_balance,
                d.ehrenfest.max()
            );
        }
        if let Some(e) = &s.equivalence {
            let verdict = if e.informational {
                "INFO"
            } else if e.passed {
                "PASS"
            } else {
                "FAIL"
            };
            let _ = write!(out, "  {} {}", e.check, verdict);
            if let Some(r) = e.displacement_residual {
                let _ = write!(out, ", displacement residual {r:.3e}");
            }
            let _ = writeln!(out);
            for (name, v) in &e.metrics {
                let _ = writeln!(out, "    {name:<24} {v:.3e}");
            }
        }
        if let Some(c) = &s.convergence {
            let _ = writeln!(
                out,
                "  convergence over n_max {:?}: final change {:.3e} (tolerance {:.1e}) {}{}",
                c.n_max,
                c.final_change,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" },
                if c.monotone { "" } else { ", not monotone" }
            );
        }
        let _ = writeln!(out, "  {} files in {}", self.files.len(), self.dir.display());
        out
    }
}

/// Collects files in the run directory.
struct Sink {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl Sink {
    fn put(&mut self, name: &str, artifact: &str, description: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::output(&path, e))?;
        self.files.push(ManifestEntry {
            path: name.to_string(),
            artifact: artifact.to_string(),
            description: description.to_string(),
        });
        Ok(())
    }

    fn csv(
        &mut self,
        name: &str,
        artifact: Artifact,
        description: &str,
        write: impl FnOnce(&mut Vec<u8>) -> jcpulse_core::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write(&mut buf).map_err(|e| CliError::output(&self.dir.join(name), e))?;
        self.put(name, artifact.as_str(), description, &buf)
    }

    fn json<T: Serialize>(&mut self, name: &str, artifact: &str, description: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::output(&self.dir.join(name), e))?;
        text.push('\n');
        self.put(name, artifact, description, text.as_bytes())
    }
}

/// Checkpoint spacing that puts the regression rows on stored states.
fn checkpoint_stride(n_steps: usize, n_t: usize, tau_stride: usize) -> usize {
    let stride = (n_steps / (4 * n_t.max(1))).max(1);
    (stride / tau_stride).max(1) * tau_stride
}

/// Runs `spec` in `mode` and writes everything under `root/spec.output_dir`.
pub fn execute(spec: &RunSpec, mode: &Mode, root: &Path) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let artifacts = match mode {
        Mode::Run => spec.artifacts.clone(),
        Mode::Verify => [Artifact::EquivalenceReport].into(),
        Mode::Sweep(n_max) => {
            check_sweep("--nmax", n_max)?;
            [Artifact::Convergence].into()
        }
    };
    let dir = root.join(&spec.output_dir);
    fs::create_dir_all(&dir).map_err(|e| CliError::output(&dir, e))?;
    let mut sink = Sink { dir, files: Vec::new() };
    let drive = &spec.drive;
    let grid = drive.grid;
    let mut summary = Summary {
        schema_version: SCHEMA_VERSION,
        run: spec.name.clone(),
        mode: mode.name().into(),
        variant: drive.variant.name().into(),
        n_max: drive.space.n_max(),
        frame_frequency: drive.frame.frame_frequency,
        grid: GridSummary {
            t_start: grid.t_start(),
            t_end: grid.t_end(),
            dt: grid.dt(),
            n_steps: grid.n_steps(),
        },
        channels: BTreeMap::new(),
        diagnostics: None,
        equivalence: None,
        convergence: None,
        passed: true,
    };

    if *mode == Mode::Run {
        let record = simulate(spec, &artifacts)?;
        write_run(spec, &artifacts, &record, &mut sink, &mut summary)?;
    }

    if artifacts.contains(&Artifact::EquivalenceReport) {
        let report = equivalence(spec)?;
        sink.json(
            "equivalence.json",
            Artifact::EquivalenceReport.as_str(),
            "equivalence check with per-metric residuals",
            &report,
        )?;
        summary.passed &= report.passed;
        summary.equivalence = Some(EquivalenceSummary {
            check: report.check.clone(),
            passed: report.passed,
            informational: report.informational,
            displacement_residual: report.displacement_residual,
            metrics: report.metrics.iter().map(|m| (m.name.clone(), m.max_abs)).collect(),
        });
    }

    if artifacts.contains(&Artifact::Convergence) {
        let n_max = match mode {
            Mode::Sweep(list) => list.clone(),
            _ => spec.convergence.n_max.clone(),
        };
        let table = truncation_sweep(drive, &n_max).map_err(|e| CliError::core("truncation sweep", e))?;
        sink.json(
            "convergence.json",
            Artifact::Convergence.as_str(),
            "largest change of each lab-frame moment between successive truncations",
            &table,
        )?;
        let final_change = table.final_change();
        let passed = final_change < spec.convergence.tolerance;
        summary.passed &= passed;
        summary.convergence = Some(ConvergenceSummary {
            n_max,
            final_change,
            tolerance: spec.convergence.tolerance,
            monotone: table.monotone(),
            passed,
        });
    }

    sink.json("summary.json", "summary", "headline numbers of this run", &summary)?;
    let mut files = sink.files.clone();
    files.push(ManifestEntry {
        path: "manifest.json".into(),
        artifact: "manifest".into(),
        description: "this file".into(),
    });
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        generator: format!("jcpulse {}", env!("CARGO_PKG_VERSION")),
        run: spec.name.clone(),
        mode: mode.name().into(),
        passed: summary.passed,
        files: files.clone(),
    };
    sink.json("manifest.json", "manifest", "", &manifest)?;
    Ok(Outcome {
        dir: sink.dir,
        summary,
        files,
        runtime: started.elapsed(),
    })
}

fn simulate(spec: &RunSpec, artifacts: &std::collections::BTreeSet<Artifact>) -> Result<OutputRecord, CliError> {
    let c = &spec.correlation;
    let needs_states = artifacts.contains(&Artifact::G2) || artifacts.contains(&Artifact::Spectrum);
    let options = RunOptions {
        checkpoint_stride: if needs_states {
            checkpoint_stride(spec.drive.grid.n_steps(), c.n_t, c.tau_stride)
        } else {
            0
        },
        step_halving: false,
    };
    run(&spec.drive, &options).map_err(|e| CliError::core("run", e))
}

fn equivalence(spec: &RunSpec) -> Result<EquivalenceReport, CliError> {
    let drive = &spec.drive;
    match drive.variant {
        DriveVariant::AtomDrive { .. } => Err(CliError::config(
            &spec.source,
            "drive.variant",
            "equivalence checks need a cavity-driven variant (cavity_drive, displaced_frame or drop_filter)",
        )),
        DriveVariant::DropFilter { .. } => {
            let c = &spec.correlation;
            let shape = CorrelationShape {
                n_t: c.n_t,
                n_tau: c.n_tau,
                tau_stride: c.tau_stride,
            };
            verify_homodyne_cancellation(drive, &spec.verify.homodyne, &shape)
                .map_err(|e| CliError::core("homodyne check", e))
        }
        _ => verify_displacement_identity(drive, spec.verify.displacement_tolerance)
            .map_err(|e| CliError::core("displacement identity", e)),
    }
}

fn re_im(values: &[jcpulse_core::C64]) -> [Vec<f64>; 2] {
    [values.iter().map(|z| z.re).collect(), values.iter().map(|z| z.im).collect()]
}

fn write_run(
    spec: &RunSpec,
    artifacts: &std::collections::BTreeSet<Artifact>,
    record: &OutputRecord,
    sink: &mut Sink,
    summary: &mut Summary,
) -> Result<(), CliError> {
    let times = record.times();
    let dt = spec.drive.grid.dt();
    for &label in &spec.channels {
        let ch = record.channel(label).map_err(|e| CliError::core("run", e))?;
        summary.channels.insert(
            label.to_string(),
            ChannelSummary {
                photons: ch.photons,
                ..Default::default()
            },
        );
    }
    summary.diagnostics = Some(record.diagnostics);

    if artifacts.contains(&Artifact::Timeseries) {
        let m = &record.moments;
        let [a_re, a_im] = re_im(&m.cavity_field);
        let [s_re, s_im] = re_im(&m.atom_coherence);
        sink.csv(
            "moments.csv",
            Artifact::Timeseries,
            "lab-frame moments <a>, <a+a>, <sigma>, <sigma+sigma>",
            |w| {
                write_columns(
                    w,
                    &["t", "a_re", "a_im", "photons", "sigma_re", "sigma_im", "excitation"],
                    &[times.clone(), a_re, a_im, m.cavity_photons.clone(), s_re, s_im, m.atom_excitation.clone()],
                )
            },
        )?;

        let mut header = vec!["t".to_string()];
        let mut columns = vec![times.clone()];
        for &label in &spec.channels {
            let ch = record.channel(label).map_err(|e| CliError::core("run", e))?;
            let [re, im] = re_im(&ch.mean_field);
            header.extend([format!("{label}_re"), format!("{label}_im"), format!("{label}_flux")]);
            columns.extend([re, im, ch.flux.clone()]);
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        sink.csv(
            "channels.csv",
            Artifact::Timeseries,
            "output-channel mean fields and photon fluxes",
            |w| write_columns(w, &header, &columns),
        )?;

        let d = &record.derived;
        let mut header = vec!["t".to_string()];
        let mut columns = vec![times.clone()];
        for (name, field) in [("alpha", &d.alpha), ("xi", &d.xi), ("zeta", &d.zeta)] {
            if let Some(field) = field {
                let values: Vec<_> = times.iter().map(|&t| field.sample(t)).collect();
                let [re, im] = re_im(&values);
                header.extend([format!("{name}_re"), format!("{name}_im")]);
                columns.extend([re, im]);
            }
        }
        if columns.len() > 1 {
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            sink.csv(
                "derived_fields.csv",
                Artifact::Timeseries,
                "coherent fields alpha (bare cavity), xi (compensation) and zeta (equivalent atom drive)",
                |w| write_columns(w, &header, &columns),
            )?;
        }
        sink.json(
            "diagnostics.json",
            Artifact::Timeseries.as_str(),
            "state invariants, Ehrenfest residuals and photon balance",
            &record.diagnostics,
        )?;
    }

    let wants_g2 = artifacts.contains(&Artifact::G2);
    let wants_spectrum = artifacts.contains(&Artifact::Spectrum);
    if !(wants_g2 || wants_spectrum) {
        return Ok(());
    }
    let c = &spec.correlation;
    let points = record.regression_points(c.t_lo, c.t_hi, c.n_t, c.tau_stride, c.n_tau);
    for &label in &spec.channels {
        let flux = &record.channel(label).map_err(|e| CliError::core("run", e))?.flux;
        if wants_g2 {
            let (table, g2) = record
                .normalized_g2(label, &points, c.flux_floor)
                .map_err(|e| CliError::core(format!("g2 of {label}"), e))?;
            sink.csv(
                &format!("g2_raw_{label}.csv"),
                Artifact::G2,
                &format!("unnormalized G2(t, tau) of {label}"),
                |w| write_correlation(w, &table),
            )?;
            sink.csv(
                &format!("g2_{label}.csv"),
                Artifact::G2,
                &format!("normalized g2(t, tau) of {label} where both fluxes exceed the floor"),
                |w| write_normalized_g2(w, &table, &g2),
            )?;
            let sliced = sliced_g2(&table, flux);
            sink.csv(
                &format!("g2_sliced_{label}.csv"),
                Artifact::G2,
                &format!("flux-weighted g2(tau) of {label}; empty where undefined"),
                |w| write_optional(w, "tau", "g2", &table.tau, &sliced),
            )?;
            let entry = summary.channels.entry(label.to_string()).or_default();
            entry.g2_zero = sliced.first().copied().flatten();
            entry.g2_integrated = integrated_g2(&table, flux, dt);
        }
        if wants_spectrum {
            let g1 = record
                .correlation(label, CorrelationKind::G1, &points)
                .map_err(|e| CliError::core(format!("g1 of {label}"), e))?;
            let spectrum = pulsed_spectrum(&g1, &spec.spectrum.omega).map_err(|e| CliError::core(format!("spectrum of {label}"), e))?;
            let frame = spec.drive.frame.frame_frequency;
            sink.csv(
                &format!("spectrum_{label}.csv"),
                Artifact::Spectrum,
                &format!("emission spectrum of {label} against absolute frequency"),
                |w| write_spectrum(w, &spectrum, frame),
            )?;
        }
    }
    Ok(())
}

fn write_optional(w: &mut Vec<u8>, x_name: &str, y_name: &str, x: &[f64], y: &[Option<f64>]) -> jcpulse_core::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([x_name, y_name])?;
    for (x, y) in x.iter().zip(y) {
        out.write_record([format!("{x:?}"), y.map_or_else(String::new, |v| format!("{v:?}"))])?;
    }
    out.flush()?;
    Ok(())
}
