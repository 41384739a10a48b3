//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use jcpulse_core::dynamics::{evolve, EvolveOptions, RegressionGrid};
use jcpulse_core::hilbert::{annihilation, atom_excitation, expectation, photon_number};
use jcpulse_core::iofields::{sliced_g2, ChannelLabel, ChannelOperator, CoherentOffset};
use jcpulse_core::scenarios::{
    cw_sweep, headline_config, local_maxima, run, truncation_sweep, verify_displacement_identity,
    verify_homodyne_cancellation, CorrelationShape, HomodyneTolerances, OutputRecord, RunOptions,
    DISPLACEMENT_TOLERANCE,
};
use jcpulse_core::{
    cavity_filter, filtered_field, CorrelationKind, DriveConfig, DriveVariant, FrameConfig,
    PulseEnvelope, SpaceConfig, SystemParams, TimeGrid, C64,
};

const TRACE_DRIFT: f64 = 1e-8;
const MIN_EIGENVALUE: f64 = -1e-8;
const PHOTON_BALANCE: f64 = 1e-6;
const EHRENFEST: f64 = 1e-6;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

/// Conservation figures of one run, collected for criterion 7.
struct Conservation {
    name: String,
    trace_drift: f64,
    min_eigenvalue: f64,
    photon_balance: f64,
    ehrenfest: f64,
}

impl Conservation {
    fn of(name: impl Into<String>, rec: &OutputRecord) -> Self {
        let d = &rec.diagnostics;
        Self {
            name: name.into(),
            trace_drift: d.evolution.max_trace_drift,
            min_eigenvalue: d.evolution.min_eigenvalue,
            photon_balance: d.photon_balance,
            ehrenfest: d.ehrenfest.max(),
        }
    }

    fn passed(&self) -> bool {
        self.trace_drift <= TRACE_DRIFT
            && self.min_eigenvalue >= MIN_EIGENVALUE
            && self.photon_balance <= PHOTON_BALANCE
            && self.ehrenfest <= EHRENFEST
    }
}

#[derive(Default)]
struct Suite {
    conservation: Vec<Conservation>,
    notes: Vec<String>,
}

fn info(suite: &mut Suite, line: String) {
    println!("    info: {line}");
    suite.notes.push(line);
}

fn options_with_checkpoints(stride: usize) -> RunOptions {
    RunOptions {
        checkpoint_stride: stride,
        step_halving: false,
    }
}

fn bare_cavity_config(beta: PulseEnvelope) -> DriveConfig {
    let params = SystemParams {
        omega0: 0.7,
        omega_atom: 0.0,
        g: 0.0,
        kappa: 1.0,
        gamma: 1.0,
    };
    DriveConfig::new(
        DriveVariant::CavityDrive { beta },
        params,
        SpaceConfig::new(12).unwrap(),
        TimeGrid::new(0.0, 32.0, 0.0025).unwrap(),
        FrameConfig::new(0.5).unwrap(),
    )
    .unwrap()
}

fn criterion_1(suite: &mut Suite) -> Outcome {
    let started = Instant::now();
    let pulses = [
        (
            "gaussian",
            PulseEnvelope::gaussian(C64::new(0.4, 0.15), 16.0, 2.0).with_detuning(0.3),
        ),
        ("square", PulseEnvelope::square(C64::new(0.25, -0.1), 2.0, 9.0)),
        (
            "ramped",
            PulseEnvelope::ramped_constant(C64::new(0.0, 0.2), 1.0, 2.0).with_detuning(-0.2),
        ),
    ];
    let mut worst_field = 0.0_f64;
    let mut worst_g2 = 0.0_f64;
    let mut defined = 0usize;
    for (name, beta) in pulses {
        let cfg = bare_cavity_config(beta.clone());
        let rec = run(&cfg, &options_with_checkpoints(100)).unwrap();
        let kernel = cavity_filter(&cfg.params, &cfg.frame).unwrap();
        let alpha = filtered_field(&beta, &kernel, &cfg.grid).unwrap();
        let field_err = rec
            .times()
            .iter()
            .zip(&rec.moments.cavity_field)
            .map(|(&t, a)| (a - alpha.sample(t)).norm())
            .fold(0.0, f64::max);
        let points = rec.regression_points(0.0, 28.0, 12, 100, 12);
        let (_, g2) = rec.normalized_g2(ChannelLabel::BOut, &points, 1e-8).unwrap();
        let mut g2_err = 0.0_f64;
        for v in g2.iter().flatten().flatten() {
            g2_err = g2_err.max((v - 1.0).abs());
            defined += 1;
        }
        info(
            suite,
            format!("c1 {name}: max |<a> - alpha| = {field_err:.3e}, max |g2 - 1| = {g2_err:.3e}"),
        );
        worst_field = worst_field.max(field_err);
        worst_g2 = worst_g2.max(g2_err);
        suite
            .conservation
            .push(Conservation::of(format!("bare cavity {name}"), &rec));
    }
    let elapsed = started.elapsed().as_secs_f64();
    Outcome::new(
        worst_field <= 1e-8 && worst_g2 <= 1e-8 && defined > 0 && elapsed < 5.0,
        format!(
            "bare cavity: field error {worst_field:.3e} (tol 1e-8), g2 error {worst_g2:.3e} over {defined} points (tol 1e-8), {elapsed:.2} s (limit 5 s)"
        ),
    )
}

fn criterion_2(suite: &mut Suite) -> Outcome {
    let started = Instant::now();
    let cfg = headline_config("cavity_drive").unwrap();
    let coarse = verify_displacement_identity(&cfg, DISPLACEMENT_TOLERANCE).unwrap();
    let fine = verify_displacement_identity(&cfg.with_grid(cfg.grid.refined()), DISPLACEMENT_TOLERANCE)
        .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let (r1, r2) = (
        coarse.displacement_residual.unwrap(),
        fine.displacement_residual.unwrap(),
    );
    let shrink = r1 / r2;

    // Larger truncation for comparison (not part of the criterion).
    let big = cfg.with_space(SpaceConfig::new(30).unwrap());
    for grid in [big.grid, big.grid.refined()] {
        let rep = verify_displacement_identity(&big.with_grid(grid), DISPLACEMENT_TOLERANCE).unwrap();
        info(
            suite,
            format!(
                "c2 n_max = 30, dt = {}: residual {:.3e}",
                grid.dt(),
                rep.displacement_residual.unwrap()
            ),
        );
    }
    Outcome::new(
        r1 <= DISPLACEMENT_TOLERANCE && shrink >= 8.0 && elapsed < 60.0,
        format!(
            "displacement identity at n_max = 15: residual {r1:.3e} at dt = {}, {r2:.3e} at dt = {} (tol 1e-6), shrink {shrink:.2}x (need >= 8x), {elapsed:.1} s (limit 60 s)",
            cfg.grid.dt(),
            cfg.grid.refined().dt()
        ),
    )
}

fn criterion_3(suite: &mut Suite) -> Outcome {
    let started = Instant::now();
    let cfg = headline_config("drop_filter").unwrap();
    let shape = CorrelationShape {
        n_t: 20,
        n_tau: 20,
        tau_stride: 25,
    };
    let rep = verify_homodyne_cancellation(&cfg, &HomodyneTolerances::default(), &shape).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let m = |n: &str| rep.metric(n).unwrap().max_abs;
    for note in &rep.notes {
        info(suite, format!("c3 {note}"));
    }
    Outcome::new(
        rep.passed && elapsed < 300.0,
        format!(
            "homodyne cancellation: mean-field ratio error {:.3e}, flux ratio error {:.3e}, g2 difference {:.3e} (tol 1e-6 each), {elapsed:.1} s (limit 300 s)",
            m("mean_field_ratio"),
            m("flux_ratio"),
            m("normalized_g2")
        ),
    )
}

fn criterion_4(suite: &mut Suite) -> Outcome {
    let (gamma, zeta) = (1.0, C64::new(0.35, -0.2));
    let params = SystemParams::resonant(0.0, 1.0, gamma);
    let space = SpaceConfig::new(2).unwrap();
    let frame = FrameConfig::new(0.0).unwrap();
    let cfg = DriveConfig::new(
        DriveVariant::AtomDrive {
            zeta: PulseEnvelope::ramped_constant(zeta, 0.0, 0.0),
        },
        params,
        space,
        TimeGrid::new(0.0, 40.0, 0.02).unwrap(),
        frame,
    )
    .unwrap();
    let rec = run(&cfg, &options_with_checkpoints(50)).unwrap();

    // Optical Bloch steady state.
    let s2 = zeta.norm_sqr();
    let n_ss = 4.0 * s2 / (gamma + 8.0 * s2);
    let sigma_ss = zeta * (2.0 / gamma.sqrt()) * (2.0 * n_ss - 1.0);
    let n_end = *rec.moments.atom_excitation.last().unwrap();
    let s_end = *rec.moments.atom_coherence.last().unwrap();
    let steady_err = (n_end - n_ss).abs().max((s_end - sigma_ss).norm());

    // Fluorescence: c_out with the coherent drive reflection removed.
    let c = &rec.channel(ChannelLabel::COut).unwrap().operator;
    let fluorescence = ChannelOperator::new(ChannelLabel::COut, c.system_part.clone(), CoherentOffset::zero());
    let points = RegressionGrid::spread(50, cfg.grid.n_steps(), 40, 50, 1, 1);
    let table = jcpulse_core::two_time_correlation(
        CorrelationKind::G2,
        &fluorescence,
        &rec.trajectory,
        &rec.generator,
        &points,
    )
    .unwrap();
    let mut g2_max = 0.0_f64;
    for (&k, row) in points.t_indices.iter().zip(&table.values) {
        let rho = rec.trajectory.checkpoint(k).unwrap();
        let f = gamma * expectation(rho, &atom_excitation(space)).unwrap().re;
        g2_max = g2_max.max(row[0].unwrap().norm() / (f * f));
    }
    info(
        suite,
        format!("c4 steady state <N> = {n_end:.12} vs {n_ss:.12}; <sigma> = {s_end:.9} vs {sigma_ss:.9}"),
    );
    suite
        .conservation
        .push(Conservation::of("two-level CW atom drive", &rec));
    Outcome::new(
        steady_err <= 1e-6 && g2_max <= 1e-8,
        format!(
            "two-level atom: steady-state error {steady_err:.3e} (tol 1e-6), max |g2(t,0)| {g2_max:.3e} (tol 1e-8)"
        ),
    )
}

fn criterion_5(suite: &mut Suite) -> Outcome {
    let (kappa, g) = (1.0, 10.0);
    let params = SystemParams::resonant(g, kappa, kappa);
    let step = 0.1 * kappa;
    let freqs: Vec<f64> = (-150..=150).map(|i| i as f64 * step).collect();
    let sweep = cw_sweep(&params, SpaceConfig::new(3).unwrap(), C64::new(0.02, 0.0), &freqs).unwrap();
    let emission: Vec<f64> = sweep.iter().map(|p| p.atom_emission).collect();
    let leakage: Vec<f64> = sweep.iter().map(|p| p.cavity_leakage).collect();
    let two_largest = |v: &[f64]| {
        let mut peaks = local_maxima(v);
        peaks.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
        let mut f: Vec<f64> = peaks.iter().take(2).map(|&i| freqs[i]).collect();
        f.sort_by(|a, b| a.partial_cmp(b).unwrap());
        f
    };
    let (pe, pl) = (two_largest(&emission), two_largest(&leakage));
    let near = |f: &[f64]| {
        f.len() == 2 && (f[0] + g).abs() <= step + 1e-12 && (f[1] - g).abs() <= step + 1e-12
    };
    info(suite, format!("c5 cavity-leakage maxima at {pl:?}"));
    Outcome::new(
        near(&pe) && near(&pl),
        format!(
            "polariton doublet: c_out flux maxima at {pe:?}, expected {:?} within {step}",
            [-g, g]
        ),
    )
}

/// Weak Gaussian pulse on the strongly coupled system, carrier at `carrier` (lab).
fn blockade_config(variant: &str, carrier: f64) -> DriveConfig {
    let params = SystemParams::resonant(10.0, 1.0, 1.0);
    let beta = PulseEnvelope::gaussian(C64::new(0.02, 0.0), 40.0, 5.0);
    let variant = match variant {
        "cavity" => DriveVariant::CavityDrive { beta },
        _ => DriveVariant::DropFilter {
            beta,
            compensation: true,
        },
    };
    DriveConfig::new(
        variant,
        params,
        SpaceConfig::new(4).unwrap(),
        TimeGrid::new(0.0, 80.0, TimeGrid::default_step(&params)).unwrap(),
        FrameConfig::new(carrier).unwrap(),
    )
    .unwrap()
}

/// `∫⟨a†²a²⟩dt / ∫⟨a†a⟩²dt` over the run.
fn intracavity_g2(cfg: &DriveConfig) -> (f64, OutputRecord) {
    let rec = run(cfg, &RunOptions::default()).unwrap();
    let space = cfg.space;
    let a = annihilation(space);
    let a2 = &a * &a;
    let obs = [a2.adjoint() * &a2, photon_number(space)];
    let traj = evolve(
        &cfg.initial_state(),
        &cfg.grid,
        &rec.generator,
        &obs,
        &EvolveOptions::default(),
    )
    .unwrap();
    let num: f64 = traj.expectations[0].iter().map(|z| z.re).sum();
    let den: f64 = traj.expectations[1].iter().map(|z| z.re * z.re).sum();
    (num / den, rec)
}

/// Sliced `g2(0)` of a drop-filter port.
fn port_g2(cfg: &DriveConfig, label: ChannelLabel) -> f64 {
    let rec = run(cfg, &options_with_checkpoints(4)).unwrap();
    let points = rec.regression_points(cfg.grid.t_start(), cfg.grid.t_end(), 400, 1, 1);
    let table = rec.correlation(label, CorrelationKind::G2, &points).unwrap();
    sliced_g2(&table, &rec.channel(label).unwrap().flux)[0].unwrap()
}

fn criterion_6(suite: &mut Suite) -> Outcome {
    let g = 10.0;
    let (blockade, rec_b) = intracavity_g2(&blockade_config("cavity", g));
    let (tunnel, rec_t) = intracavity_g2(&blockade_config("cavity", 0.0));
    suite
        .conservation
        .push(Conservation::of("blockade pulse at w0 + g", &rec_b));
    suite
        .conservation
        .push(Conservation::of("tunnelling pulse at w0", &rec_t));
    for (name, carrier) in [("w0 + g", g), ("w0", 0.0)] {
        let e = port_g2(&blockade_config("drop", carrier), ChannelLabel::EOut);
        info(suite, format!("c6 compensated e_out g2(0) at carrier {name}: {e:.6}"));
    }
    Outcome::new(
        blockade < 1.0 && tunnel > 1.0,
        format!(
            "blockade/tunnelling: cavity g2(0) = {blockade:.4} at w0 + g (need < 1), {tunnel:.4} at w0 (need > 1)"
        ),
    )
}

fn criterion_7(suite: &mut Suite) -> Outcome {
    for variant in ["cavity_drive", "displaced_frame", "drop_filter", "atom_drive"] {
        let rec = run(&headline_config(variant).unwrap(), &RunOptions::default()).unwrap();
        suite
            .conservation
            .push(Conservation::of(format!("headline {variant}"), &rec));
    }
    let mut failed = Vec::new();
    for c in &suite.conservation {
        println!(
            "    info: c7 {}: trace drift {:.2e}, min eigenvalue {:.2e}, photon balance {:.2e}, Ehrenfest {:.2e}{}",
            c.name,
            c.trace_drift,
            c.min_eigenvalue,
            c.photon_balance,
            c.ehrenfest,
            if c.passed() { "" } else { "  <-- FAIL" }
        );
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    Outcome::new(
        failed.is_empty(),
        format!(
            "conservation over {} runs (trace 1e-8, eigenvalue -1e-8, balance 1e-6, Ehrenfest 1e-6); failing: {failed:?}",
            suite.conservation.len()
        ),
    )
}

fn criterion_8(suite: &mut Suite) -> Outcome {
    let mut changes = BTreeMap::new();
    for variant in ["cavity_drive", "displaced_frame", "atom_drive"] {
        let table = truncation_sweep(&headline_config(variant).unwrap(), &[15, 20]).unwrap();
        for (name, v) in &table.rows[0].max_change {
            info(suite, format!("c8 {variant} {name}: {v:.3e}"));
        }
        changes.insert(variant, table.final_change());
    }
    let worst = changes.values().copied().fold(0.0, f64::max);
    Outcome::new(
        worst < 1e-7,
        format!("truncation n_max 15 -> 20: largest change per variant {changes:?} (tol 1e-7)"),
    )
}

fn main() -> ExitCode {
    let mut suite = Suite::default();
    let criteria: [(&str, fn(&mut Suite) -> Outcome); 8] = [
        ("1", criterion_1),
        ("2", criterion_2),
        ("3", criterion_3),
        ("4", criterion_4),
        ("5", criterion_5),
        ("6", criterion_6),
        ("7", criterion_7),
        ("8", criterion_8),
    ];
    let mut failures = 0;
    let mut lines = Vec::new();
    for (id, f) in criteria {
        let out = f(&mut suite);
        let line = format!(
            "[{}] criterion {id}: {}",
            if out.passed { "PASS" } else { "FAIL" },
            out.detail
        );
        println!("{line}");
        lines.push(line);
        if !out.passed {
            failures += 1;
        }
    }
    println!("\nacceptance summary:");
    for line in &lines {
        println!("{line}");
    }
    println!("{} of {} criteria passed", lines.len() - failures, lines.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
