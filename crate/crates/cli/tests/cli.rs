use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jcpulse_cli::{parse_config, parse_str, Artifact};
use jcpulse_core::{ChannelLabel, DriveVariant, PulseEnvelope};

const SMALL: &str = r#"
schema_version = 1
[params]
omega0 = 0.0
omega_atom = 0.0
g = 1.0
kappa = 1.0
gamma = 1.0
[space]
n_max = 4
[grid]
t_end = 10.0
[drive]
variant = "VARIANT"
[drive.pulse]
kind = "gaussian"
amplitude = AMP
center = 3.0
width = 0.5
"#;

fn small(variant: &str, amp: &str) -> String {
    SMALL.replace("VARIANT", variant).replace("AMP", amp)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn jcpulse(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jcpulse"))
        .args(args)
        .env("JCPULSE_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn minimal_config_gets_documented_defaults() {
    let text = r#"
schema_version = 1
[params]
omega0 = 3.0
omega_atom = 3.0
g = 1.0
kappa = 2.0
gamma = 0.5
[space]
n_max = 6
[drive]
variant = "displaced_frame"
pulse = { kind = "gaussian", amplitude = [0.5, 0.0], center = 5.0, width = 1.0 }
"#;
    let spec = parse_str(text, Path::new("."), "minimal").unwrap();
    let grid = spec.drive.grid;
    assert_eq!(grid.t_start(), 0.0);
    assert!((grid.dt() - 0.01).abs() < 1e-15, "dt = min(0.02/kappa, 0.02/gamma, 0.02*2pi/g)");
    assert!((grid.t_end() - (5.0 + 7.5 + 10.0 / 0.5)).abs() < grid.dt());
    assert_eq!(spec.drive.frame.frame_frequency, 3.0);
    assert_eq!(spec.artifacts, BTreeSet::from([Artifact::Timeseries]));
    assert_eq!(spec.channels, vec![ChannelLabel::BOut, ChannelLabel::COut]);
    assert_eq!(spec.output_dir, PathBuf::from("minimal"));
    assert_eq!(spec.convergence.n_max, vec![6, 11]);
    assert_eq!(spec.convergence.tolerance, 1e-7);
    assert_eq!(spec.verify.displacement_tolerance, 1e-6);
    assert_eq!((spec.correlation.n_t, spec.correlation.n_tau), (20, 20));
    assert!(matches!(spec.drive.variant, DriveVariant::DisplacedFrame { .. }));
}

#[test]
fn negative_kappa_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "bad.toml", &small("cavity_drive", "0.3").replace("kappa = 1.0", "kappa = -1.0"));
    let err = parse_config(&path).unwrap_err();
    assert!(err.to_string().contains("`params.kappa`"), "{err}");
    let out = jcpulse(dir.path(), &["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("params.kappa"));
}

#[test]
fn missing_physics_parameter_is_an_error() {
    let text = small("cavity_drive", "0.3").replace("gamma = 1.0\n", "");
    let err = parse_str(&text, Path::new("."), "x").unwrap_err();
    assert!(err.to_string().contains("gamma"), "{err}");
}

#[test]
fn unknown_keys_are_rejected() {
    let text = small("cavity_drive", "0.3").replace("[space]\n", "[space]\ncutoff = 3\n");
    let err = parse_str(&text, Path::new("."), "x").unwrap_err();
    assert!(err.to_string().contains("cutoff"), "{err}");
}

#[test]
fn schema_version_must_match() {
    let text = small("cavity_drive", "0.3").replace("schema_version = 1", "schema_version = 2");
    let err = parse_str(&text, Path::new("."), "x").unwrap_err();
    assert!(err.to_string().contains("schema_version"), "{err}");
}

#[test]
fn coarse_step_is_rejected() {
    let text = small("cavity_drive", "0.3").replace("t_end = 10.0", "t_end = 10.0\ndt = 0.5");
    let err = parse_str(&text, Path::new("."), "x").unwrap_err();
    assert!(err.to_string().contains("grid.dt"), "{err}");
}

#[test]
fn non_monotonic_table_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pulse.csv", "t,re,im\n0.0,0.1,0.0\n1.0,0.2,0.0\n0.5,0.1,0.0\n");
    let text = small("cavity_drive", "0.3").replace(
        "kind = \"gaussian\"\namplitude = 0.3\ncenter = 3.0\nwidth = 0.5\n",
        "kind = \"tabulated\"\nfile = \"pulse.csv\"\n",
    );
    let path = write(dir.path(), "tab.toml", &text);
    let err = parse_config(&path).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("drive.pulse.file") && msg.contains("strictly increasing"), "{msg}");
}

#[test]
fn tabulated_cavity_pulse_is_resampled_onto_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pulse.csv", "0.0,0.0,0.0\n2.0,0.4,0.1\n4.0,0.0,0.0\n");
    let text = small("drop_filter", "0.3").replace(
        "kind = \"gaussian\"\namplitude = 0.3\ncenter = 3.0\nwidth = 0.5\n",
        "kind = \"tabulated\"\nfile = \"pulse.csv\"\n",
    );
    let path = write(dir.path(), "tab.toml", &text);
    let spec = parse_config(&path).unwrap();
    let DriveVariant::DropFilter {
        beta: PulseEnvelope::Tabulated(table),
        ..
    } = &spec.drive.variant
    else {
        panic!("expected a tabulated drop-filter pulse");
    };
    assert_eq!(table.times(), spec.drive.grid.half_step_times().as_slice());
    assert!((table.sample(1.0).re - 0.2).abs() < 1e-12);
    spec.drive.derived_fields().unwrap();
}

#[test]
fn example_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut variants = BTreeSet::new();
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let spec = parse_config(&path).unwrap_or_else(|e| panic!("{e}"));
            variants.insert(spec.drive.variant.name());
        }
    }
    assert_eq!(
        variants,
        BTreeSet::from(["atom_drive", "cavity_drive", "displaced_frame", "drop_filter"])
    );
}

#[test]
fn zero_amplitude_gives_zero_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}[output]\nartifacts = [\"timeseries\", \"g2\", \"equivalence-report\"]\n",
        small("displaced_frame", "0.0")
    );
    let path = write(dir.path(), "zero.toml", &text);
    let out = jcpulse(dir.path(), &["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let run = dir.path().join("zero");
    for name in ["moments.csv", "channels.csv", "derived_fields.csv", "g2_raw_b_out.csv", "g2_raw_c_out.csv"] {
        let (header, rows) = read_csv(&run.join(name));
        assert!(!rows.is_empty(), "{name}");
        let skip = header.iter().take_while(|h| *h == "t" || *h == "tau").count();
        for row in &rows {
            assert!(row[skip..].iter().all(|v| *v == 0.0), "{name}: {row:?}");
        }
    }
    let report = json(&run.join("equivalence.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["displacement_residual"], 0.0);
}

#[test]
fn disabled_compensation_is_informational() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}[output]\nartifacts = [\"timeseries\", \"equivalence-report\"]\n",
        small("drop_filter", "0.4").replace("variant = \"drop_filter\"", "variant = \"drop_filter\"\ncompensation = false")
    );
    let path = write(dir.path(), "nocomp.toml", &text);
    let out = jcpulse(dir.path(), &["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let run = dir.path().join("nocomp");
    let report = json(&run.join("equivalence.json"));
    assert_eq!(report["informational"], true);
    let offset = report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == "residual_offset_flux")
        .unwrap()["max_abs"]
        .as_f64()
        .unwrap();
    // The uncancelled offset on e_out is xi/sqrt(2), so its peak flux is max |xi|^2 / 2.
    let (header, rows) = read_csv(&run.join("derived_fields.csv"));
    let re = header.iter().position(|h| h == "xi_re").unwrap();
    let im = header.iter().position(|h| h == "xi_im").unwrap();
    let expected = rows
        .iter()
        .map(|r| 0.5 * (r[re] * r[re] + r[im] * r[im]))
        .fold(0.0, f64::max);
    assert!(offset > 1e-3);
    assert!((offset - expected).abs() < 1e-12 * expected.max(1.0), "{offset} vs {expected}");
}

#[test]
fn runs_are_deterministic_and_fully_listed() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}[output]\nartifacts = [\"timeseries\", \"g2\", \"spectrum\"]\n[correlation]\nn_t = 4\nn_tau = 8\ntau_spacing = 0.2\n[spectrum]\npoints = 21\n",
        small("displaced_frame", "[0.3, 0.1]")
    );
    let path = write(dir.path(), "det.toml", &text);
    let roots = [dir.path().join("a"), dir.path().join("b")];
    for root in &roots {
        let out = jcpulse(root, &["run", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let listing = |root: &Path| {
        let mut names: Vec<String> = fs::read_dir(root.join("det"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    };
    let names = listing(&roots[0]);
    assert_eq!(names, listing(&roots[1]));
    for name in &names {
        let a = fs::read(roots[0].join("det").join(name)).unwrap();
        let b = fs::read(roots[1].join("det").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }

    let manifest = json(&roots[0].join("det/manifest.json"));
    assert_eq!(manifest["schema_version"], 1);
    let listed: Vec<String> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(listed, names);
    for expected in ["moments.csv", "g2_b_out.csv", "g2_sliced_c_out.csv", "spectrum_b_out.csv", "summary.json"] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing");
    }
}

#[test]
fn batch_runs_each_config_in_its_own_directory() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "one.toml", &small("cavity_drive", "0.2"));
    let b = write(dir.path(), "two.toml", &small("atom_drive", "0.2"));
    let out = jcpulse(dir.path(), &["run", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.path().join("one/manifest.json").exists());
    assert!(dir.path().join("two/manifest.json").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("`one`") && stdout.contains("`two`"), "{stdout}");
}

#[test]
fn batch_rejects_shared_output_directories() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{}[output]\ndirectory = \"same\"\n", small("cavity_drive", "0.2"));
    let a = write(dir.path(), "one.toml", &text);
    let b = write(dir.path(), "two.toml", &text);
    let out = jcpulse(dir.path(), &["run", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("same").exists());
}

#[test]
fn verify_reports_the_displacement_identity() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "v.toml", &small("cavity_drive", "0.2").replace("n_max = 4", "n_max = 8"));
    let out = jcpulse(dir.path(), &["verify", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = json(&dir.path().join("v/summary.json"));
    assert_eq!(summary["equivalence"]["check"], "displacement_identity");
    assert!(summary["equivalence"]["displacement_residual"].as_f64().unwrap() < 1e-6);
}

#[test]
fn verify_fails_when_the_tolerance_is_unmet() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}[verify]\ndisplacement_tolerance = 1e-30\n",
        small("cavity_drive", "0.2")
    );
    let path = write(dir.path(), "strict.toml", &text);
    let out = jcpulse(dir.path(), &["verify", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert_eq!(json(&dir.path().join("strict/manifest.json"))["passed"], false);
}

#[test]
fn verify_needs_a_cavity_drive() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "atom.toml", &small("atom_drive", "0.2"));
    let out = jcpulse(dir.path(), &["verify", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("drive.variant"));
}

#[test]
fn sweep_writes_a_convergence_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", &small("cavity_drive", "0.2"));
    let out = jcpulse(dir.path(), &["sweep", path.to_str().unwrap(), "--nmax", "3,4,5"]);
    let summary = json(&dir.path().join("s/summary.json"));
    let change = summary["convergence"]["final_change"].as_f64().unwrap();
    assert_eq!(out.status.code(), Some(if change < 1e-7 { 0 } else { 1 }));
    let table = json(&dir.path().join("s/convergence.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);

    let out = jcpulse(dir.path(), &["sweep", path.to_str().unwrap(), "--nmax", "5,4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn truncation_breach_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = small("cavity_drive", "3.0").replace("n_max = 4", "n_max = 2");
    let path = write(dir.path(), "breach.toml", &text);
    let out = jcpulse(dir.path(), &["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("space.n_max"), "{}", stderr(&out));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "env.toml", &small("cavity_drive", "0.1"));
    let root = dir.path().join("nested/root");
    let out = jcpulse(&root, &["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(root.join("env/moments.csv").exists());
}
