use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use tempfile::TempDir;

fn darkfocus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_darkfocus")).args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    darkfocus(&args)
}

fn report_value(path: &Path, key: &str) -> String {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {}:\n{text}", path.display()))
        .to_string()
}

fn number(path: &Path, key: &str) -> f64 {
    report_value(path, key).parse().unwrap()
}

#[test]
fn beam_default_has_dark_centre_and_reported_width() {
    let d = TempDir::new().unwrap();
    let out = run_in(d.path(), "beam", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["intensity_xz.dat", "profile_focal.dat", "profile_axial.dat", "geometry.txt", "resolved_config.toml"] {
        assert!(d.path().join(f).exists(), "{f}");
    }
    let g = d.path().join("geometry.txt");
    assert_eq!(number(&g, "center_intensity"), 0.0);
    assert_eq!(report_value(&g, "width_um"), "1.079");
}

#[test]
fn bright_focus_without_phase_shift() {
    let d = TempDir::new().unwrap();
    assert!(run_in(d.path(), "beam", &["--set", "beam.relative_phase=0.0"]).status.success());
    assert!(number(&d.path().join("geometry.txt"), "center_intensity") > 0.0);
}

#[test]
fn fixed_seed_reproduces_trajectory() {
    let d = TempDir::new().unwrap();
    let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
    let args = ["--seed", "7", "--set", "simulation.duration=0.5"];
    assert!(run_in(&a, "simulate", &args).status.success());
    assert!(run_in(&b, "simulate", &args).status.success());
    assert!(run_in(&c, "simulate", &["--seed", "8", "--set", "simulation.duration=0.5"]).status.success());
    let read = |p: &Path| fs::read(p.join("trajectory.dat")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn resolved_config_reproduces_run() {
    let d = TempDir::new().unwrap();
    let out = d.path().join("run");
    assert!(run_in(&out, "simulate", &["--seed", "3", "--set", "simulation.duration=0.3"]).status.success());
    let first = fs::read(out.join("trajectory.dat")).unwrap();
    let resolved = d.path().join("copy.toml");
    fs::copy(out.join("resolved_config.toml"), &resolved).unwrap();
    let again = darkfocus(&["simulate", "--config", resolved.to_str().unwrap()]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    assert_eq!(fs::read(out.join("trajectory.dat")).unwrap(), first);
    assert_eq!(fs::read(out.join("resolved_config.toml")).unwrap(), fs::read(&resolved).unwrap());
}

#[test]
fn harmonic_variance_matches_equipartition() {
    let d = TempDir::new().unwrap();
    let out = run_in(
        d.path(),
        "simulate",
        &[
            "--set",
            "simulation.model=\"harmonic\"",
            "--set",
            "simulation.dt=1.93e-4",
            "--set",
            "simulation.duration=2000.0",
            "--set",
            "simulation.sample_every=20",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = d.path().join("simulate_report.txt");
    for axis in ["x", "y", "z"] {
        let e = number(&r, &format!("equipartition_{axis}"));
        assert!((e - 1.0).abs() < 0.03, "{axis}: {e}");
    }
}

#[test]
fn escape_exits_with_code_four() {
    let d = TempDir::new().unwrap();
    let out = run_in(
        d.path(),
        "simulate",
        &[
            "--set",
            "simulation.model=\"quartic\"",
            "--set",
            "simulation.quartic={k_z=3.86e-7, k_rho_z=8.81e7, k_rho=2.26e8}",
            "--set",
            "simulation.dt=2e-5",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(report_value(&d.path().join("escape_report.txt"), "status"), "escaped");
}

#[test]
fn config_errors_exit_with_code_two() {
    let d = TempDir::new().unwrap();
    assert_eq!(run_in(d.path(), "beam", &["--set", "beam.colour=1"]).status.code(), Some(2));
    assert_eq!(run_in(d.path(), "beam", &["--set", "beam.na=1.8"]).status.code(), Some(2));
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "[simulation]\nmodel = \"dipole\"\nsteps = 3\n").unwrap();
    assert_eq!(run_in(d.path(), "simulate", &["--config", bad.to_str().unwrap()]).status.code(), Some(2));
    let threads = Command::new(env!("CARGO_BIN_EXE_darkfocus"))
        .args(["beam", "--out", d.path().to_str().unwrap()])
        .env("DARKFOCUS_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn missing_input_exits_with_code_one() {
    let d = TempDir::new().unwrap();
    let missing = d.path().join("nope.toml");
    assert_eq!(run_in(d.path(), "beam", &["--config", missing.to_str().unwrap()]).status.code(), Some(1));
    let out = run_in(
        d.path(),
        "psd",
        &["--set", &format!("analysis.trajectory=\"{}\"", d.path().join("none.dat").display())],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn absorb_reports_ratio() {
    let d = TempDir::new().unwrap();
    assert!(run_in(d.path(), "absorb", &["--set", "analysis.permittivity=[2.1, 1e-6]"]).status.success());
    let r = d.path().join("absorption.txt");
    assert!((number(&r, "eta_abs") - 0.045).abs() < 0.003);
    assert!((number(&r, "transverse_depth_ratio") - 0.2707).abs() < 1e-4);
    assert!(number(&r, "absorbed_power_bottle") > 0.0);
    let sweep = fs::read_to_string(d.path().join("absorption_sweep.dat")).unwrap();
    assert_eq!(sweep.lines().next(), Some("r_eff eta_abs"));
    assert_eq!(sweep.lines().count(), 47);
}

#[test]
fn sweep_na_self_target_recovers_generation_na() {
    let d = TempDir::new().unwrap();
    let out = run_in(
        d.path(),
        "sweep-na",
        &[
            "--set",
            "beam.na=0.47",
            "--set",
            "analysis.na_start=0.45",
            "--set",
            "analysis.na_stop=0.49",
            "--set",
            "simulation.duration=4.0",
            "--set",
            "simulation.repetitions=3",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(number(&d.path().join("sweep_na.txt"), "argmin_na"), 0.47);
    let table = fs::read_to_string(d.path().join("sweep_na.dat")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#') && !l.starts_with("na ")).count(), 5);
}

#[test]
fn white_noise_is_not_claimed_as_lorentzian() {
    let d = TempDir::new().unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let mut text = String::from("# dt=1e-3\nt x y z\n");
    for i in 0..65_536 {
        let [x, y, z]: [f64; 3] = std::array::from_fn(|_| 1e-8 * rng.sample::<f64, _>(StandardNormal));
        text.push_str(&format!("{:e} {x:e} {y:e} {z:e}\n", i as f64 * 1e-3));
    }
    let traj = d.path().join("noise.dat");
    fs::write(&traj, text).unwrap();
    let out = run_in(d.path(), "psd", &["--set", &format!("analysis.trajectory=\"{}\"", traj.display())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report_value(&d.path().join("psd_report.txt"), "status"), "rejected");
    let psd = fs::read_to_string(d.path().join("psd.dat")).unwrap();
    let values: Vec<f64> = psd
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with('f'))
        .skip(1)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let (lo, hi) = (values[..values.len() / 2].iter().sum::<f64>(), values[values.len() / 2..].iter().sum::<f64>());
    assert!((lo / hi - 1.0).abs() < 0.05, "flat spectrum expected");
    assert!(mean > 0.0);
}

#[test]
fn psd_of_simulated_trap_is_fitted() {
    let d = TempDir::new().unwrap();
    assert!(run_in(d.path(), "psd", &["--set", "simulation.duration=20.0"]).status.success());
    let r = d.path().join("psd_report.txt");
    assert_eq!(report_value(&r, "status"), "fitted");
    assert!(number(&r, "f_c_err") > 0.0);
}

#[test]
fn calibrate_reports_fold_uncertainties() {
    let d = TempDir::new().unwrap();
    let out = run_in(
        d.path(),
        "calibrate",
        &[
            "--set",
            "simulation.model=\"quartic\"",
            "--set",
            "simulation.duration=60.0",
            "--set",
            "simulation.sample_every=5",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = d.path().join("calibration.txt");
    for key in ["k_z_err", "k_rho_z_err", "k_rho_err"] {
        assert!(number(&r, key) > 0.0);
    }
    assert!(d.path().join("potential.dat").exists());
}

#[test]
fn forces_fit_round_trips_its_grid() {
    let d = TempDir::new().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert!(run_in(&a, "forces-fit", &[]).status.success());
    let grid = a.join("force_grid.dat");
    assert!(run_in(&b, "forces-fit", &["--set", &format!("analysis.force_grid=\"{}\"", grid.display())])
        .status
        .success());
    let ra = number(&a.join("forces_fit.txt"), "rmse_avg");
    let rb = number(&b.join("forces_fit.txt"), "rmse_avg");
    assert!((ra / rb - 1.0).abs() < 1e-9, "{ra} vs {rb}");
    assert_eq!(number(&a.join("forces_fit.txt"), "samples"), 1331.0);
}
