//! Subcommand implementations. Each writes plain-text data files and a
//! key-value report into the run's output directory.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use darkfocus::absorption::{self, absorbed_power, absorption_ratio_sweep, trap_comparison, AbsorptionScenario};
use darkfocus::beam::{self, Axis, GridSpec, TransverseKind};
use darkfocus::calibration::na_sweep::simulate_ensemble;
use darkfocus::calibration::{self, decorrelate, ks_gaussianity_test, SweepSpec, SweepTarget};
use darkfocus::dynamics::{self, ForceModel, Trajectory};
use darkfocus::error::Error;
use darkfocus::forces::{self, fit_polynomial_force, ForceGrid, SampleBox};
use darkfocus::spectral::{self, fit_lorentzian, WelchParams};
use darkfocus::Complex64;

use crate::config::{ConfigError, RunConfig};

pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let mut f = self.create(name)?;
        f.write_all(text.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    fn write_with(&self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> darkfocus::Result<()>) -> Result<()> {
        let mut f = self.create(name)?;
        body(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn read_trajectory(path: &Path, meters_per_pixel: Option<f64>) -> Result<Trajectory> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Trajectory::read_from(BufReader::new(f), meters_per_pixel)?)
}

/// The configured input trajectory, or a fresh simulation.
fn input_trajectory(run: &Run) -> Result<Trajectory> {
    let a = &run.config.analysis;
    match &a.trajectory {
        Some(p) => read_trajectory(p, a.meters_per_pixel),
        None => simulate_or_report(run),
    }
}

/// Simulates, writing an escape report before propagating an escape.
fn simulate_or_report(run: &Run) -> Result<Trajectory> {
    let cfg = run.config.sim_config()?;
    match dynamics::simulate(&cfg) {
        Ok(t) => Ok(t),
        Err(Error::Escaped(e)) => {
            let r = (e.position[0].powi(2) + e.position[1].powi(2) + e.position[2].powi(2)).sqrt();
            let text = format!(
                "status=escaped\nmodel={}\ntime={:e}\nstep={}\nposition={:e} {:e} {:e}\nradius={r:e}\nbound={:e}\n",
                cfg.model.name(),
                e.time,
                e.step,
                e.position[0],
                e.position[1],
                e.position[2],
                e.bound
            );
            run.write_text("escape_report.txt", &text)?;
            Err(Error::Escaped(e).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v)
}

pub fn beam(run: &Run) -> Result<()> {
    let b = run.config.beam()?;
    let (ext, n) = (run.config.beam.grid_extent, run.config.beam.grid_points);
    let spec = GridSpec {
        kind: TransverseKind::X,
        transverse: Axis::symmetric(ext * b.waist(), n)?,
        z: Axis::symmetric(ext * b.rayleigh_range(), n)?,
    };
    let grid = beam::render_intensity_grid(&b, &spec)?;
    run.write_with("intensity_xz.dat", |f| grid.write_to(f))?;

    let profile = |name: &str, header: &str, axis: Axis, at: &dyn Fn(f64) -> darkfocus::Result<f64>| -> Result<()> {
        let mut text = format!("{header}\n");
        for i in 0..axis.count {
            let u = axis.value(i);
            writeln!(text, "{u:e} {:e}", at(u)?)?;
        }
        run.write_text(name, &text)
    };
    profile("profile_focal.dat", "x intensity", spec.transverse, &|x| {
        beam::dft_intensity(&b, &beam::CylindricalPoint::new(x.abs(), 0.0, 0.0)?)
    })?;
    profile("profile_axial.dat", "z intensity", spec.z, &|z| {
        beam::dft_intensity(&b, &beam::CylindricalPoint::on_axis(z))
    })?;

    let center = beam::dft_intensity(&b, &beam::CylindricalPoint::on_axis(0.0))?;
    let mut report = format!(
        "na={}\nwavelength={:e}\npower={:e}\np_index={}\nrelative_phase={}\nwaist={:e}\nrayleigh_range={:e}\ncenter_intensity={center:e}\n",
        b.na(),
        b.lambda0(),
        b.power(),
        b.p_index(),
        b.relative_phase(),
        b.waist(),
        b.rayleigh_range()
    );
    match beam::bottle_geometry(&b).and_then(|g| Ok((g, beam::bottle_geometry_numeric(&b, 4001)?))) {
        Ok((g, num)) => {
            writeln!(report, "width={:e}\nheight={:e}", g.width, g.height)?;
            writeln!(report, "width_numeric={:e}\nheight_numeric={:e}", num.width, num.height)?;
            writeln!(report, "width_um={:.3}\nheight_um={:.3}", g.width * 1e6, g.height * 1e6)?;
        }
        Err(e) => writeln!(report, "geometry=unavailable ({e})")?,
    }
    run.write_text("geometry.txt", &report)
}

pub fn simulate(run: &Run) -> Result<()> {
    let cfg = run.config.sim_config()?;
    let t = simulate_or_report(run)?;
    run.write_with("trajectory.dat", |f| t.write_to(f))?;
    let kt = cfg.particle.thermal_energy();
    let mut report = format!(
        "model={}\nseed={}\ndt={:e}\nsteps={}\nsamples={}\nsample_dt={:e}\n",
        cfg.model.name(),
        cfg.seed,
        cfg.dt,
        cfg.steps(),
        t.len(),
        t.dt()
    );
    let burn = t.len() / 100;
    for (a, name) in ["x", "y", "z"].iter().enumerate() {
        let (m, v) = moments(&t.axis(a)[burn..]);
        writeln!(report, "mean_{name}={m:e}\nvariance_{name}={v:e}")?;
        if let ForceModel::Harmonic { stiffness } = &cfg.model {
            writeln!(report, "equipartition_{name}={:.6}", stiffness[a] * v / kt)?;
        }
    }
    run.write_text("simulate_report.txt", &report)
}

pub fn psd(run: &Run) -> Result<()> {
    let settings = run.config.spectral()?;
    let t = input_trajectory(run)?;
    let params = WelchParams::for_length(t.len(), settings.min_segments)?;
    let est = spectral::estimate_psd(&t, settings.axis, &params)?;
    run.write_with("psd.dat", |f| est.write_to(f))?;
    let range = settings.f_range.unwrap_or_else(|| est.default_fit_range());
    let mut report = format!("axis={}\nsegments={}\nresolution={:e}\n", settings.axis, est.segments, est.resolution());
    match fit_lorentzian(&est, range) {
        Ok(fit) if fit.is_trustworthy() => {
            report.push_str("status=fitted\n");
            write!(report, "{fit}")?;
        }
        Ok(fit) => {
            let reason = if fit.out_of_range {
                "corner frequency outside the fit range"
            } else {
                "corner frequency poorly constrained"
            };
            writeln!(report, "status=rejected\nreason={reason}\nfit_range={:e} {:e}", range.0, range.1)?;
        }
        Err(e) => writeln!(report, "status=rejected\nreason={e}")?,
    }
    run.write_text("psd_report.txt", &report)
}

pub fn calibrate(run: &Run) -> Result<()> {
    let opts = run.config.reconstruction()?;
    let t = input_trajectory(run)?;
    let rec = calibration::reconstruct_potential(&t, run.config.temperature(), &opts)?;
    run.write_with("potential.dat", |f| rec.write_grid(f))?;
    let mut report = rec.to_string();
    let x = t.axis(0);
    match decorrelate(&x, t.dt())
        .and_then(|(d, stride)| Ok((ks_gaussianity_test(&d, run.config.analysis.significance)?, stride)))
    {
        Ok((ks, stride)) => writeln!(
            report,
            "ks_samples={}\nks_stride={stride}\nks_statistic={:e}\nks_p_value={:e}\nks_reject_gaussian={}",
            ks.n, ks.statistic, ks.p_value, ks.reject
        )?,
        Err(e) => writeln!(report, "ks=skipped ({e})")?,
    }
    run.write_text("calibration.txt", &report)
}

pub fn sweep_na(run: &Run) -> Result<()> {
    let c = &run.config;
    let template = c.sim_config()?;
    if !matches!(template.model, ForceModel::Dipole { .. }) {
        return Err(ConfigError("sweep-na needs simulation.model = \"dipole\"".into()).into());
    }
    let grid = SweepSpec::grid(c.analysis.na_start, c.analysis.na_stop, c.analysis.na_step)?;
    let mut spec = SweepSpec::new(grid, template, c.simulation.repetitions);
    spec.spectral = c.spectral()?;
    spec.kl_region_factor = c.analysis.kl_region_factor;
    let targets: Vec<Trajectory> = if c.analysis.targets.is_empty() {
        simulate_ensemble(&spec, c.beam.na)?
    } else {
        c.analysis.targets.iter().map(|p| read_trajectory(p, c.analysis.meters_per_pixel)).collect::<Result<_>>()?
    };
    if targets.is_empty() {
        return Err(Error::SearchFailed("every target trajectory escaped".into()).into());
    }
    let target = SweepTarget::from_trajectories(&targets, &spec.spectral)?;
    let result = calibration::estimate_na(&target, &spec)?;
    run.write_with("sweep_na.dat", |f| result.write_to(f))?;
    let fmt_range = |r: Option<(f64, f64)>| r.map_or("none".to_string(), |(a, b)| format!("{a} {b}"));
    let mut report = format!(
        "argmin_na={}\nkl_region={}\nconsistency_interval={}\nintersection={}\n",
        result.argmin_na.map_or("none".into(), |v| v.to_string()),
        fmt_range(result.kl_region),
        fmt_range(result.consistency_interval),
        fmt_range(result.intersection)
    );
    if let Some((fc, err)) = target.f_c {
        writeln!(report, "target_fc={fc:e}\ntarget_fc_err={err:e}")?;
    }
    run.write_text("sweep_na.txt", &report)
}

pub fn absorb(run: &Run) -> Result<()> {
    let c = &run.config;
    let b = c.beam()?;
    let s = AbsorptionScenario::for_particle(&b, &c.particle()?)?;
    let cmp = trap_comparison(&s)?;
    let mut report = format!(
        "cross_section={:e}\nr_eff={:e}\npower_ratio={}\n{cmp}",
        s.cross_section(),
        s.effective_radius(),
        s.power_ratio()
    );
    if let Some([re, im]) = c.analysis.permittivity {
        let eps = Complex64::new(re, im);
        let pb = absorbed_power(&b, s.cross_section(), eps, true)?;
        let pg = absorbed_power(&b, s.cross_section(), eps, false)?;
        writeln!(report, "absorbed_power_bottle={pb:e}\nabsorbed_power_gaussian={pg:e}")?;
    }
    run.write_text("absorption.txt", &report)?;
    let a = &c.analysis;
    let radii: Vec<f64> = (0..a.r_eff_points)
        .map(|i| a.r_eff_min + (a.r_eff_max - a.r_eff_min) * i as f64 / (a.r_eff_points - 1) as f64)
        .collect();
    let rows = absorption_ratio_sweep(&s, &radii)?;
    run.write_with("absorption_sweep.dat", |f| absorption::write_sweep(&rows, f))
}

pub fn forces_fit(run: &Run) -> Result<()> {
    let c = &run.config;
    let (b, pm) = (c.beam()?, c.particle()?);
    let grid = match &c.analysis.force_grid {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            ForceGrid::read_from(BufReader::new(f))?
        }
        None => {
            let region = SampleBox::scaled_to(&b, c.analysis.grid_fraction, c.analysis.grid_points);
            let g = ForceGrid::dipole(&b, &pm, &region, c.simulation.include_scattering)?;
            run.write_with("force_grid.dat", |f| g.write_to(f))?;
            g
        }
    };
    let (fit, rmse) = fit_polynomial_force(&grid)?;
    let analytic = forces::quartic_coefficients(&b, &pm)?;
    let report = format!(
        "samples={}\nk_z={:e}\nk_rho_z={:e}\nk_rho={:e}\nrmse_x={:e}\nrmse_y={:e}\nrmse_z={:e}\nrmse_avg={:e}\nanalytic_k_z={:e}\nanalytic_k_rho_z={:e}\nanalytic_k_rho={:e}\n",
        rmse.samples,
        fit.k_z,
        fit.k_rho_z,
        fit.k_rho,
        rmse.per_axis[0],
        rmse.per_axis[1],
        rmse.per_axis[2],
        rmse.rmse_avg,
        analytic.k_z,
        analytic.k_rho_z,
        analytic.k_rho
    );
    run.write_text("forces_fit.txt", &report)
}

/// Creates the output directory and writes the resolved configuration.
pub fn prepare(config: RunConfig) -> Result<Run> {
    config.validate()?;
    let out = config.output.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let run = Run { config, out };
    run.write_text(crate::config::RESOLVED_NAME, &run.config.to_toml()?)?;
    Ok(run)
}
