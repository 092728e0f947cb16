//! Numerical-aperture estimation by KL-divergence minimization against
//! simulated ensembles, cross-checked with corner frequencies.

use std::io::Write;

use rayon::prelude::*;

use super::histogram::kl_divergence_samples;
use crate::dynamics::{self, ForceModel, SimConfig, Trajectory, STABILITY_FACTOR};
use crate::error::{ensure, invalid, Error, Result};
use crate::rng::derive_seed;
use crate::spectral::{corner_frequency_of_trajectory, SpectralSettings};

/// Measured data the sweep is compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTarget {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Corner frequency and its uncertainty (Hz), if known.
    pub f_c: Option<(f64, f64)>,
}

impl SweepTarget {
    /// Pools x and y of the trajectories; f_c is mean ± sample std of the
    /// per-trajectory fits (or the single fit's error for one trajectory).
    pub fn from_trajectories(trajectories: &[Trajectory], settings: &SpectralSettings) -> Result<Self> {
        ensure(!trajectories.is_empty(), "target", "need at least one trajectory")?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for t in trajectories {
            x.extend(t.axis(0));
            y.extend(t.axis(1));
        }
        let fits: Vec<_> =
            trajectories.iter().map(|t| corner_frequency_of_trajectory(t, settings)).collect::<Result<_>>()?;
        let f_c = if fits.len() == 1 {
            (fits[0].f_c, fits[0].f_c_err)
        } else {
            let v: Vec<f64> = fits.iter().map(|f| f.f_c).collect();
            mean_std(&v)
        };
        Ok(SweepTarget { x, y, f_c: Some(f_c) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub na_values: Vec<f64>,
    /// Dipole-model configuration; only the beam NA (and dt if needed) changes.
    pub template: SimConfig,
    pub repetitions: usize,
    pub spectral: SpectralSettings,
    /// NAs whose KL lies within this factor of the minimum form the KL region.
    pub kl_region_factor: f64,
}

impl SweepSpec {
    pub fn new(na_values: Vec<f64>, template: SimConfig, repetitions: usize) -> Self {
        SweepSpec { na_values, template, repetitions, spectral: SpectralSettings::default(), kl_region_factor: 2.0 }
    }

    /// Grid `start, start + step, …` up to and including `stop`.
    pub fn grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
        ensure(step > 0.0 && stop >= start, "na grid", "need step > 0 and stop >= start")?;
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10).collect())
    }

    /// Seeds shared by every NA (common random numbers).
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|i| derive_seed(self.template.seed, i)).collect()
    }

    /// Template configuration at `na`, with dt shrunk to half the stability
    /// limit when the stiffer trap requires it.
    pub fn config_at(&self, na: f64) -> Result<SimConfig> {
        let ForceModel::Dipole { beam, include_scattering } = &self.template.model else {
            return Err(invalid("template", "NA sweep needs the dipole force model"));
        };
        let mut cfg = SimConfig {
            model: ForceModel::Dipole { beam: beam.with_na(na)?, include_scattering: *include_scattering },
            ..self.template.clone()
        };
        let k = cfg.max_stiffness();
        if k > 0.0 {
            let limit = STABILITY_FACTOR * cfg.particle.drag() / k;
            if cfg.dt > limit {
                let scale = (cfg.dt / (0.5 * limit)).ceil();
                cfg.dt /= scale;
                cfg.sample_every *= scale as usize;
            }
        }
        Ok(cfg)
    }
}

/// Simulated ensemble for one sweep point.
pub fn simulate_ensemble(spec: &SweepSpec, na: f64) -> Result<Vec<Trajectory>> {
    let cfg = spec.config_at(na)?;
    let mut out = Vec::new();
    for r in dynamics::simulate_seeds(&cfg, &spec.seeds()) {
        match r {
            Ok(t) => out.push(t),
            Err(Error::Escaped(e)) => log::warn!("NA {na}: run escaped at t = {:e} s", e.time),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub na: f64,
    /// KL divergence averaged over x and y (nats); NaN when invalid.
    pub kl: f64,
    pub f_c: f64,
    pub f_c_err: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaSweepResult {
    pub points: Vec<SweepPoint>,
    pub argmin_na: Option<f64>,
    /// NAs whose simulated f_c error bar overlaps the target's.
    pub consistency_interval: Option<(f64, f64)>,
    pub kl_region: Option<(f64, f64)>,
    pub intersection: Option<(f64, f64)>,
}

impl NaSweepResult {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let fmt_interval = |i: Option<(f64, f64)>| match i {
            Some((a, b)) => format!("{a} {b}"),
            None => "empty".into(),
        };
        match self.argmin_na {
            Some(na) => writeln!(out, "# argmin_na={na}")?,
            None => writeln!(out, "# argmin_na=none")?,
        }
        writeln!(out, "# fc_interval={}", fmt_interval(self.consistency_interval))?;
        writeln!(out, "# kl_region={}", fmt_interval(self.kl_region))?;
        writeln!(out, "# intersection={}", fmt_interval(self.intersection))?;
        writeln!(out, "na kl fc fc_err valid")?;
        for p in &self.points {
            writeln!(out, "{} {:e} {:e} {:e} {}", p.na, p.kl, p.f_c, p.f_c_err, p.valid)?;
        }
        Ok(())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std =
        if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { f64::NAN };
    (mean, std)
}

fn evaluate(target: &SweepTarget, spec: &SweepSpec, na: f64) -> Result<SweepPoint> {
    let runs = simulate_ensemble(spec, na)?;
    if runs.is_empty() {
        log::warn!("NA {na}: every simulation escaped, point excluded");
        return Ok(SweepPoint { na, kl: f64::NAN, f_c: f64::NAN, f_c_err: f64::NAN, valid: false });
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for t in &runs {
        x.extend(t.axis(0));
        y.extend(t.axis(1));
    }
    let kl = 0.5 * (kl_divergence_samples(&target.x, &x)? + kl_divergence_samples(&target.y, &y)?);
    let fcs: Vec<f64> = runs
        .iter()
        .filter_map(|t| match corner_frequency_of_trajectory(t, &spec.spectral) {
            Ok(f) => Some(f.f_c),
            Err(e) => {
                log::warn!("NA {na}: corner-frequency fit failed: {e}");
                None
            }
        })
        .collect();
    let (f_c, f_c_err) = if fcs.len() >= 3 { mean_std(&fcs) } else { (f64::NAN, f64::NAN) };
    Ok(SweepPoint { na, kl, f_c, f_c_err, valid: true })
}

fn span(nas: &[f64]) -> Option<(f64, f64)> {
    let lo = nas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = nas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo <= hi).then_some((lo, hi))
}

/// Sweeps NA, reporting the KL minimizer and the f_c-consistency interval.
pub fn estimate_na(target: &SweepTarget, spec: &SweepSpec) -> Result<NaSweepResult> {
    ensure(!spec.na_values.is_empty(), "na_values", "must not be empty")?;
    ensure(spec.repetitions >= 1, "repetitions", "must be >= 1")?;
    ensure(spec.kl_region_factor >= 1.0, "kl_region_factor", "must be >= 1")?;
    let points: Vec<SweepPoint> =
        spec.na_values.par_iter().map(|&na| evaluate(target, spec, na)).collect::<Result<_>>()?;
    let valid: Vec<&SweepPoint> = points.iter().filter(|p| p.valid).collect();
    if valid.is_empty() {
        return Err(Error::SearchFailed("every NA in the sweep escaped".into()));
    }
    let best = valid.iter().min_by(|a, b| a.kl.total_cmp(&b.kl)).expect("non-empty");
    let kl_min = best.kl;
    let kl_region = span(
        &valid
            .iter()
            .filter(|p| p.kl <= spec.kl_region_factor * kl_min.max(f64::MIN_POSITIVE))
            .map(|p| p.na)
            .collect::<Vec<_>>(),
    );
    let consistency_interval = target.f_c.and_then(|(fc, err)| {
        span(
            &valid
                .iter()
                .filter(|p| p.f_c.is_finite() && (p.f_c - fc).abs() <= p.f_c_err + err)
                .map(|p| p.na)
                .collect::<Vec<_>>(),
        )
    });
    let intersection = match (kl_region, consistency_interval) {
        (Some(a), Some(b)) if a.0.max(b.0) <= a.1.min(b.1) => Some((a.0.max(b.0), a.1.min(b.1))),
        _ => None,
    };
    Ok(NaSweepResult { argmin_na: Some(best.na), points, consistency_interval, kl_region, intersection })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::BeamParams;
    use crate::forces::ParticleMedium;

    fn spec(seed: u64) -> SweepSpec {
        let pm = ParticleMedium::new(575e-9, 1.45, 1.53, 0.89e-3, 293.0).unwrap();
        let beam = BeamParams::new(780e-9, 1.53, 0.46, 3.19e-3).unwrap();
        let model = ForceModel::Dipole { beam, include_scattering: false };
        let mut cfg = SimConfig::new(model, pm, 4e-5, 8.0, seed);
        cfg.sample_every = 2;
        SweepSpec::new(vec![0.44, 0.46, 0.48], cfg, 3)
    }

    #[test]
    fn grid_is_inclusive() {
        let g = SweepSpec::grid(0.40, 0.60, 0.01).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[6], 0.46);
        assert_eq!(g[20], 0.6);
    }

    #[test]
    fn self_target_has_zero_kl() {
        let s = spec(31);
        let target = SweepTarget::from_trajectories(&simulate_ensemble(&s, 0.46).unwrap(), &s.spectral).unwrap();
        let r = estimate_na(&target, &s).unwrap();
        let at = r.points.iter().find(|p| p.na == 0.46).unwrap();
        assert_eq!(at.kl, 0.0);
        assert_eq!(r.argmin_na, Some(0.46));
        assert!(r.points.iter().all(|p| p.valid && p.kl >= 0.0));
        let fc: Vec<f64> = r.points.iter().map(|p| p.f_c).collect();
        assert!(fc[0] < fc[1] && fc[1] < fc[2], "{fc:?}");
        let (lo, hi) = r.consistency_interval.unwrap();
        assert!(lo <= 0.46 && hi >= 0.46);

        let mut buf = Vec::new();
        r.write_to(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("\nna kl fc fc_err valid\n"));
    }

    #[test]
    fn stiff_points_get_smaller_steps() {
        let mut s = spec(1);
        s.template.dt = 1e-4;
        s.template.allow_large_dt = false;
        let cfg = s.config_at(0.6).unwrap();
        assert!(cfg.dt < 1e-4);
        assert!(cfg.validate().is_ok());
        assert!((cfg.dt * cfg.sample_every as f64 / 2e-4 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn escaped_points_are_invalid() {
        let mut s = spec(2);
        let ForceModel::Dipole { beam, .. } = &s.template.model else { unreachable!() };
        // A microwatt trap cannot hold the particle.
        s.template.model = ForceModel::Dipole { beam: beam.with_power(1e-6).unwrap(), include_scattering: false };
        s.template.domain_bound = Some(1e-6);
        s.na_values = vec![0.46];
        let target = SweepTarget { x: vec![0.0; 10], y: vec![0.0; 10], f_c: None };
        assert!(matches!(estimate_na(&target, &s), Err(Error::SearchFailed(_))));
    }
}
