//! Run configuration: TOML file, `--set` overrides, validation and the
//! resolved copy written next to every run's outputs.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use darkfocus::beam::BeamParams;
use darkfocus::calibration::ReconstructionOptions;
use darkfocus::dynamics::{ForceModel, SimConfig};
use darkfocus::forces::{quartic_coefficients, ParticleMedium, QuarticCoefficients};
use darkfocus::spectral::SpectralSettings;
use serde::{Deserialize, Serialize};

pub const RESOLVED_NAME: &str = "resolved_config.toml";

/// Invalid or unreadable configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory.
    pub output: PathBuf,
    pub beam: BeamSection,
    pub particle: ParticleSection,
    pub medium: MediumSection,
    pub simulation: SimulationSection,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamSection {
    /// Vacuum wavelength (m).
    pub wavelength: f64,
    pub na: f64,
    /// Total power (W).
    pub power: f64,
    pub p_index: u32,
    /// Relative phase of the higher-order mode (rad).
    pub relative_phase: f64,
    /// Half-extent of the rendered grid in units of ω₀ (transverse) and z_R (axial).
    pub grid_extent: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticleSection {
    pub radius: f64,
    pub refractive_index: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediumSection {
    pub refractive_index: f64,
    /// Dynamic viscosity (Pa·s).
    pub viscosity: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dipole,
    Quartic,
    Harmonic,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuarticSection {
    pub k_z: f64,
    pub k_rho_z: f64,
    pub k_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub model: ModelKind,
    pub dt: f64,
    pub duration: f64,
    pub sample_every: usize,
    /// Trajectories per ensemble (NA sweep points and self-generated targets).
    pub repetitions: usize,
    pub initial: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_bound: Option<f64>,
    pub include_scattering: bool,
    pub allow_large_dt: bool,
    /// Harmonic stiffness per axis (N/m).
    pub stiffness: [f64; 3],
    /// Quartic coefficients; the dipole expansion of the beam when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quartic: Option<QuarticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Input trajectory; simulated from `[simulation]` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<PathBuf>,
    /// Target trajectories for `sweep-na`; self-generated when empty.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meters_per_pixel: Option<f64>,
    pub axis: usize,
    pub min_segments: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_max: Option<f64>,
    pub significance: f64,
    pub rho_bins: usize,
    pub z_bins: usize,
    pub support_quantile: f64,
    pub min_count: f64,
    pub folds: usize,
    pub na_start: f64,
    pub na_stop: f64,
    pub na_step: f64,
    pub kl_region_factor: f64,
    pub r_eff_min: f64,
    pub r_eff_max: f64,
    pub r_eff_points: usize,
    /// Complex permittivity `[re, im]` for absorbed-power estimates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permittivity: Option<[f64; 2]>,
    /// External force grid for `forces-fit`; dipole grid when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_grid: Option<PathBuf>,
    /// Fit box half-size in units of ω₀ and z_R.
    pub grid_fraction: f64,
    pub grid_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            output: PathBuf::from("out"),
            beam: BeamSection::default(),
            particle: ParticleSection::default(),
            medium: MediumSection::default(),
            simulation: SimulationSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl Default for BeamSection {
    fn default() -> Self {
        BeamSection {
            wavelength: 780e-9,
            na: 0.46,
            power: 3.19e-3,
            p_index: 1,
            relative_phase: PI,
            grid_extent: 3.0,
            grid_points: 201,
        }
    }
}

impl Default for ParticleSection {
    fn default() -> Self {
        ParticleSection { radius: 575e-9, refractive_index: 1.45 }
    }
}

impl Default for MediumSection {
    fn default() -> Self {
        MediumSection { refractive_index: 1.53, viscosity: 0.89e-3, temperature: 293.0 }
    }
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            model: ModelKind::Dipole,
            dt: 4e-5,
            duration: 10.0,
            sample_every: 2,
            repetitions: 5,
            initial: [0.0; 3],
            domain_bound: None,
            include_scattering: false,
            allow_large_dt: false,
            stiffness: [1e-6; 3],
            quartic: None,
        }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let r = ReconstructionOptions::default();
        AnalysisSection {
            trajectory: None,
            targets: Vec::new(),
            meters_per_pixel: None,
            axis: 0,
            min_segments: 8,
            f_min: None,
            f_max: None,
            significance: 0.05,
            rho_bins: r.rho_bins,
            z_bins: r.z_bins,
            support_quantile: r.support_quantile,
            min_count: r.min_count,
            folds: r.folds,
            na_start: 0.40,
            na_stop: 0.60,
            na_step: 0.01,
            kl_region_factor: 2.0,
            r_eff_min: 50e-9,
            r_eff_max: 500e-9,
            r_eff_points: 46,
            permittivity: None,
            force_grid: None,
            grid_fraction: 0.2,
            grid_points: 11,
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override `{assignment}` has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for key in parents {
        let entry = node.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| config_err(format!("`{key}` in `{path}` is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (defaults when absent) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn beam(&self) -> Result<BeamParams> {
        let b = &self.beam;
        BeamParams::new(b.wavelength, self.medium.refractive_index, b.na, b.power)
            .and_then(|p| p.with_relative_phase(b.relative_phase))
            .map(|p| p.with_p_index(b.p_index))
            .and_then(|p| p.validate().map(|_| p))
            .map_err(|e| config_err(e.to_string()))
    }

    pub fn particle(&self) -> Result<ParticleMedium> {
        let m = &self.medium;
        ParticleMedium::new(
            self.particle.radius,
            self.particle.refractive_index,
            m.refractive_index,
            m.viscosity,
            m.temperature,
        )
        .map_err(|e| config_err(e.to_string()))
    }

    pub fn temperature(&self) -> f64 {
        self.medium.temperature
    }

    pub fn quartic(&self) -> Result<QuarticCoefficients> {
        match self.simulation.quartic {
            Some(q) => QuarticCoefficients::new(q.k_z, q.k_rho_z, q.k_rho).map_err(|e| config_err(e.to_string())),
            None => Ok(quartic_coefficients(&self.beam()?, &self.particle()?)?),
        }
    }

    pub fn model(&self) -> Result<ForceModel> {
        let s = &self.simulation;
        Ok(match s.model {
            ModelKind::Dipole => ForceModel::Dipole { beam: self.beam()?, include_scattering: s.include_scattering },
            ModelKind::Quartic => ForceModel::Quartic(self.quartic()?),
            ModelKind::Harmonic => ForceModel::Harmonic { stiffness: s.stiffness },
            ModelKind::Free => ForceModel::Zero,
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.simulation;
        let mut cfg = SimConfig::new(self.model()?, self.particle()?, s.dt, s.duration, self.seed);
        cfg.initial = s.initial;
        cfg.domain_bound = s.domain_bound;
        cfg.sample_every = s.sample_every;
        cfg.allow_large_dt = s.allow_large_dt;
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn spectral(&self) -> Result<SpectralSettings> {
        let a = &self.analysis;
        if a.axis > 2 {
            return Err(config_err("analysis.axis must be 0, 1 or 2"));
        }
        if a.min_segments == 0 {
            return Err(config_err("analysis.min_segments must be >= 1"));
        }
        let f_range = match (a.f_min, a.f_max) {
            (Some(lo), Some(hi)) if lo >= 0.0 && hi > lo => Some((lo, hi)),
            (None, None) => None,
            _ => {
                return Err(config_err(
                    "analysis.f_min and analysis.f_max must be given together with 0 <= f_min < f_max",
                ))
            }
        };
        Ok(SpectralSettings { axis: a.axis, min_segments: a.min_segments, f_range })
    }

    pub fn reconstruction(&self) -> Result<ReconstructionOptions> {
        let a = &self.analysis;
        if a.rho_bins < 2 || a.z_bins < 2 || a.folds < 2 || !(a.support_quantile > 0.5 && a.support_quantile <= 1.0) {
            return Err(config_err("analysis: need rho_bins, z_bins, folds >= 2 and support_quantile in (0.5, 1]"));
        }
        Ok(ReconstructionOptions {
            rho_bins: a.rho_bins,
            z_bins: a.z_bins,
            support_quantile: a.support_quantile,
            min_count: a.min_count,
            folds: a.folds,
        })
    }

    /// Checks every section used by any command before computation starts.
    pub fn validate(&self) -> Result<()> {
        self.beam()?;
        self.particle()?;
        self.spectral()?;
        self.reconstruction()?;
        let a = &self.analysis;
        let s = &self.simulation;
        if s.repetitions == 0 {
            return Err(config_err("simulation.repetitions must be >= 1"));
        }
        if !(a.significance > 0.0 && a.significance <= 0.1) {
            return Err(config_err("analysis.significance must lie in (0, 0.1]"));
        }
        if !(a.na_step > 0.0 && a.na_stop >= a.na_start && a.na_start > 0.0) {
            return Err(config_err("analysis: need 0 < na_start <= na_stop and na_step > 0"));
        }
        if !(a.r_eff_min > 0.0 && a.r_eff_max > a.r_eff_min && a.r_eff_points >= 2) {
            return Err(config_err("analysis: need 0 < r_eff_min < r_eff_max and r_eff_points >= 2"));
        }
        if !(a.grid_fraction > 0.0 && a.grid_points >= 2) {
            return Err(config_err("analysis: need grid_fraction > 0 and grid_points >= 2"));
        }
        if self.beam.grid_points < 2 || !(self.beam.grid_extent > 0.0) {
            return Err(config_err("beam: need grid_points >= 2 and grid_extent > 0"));
        }
        if let Some(m) = a.meters_per_pixel {
            if !(m > 0.0 && m.is_finite()) {
                return Err(config_err("analysis.meters_per_pixel must be > 0"));
            }
        }
        self.sim_config()?;
        Ok(())
    }
}
