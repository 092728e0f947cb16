//! Absorbed power in the dark focus relative to a Gaussian tweezer of the
//! same waist, and the accompanying trap-depth and stiffness ratios.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::beam::{self, golden_section_max, BeamParams};
use crate::error::{ensure, invalid, Result};
use crate::forces::ParticleMedium;
use crate::quadrature;

const QUAD_TOL: f64 = 1e-10;

/// A_p = V/λ₀ for a sphere of radius `radius`.
pub fn effective_cross_section(radius: f64, lambda0: f64) -> f64 {
    4.0 / 3.0 * PI * radius.powi(3) / lambda0
}

/// R_eff = √(A_p / 4π).
pub fn effective_radius(cross_section: f64) -> f64 {
    (cross_section / (4.0 * PI)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionScenario {
    bottle: BeamParams,
    gaussian: BeamParams,
    cross_section: f64,
}

impl AbsorptionScenario {
    /// Both beams must share λ₀, medium and NA (hence waist).
    pub fn new(bottle: BeamParams, gaussian: BeamParams, cross_section: f64) -> Result<Self> {
        bottle.validate()?;
        gaussian.validate()?;
        let same = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
        if !(same(bottle.lambda0(), gaussian.lambda0())
            && same(bottle.n_m(), gaussian.n_m())
            && same(bottle.waist(), gaussian.waist()))
        {
            return Err(invalid("beams", "bottle and Gaussian beams must share wavelength, medium and waist"));
        }
        ensure(cross_section.is_finite() && cross_section > 0.0, "cross_section", "must be finite and > 0")?;
        Ok(AbsorptionScenario { bottle, gaussian, cross_section })
    }

    /// Sphere-derived cross-section, equal powers.
    pub fn for_particle(bottle: &BeamParams, particle: &ParticleMedium) -> Result<Self> {
        particle.validate()?;
        let a_p = effective_cross_section(particle.radius, bottle.lambda0());
        AbsorptionScenario::new(*bottle, *bottle, a_p)
    }

    /// Same scenario with P_B/P_G = `ratio` (Gaussian power unchanged).
    pub fn with_power_ratio(&self, ratio: f64) -> Result<Self> {
        ensure(ratio.is_finite() && ratio > 0.0, "power ratio", "must be finite and > 0")?;
        let bottle = self.bottle.with_power(ratio * self.gaussian.power())?;
        AbsorptionScenario::new(bottle, self.gaussian, self.cross_section)
    }

    pub fn with_effective_radius(&self, r_eff: f64) -> Result<Self> {
        ensure(r_eff.is_finite() && r_eff > 0.0, "r_eff", "must be finite and > 0")?;
        AbsorptionScenario::new(self.bottle, self.gaussian, 4.0 * PI * r_eff * r_eff)
    }

    pub fn bottle(&self) -> &BeamParams {
        &self.bottle
    }

    pub fn gaussian(&self) -> &BeamParams {
        &self.gaussian
    }

    pub fn cross_section(&self) -> f64 {
        self.cross_section
    }

    pub fn effective_radius(&self) -> f64 {
        effective_radius(self.cross_section)
    }

    pub fn power_ratio(&self) -> f64 {
        self.bottle.power() / self.gaussian.power()
    }
}

/// Focal-plane power through the axis-centred disk of radius `radius`.
fn disk_power(intensity: impl Fn(f64) -> f64, radius: f64) -> Result<f64> {
    quadrature::integrate(|r| 2.0 * PI * r * intensity(r), 0.0, radius, QUAD_TOL)
}

fn bottle_focal(b: &BeamParams) -> impl Fn(f64) -> f64 + '_ {
    move |r| beam::intensity_with_gradient(b, r, 0.0, 0.0).0
}

fn gaussian_focal(g: &BeamParams) -> impl Fn(f64) -> f64 + '_ {
    move |r| beam::gaussian_intensity_unchecked(g, r, 0.0)
}

/// η_abs: focal-plane power inside a disk of radius R_eff, bottle over Gaussian.
pub fn absorption_ratio(s: &AbsorptionScenario) -> Result<f64> {
    let r = s.effective_radius();
    Ok(disk_power(bottle_focal(&s.bottle), r)? / disk_power(gaussian_focal(&s.gaussian), r)?)
}

/// (R_eff, η_abs) for each radius.
pub fn absorption_ratio_sweep(s: &AbsorptionScenario, radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    radii.par_iter().map(|&r| Ok((r, absorption_ratio(&s.with_effective_radius(r)?)?))).collect()
}

pub fn write_sweep<W: Write>(rows: &[(f64, f64)], mut out: W) -> Result<()> {
    writeln!(out, "r_eff eta_abs")?;
    for (r, eta) in rows {
        writeln!(out, "{r:e} {eta:e}")?;
    }
    Ok(())
}

/// P_abs = 12π·Im((ε−1)/(ε+2))·P_seen, with P_seen the focal-plane power
/// through the particle's effective disk.
pub fn absorbed_power(beam: &BeamParams, cross_section: f64, permittivity: Complex64, bottle: bool) -> Result<f64> {
    beam.validate()?;
    ensure(cross_section.is_finite() && cross_section > 0.0, "cross_section", "must be finite and > 0")?;
    ensure(permittivity.re.is_finite() && permittivity.im.is_finite(), "permittivity", "must be finite")?;
    let cm = (permittivity - 1.0) / (permittivity + 2.0);
    let r = effective_radius(cross_section);
    let seen = if bottle { disk_power(bottle_focal(beam), r)? } else { disk_power(gaussian_focal(beam), r)? };
    Ok(12.0 * PI * cm.im * seen)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapComparison {
    /// V₀,B / V₀,G across the focal plane at the scenario's powers.
    pub transverse_depth_ratio: f64,
    /// P_B/P_G that equalizes the transverse depths.
    pub matched_power_ratio: f64,
    /// η_abs at the matched power ratio.
    pub matched_eta_abs: f64,
    /// Axial curvature ratio at the focus, bottle over Gaussian.
    pub longitudinal_stiffness_ratio: f64,
    /// Axial barrier ratio, bottle over Gaussian.
    pub longitudinal_depth_ratio: f64,
    pub eta_abs: f64,
}

/// Depth and stiffness ratios from the intensity profiles. Depths are
/// maxima of I_B over ρ at z = 0 (and over z on axis) against the Gaussian
/// focal intensity; the axial curvature uses central differences at 1e-3·z_R.
pub fn trap_comparison(s: &AbsorptionScenario) -> Result<TrapComparison> {
    let (b, g) = (&s.bottle, &s.gaussian);
    let w0 = b.waist();
    let zr = b.rayleigh_range();
    let ring = bottle_focal(b);
    let r_peak = golden_section_max(&ring, 0.2 * w0, 1.5 * w0, 1e-12 * w0);
    let g0 = beam::gaussian_intensity_unchecked(g, 0.0, 0.0);
    let transverse = ring(r_peak) / g0;

    let axial_b = |z: f64| beam::intensity_with_gradient(b, 0.0, 0.0, z).0;
    let axial_g = |z: f64| beam::gaussian_intensity_unchecked(g, 0.0, z);
    let z_peak = golden_section_max(&axial_b, 0.1 * zr, 3.0 * zr, 1e-12 * zr);
    let h = 1e-3 * zr;
    let second = |f: &dyn Fn(f64) -> f64| (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
    let stiffness = second(&axial_b) / -second(&axial_g);

    let eta = absorption_ratio(s)?;
    let matched_power = s.power_ratio() / transverse;
    let matched_eta = absorption_ratio(&s.with_power_ratio(matched_power)?)?;
    Ok(TrapComparison {
        transverse_depth_ratio: transverse,
        matched_power_ratio: matched_power,
        matched_eta_abs: matched_eta,
        longitudinal_stiffness_ratio: stiffness,
        longitudinal_depth_ratio: axial_b(z_peak) / g0,
        eta_abs: eta,
    })
}

impl fmt::Display for TrapComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "eta_abs={:.6}", self.eta_abs)?;
        writeln!(f, "transverse_depth_ratio={:.6}", self.transverse_depth_ratio)?;
        writeln!(f, "matched_power_ratio={:.6}", self.matched_power_ratio)?;
        writeln!(f, "matched_eta_abs={:.6}", self.matched_eta_abs)?;
        writeln!(f, "longitudinal_stiffness_ratio={:.6}", self.longitudinal_stiffness_ratio)?;
        writeln!(f, "longitudinal_depth_ratio={:.6}", self.longitudinal_depth_ratio)
    }
}
