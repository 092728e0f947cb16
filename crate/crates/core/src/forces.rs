//! Rayleigh-regime optical forces on a sphere in the dark focus, the quartic
//! expansion of the trap, and polynomial fits to sampled force fields.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::beam::{self, golden_section_max, BeamParams, CylindricalPoint};
use crate::error::{ensure, invalid, Error, Result};
use crate::fit;
use crate::{K_B, SPEED_OF_LIGHT};

/// Sphere plus the surrounding fluid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleMedium {
    pub radius: f64,
    pub n_p: f64,
    pub n_m: f64,
    pub viscosity: f64,
    pub temperature: f64,
}

impl ParticleMedium {
    pub fn new(radius: f64, n_p: f64, n_m: f64, viscosity: f64, temperature: f64) -> Result<Self> {
        let pm = ParticleMedium { radius, n_p, n_m, viscosity, temperature };
        pm.validate()?;
        Ok(pm)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.radius.is_finite() && self.radius > 0.0, "radius", "must be finite and > 0")?;
        ensure(self.n_p.is_finite() && self.n_p >= 1.0, "n_p", "must be finite and >= 1")?;
        ensure(self.n_m.is_finite() && self.n_m >= 1.0, "n_m", "must be finite and >= 1")?;
        ensure(self.viscosity.is_finite() && self.viscosity > 0.0, "viscosity", "must be finite and > 0")?;
        ensure(self.temperature.is_finite() && self.temperature > 0.0, "temperature", "must be finite and > 0")
    }

    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        self.radius = radius;
        self.validate()?;
        Ok(self)
    }

    pub fn with_particle_index(mut self, n_p: f64) -> Result<Self> {
        self.n_p = n_p;
        self.validate()?;
        Ok(self)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    /// m = n_p / n_m
    pub fn index_ratio(&self) -> f64 {
        self.n_p / self.n_m
    }

    /// (m² − 1)/(m² + 2); negative for particles that seek the dark.
    pub fn polarizability_factor(&self) -> f64 {
        let m2 = self.index_ratio().powi(2);
        (m2 - 1.0) / (m2 + 2.0)
    }

    /// Stokes drag γ = 6πηR (kg/s).
    pub fn drag(&self) -> f64 {
        6.0 * PI * self.viscosity * self.radius
    }

    /// k_B T (J).
    pub fn thermal_energy(&self) -> f64 {
        K_B * self.temperature
    }
}

fn check_media(beam: &BeamParams, pm: &ParticleMedium) -> Result<()> {
    beam.validate()?;
    pm.validate()?;
    if (beam.n_m() - pm.n_m).abs() > 1e-12 * pm.n_m {
        return Err(invalid(
            "n_m",
            format!("beam medium index {} differs from particle medium {}", beam.n_m(), pm.n_m),
        ));
    }
    Ok(())
}

/// (2π n_m R³/c)·α, the signed energy per unit intensity (J·m²/W).
pub fn gradient_prefactor(pm: &ParticleMedium) -> f64 {
    2.0 * PI * pm.n_m * pm.radius.powi(3) / SPEED_OF_LIGHT * pm.polarizability_factor()
}

/// V = −(2π n_m R³/c)·α·I. Non-negative with minimum 0 at the dark focus when m < 1.
pub fn dipole_potential(beam: &BeamParams, pm: &ParticleMedium, pt: &CylindricalPoint) -> Result<f64> {
    check_media(beam, pm)?;
    Ok(-gradient_prefactor(pm) * beam::dft_intensity(beam, pt)?)
}

fn check_position(pos: &[f64; 3]) -> Result<()> {
    ensure(pos.iter().all(|v| v.is_finite()), "position", "must be finite")
}

/// F = (2π n_m R³/c)·α·∇I from the closed-form intensity gradient.
pub fn dipole_gradient_force(beam: &BeamParams, pm: &ParticleMedium, pos: [f64; 3]) -> Result<[f64; 3]> {
    check_media(beam, pm)?;
    check_position(&pos)?;
    let f = gradient_force_unchecked(beam, gradient_prefactor(pm), pos);
    if f.iter().all(|v| v.is_finite()) {
        Ok(f)
    } else {
        Err(Error::NonConvergence(format!("non-finite gradient force at {pos:?}")))
    }
}

#[inline]
pub(crate) fn gradient_force_unchecked(beam: &BeamParams, prefactor: f64, pos: [f64; 3]) -> [f64; 3] {
    let (_, g) = beam::intensity_with_gradient(beam, pos[0], pos[1], pos[2]);
    [prefactor * g[0], prefactor * g[1], prefactor * g[2]]
}

/// (128π⁵R⁶/3cλ₀⁴)·α²·n_m⁵, multiplies I to give the axial scattering force.
pub fn scattering_prefactor(beam: &BeamParams, pm: &ParticleMedium) -> f64 {
    128.0 * PI.powi(5) * pm.radius.powi(6) / (3.0 * SPEED_OF_LIGHT * beam.lambda0().powi(4))
        * pm.polarizability_factor().powi(2)
        * pm.n_m.powi(5)
}

/// Scattering force, always along +z.
pub fn dipole_scattering_force(beam: &BeamParams, pm: &ParticleMedium, pos: [f64; 3]) -> Result<[f64; 3]> {
    check_media(beam, pm)?;
    check_position(&pos)?;
    let i = beam::intensity_with_gradient(beam, pos[0], pos[1], pos[2]).0;
    Ok([0.0, 0.0, scattering_prefactor(beam, pm) * i])
}

/// Coefficients of V ≈ (k_z/2) z² − k_ρz ρ² z² + (k_ρ/4) ρ⁴.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuarticCoefficients {
    /// N/m
    pub k_z: f64,
    /// N/m³
    pub k_rho_z: f64,
    /// N/m³
    pub k_rho: f64,
}

/// Saddle of the quartic surface, the lowest escape route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Saddle {
    pub rho: f64,
    pub z: f64,
    pub energy: f64,
}

impl Saddle {
    pub fn radius(&self) -> f64 {
        self.rho.hypot(self.z)
    }
}

impl QuarticCoefficients {
    pub fn new(k_z: f64, k_rho_z: f64, k_rho: f64) -> Result<Self> {
        ensure(k_z.is_finite() && k_rho_z.is_finite() && k_rho.is_finite(), "quartic coefficients", "must be finite")?;
        Ok(QuarticCoefficients { k_z, k_rho_z, k_rho })
    }

    pub fn is_locally_confining(&self) -> bool {
        self.k_z > 0.0 && self.k_rho_z > 0.0 && self.k_rho > 0.0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        QuarticCoefficients { k_z: self.k_z * factor, k_rho_z: self.k_rho_z * factor, k_rho: self.k_rho * factor }
    }

    pub fn potential_xyz(&self, pos: [f64; 3]) -> f64 {
        let rho2 = pos[0] * pos[0] + pos[1] * pos[1];
        let z2 = pos[2] * pos[2];
        0.5 * self.k_z * z2 - self.k_rho_z * rho2 * z2 + 0.25 * self.k_rho * rho2 * rho2
    }

    #[inline]
    pub fn force_xyz(&self, pos: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = pos;
        let rho2 = x * x + y * y;
        let t = 2.0 * self.k_rho_z * z * z - self.k_rho * rho2;
        [t * x, t * y, (-self.k_z + 2.0 * self.k_rho_z * rho2) * z]
    }

    /// Off-axis saddle for k_z, k_ρz, k_ρ > 0 at
    /// ρ² = k_z/(2k_ρz), z² = k_ρ k_z/(4k_ρz²), with energy k_ρ k_z²/(16 k_ρz²).
    pub fn saddle(&self) -> Option<Saddle> {
        if !self.is_locally_confining() {
            return None;
        }
        let rho2 = self.k_z / (2.0 * self.k_rho_z);
        let z2 = self.k_rho * self.k_z / (4.0 * self.k_rho_z * self.k_rho_z);
        let energy = self.k_rho * self.k_z * self.k_z / (16.0 * self.k_rho_z * self.k_rho_z);
        Some(Saddle { rho: rho2.sqrt(), z: z2.sqrt(), energy })
    }
}

impl fmt::Display for QuarticCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k_z={:e} N/m, k_rho_z={:e} N/m^3, k_rho={:e} N/m^3", self.k_z, self.k_rho_z, self.k_rho)
    }
}

/// Dimensionless-shape coefficients μ′, η′, χ′ of the intensity expansion
/// I/(P/πω₀²) ≈ μ′z² − η′ρ²z² + χ′ρ⁴.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionCoefficients {
    pub mu: f64,
    pub eta: f64,
    pub chi: f64,
}

pub fn expansion_coefficients(beam: &BeamParams) -> Result<ExpansionCoefficients> {
    beam.validate()?;
    let p = beam.p_index() as f64;
    if beam.p_index() == 0 {
        return Err(invalid("p_index", "p = 0 has no dark focus"));
    }
    let w0 = beam.waist();
    let zr = beam.rayleigh_range();
    Ok(ExpansionCoefficients {
        mu: 4.0 * p * p / (zr * zr),
        eta: 8.0 * p * p * (p + 1.0) / (w0 * w0 * zr * zr),
        chi: 4.0 * p * p / w0.powi(4),
    })
}

/// |V₀| = |2π n_m R³ α / c|·P/(πω₀²), the energy scale multiplying the
/// expansion coefficients.
pub fn potential_scale(beam: &BeamParams, pm: &ParticleMedium) -> f64 {
    let w0 = beam.waist();
    gradient_prefactor(pm).abs() * beam.power() / (PI * w0 * w0)
}

/// Quartic trap coefficients of the dipole model:
/// k_z = 2|V₀|μ′, k_ρz = |V₀|η′, k_ρ = 4|V₀|χ′.
pub fn quartic_coefficients(beam: &BeamParams, pm: &ParticleMedium) -> Result<QuarticCoefficients> {
    check_media(beam, pm)?;
    let e = expansion_coefficients(beam)?;
    if pm.index_ratio() >= 1.0 {
        log::warn!("index ratio m = {:.4} >= 1: the dark focus repels rather than traps", pm.index_ratio());
    }
    let v0 = potential_scale(beam, pm);
    QuarticCoefficients::new(2.0 * v0 * e.mu, v0 * e.eta, 4.0 * v0 * e.chi)
}

pub fn quartic_potential(c: &QuarticCoefficients, pt: &CylindricalPoint) -> f64 {
    c.potential_xyz([pt.rho, 0.0, pt.z])
}

pub fn quartic_force(c: &QuarticCoefficients, pos: [f64; 3]) -> [f64; 3] {
    c.force_xyz(pos)
}

/// Height of the transverse barrier at the focal plane (J), max_ρ V(ρ, 0).
pub fn transverse_barrier(beam: &BeamParams, pm: &ParticleMedium) -> Result<f64> {
    check_media(beam, pm)?;
    let w0 = beam.waist();
    let f = |r: f64| beam::intensity_with_gradient(beam, r, 0.0, 0.0).0;
    let geometry = beam::bottle_geometry(beam)?;
    let r = golden_section_max(&f, 0.5 * geometry.width - 0.2 * w0, 0.5 * geometry.width + 0.2 * w0, 1e-14 * w0);
    Ok(gradient_prefactor(pm).abs() * f(r))
}

/// Beam power that makes the transverse barrier equal `barrier` (J).
pub fn power_for_barrier(beam: &BeamParams, pm: &ParticleMedium, barrier: f64) -> Result<f64> {
    ensure(barrier.is_finite() && barrier > 0.0, "barrier", "must be finite and > 0")?;
    let per_watt = transverse_barrier(&beam.with_power(1.0)?, pm)?;
    ensure(per_watt > 0.0, "particle", "index-matched particle feels no force")?;
    Ok(barrier / per_watt)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    DipoleAnalytic,
    QuarticModel,
    ImportedExternal(String),
}

impl Provenance {
    fn label(&self) -> String {
        match self {
            Provenance::DipoleAnalytic => "dipole-analytic".into(),
            Provenance::QuarticModel => "quartic-model".into(),
            Provenance::ImportedExternal(s) if s.is_empty() => "imported-external".into(),
            Provenance::ImportedExternal(s) => format!("imported-external {s}"),
        }
    }

    fn parse(s: &str) -> Self {
        match s.trim() {
            "dipole-analytic" => Provenance::DipoleAnalytic,
            "quartic-model" => Provenance::QuarticModel,
            other => Provenance::ImportedExternal(
                other.strip_prefix("imported-external").unwrap_or(other).trim().to_string(),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceSample {
    pub position: [f64; 3],
    pub force: [f64; 3],
}

/// Uniform sampling box centred on the focus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleBox {
    pub half_x: f64,
    pub half_y: f64,
    pub half_z: f64,
    pub per_axis: usize,
}

impl SampleBox {
    /// |x|,|y| ≤ fraction·ω₀, |z| ≤ fraction·z_R.
    pub fn scaled_to(beam: &BeamParams, fraction: f64, per_axis: usize) -> Self {
        SampleBox {
            half_x: fraction * beam.waist(),
            half_y: fraction * beam.waist(),
            half_z: fraction * beam.rayleigh_range(),
            per_axis,
        }
    }

    /// Default validation region: 0.35 of the waist and Rayleigh range, 11³ samples.
    pub fn default_for(beam: &BeamParams) -> Self {
        SampleBox::scaled_to(beam, 0.35, 11)
    }

    pub fn positions(&self) -> Result<Vec<[f64; 3]>> {
        ensure(self.per_axis >= 2, "per_axis", "need at least 2 samples per axis")?;
        ensure(
            [self.half_x, self.half_y, self.half_z].iter().all(|h| h.is_finite() && *h > 0.0),
            "sample box",
            "half widths must be finite and > 0",
        )?;
        let n = self.per_axis;
        let at = |h: f64, i: usize| -h + 2.0 * h * i as f64 / (n - 1) as f64;
        let mut out = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out.push([at(self.half_x, i), at(self.half_y, j), at(self.half_z, k)]);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForceGrid {
    pub samples: Vec<ForceSample>,
    pub provenance: Provenance,
}

impl ForceGrid {
    /// Gradient force of the dipole model (plus the scattering force if asked).
    pub fn dipole(
        beam: &BeamParams,
        pm: &ParticleMedium,
        region: &SampleBox,
        include_scattering: bool,
    ) -> Result<Self> {
        check_media(beam, pm)?;
        let pref = gradient_prefactor(pm);
        let spref = if include_scattering { scattering_prefactor(beam, pm) } else { 0.0 };
        let samples = region
            .positions()?
            .into_par_iter()
            .map(|p| {
                let (i, g) = beam::intensity_with_gradient(beam, p[0], p[1], p[2]);
                ForceSample { position: p, force: [pref * g[0], pref * g[1], pref * g[2] + spref * i] }
            })
            .collect();
        Ok(ForceGrid { samples, provenance: Provenance::DipoleAnalytic })
    }

    pub fn quartic(c: &QuarticCoefficients, region: &SampleBox) -> Result<Self> {
        let samples =
            region.positions()?.into_iter().map(|p| ForceSample { position: p, force: c.force_xyz(p) }).collect();
        Ok(ForceGrid { samples, provenance: Provenance::QuarticModel })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# source: {}", self.provenance.label())?;
        writeln!(out, "x y z fx fy fz")?;
        for s in &self.samples {
            let [x, y, z] = s.position;
            let [fx, fy, fz] = s.force;
            writeln!(out, "{x:e} {y:e} {z:e} {fx:e} {fy:e} {fz:e}")?;
        }
        Ok(())
    }

    /// Whitespace- or comma-separated `x y z fx fy fz` rows. Without a
    /// `# source:` line the grid is tagged as externally imported.
    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut provenance = None;
        let mut samples = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(src) = rest.trim().strip_prefix("source:") {
                    provenance = Some(Provenance::parse(src));
                }
                continue;
            }
            let fields: Vec<&str> =
                line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
            if fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
                // column header
                continue;
            }
            if fields.len() != 6 {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected 6 columns, found {}", fields.len()),
                });
            }
            let mut v = [0.0f64; 6];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|e| Error::Parse { line: n + 1, message: format!("{e}") })?;
                if !slot.is_finite() {
                    return Err(Error::Parse { line: n + 1, message: "non-finite value".into() });
                }
            }
            samples.push(ForceSample { position: [v[0], v[1], v[2]], force: [v[3], v[4], v[5]] });
        }
        Ok(ForceGrid { samples, provenance: provenance.unwrap_or(Provenance::ImportedExternal(String::new())) })
    }
}

/// Per-axis normalized residuals √(Σ(f − f̂)²/Σf²) and their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseReport {
    pub per_axis: [f64; 3],
    pub rmse_avg: f64,
    pub samples: usize,
}

pub fn rmse_report(grid: &ForceGrid, c: &QuarticCoefficients) -> RmseReport {
    let mut num = [0.0; 3];
    let mut den = [0.0; 3];
    for s in &grid.samples {
        let fh = c.force_xyz(s.position);
        for a in 0..3 {
            num[a] += (s.force[a] - fh[a]).powi(2);
            den[a] += s.force[a].powi(2);
        }
    }
    let per_axis = [0, 1, 2].map(|a| {
        if den[a] > 0.0 {
            (num[a] / den[a]).sqrt()
        } else if num[a] == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    });
    RmseReport { per_axis, rmse_avg: per_axis.iter().sum::<f64>() / 3.0, samples: grid.samples.len() }
}

/// Minimum number of samples accepted by [`fit_polynomial_force`].
pub const MIN_FIT_SAMPLES: usize = 125;

/// Joint linear least-squares fit of the quartic force form to all three
/// components with shared coefficients.
pub fn fit_polynomial_force(grid: &ForceGrid) -> Result<(QuarticCoefficients, RmseReport)> {
    let n = grid.samples.len();
    if n < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData { needed: MIN_FIT_SAMPLES, got: n });
    }
    ensure(
        grid.samples.iter().all(|s| s.position.iter().chain(&s.force).all(|v| v.is_finite())),
        "force grid",
        "entries must be finite",
    )?;
    // Columns: k_z, k_ρz, k_ρ.
    let mut design = DMatrix::zeros(3 * n, 3);
    let mut rhs = Vec::with_capacity(3 * n);
    for (i, s) in grid.samples.iter().enumerate() {
        let [x, y, z] = s.position;
        let rho2 = x * x + y * y;
        design[(3 * i, 1)] = 2.0 * z * z * x;
        design[(3 * i, 2)] = -rho2 * x;
        design[(3 * i + 1, 1)] = 2.0 * z * z * y;
        design[(3 * i + 1, 2)] = -rho2 * y;
        design[(3 * i + 2, 0)] = -z;
        design[(3 * i + 2, 1)] = 2.0 * rho2 * z;
        rhs.extend_from_slice(&s.force);
    }
    let fit = fit::linear_least_squares(&design, &rhs, None)?;
    let c = QuarticCoefficients::new(fit.coefficients[0], fit.coefficients[1], fit.coefficients[2])?;
    Ok((c, rmse_report(grid, &c)))
}
