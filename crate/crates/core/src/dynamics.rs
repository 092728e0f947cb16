//! Overdamped Langevin dynamics, γ dx = F dt + √(2 k_B T γ) dW, integrated
//! with Euler–Maruyama, plus Boltzmann-equilibrium references.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::beam::{self, Axis, BeamParams, MAX_GRID_VALUES};
use crate::error::{ensure, invalid, Error, EscapeReport, Result};
use crate::forces::{self, ParticleMedium, QuarticCoefficients};
use crate::{quadrature, rng};

/// Ratio dt·k_max/γ above which a configuration is rejected.
pub const STABILITY_FACTOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum ForceModel {
    Zero,
    /// Independent springs along x, y, z (N/m).
    Harmonic {
        stiffness: [f64; 3],
    },
    Quartic(QuarticCoefficients),
    /// Exact Rayleigh gradient force of the dark focus.
    Dipole {
        beam: BeamParams,
        include_scattering: bool,
    },
}

impl ForceModel {
    pub fn name(&self) -> &'static str {
        match self {
            ForceModel::Zero => "zero",
            ForceModel::Harmonic { .. } => "harmonic",
            ForceModel::Quartic(_) => "quartic",
            ForceModel::Dipole { .. } => "dipole-exact",
        }
    }

    /// Conservative part of the potential (J). The scattering force has none.
    pub fn potential(&self, particle: &ParticleMedium, pos: [f64; 3]) -> f64 {
        match self {
            ForceModel::Zero => 0.0,
            ForceModel::Harmonic { stiffness } => 0.5 * (0..3).map(|a| stiffness[a] * pos[a] * pos[a]).sum::<f64>(),
            ForceModel::Quartic(c) => c.potential_xyz(pos),
            ForceModel::Dipole { beam, .. } => {
                -forces::gradient_prefactor(particle) * beam::intensity_with_gradient(beam, pos[0], pos[1], pos[2]).0
            }
        }
    }

    fn validate(&self, particle: &ParticleMedium) -> Result<()> {
        match self {
            ForceModel::Zero => Ok(()),
            ForceModel::Harmonic { stiffness } => {
                ensure(stiffness.iter().all(|k| k.is_finite() && *k >= 0.0), "stiffness", "must be finite and >= 0")
            }
            ForceModel::Quartic(c) => QuarticCoefficients::new(c.k_z, c.k_rho_z, c.k_rho).map(|_| ()),
            ForceModel::Dipole { beam, .. } => {
                beam.validate()?;
                if (beam.n_m() - particle.n_m).abs() > 1e-12 * particle.n_m {
                    return Err(invalid("n_m", "beam and particle media differ"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: ForceModel,
    pub particle: ParticleMedium,
    /// s
    pub dt: f64,
    /// s
    pub duration: f64,
    /// m
    pub initial: [f64; 3],
    pub seed: u64,
    /// Escape radius (m); `None` selects the model default.
    pub domain_bound: Option<f64>,
    /// Keep one sample every this many steps.
    pub sample_every: usize,
    /// Accept a timestep above the stability limit with a warning.
    pub allow_large_dt: bool,
}

impl SimConfig {
    pub fn new(model: ForceModel, particle: ParticleMedium, dt: f64, duration: f64, seed: u64) -> Self {
        SimConfig {
            model,
            particle,
            dt,
            duration,
            initial: [0.0; 3],
            seed,
            domain_bound: None,
            sample_every: 1,
            allow_large_dt: false,
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt * (1.0 + 1e-12)).floor() as usize
    }

    /// Largest local stiffness probed by the particle (N/m), from the model
    /// curvature out to three thermal lengths or the initial offset.
    pub fn max_stiffness(&self) -> f64 {
        let kt = self.particle.thermal_energy();
        let r0 = self.initial[0].hypot(self.initial[1]);
        let z0 = self.initial[2].abs();
        match &self.model {
            ForceModel::Zero => 0.0,
            ForceModel::Harmonic { stiffness } => stiffness.iter().cloned().fold(0.0, f64::max),
            ForceModel::Quartic(c) => quartic_stiffness(c, kt, r0, z0),
            ForceModel::Dipole { beam, .. } => match forces::quartic_coefficients(beam, &self.particle) {
                Ok(c) => quartic_stiffness(&c, kt, r0, z0),
                Err(_) => 0.0,
            },
        }
    }

    /// Default escape radius: 3·max(ω₀, z_R) for the dipole field, 1.5× the
    /// saddle radius for the quartic, unbounded otherwise.
    pub fn effective_bound(&self) -> Option<f64> {
        if self.domain_bound.is_some() {
            return self.domain_bound;
        }
        match &self.model {
            ForceModel::Dipole { beam, .. } => Some(3.0 * beam.waist().max(beam.rayleigh_range())),
            ForceModel::Quartic(c) => c.saddle().map(|s| 1.5 * s.radius()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.particle.validate()?;
        self.model.validate(&self.particle)?;
        ensure(self.dt.is_finite() && self.dt > 0.0, "dt", "must be finite and > 0")?;
        ensure(self.duration.is_finite() && self.duration >= self.dt, "duration", "must be >= dt")?;
        ensure(self.initial.iter().all(|v| v.is_finite()), "initial", "must be finite")?;
        ensure(self.sample_every >= 1, "sample_every", "must be >= 1")?;
        if let Some(b) = self.domain_bound {
            ensure(b.is_finite() && b > 0.0, "domain_bound", "must be finite and > 0")?;
        }
        let k_max = self.max_stiffness();
        if k_max > 0.0 {
            let limit = STABILITY_FACTOR * self.particle.drag() / k_max;
            if self.dt > limit {
                if self.allow_large_dt {
                    log::warn!("dt = {:e} s exceeds the stability limit {:e} s", self.dt, limit);
                } else {
                    return Err(invalid("dt", format!("{:e} s exceeds the stability limit {:e} s", self.dt, limit)));
                }
            }
        }
        Ok(())
    }
}

fn quartic_stiffness(c: &QuarticCoefficients, kt: f64, r0: f64, z0: f64) -> f64 {
    let rho = if c.k_rho > 0.0 { 3.0 * (kt / c.k_rho).powf(0.25) } else { 0.0 }.max(r0);
    let z = if c.k_z > 0.0 { 3.0 * (kt / c.k_z).sqrt() } else { 0.0 }.max(z0);
    let axial = c.k_z.abs() + 2.0 * c.k_rho_z.abs() * rho * rho;
    let radial = 3.0 * c.k_rho.abs() * rho * rho + 2.0 * c.k_rho_z.abs() * z * z;
    axial.max(radial)
}

enum Field {
    Zero,
    Harmonic([f64; 3]),
    Quartic(QuarticCoefficients),
    Dipole { beam: BeamParams, gradient: f64, scattering: f64 },
}

impl Field {
    #[inline]
    fn force(&self, p: [f64; 3]) -> [f64; 3] {
        match self {
            Field::Zero => [0.0; 3],
            Field::Harmonic(k) => [-k[0] * p[0], -k[1] * p[1], -k[2] * p[2]],
            Field::Quartic(c) => c.force_xyz(p),
            Field::Dipole { beam, gradient, scattering } => {
                let (i, g) = beam::intensity_with_gradient(beam, p[0], p[1], p[2]);
                [gradient * g[0], gradient * g[1], gradient * g[2] + scattering * i]
            }
        }
    }
}

/// Single-trajectory stepper; one call to [`Integrator::advance`] per dt.
pub struct Integrator {
    field: Field,
    pos: [f64; 3],
    mobility_dt: f64,
    noise: f64,
    dt: f64,
    bound: Option<f64>,
    step_scale: f64,
    step: usize,
}

impl Integrator {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let gamma = cfg.particle.drag();
        let kt = cfg.particle.thermal_energy();
        let field = match &cfg.model {
            ForceModel::Zero => Field::Zero,
            ForceModel::Harmonic { stiffness } => Field::Harmonic(*stiffness),
            ForceModel::Quartic(c) => Field::Quartic(*c),
            ForceModel::Dipole { beam, include_scattering } => Field::Dipole {
                beam: *beam,
                gradient: forces::gradient_prefactor(&cfg.particle),
                scattering: if *include_scattering { forces::scattering_prefactor(beam, &cfg.particle) } else { 0.0 },
            },
        };
        let bound = cfg.effective_bound();
        let step_scale = match (&cfg.model, bound) {
            (_, Some(b)) => b,
            (ForceModel::Zero, None) => f64::INFINITY,
            (ForceModel::Harmonic { stiffness }, None) => {
                let k_min = stiffness.iter().cloned().filter(|k| *k > 0.0).fold(f64::INFINITY, f64::min);
                let offset = cfg.initial.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if k_min.is_finite() {
                    (50.0 * (kt / k_min).sqrt()).max(10.0 * offset)
                } else {
                    f64::INFINITY
                }
            }
            (_, None) => f64::INFINITY,
        };
        Ok(Integrator {
            field,
            pos: cfg.initial,
            mobility_dt: cfg.dt / gamma,
            noise: (2.0 * kt * cfg.dt / gamma).sqrt(),
            dt: cfg.dt,
            bound,
            step_scale,
            step: 0,
        })
    }

    pub fn position(&self) -> [f64; 3] {
        self.pos
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Advances by one dt with the given standard-normal increments.
    #[inline]
    pub fn advance(&mut self, xi: [f64; 3]) -> Result<[f64; 3]> {
        let f = self.field.force(self.pos);
        let mut disp2 = 0.0;
        let mut next = self.pos;
        for a in 0..3 {
            let d = f[a] * self.mobility_dt + self.noise * xi[a];
            next[a] += d;
            disp2 += d * d;
        }
        self.step += 1;
        let disp = disp2.sqrt();
        if !(disp <= self.step_scale) {
            return Err(Error::Unstable { step: self.step, displacement: disp, scale: self.step_scale });
        }
        self.pos = next;
        if let Some(bound) = self.bound {
            let r = (next[0] * next[0] + next[1] * next[1] + next[2] * next[2]).sqrt();
            if r > bound {
                return Err(Error::Escaped(EscapeReport {
                    time: self.step as f64 * self.dt,
                    step: self.step,
                    position: next,
                    bound,
                }));
            }
        }
        Ok(next)
    }
}

/// Uniformly sampled positions with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dt: f64,
    positions: Vec<[f64; 3]>,
    seed: Option<u64>,
    source: String,
    particle: Option<ParticleMedium>,
    beam: Option<BeamParams>,
}

impl Trajectory {
    pub fn new(dt: f64, positions: Vec<[f64; 3]>) -> Result<Self> {
        ensure(dt.is_finite() && dt > 0.0, "dt", "must be finite and > 0")?;
        ensure(positions.iter().flatten().all(|v| v.is_finite()), "positions", "must be finite")?;
        Ok(Trajectory { dt, positions, seed: None, source: "external".into(), particle: None, beam: None })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn particle(&self) -> Option<&ParticleMedium> {
        self.particle.as_ref()
    }

    pub fn beam(&self) -> Option<&BeamParams> {
        self.beam.as_ref()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.positions.len().saturating_sub(1) as f64
    }

    /// One coordinate (0 = x, 1 = y, 2 = z).
    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.positions.iter().map(|p| p[axis]).collect()
    }

    pub fn radial(&self) -> Vec<f64> {
        self.positions.iter().map(|p| p[0].hypot(p[1])).collect()
    }

    /// Every `stride`-th sample.
    pub fn subsample(&self, stride: usize) -> Result<Trajectory> {
        ensure(stride >= 1, "stride", "must be >= 1")?;
        Ok(Trajectory {
            dt: self.dt * stride as f64,
            positions: self.positions.iter().step_by(stride).copied().collect(),
            ..self.clone_meta()
        })
    }

    /// Positions multiplied by `factor`, as from a detector calibration.
    pub fn scaled(&self, factor: f64) -> Result<Trajectory> {
        ensure(factor.is_finite() && factor > 0.0, "factor", "must be finite and > 0")?;
        Ok(Trajectory { positions: self.positions.iter().map(|p| p.map(|v| v * factor)).collect(), ..self.clone() })
    }

    /// `k` contiguous, near-equal pieces.
    pub fn split(&self, k: usize) -> Result<Vec<Trajectory>> {
        ensure(k >= 1, "folds", "must be >= 1")?;
        if self.len() < k {
            return Err(Error::InsufficientData { needed: k, got: self.len() });
        }
        let n = self.len();
        Ok((0..k)
            .map(|i| Trajectory { positions: self.positions[i * n / k..(i + 1) * n / k].to_vec(), ..self.clone_meta() })
            .collect())
    }

    fn clone_meta(&self) -> Trajectory {
        Trajectory {
            dt: self.dt,
            positions: Vec::new(),
            seed: self.seed,
            source: self.source.clone(),
            particle: self.particle,
            beam: self.beam,
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# dt={:e}", self.dt)?;
        match self.seed {
            Some(s) => writeln!(out, "# seed={s}")?,
            None => writeln!(out, "# seed=none")?,
        }
        writeln!(out, "# source={}", self.source)?;
        writeln!(out, "t x y z")?;
        for (i, p) in self.positions.iter().enumerate() {
            writeln!(out, "{:e} {:e} {:e} {:e}", i as f64 * self.dt, p[0], p[1], p[2])?;
        }
        Ok(())
    }

    /// Reads `t x y z` (or `t x y`) rows, whitespace or comma separated.
    /// Positions are multiplied by `meters_per_pixel` when given, else by a
    /// `# meters_per_pixel=` comment in the file, else taken as metres.
    pub fn read_from<R: BufRead>(input: R, meters_per_pixel: Option<f64>) -> Result<Trajectory> {
        let mut dt = None;
        let mut seed = None;
        let mut source = None;
        let mut file_scale = None;
        let mut times = Vec::new();
        let mut positions = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: n + 1, message };
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((key, value)) = rest.split_once('=') {
                    let value = value.trim();
                    match key.trim() {
                        "dt" => dt = Some(value.parse::<f64>().map_err(|e| parse_err(e.to_string()))?),
                        "seed" => seed = value.parse::<u64>().ok(),
                        "source" => source = Some(value.to_string()),
                        "meters_per_pixel" => {
                            file_scale = Some(value.parse::<f64>().map_err(|e| parse_err(e.to_string()))?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> =
                line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
            if fields.first().is_some_and(|f| f.parse::<f64>().is_err()) && positions.is_empty() {
                continue;
            }
            if fields.len() != 3 && fields.len() != 4 {
                return Err(parse_err(format!("expected 3 or 4 columns, found {}", fields.len())));
            }
            let mut v = [0.0f64; 4];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?;
                if !slot.is_finite() {
                    return Err(parse_err("non-finite value".into()));
                }
            }
            times.push(v[0]);
            positions.push([v[1], v[2], v[3]]);
        }
        if positions.len() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: positions.len() });
        }
        let inferred = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        let dt = dt.unwrap_or(inferred);
        ensure(dt.is_finite() && dt > 0.0, "dt", "must be finite and > 0")?;
        for (i, t) in times.iter().enumerate() {
            let expected = times[0] + i as f64 * dt;
            if (t - expected).abs() > 1e-2 * dt {
                return Err(Error::Parse { line: i + 1, message: "non-uniform sampling".into() });
            }
        }
        let scale = meters_per_pixel.or(file_scale).unwrap_or(1.0);
        ensure(scale.is_finite() && scale > 0.0, "meters_per_pixel", "must be finite and > 0")?;
        if scale != 1.0 {
            for p in &mut positions {
                *p = p.map(|v| v * scale);
            }
        }
        Ok(Trajectory {
            dt,
            positions,
            seed,
            source: source.unwrap_or_else(|| "external".into()),
            particle: None,
            beam: None,
        })
    }
}

/// Runs `cfg` to completion. Deterministic in `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<Trajectory> {
    let mut integrator = Integrator::new(cfg)?;
    let mut rng = rng::stream(cfg.seed);
    let steps = cfg.steps();
    let mut positions = Vec::with_capacity(steps / cfg.sample_every + 1);
    positions.push(cfg.initial);
    for i in 1..=steps {
        let xi = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let p = integrator.advance(xi)?;
        if i % cfg.sample_every == 0 {
            positions.push(p);
        }
    }
    let beam = match &cfg.model {
        ForceModel::Dipole { beam, .. } => Some(*beam),
        _ => None,
    };
    Ok(Trajectory {
        dt: cfg.dt * cfg.sample_every as f64,
        positions,
        seed: Some(cfg.seed),
        source: format!("simulated {}", cfg.model.name()),
        particle: Some(cfg.particle),
        beam,
    })
}

/// Runs `cfg` once per seed, in parallel.
pub fn simulate_seeds(cfg: &SimConfig, seeds: &[u64]) -> Vec<Result<Trajectory>> {
    seeds.par_iter().map(|&seed| simulate(&SimConfig { seed, ..cfg.clone() })).collect()
}

/// Boltzmann density on a regular grid (first axis slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub axes: Vec<Axis>,
    pub values: Vec<f64>,
}

impl GridDensity {
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.step).product()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }
}

/// P ∝ exp(−V/k_BT) sampled on the grid nodes, normalized so that
/// Σ P·(cell volume) = 1. Rejects potentials whose lowest values sit on the
/// grid boundary below every interior value, the discrete signature of a
/// potential unbounded below.
pub fn equilibrium_pdf<F>(potential: F, temperature: f64, axes: &[Axis]) -> Result<GridDensity>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    ensure(temperature.is_finite() && temperature > 0.0, "temperature", "must be finite and > 0")?;
    ensure(!axes.is_empty(), "axes", "need at least one axis")?;
    let total: usize = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.count)).unwrap_or(usize::MAX);
    if total > MAX_GRID_VALUES {
        return Err(Error::GridTooLarge { requested: total, cap: MAX_GRID_VALUES });
    }
    let kt = crate::K_B * temperature;
    let index = |mut flat: usize| {
        let mut idx = vec![0usize; axes.len()];
        for d in (0..axes.len()).rev() {
            idx[d] = flat % axes[d].count;
            flat /= axes[d].count;
        }
        idx
    };
    let v: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let coords: Vec<f64> = index(flat).iter().zip(axes).map(|(&i, a)| a.value(i)).collect();
            potential(&coords)
        })
        .collect();
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NotNormalizable(format!("potential is not finite at grid node {i}")));
    }
    let has_interior = axes.iter().all(|a| a.count >= 3);
    if has_interior {
        let (mut edge_min, mut inner_min) = (f64::INFINITY, f64::INFINITY);
        for (flat, &val) in v.iter().enumerate() {
            let edge = index(flat).iter().zip(axes).any(|(&i, a)| i == 0 || i + 1 == a.count);
            if edge {
                edge_min = edge_min.min(val);
            } else {
                inner_min = inner_min.min(val);
            }
        }
        if edge_min < inner_min - 1e-9 * kt {
            return Err(Error::NotNormalizable(format!(
                "potential on the grid boundary ({edge_min:e} J) lies below the interior minimum ({inner_min:e} J)"
            )));
        }
    }
    let v_min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut values: Vec<f64> = v.iter().map(|x| (-(x - v_min) / kt).exp()).collect();
    let cell: f64 = axes.iter().map(|a| a.step).product();
    let norm = values.iter().sum::<f64>() * cell;
    for p in &mut values {
        *p /= norm;
    }
    Ok(GridDensity { axes: axes.to_vec(), values })
}

/// Integration region for marginal densities: ρ ≤ `rho_max`, |z| ≤ `z_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cylinder {
    pub rho_max: f64,
    pub z_max: f64,
}

impl Cylinder {
    /// Region bounded by the quartic saddle (or 12 thermal lengths when
    /// there is none); V ≥ 0 inside for k_z, k_ρ > 0.
    pub fn for_quartic(c: &QuarticCoefficients, temperature: f64) -> Result<Self> {
        ensure(c.k_z > 0.0 && c.k_rho > 0.0, "quartic coefficients", "k_z and k_rho must be > 0")?;
        Ok(match c.saddle() {
            Some(s) => Cylinder { rho_max: s.rho, z_max: s.z },
            None => {
                let kt = crate::K_B * temperature;
                Cylinder { rho_max: 12.0 * (kt / c.k_rho).powf(0.25), z_max: 12.0 * (kt / c.k_z).sqrt() }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalAxis {
    X,
    Z,
}

const MARGINAL_TOL: f64 = 1e-7;

/// Probability of each bin `[edges[i], edges[i+1])` under the one-axis
/// marginal of exp(−V/k_BT) restricted to `domain`, by nested quadrature.
pub fn marginal_bin_probabilities<F>(
    potential: F,
    temperature: f64,
    axis: MarginalAxis,
    domain: Cylinder,
    edges: &[f64],
) -> Result<Vec<f64>>
where
    F: Fn([f64; 3]) -> f64 + Sync,
{
    ensure(temperature.is_finite() && temperature > 0.0, "temperature", "must be finite and > 0")?;
    ensure(edges.len() >= 2, "edges", "need at least two edges")?;
    ensure(edges.windows(2).all(|w| w[1] > w[0]), "edges", "must be strictly increasing")?;
    ensure(domain.rho_max > 0.0 && domain.z_max > 0.0, "domain", "must have positive extent")?;
    let kt = crate::K_B * temperature;
    let v0 = potential([0.0; 3]);
    let weight = |p: [f64; 3]| (-(potential(p) - v0) / kt).exp();
    let (rm, zm) = (domain.rho_max, domain.z_max);
    let slice = |u: f64| -> f64 {
        let result = match axis {
            MarginalAxis::X => {
                let y_max = (rm * rm - u * u).max(0.0).sqrt();
                quadrature::integrate(
                    |y| quadrature::integrate(|z| weight([u, y, z]), -zm, zm, MARGINAL_TOL).unwrap_or(f64::NAN),
                    -y_max,
                    y_max,
                    MARGINAL_TOL,
                )
            }
            MarginalAxis::Z => quadrature::integrate(
                |x| {
                    let y_max = (rm * rm - x * x).max(0.0).sqrt();
                    quadrature::integrate(|y| weight([x, y, u]), -y_max, y_max, MARGINAL_TOL).unwrap_or(f64::NAN)
                },
                -rm,
                rm,
                MARGINAL_TOL,
            ),
        };
        result.unwrap_or(f64::NAN)
    };
    let half = match axis {
        MarginalAxis::X => rm,
        MarginalAxis::Z => zm,
    };
    let mass = |a: f64, b: f64| -> Result<f64> {
        let (a, b) = (a.max(-half), b.min(half));
        if b <= a {
            return Ok(0.0);
        }
        quadrature::integrate(slice, a, b, MARGINAL_TOL)
    };
    let total = mass(-half, half)?;
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NotNormalizable("marginal has no finite mass on the domain".into()));
    }
    let bins: Vec<(f64, f64)> = edges.windows(2).map(|w| (w[0], w[1])).collect();
    bins.par_iter().map(|&(a, b)| mass(a, b).map(|m| m / total)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn particle() -> ParticleMedium {
        ParticleMedium::new(575e-9, 1.45, 1.53, 0.89e-3, 293.0).unwrap()
    }

    fn variance(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    }

    #[test]
    fn zero_force_cold_limit_stays_put() {
        let pm = particle().with_temperature(1e-300).unwrap();
        let mut cfg = SimConfig::new(ForceModel::Zero, pm, 1e-4, 0.1, 1);
        cfg.initial = [1e-7, -2e-7, 3e-7];
        let t = simulate(&cfg).unwrap();
        assert_eq!(t.len(), 1001);
        assert!(t.positions().iter().all(|p| *p == cfg.initial));
    }

    #[test]
    fn length_and_determinism() {
        let k = 1e-6;
        let cfg = SimConfig::new(ForceModel::Harmonic { stiffness: [k; 3] }, particle(), 1e-4, 0.25, 99);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.len(), 2501);
        assert_eq!(a, b);
        let c = simulate(&SimConfig { seed: 100, ..cfg.clone() }).unwrap();
        assert_ne!(a, c);
        let strided = simulate(&SimConfig { sample_every: 10, ..cfg }).unwrap();
        assert_eq!(strided.len(), 251);
        assert_eq!(strided.positions()[7], a.positions()[70]);
    }

    #[test]
    fn rejects_bad_configs() {
        let pm = particle();
        let k = 1e-6;
        let gamma = pm.drag();
        let h = ForceModel::Harmonic { stiffness: [k; 3] };
        assert!(simulate(&SimConfig::new(h.clone(), pm, 0.0, 1.0, 0)).is_err());
        assert!(simulate(&SimConfig::new(h.clone(), pm, 1e-3, 1e-4, 0)).is_err());
        let big = 0.5 * gamma / k;
        assert!(matches!(
            simulate(&SimConfig::new(h.clone(), pm, big, 10.0 * big, 0)),
            Err(Error::InvalidParameter { .. })
        ));
        let mut over = SimConfig::new(h, pm, 1.5 * gamma / k, 100.0 * gamma / k, 0);
        over.allow_large_dt = true;
        assert!(simulate(&over).is_ok());
    }

    #[test]
    fn divergent_step_reports_instability() {
        let pm = particle();
        let k = 1e-6;
        let mut cfg = SimConfig::new(ForceModel::Harmonic { stiffness: [k; 3] }, pm, 3.0 * pm.drag() / k, 1.0, 0);
        cfg.duration = 1000.0 * cfg.dt;
        cfg.allow_large_dt = true;
        cfg.initial = [1e-7, 0.0, 0.0];
        assert!(matches!(simulate(&cfg), Err(Error::Unstable { .. })));
    }

    #[test]
    fn escape_from_unbounded_quartic() {
        let c = QuarticCoefficients::new(3.86e-7, 8.81e7, 2.26e8).unwrap();
        let pm = particle();
        let cfg = SimConfig::new(ForceModel::Quartic(c), pm, 2e-5, 10.0, 3);
        let bound = cfg.effective_bound().unwrap();
        assert_relative_eq!(bound, 1.5 * c.saddle().unwrap().radius());
        match simulate(&cfg) {
            Err(Error::Escaped(r)) => {
                assert_eq!(r.bound, bound);
                let r2: f64 = r.position.iter().map(|v| v * v).sum();
                assert!(r2.sqrt() > bound && r.time > 0.0);
            }
            other => panic!("expected escape, got {other:?}"),
        }
    }

    #[test]
    fn harmonic_equipartition() {
        let pm = particle();
        let k = [1e-6, 2e-6, 5e-7];
        let gamma = pm.drag();
        let dt = 0.02 * gamma / 2e-6;
        let mut cfg = SimConfig::new(ForceModel::Harmonic { stiffness: k }, pm, dt, 2e6 * dt, 11);
        cfg.sample_every = 5;
        let t = simulate(&cfg).unwrap();
        for (a, ka) in k.iter().enumerate() {
            let a_step = ka * dt / gamma;
            // Discrete-time Euler–Maruyama variance kT/k/(1 − a/2).
            let oracle = pm.thermal_energy() / ka / (1.0 - a_step / 2.0);
            let v = variance(&t.axis(a)[1000..]);
            assert!((v / oracle - 1.0).abs() < 0.03, "axis {a}: {v:e} vs {oracle:e}");
        }
    }

    #[test]
    fn halving_dt_keeps_variance() {
        let pm = particle();
        let k = 1e-6;
        let gamma = pm.drag();
        let dt = 0.02 * gamma / k;
        let model = ForceModel::Harmonic { stiffness: [k; 3] };
        let coarse = SimConfig::new(model.clone(), pm, dt, 1.0, 0);
        let fine = SimConfig::new(model, pm, dt / 2.0, 1.0, 0);
        let mut a = Integrator::new(&coarse).unwrap();
        let mut b = Integrator::new(&fine).unwrap();
        let mut rng = rng::stream(21);
        let (mut sa, mut sb) = (0.0, 0.0);
        let n = 400_000;
        for _ in 0..n {
            let u: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            b.advance(u).unwrap();
            let pb = b.advance(v).unwrap();
            let pa = a.advance([0, 1, 2].map(|i| (u[i] + v[i]) / 2f64.sqrt())).unwrap();
            sa += pa.iter().map(|x| x * x).sum::<f64>();
            sb += pb.iter().map(|x| x * x).sum::<f64>();
        }
        assert!((sa / sb - 1.0).abs() < 0.01, "{}", sa / sb);
    }

    #[test]
    fn dipole_trap_is_platykurtic_transversally() {
        let pm = particle();
        let beam = BeamParams::new(780e-9, 1.53, 0.46, 3.19e-3).unwrap();
        let model = ForceModel::Dipole { beam, include_scattering: false };
        let mut cfg = SimConfig::new(model, pm, 4e-5, 40.0, 5);
        cfg.sample_every = 10;
        let t = simulate(&cfg).unwrap();
        let x = t.axis(0);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
        let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / x.len() as f64;
        let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / x.len() as f64;
        assert!((m3 / m2.powf(1.5)).abs() < 0.1);
        assert!(m4 / (m2 * m2) - 3.0 < -0.3, "excess kurtosis {}", m4 / (m2 * m2) - 3.0);
    }

    #[test]
    fn equilibrium_pdf_examples() {
        let kt = crate::K_B * 293.0;
        let k = 1e-6;
        let sigma = (kt / k).sqrt();
        let axis = Axis::symmetric(10.0 * sigma, 2001).unwrap();
        let d = equilibrium_pdf(|x| 0.5 * k * x[0] * x[0], 293.0, &[axis]).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-9);
        let m2: f64 = d.values.iter().enumerate().map(|(i, p)| p * axis.value(i).powi(2)).sum::<f64>() * axis.step;
        assert_relative_eq!(m2, sigma * sigma, max_relative = 1e-6);

        let flat =
            equilibrium_pdf(|_| 3.0, 293.0, &[Axis::new(0.0, 0.1, 10).unwrap(), Axis::new(0.0, 0.2, 5).unwrap()])
                .unwrap();
        assert!(flat.values.iter().all(|p| (p - 1.0 / (50.0 * 0.02)).abs() < 1e-12));

        let unbounded = |x: &[f64]| -1e-21 * (x[0] / sigma).powi(2);
        assert!(matches!(equilibrium_pdf(unbounded, 293.0, &[axis]), Err(Error::NotNormalizable(_))));
        assert!(equilibrium_pdf(|_| f64::NAN, 293.0, &[axis]).is_err());
    }

    #[test]
    fn harmonic_marginal_quadrature() {
        let kt = crate::K_B * 293.0;
        let (kx, kz) = (1e-6, 4e-7);
        let sx = (kt / kx).sqrt();
        let sz = (kt / kz).sqrt();
        let v = |p: [f64; 3]| 0.5 * kx * (p[0] * p[0] + p[1] * p[1]) + 0.5 * kz * p[2] * p[2];
        let domain = Cylinder { rho_max: 12.0 * sx, z_max: 12.0 * sz };
        let p = marginal_bin_probabilities(v, 293.0, MarginalAxis::X, domain, &[-sx, sx]).unwrap();
        assert!((p[0] - 0.682_689_492_137_086).abs() < 1e-6, "{}", p[0]);
        let p = marginal_bin_probabilities(v, 293.0, MarginalAxis::Z, domain, &[0.0, 2.0 * sz]).unwrap();
        assert!((p[0] - 0.477_249_868_051_821).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn trajectory_roundtrip_and_import() {
        let cfg = SimConfig::new(ForceModel::Harmonic { stiffness: [1e-6; 3] }, particle(), 1e-4, 0.01, 4);
        let t = simulate(&cfg).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# dt=1e-4\n# seed=4\n"));
        assert!(text.contains("\nt x y z\n"));
        let back = Trajectory::read_from(&buf[..], None).unwrap();
        assert_eq!(back.dt(), t.dt());
        assert_eq!(back.seed(), Some(4));
        assert_eq!(back.positions(), t.positions());

        let csv = "# meters_per_pixel=1e-7\nt,x,y\n0,1,2\n0.0667,3,4\n0.1333,5,6\n";
        let e = Trajectory::read_from(csv.as_bytes(), None).unwrap();
        assert_relative_eq!(e.positions()[2][0], 5e-7);
        assert_eq!(e.positions()[2][2], 0.0);
        assert_relative_eq!(e.dt(), 0.06665, max_relative = 1e-3);
        let e2 = Trajectory::read_from(csv.as_bytes(), Some(2e-7)).unwrap();
        assert_relative_eq!(e2.positions()[1][1], 8e-7);
        assert!(Trajectory::read_from("t x y z\n0 0 0 0\n1 0 0 0\n5 0 0 0\n".as_bytes(), None).is_err());
    }

    #[test]
    fn split_and_subsample() {
        let t = Trajectory::new(1.0, (0..103).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let folds = t.split(5).unwrap();
        assert_eq!(folds.iter().map(|f| f.len()).sum::<usize>(), 103);
        assert_eq!(folds[1].positions()[0][0], 20.0);
        let s = t.subsample(10).unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s.dt(), 10.0);
    }
}
