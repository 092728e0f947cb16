//! Laguerre-Gauss modes and the dark-focus (bottle beam) intensity.
//!
//! The dark focus is the superposition `(u₀,₀ + e^{iθ} u₀,ₚ)/√2` of the
//! fundamental Gaussian and a radial Laguerre-Gauss mode. Its intensity is
//! zero at the focus for `θ = π` and bright for `θ = 0`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{ensure, invalid, Error, Result};
use crate::fit;

/// Largest number of samples [`render_intensity_grid`] will allocate.
pub const MAX_GRID_VALUES: usize = 1 << 26;

/// Focused beam parameters. Waist, Rayleigh range and focal intensity are
/// derived on demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamParams {
    lambda0: f64,
    n_m: f64,
    na: f64,
    p_total: f64,
    p_index: u32,
    theta_rel: f64,
}

impl BeamParams {
    /// Dark-focus beam with radial index `p = 1` and relative phase `π`.
    pub fn new(lambda0: f64, n_m: f64, na: f64, p_total: f64) -> Result<Self> {
        let params = BeamParams { lambda0, n_m, na, p_total, p_index: 1, theta_rel: PI };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.lambda0.is_finite() && self.lambda0 > 0.0, "lambda0", "must be finite and > 0")?;
        ensure(self.n_m.is_finite() && self.n_m >= 1.0, "n_m", "must be finite and >= 1")?;
        ensure(self.na.is_finite() && self.na > 0.0 && self.na < self.n_m, "na", "must satisfy 0 < NA < n_m")?;
        ensure(self.p_total.is_finite() && self.p_total > 0.0, "p_total", "must be finite and > 0")?;
        ensure(self.theta_rel.is_finite(), "theta_rel", "must be finite")?;
        Ok(())
    }

    pub fn with_p_index(mut self, p_index: u32) -> Self {
        self.p_index = p_index;
        self
    }

    pub fn with_relative_phase(mut self, theta_rel: f64) -> Result<Self> {
        self.theta_rel = theta_rel;
        self.validate()?;
        Ok(self)
    }

    pub fn with_power(mut self, p_total: f64) -> Result<Self> {
        self.p_total = p_total;
        self.validate()?;
        Ok(self)
    }

    pub fn with_na(mut self, na: f64) -> Result<Self> {
        self.na = na;
        self.validate()?;
        Ok(self)
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn n_m(&self) -> f64 {
        self.n_m
    }

    pub fn na(&self) -> f64 {
        self.na
    }

    pub fn power(&self) -> f64 {
        self.p_total
    }

    pub fn p_index(&self) -> u32 {
        self.p_index
    }

    pub fn relative_phase(&self) -> f64 {
        self.theta_rel
    }

    /// ω₀ = λ₀ / (π NA)
    pub fn waist(&self) -> f64 {
        self.lambda0 / (PI * self.na)
    }

    /// z_R = n_m λ₀ / (π NA²)
    pub fn rayleigh_range(&self) -> f64 {
        self.n_m * self.lambda0 / (PI * self.na * self.na)
    }

    /// Gaussian focal intensity I₀ = 2P/(πω₀²).
    pub fn focal_intensity(&self) -> f64 {
        let w0 = self.waist();
        2.0 * self.p_total / (PI * w0 * w0)
    }

    /// Wavenumber in the medium, 2π n_m / λ₀.
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI * self.n_m / self.lambda0
    }

    /// ω(z)
    pub fn beam_width(&self, z: f64) -> f64 {
        let t = z / self.rayleigh_range();
        self.waist() * (1.0 + t * t).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylindricalPoint {
    pub rho: f64,
    pub phi: f64,
    pub z: f64,
}

impl CylindricalPoint {
    pub fn new(rho: f64, phi: f64, z: f64) -> Result<Self> {
        let pt = CylindricalPoint { rho, phi, z };
        pt.validate()?;
        Ok(pt)
    }

    pub fn on_axis(z: f64) -> Self {
        CylindricalPoint { rho: 0.0, phi: 0.0, z }
    }

    pub fn from_cartesian(x: f64, y: f64, z: f64) -> Self {
        CylindricalPoint { rho: x.hypot(y), phi: y.atan2(x), z }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.rho.is_finite() && self.phi.is_finite() && self.z.is_finite(),
            "point",
            "coordinates must be finite",
        )?;
        ensure(self.rho >= 0.0, "rho", "must be >= 0")
    }
}

/// Generalized Laguerre polynomial `L_n^α(x)` by the three-term recurrence.
pub fn assoc_laguerre(n: u32, alpha: u32, x: f64) -> f64 {
    let a = alpha as f64;
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = 1.0 + a - x;
    for k in 1..n {
        let k = k as f64;
        let next = ((2.0 * k + 1.0 + a - x) * cur - (k + a) * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// d/dx `L_n^α(x)` = −`L_{n-1}^{α+1}(x)`.
pub fn assoc_laguerre_deriv(n: u32, alpha: u32, x: f64) -> f64 {
    if n == 0 {
        0.0
    } else {
        -assoc_laguerre(n - 1, alpha + 1, x)
    }
}

fn ln_factorial(n: u32) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Normalized Laguerre-Gauss amplitude `u_{ℓ,p}` (units 1/m).
pub fn lg_mode(params: &BeamParams, ell: i32, p: i32, pt: &CylindricalPoint) -> Result<Complex64> {
    params.validate()?;
    pt.validate()?;
    if p < 0 {
        return Err(invalid("p", format!("radial index must be >= 0, got {p}")));
    }
    let p = p as u32;
    let l = ell.unsigned_abs();

    let zr = params.rayleigh_range();
    let w = params.beam_width(pt.z);
    let k = params.wavenumber();
    // 1/R(z) written without the 1/z singularity.
    let inv_r = pt.z / (pt.z * pt.z + zr * zr);
    let gouy = (2 * p + l + 1) as f64 * (pt.z / zr).atan();

    let s = 2.0 * pt.rho * pt.rho / (w * w);
    let norm = (2.0 / (PI * w * w)).sqrt() * (0.5 * (ln_factorial(p) - ln_factorial(p + l))).exp();
    let radial = s.sqrt().powi(l as i32) * assoc_laguerre(p, l, s) * (-0.5 * s).exp();
    let phase = k * pt.z + 0.5 * k * pt.rho * pt.rho * inv_r - gouy + ell as f64 * pt.phi;
    Ok(Complex64::from_polar(norm * radial, phase))
}

/// The dark-focus field `(u₀,₀ + e^{iθ} u₀,ₚ)/√2`, unit transverse norm.
pub fn dft_field(params: &BeamParams, pt: &CylindricalPoint) -> Result<Complex64> {
    let g = lg_mode(params, 0, 0, pt)?;
    let lg = lg_mode(params, 0, params.p_index as i32, pt)?;
    Ok((g + Complex64::from_polar(1.0, params.theta_rel) * lg) / 2f64.sqrt())
}

/// Closed-form intensity and its Cartesian gradient at (x, y, z).
///
/// I = P/(πω²) e^{-s} [1 + 2 L cos(θ − 2p·atan(z/z_R)) + L²],
/// s = 2ρ²/ω², L = L⁰ₚ(s).
pub(crate) fn intensity_with_gradient(params: &BeamParams, x: f64, y: f64, z: f64) -> (f64, [f64; 3]) {
    let p = params.p_index;
    let zr = params.rayleigh_range();
    let w0 = params.waist();
    let t = z / zr;
    let w2 = w0 * w0 * (1.0 + t * t);
    let rho2 = x * x + y * y;
    let s = 2.0 * rho2 / w2;
    let lag = assoc_laguerre(p, 0, s);
    let dlag = assoc_laguerre_deriv(p, 0, s);
    // Phase measured from the dark configuration so that the focus of the
    // θ = π beam cancels exactly: cos(arg) = −cos δ.
    let delta = (params.theta_rel - PI) - 2.0 * p as f64 * t.atan();
    let (sin_d, cos_d) = delta.sin_cos();
    let (sin_a, cos_a) = (-sin_d, -cos_d);
    let half = (0.5 * delta).sin();
    let bracket = (1.0 - lag).powi(2) + 4.0 * lag * half * half;

    let pref = params.p_total / (PI * w2) * (-s).exp();
    let intensity = (pref * bracket).max(0.0);

    // ∂I/∂s at fixed z
    let di_ds = pref * (2.0 * dlag * (cos_a + lag) - bracket);
    let di_drho_over_rho = di_ds * 4.0 / w2;

    // d(ω²)/dz / ω²
    let sw = 2.0 * z / (zr * zr) / (1.0 + t * t);
    let dcos_dz = sin_a * 2.0 * p as f64 / (zr * (1.0 + t * t));
    let di_dz = pref * (-sw * bracket) + di_ds * (-s * sw) + pref * 2.0 * lag * dcos_dz;

    (intensity, [di_drho_over_rho * x, di_drho_over_rho * y, di_dz])
}

/// Dark-focus intensity (W/m²) from the closed form.
pub fn dft_intensity(params: &BeamParams, pt: &CylindricalPoint) -> Result<f64> {
    params.validate()?;
    pt.validate()?;
    Ok(intensity_with_gradient(params, pt.rho, 0.0, pt.z).0)
}

/// Gaussian beam intensity `P |u₀,₀|²` with the same waist and power.
pub fn gaussian_intensity(params: &BeamParams, pt: &CylindricalPoint) -> Result<f64> {
    params.validate()?;
    pt.validate()?;
    Ok(gaussian_intensity_unchecked(params, pt.rho, pt.z))
}

pub(crate) fn gaussian_intensity_unchecked(params: &BeamParams, rho: f64, z: f64) -> f64 {
    let t = z / params.rayleigh_range();
    let w0 = params.waist();
    let w2 = w0 * w0 * (1.0 + t * t);
    2.0 * params.p_total / (PI * w2) * (-2.0 * rho * rho / w2).exp()
}

/// Bottle width (between the transverse maxima) and height (between the
/// axial maxima) around the dark focus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BottleGeometry {
    pub width: f64,
    pub height: f64,
    /// Grid steps of the numerical search, zero for the closed form.
    pub width_step: f64,
    pub height_step: f64,
}

/// `W = 2ω₀`, `H = 2z_R` for `p = 1`; numerical search otherwise.
pub fn bottle_geometry(params: &BeamParams) -> Result<BottleGeometry> {
    params.validate()?;
    match params.p_index {
        0 => Err(invalid("p_index", "p = 0 is a plain Gaussian without a dark focus")),
        1 => Ok(BottleGeometry {
            width: 2.0 * params.waist(),
            height: 2.0 * params.rayleigh_range(),
            width_step: 0.0,
            height_step: 0.0,
        }),
        _ => bottle_geometry_numeric(params, 4001),
    }
}

/// Locates the maxima nearest the focus on a uniform grid of `samples` points
/// over `(0, 4ω₀]` and `(0, 4z_R]`, refined by golden-section search.
pub fn bottle_geometry_numeric(params: &BeamParams, samples: usize) -> Result<BottleGeometry> {
    params.validate()?;
    ensure(samples >= 3, "samples", "need at least 3 grid points")?;
    let w0 = params.waist();
    let zr = params.rayleigh_range();
    let transverse = |x: f64| intensity_with_gradient(params, x, 0.0, 0.0).0;
    let axial = |z: f64| intensity_with_gradient(params, 0.0, 0.0, z).0;
    let (xm, hx) = first_interior_maximum(transverse, 4.0 * w0, samples)?;
    let (zm, hz) = first_interior_maximum(axial, 4.0 * zr, samples)?;
    Ok(BottleGeometry { width: 2.0 * xm, height: 2.0 * zm, width_step: 2.0 * hx, height_step: 2.0 * hz })
}

fn first_interior_maximum<F: Fn(f64) -> f64>(f: F, extent: f64, samples: usize) -> Result<(f64, f64)> {
    let h = extent / samples as f64;
    let values: Vec<f64> = (1..=samples).map(|i| f(i as f64 * h)).collect();
    let i = (1..values.len() - 1)
        .find(|&i| values[i] > values[i - 1] && values[i] >= values[i + 1])
        .ok_or_else(|| Error::SearchFailed("no interior maximum inside the search grid".into()))?;
    let centre = (i + 1) as f64 * h;
    Ok((golden_section_max(&f, centre - h, centre + h, 1e-12 * extent), h))
}

pub(crate) fn golden_section_max<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Uniform sample axis `start + i·step`, `i < count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(start: f64, step: f64, count: usize) -> Result<Self> {
        let axis = Axis { start, step, count };
        axis.validate()?;
        Ok(axis)
    }

    /// `count` samples spanning `[-half, half]`.
    pub fn symmetric(half: f64, count: usize) -> Result<Self> {
        ensure(count >= 2, "count", "need at least 2 samples")?;
        Axis::new(-half, 2.0 * half / (count - 1) as f64, count)
    }

    fn validate(&self) -> Result<()> {
        ensure(self.start.is_finite(), "axis start", "must be finite")?;
        ensure(self.step.is_finite() && self.step > 0.0, "axis step", "must be finite and > 0")?;
        ensure(self.count > 0, "axis count", "must be > 0")
    }

    pub fn value(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransverseKind {
    Rho,
    X,
}

impl TransverseKind {
    fn label(self) -> &'static str {
        match self {
            TransverseKind::Rho => "rho",
            TransverseKind::X => "x",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub kind: TransverseKind,
    pub transverse: Axis,
    pub z: Axis,
}

/// Intensity on a (transverse, z) plane. Row-major with the transverse axis
/// as the slow index.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub beam: Option<BeamParams>,
}

impl IntensityGrid {
    pub fn get(&self, i_transverse: usize, i_z: usize) -> f64 {
        self.values[i_transverse * self.spec.z.count + i_z]
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let t = &self.spec.transverse;
        let z = &self.spec.z;
        writeln!(out, "# axis {}: {:e} {:e} {}", self.spec.kind.label(), t.start, t.step, t.count)?;
        writeln!(out, "# axis z: {:e} {:e} {}", z.start, z.step, z.count)?;
        for v in &self.values {
            writeln!(out, "{v:e}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut transverse: Option<(TransverseKind, Axis)> = None;
        let mut z_axis: Option<Axis> = None;
        let mut values = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse { line: n + 1, message };
            if let Some(rest) = line.strip_prefix("# axis ") {
                let (name, body) = rest.split_once(':').ok_or_else(|| perr("missing ':'".into()))?;
                let f: Vec<&str> = body.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(perr("axis needs start step count".into()));
                }
                let axis = Axis::new(
                    f[0].parse().map_err(|e| perr(format!("{e}")))?,
                    f[1].parse().map_err(|e| perr(format!("{e}")))?,
                    f[2].parse().map_err(|e| perr(format!("{e}")))?,
                )?;
                match name.trim() {
                    "rho" => transverse = Some((TransverseKind::Rho, axis)),
                    "x" => transverse = Some((TransverseKind::X, axis)),
                    "z" => z_axis = Some(axis),
                    other => return Err(perr(format!("unknown axis `{other}`"))),
                }
            } else if line.starts_with('#') {
                continue;
            } else {
                values.push(line.parse::<f64>().map_err(|e| perr(format!("{e}")))?);
            }
        }
        let missing = || Error::Parse { line: 0, message: "missing axis header".into() };
        let (kind, transverse) = transverse.ok_or_else(missing)?;
        let z = z_axis.ok_or_else(missing)?;
        if values.len() != transverse.count * z.count {
            return Err(Error::Parse {
                line: 0,
                message: format!("expected {} values, found {}", transverse.count * z.count, values.len()),
            });
        }
        Ok(IntensityGrid { spec: GridSpec { kind, transverse, z }, values, beam: None })
    }
}

pub fn render_intensity_grid(params: &BeamParams, spec: &GridSpec) -> Result<IntensityGrid> {
    params.validate()?;
    spec.transverse.validate()?;
    spec.z.validate()?;
    if spec.kind == TransverseKind::Rho {
        ensure(spec.transverse.start >= 0.0, "rho axis", "must start at rho >= 0")?;
    }
    let requested = spec.transverse.count.saturating_mul(spec.z.count);
    if requested > MAX_GRID_VALUES {
        return Err(Error::GridTooLarge { requested, cap: MAX_GRID_VALUES });
    }
    let values: Vec<f64> = (0..spec.transverse.count)
        .into_par_iter()
        .flat_map_iter(|i| {
            let r = spec.transverse.value(i).abs();
            (0..spec.z.count).map(move |j| intensity_with_gradient(params, r, 0.0, spec.z.value(j)).0)
        })
        .collect();
    Ok(IntensityGrid { spec: *spec, values, beam: Some(*params) })
}

/// Waist recovered from a measured focal-plane profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileFit {
    pub waist: f64,
    pub waist_err: f64,
    pub amplitude: f64,
    pub centre: f64,
}

/// Fits `a·e^{-s}(1 − L⁰ₚ(s))²`, `s = 2(x − x₀)²/w²`, the dark-focus profile at
/// the focal plane, to sampled intensities.
pub fn fit_focal_profile(xs: &[f64], intensity: &[f64], p_index: u32) -> Result<ProfileFit> {
    ensure(xs.len() == intensity.len(), "profile", "positions and values differ in length")?;
    if xs.len() < 8 {
        return Err(Error::InsufficientData { needed: 8, got: xs.len() });
    }
    ensure(p_index >= 1, "p_index", "must be >= 1")?;
    let span = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let peak = intensity.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ensure(span > 0.0 && peak > 0.0, "profile", "needs a non-degenerate, positive profile")?;

    // Moment-based start: for p = 1 the profile's ⟨(x−x₀)²⟩ = 3w²/4.
    let total: f64 = intensity.iter().sum();
    let mean = xs.iter().zip(intensity).map(|(x, v)| x * v).sum::<f64>() / total;
    let var = xs.iter().zip(intensity).map(|(x, v)| (x - mean).powi(2) * v).sum::<f64>() / total;
    let w_start = (4.0 * var / 3.0).sqrt();
    let model = move |x: f64, a: f64, w: f64, x0: f64| {
        let s = 2.0 * (x - x0).powi(2) / (w * w);
        let l = 1.0 - assoc_laguerre(p_index, 0, s);
        a * (-s).exp() * l * l
    };
    // Work in units of the peak and the start width.
    let xs_n: Vec<f64> = xs.iter().map(|x| (x - mean) / w_start).collect();
    let ys_n: Vec<f64> = intensity.iter().map(|v| v / peak).collect();
    let a_start = 1.0 / (4.0 * (-2f64).exp());
    let result = fit::nonlinear_least_squares(
        &[a_start, 1.0, 0.0],
        xs.len(),
        |p: &[f64], r: &mut [f64]| {
            for ((ri, x), y) in r.iter_mut().zip(&xs_n).zip(&ys_n) {
                *ri = model(*x, p[0], p[1], p[2]) - y;
            }
        },
        None,
    )?;
    let [a, w, x0] = [result.params[0], result.params[1], result.params[2]];
    Ok(ProfileFit {
        waist: w.abs() * w_start,
        waist_err: result.std_errors()[1] * w_start,
        amplitude: a * peak,
        centre: mean + x0 * w_start,
    })
}
