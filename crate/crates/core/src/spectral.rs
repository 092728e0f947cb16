//! Welch power spectral densities and Lorentzian corner-frequency fits.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::dynamics::{self, SimConfig, Trajectory};
use crate::error::{ensure, Error, Result};
use crate::fit;

/// Minimum number of frequency bins a Lorentzian fit accepts.
pub const MIN_FIT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    pub fn name(&self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        }
    }

    /// Periodic window of length `n`.
    fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchParams {
    pub segment_len: usize,
    /// Fractional overlap in [0, 1).
    pub overlap: f64,
    pub window: Window,
}

impl WelchParams {
    pub fn hann(segment_len: usize) -> Self {
        WelchParams { segment_len, overlap: 0.5, window: Window::Hann }
    }

    /// Hann, 50 % overlap, longest power-of-two segment giving ≥ `min_segments`.
    pub fn for_length(n: usize, min_segments: usize) -> Result<Self> {
        ensure(min_segments >= 2, "min_segments", "must be >= 2")?;
        // With 50 % overlap, k segments of length L cover (k+1)·L/2 samples.
        let max_len = 2 * n / (min_segments + 1);
        if max_len < 16 {
            return Err(Error::InsufficientData { needed: 8 * (min_segments + 1), got: n });
        }
        let len = 1usize << (usize::BITS - 1 - max_len.leading_zeros());
        Ok(WelchParams::hann(len))
    }
}

/// One-sided PSD; the DC bin is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub frequencies: Vec<f64>,
    pub psd: Vec<f64>,
    pub segment_len: usize,
    pub overlap: f64,
    pub window: Window,
    pub segments: usize,
}

impl PsdEstimate {
    pub fn resolution(&self) -> f64 {
        self.frequencies[0]
    }

    pub fn nyquist(&self) -> f64 {
        self.resolution() * (self.segment_len / 2) as f64
    }

    /// Σ PSD·Δf, the variance captured by the estimate.
    pub fn integrated_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.resolution()
    }

    /// Default fit range: second positive bin to a quarter of Nyquist.
    pub fn default_fit_range(&self) -> (f64, f64) {
        (self.frequencies[1.min(self.frequencies.len() - 1)], 0.25 * self.nyquist())
    }

    /// Every second bin, for subsampling checks.
    pub fn decimated(&self) -> PsdEstimate {
        PsdEstimate {
            frequencies: self.frequencies.iter().step_by(2).copied().collect(),
            psd: self.psd.iter().step_by(2).copied().collect(),
            ..self.clone()
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# window={}", self.window.name())?;
        writeln!(out, "# nseg={}", self.segments)?;
        writeln!(out, "# segment_len={}", self.segment_len)?;
        writeln!(out, "# overlap={}", self.overlap)?;
        writeln!(out, "# convention=one-sided, integral over f > 0 equals the variance")?;
        writeln!(out, "f psd")?;
        for (f, s) in self.frequencies.iter().zip(&self.psd) {
            writeln!(out, "{f:e} {s:e}")?;
        }
        Ok(())
    }
}

/// Welch estimate of a uniformly sampled series.
pub fn welch(signal: &[f64], dt: f64, params: &WelchParams) -> Result<PsdEstimate> {
    ensure(dt.is_finite() && dt > 0.0, "dt", "must be finite and > 0")?;
    ensure(params.segment_len >= 4, "segment_len", "must be >= 4")?;
    ensure((0.0..1.0).contains(&params.overlap), "overlap", "must be in [0, 1)")?;
    ensure(signal.iter().all(|v| v.is_finite()), "signal", "must be finite")?;
    let n = params.segment_len;
    if n > signal.len() {
        return Err(Error::InsufficientData { needed: n, got: signal.len() });
    }
    let step = ((n as f64) * (1.0 - params.overlap)).round().max(1.0) as usize;
    let segments = (signal.len() - n) / step + 1;
    if segments < 2 {
        return Err(Error::InsufficientData { needed: n + step, got: signal.len() });
    }
    let w = params.window.coefficients(n);
    let w2: f64 = w.iter().map(|v| v * v).sum();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let half = n / 2;
    let mut acc = vec![0.0; half + 1];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for s in 0..segments {
        let seg = &signal[s * step..s * step + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        for ((b, x), wi) in buf.iter_mut().zip(seg).zip(&w) {
            *b = Complex64::new((x - mean) * wi, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
    }
    let scale = dt / (w2 * segments as f64);
    let df = 1.0 / (n as f64 * dt);
    let mut frequencies = Vec::with_capacity(half);
    let mut psd = Vec::with_capacity(half);
    for (k, a) in acc.iter().enumerate().skip(1) {
        // Nyquist bin has no mirror image when n is even.
        let one_sided = if n.is_multiple_of(2) && k == half { 1.0 } else { 2.0 };
        frequencies.push(k as f64 * df);
        psd.push(one_sided * a * scale);
    }
    Ok(PsdEstimate { frequencies, psd, segment_len: n, overlap: params.overlap, window: params.window, segments })
}

/// Welch estimate of one trajectory axis (0 = x, 1 = y, 2 = z).
pub fn estimate_psd(traj: &Trajectory, axis: usize, params: &WelchParams) -> Result<PsdEstimate> {
    ensure(axis < 3, "axis", "must be 0, 1 or 2")?;
    welch(&traj.axis(axis), traj.dt(), params)
}

/// S(f) = A / (f_c² + f²) fitted on log-PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzianFit {
    pub f_c: f64,
    pub f_c_err: f64,
    /// m²·Hz (or signal²·Hz)
    pub amplitude: f64,
    pub amplitude_err: f64,
    pub fit_range: (f64, f64),
    /// RMS of the log-PSD residuals.
    pub residual: f64,
    pub bins: usize,
    /// f_c fell outside the fit range.
    pub out_of_range: bool,
}

impl LorentzianFit {
    pub fn model(&self, f: f64) -> f64 {
        self.amplitude / (self.f_c * self.f_c + f * f)
    }

    /// Plateau S(0) = A / f_c².
    pub fn plateau(&self) -> f64 {
        self.amplitude / (self.f_c * self.f_c)
    }

    /// f_c inside the fitted band and constrained to better than 50 %.
    pub fn is_trustworthy(&self) -> bool {
        !self.out_of_range && self.f_c_err.is_finite() && self.f_c_err < 0.5 * self.f_c
    }

    pub fn write_report<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "{self}")?;
        Ok(())
    }
}

impl fmt::Display for LorentzianFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "f_c={:e}", self.f_c)?;
        writeln!(f, "f_c_err={:e}", self.f_c_err)?;
        writeln!(f, "A={:e}", self.amplitude)?;
        writeln!(f, "A_err={:e}", self.amplitude_err)?;
        writeln!(f, "residual={:e}", self.residual)?;
        writeln!(f, "f_min={:e}", self.fit_range.0)?;
        writeln!(f, "f_max={:e}", self.fit_range.1)?;
        writeln!(f, "bins={}", self.bins)?;
        writeln!(f, "out_of_range={}", self.out_of_range)?;
        writeln!(f, "trustworthy={}", self.is_trustworthy())
    }
}

/// Frequency where the spectrum first falls to half its low-f plateau.
fn half_power_guess(f: &[f64], s: &[f64]) -> f64 {
    let head = (s.len() / 10).clamp(1, 5);
    let plateau = s[..head].iter().sum::<f64>() / head as f64;
    // Running median keeps single noisy bins from triggering early.
    let smooth: Vec<f64> = (0..s.len())
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 3).min(s.len());
            let mut w: Vec<f64> = s[lo..hi].to_vec();
            w.sort_by(|a, b| a.total_cmp(b));
            w[w.len() / 2]
        })
        .collect();
    smooth.iter().position(|v| *v <= 0.5 * plateau).map(|i| f[i]).unwrap_or_else(|| f[f.len() / 2]).max(f[0])
}

/// Nonlinear least squares on log S over `f_range` (inclusive), in the
/// parameters (ln A, ln f_c); uncertainties from s²(JᵀJ)⁻¹.
pub fn fit_lorentzian(psd: &PsdEstimate, f_range: (f64, f64)) -> Result<LorentzianFit> {
    let (lo, hi) = f_range;
    ensure(lo.is_finite() && hi.is_finite() && hi > lo && lo >= 0.0, "f_range", "must satisfy 0 <= lo < hi")?;
    let first = psd.frequencies.first().copied().unwrap_or(f64::INFINITY);
    let last = psd.frequencies.last().copied().unwrap_or(0.0);
    ensure(lo <= last && hi >= first, "f_range", "outside the estimate's support")?;
    let (f, s): (Vec<f64>, Vec<f64>) =
        psd.frequencies.iter().zip(&psd.psd).filter(|(f, _)| **f >= lo && **f <= hi).map(|(f, s)| (*f, *s)).unzip();
    if f.len() < MIN_FIT_BINS {
        return Err(Error::InsufficientData { needed: MIN_FIT_BINS, got: f.len() });
    }
    if s.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Degenerate("PSD has non-positive bins inside the fit range".into()));
    }
    let log_s: Vec<f64> = s.iter().map(|v| v.ln()).collect();
    let fc0 = half_power_guess(&f, &s);
    let head = (s.len() / 10).clamp(1, 5);
    let plateau = s[..head].iter().sum::<f64>() / head as f64;
    let a0 = plateau * (fc0 * fc0 + f[0] * f[0]);

    let residual = |p: &[f64], r: &mut [f64]| {
        let (ln_a, fc2) = (p[0], (2.0 * p[1]).exp());
        for ((ri, fi), ls) in r.iter_mut().zip(&f).zip(&log_s) {
            *ri = ln_a - (fc2 + fi * fi).ln() - ls;
        }
    };
    let jacobian = |p: &[f64], j: &mut DMatrix<f64>| {
        let fc2 = (2.0 * p[1]).exp();
        for (i, fi) in f.iter().enumerate() {
            j[(i, 0)] = 1.0;
            j[(i, 1)] = -2.0 * fc2 / (fc2 + fi * fi);
        }
    };
    let res = fit::nonlinear_least_squares(&[a0.ln(), fc0.ln()], f.len(), residual, Some(&jacobian))?;
    let (ln_a, ln_fc) = (res.params[0], res.params[1]);
    let err = res.std_errors();
    let f_c = ln_fc.exp();
    let amplitude = ln_a.exp();
    if !(f_c.is_finite() && amplitude.is_finite() && f_c > 0.0) {
        return Err(Error::NonConvergence("Lorentzian parameters left the finite range".into()));
    }
    let out_of_range = f_c < f[0] || f_c > f[f.len() - 1];
    if out_of_range {
        log::warn!(
            "fitted corner frequency {f_c:e} Hz lies outside the fit range [{:e}, {:e}] Hz",
            f[0],
            f[f.len() - 1]
        );
    }
    Ok(LorentzianFit {
        f_c,
        f_c_err: f_c * err[1],
        amplitude,
        amplitude_err: amplitude * err[0],
        fit_range: (f[0], f[f.len() - 1]),
        residual: (res.rss / f.len() as f64).sqrt(),
        bins: f.len(),
        out_of_range,
    })
}

/// Mean and sample standard deviation of per-run corner frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerFrequency {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
    pub failures: usize,
}

/// Settings for [`corner_frequency_of`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSettings {
    pub axis: usize,
    pub min_segments: usize,
    /// Explicit fit band; the default range is used when `None`.
    pub f_range: Option<(f64, f64)>,
}

impl Default for SpectralSettings {
    fn default() -> Self {
        SpectralSettings { axis: 0, min_segments: 8, f_range: None }
    }
}

/// Corner frequency of one trajectory with the given settings.
pub fn corner_frequency_of_trajectory(traj: &Trajectory, settings: &SpectralSettings) -> Result<LorentzianFit> {
    let params = WelchParams::for_length(traj.len(), settings.min_segments)?;
    let psd = estimate_psd(traj, settings.axis, &params)?;
    let range = settings.f_range.unwrap_or_else(|| psd.default_fit_range());
    fit_lorentzian(&psd, range)
}

/// Simulates `cfg` once per seed, fits each run, and reports mean ± std.
pub fn corner_frequency_with_seeds(
    cfg: &SimConfig,
    seeds: &[u64],
    settings: &SpectralSettings,
) -> Result<CornerFrequency> {
    let fits: Vec<Result<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let t = dynamics::simulate(&SimConfig { seed, ..cfg.clone() })?;
            Ok(corner_frequency_of_trajectory(&t, settings)?.f_c)
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = 0;
    let mut first_err = None;
    for r in fits {
        match r {
            Ok(fc) => runs.push(fc),
            Err(e) => {
                failures += 1;
                log::warn!("corner-frequency run failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if runs.len() < 3 {
        return Err(first_err.unwrap_or(Error::InsufficientData { needed: 3, got: runs.len() }));
    }
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    let std = (runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(CornerFrequency { mean, std, runs, failures })
}

/// `repetitions` runs with seeds derived from `cfg.seed`.
pub fn corner_frequency_of(
    cfg: &SimConfig,
    repetitions: usize,
    settings: &SpectralSettings,
) -> Result<CornerFrequency> {
    ensure(repetitions >= 3, "repetitions", "must be >= 3")?;
    let seeds: Vec<u64> = (0..repetitions as u64).map(|i| crate::rng::derive_seed(cfg.seed, i)).collect();
    corner_frequency_with_seeds(cfg, &seeds, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ForceModel;
    use crate::forces::ParticleMedium;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn particle() -> ParticleMedium {
        ParticleMedium::new(575e-9, 1.45, 1.53, 0.89e-3, 293.0).unwrap()
    }

    #[test]
    fn sinusoid_power() {
        let n = 1 << 14;
        let dt = 1e-3;
        let seg = 1024;
        let f0 = 37.0 / (seg as f64 * dt);
        let amp = 2.5;
        let x: Vec<f64> = (0..n).map(|i| amp * (2.0 * PI * f0 * i as f64 * dt).sin()).collect();
        let psd = welch(&x, dt, &WelchParams::hann(seg)).unwrap();
        let peak = psd.psd.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_relative_eq!(psd.frequencies[peak], f0, max_relative = 1e-12);
        // Hann leaks the line into the two neighbours; their sum is the power.
        assert!((psd.integrated_power() / (amp * amp / 2.0) - 1.0).abs() < 0.01);
    }

    #[test]
    fn white_noise_level() {
        let mut rng = crate::rng::stream(3);
        let sigma = 0.7;
        let dt = 2e-4;
        let x: Vec<f64> = (0..1 << 17).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let psd = welch(&x, dt, &WelchParams::hann(1024)).unwrap();
        let mean = psd.psd.iter().sum::<f64>() / psd.psd.len() as f64;
        assert!((mean / (2.0 * sigma * sigma * dt) - 1.0).abs() < 0.1);
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((psd.integrated_power() / var - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_signal_and_errors() {
        let psd = welch(&vec![0.0; 4096], 1e-3, &WelchParams::hann(512)).unwrap();
        assert!(psd.psd.iter().all(|v| *v == 0.0));
        assert!(psd.frequencies[0] > 0.0);
        assert!(welch(&vec![0.0; 100], 1e-3, &WelchParams::hann(512)).is_err());
        assert!(fit_lorentzian(&psd, psd.default_fit_range()).is_err());
    }

    #[test]
    fn exact_lorentzian_recovered() {
        let frequencies: Vec<f64> = (1..=512).map(|k| k as f64 * 0.5).collect();
        let (a, fc) = (3.2e-14, 16.5);
        let psd = PsdEstimate {
            psd: frequencies.iter().map(|f| a / (fc * fc + f * f)).collect(),
            frequencies,
            segment_len: 1024,
            overlap: 0.5,
            window: Window::Hann,
            segments: 8,
        };
        let fit = fit_lorentzian(&psd, (1.0, 64.0)).unwrap();
        assert_relative_eq!(fit.f_c, fc, max_relative = 1e-6);
        assert_relative_eq!(fit.amplitude, a, max_relative = 1e-6);
        assert!(fit.residual < 1e-8 && fit.is_trustworthy());
        let report = fit.to_string();
        for key in ["f_c=", "f_c_err=", "A=", "A_err=", "residual="] {
            assert!(report.lines().any(|l| l.starts_with(key)), "{key}");
        }
    }

    #[test]
    fn corner_frequency_outside_range_is_flagged() {
        let frequencies: Vec<f64> = (1..=512).map(|k| k as f64).collect();
        let fc = 400.0;
        let psd = PsdEstimate {
            psd: frequencies.iter().map(|f| 1.0 / (fc * fc + f * f)).collect(),
            frequencies,
            segment_len: 1024,
            overlap: 0.5,
            window: Window::Hann,
            segments: 8,
        };
        let fit = fit_lorentzian(&psd, (2.0, 100.0)).unwrap();
        assert!(fit.out_of_range && !fit.is_trustworthy());
    }

    fn ou_config(seed: u64) -> SimConfig {
        let k = 1e-6;
        let pm = particle();
        let dt = 0.01 * pm.drag() / k;
        SimConfig::new(ForceModel::Harmonic { stiffness: [k; 3] }, pm, dt, 2e5 * dt, seed)
    }

    #[test]
    fn ou_corner_frequency() {
        let cfg = ou_config(8);
        let oracle = 1e-6 / (2.0 * PI * cfg.particle.drag());
        assert!((oracle - 16.5).abs() < 0.1);
        let t = dynamics::simulate(&cfg).unwrap();
        let fit = corner_frequency_of_trajectory(&t, &SpectralSettings::default()).unwrap();
        assert!((fit.f_c / oracle - 1.0).abs() < 0.05, "{} vs {}", fit.f_c, oracle);
        assert!(fit.is_trustworthy());

        // Subsampled frequency grid gives a statistically consistent answer.
        let params = WelchParams::for_length(t.len(), 8).unwrap();
        let psd = estimate_psd(&t, 0, &params).unwrap();
        let half = fit_lorentzian(&psd.decimated(), psd.default_fit_range()).unwrap();
        assert!((half.f_c - fit.f_c).abs() < 3.0 * half.f_c_err.max(fit.f_c_err));
    }

    #[test]
    fn scale_equivariance() {
        let t = dynamics::simulate(&ou_config(1)).unwrap();
        let params = WelchParams::for_length(t.len(), 8).unwrap();
        let psd = estimate_psd(&t, 2, &params).unwrap();
        let c = 37.0;
        let scaled = estimate_psd(&t.scaled(c).unwrap(), 2, &params).unwrap();
        let range = psd.default_fit_range();
        let a = fit_lorentzian(&psd, range).unwrap();
        let b = fit_lorentzian(&scaled, range).unwrap();
        assert_relative_eq!(b.f_c, a.f_c, max_relative = 1e-8);
        assert_relative_eq!(b.amplitude, c * c * a.amplitude, max_relative = 1e-8);
    }

    #[test]
    fn repetitions_and_identical_seeds() {
        let cfg = ou_config(2);
        let cf = corner_frequency_of(&cfg, 4, &SpectralSettings::default()).unwrap();
        let oracle = 1e-6 / (2.0 * PI * cfg.particle.drag());
        assert!((cf.mean / oracle - 1.0).abs() < 0.05);
        assert!(cf.std > 0.0);
        let same = corner_frequency_with_seeds(&cfg, &[5, 5, 5], &SpectralSettings::default()).unwrap();
        assert_eq!(same.std, 0.0);
        assert!(corner_frequency_of(&cfg, 2, &SpectralSettings::default()).is_err());
    }

    #[test]
    fn export_format() {
        let psd = welch(&(0..4096).map(|i| (i as f64 * 0.1).sin()).collect::<Vec<_>>(), 1e-3, &WelchParams::hann(512))
            .unwrap();
        let mut buf = Vec::new();
        psd.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# window=hann\n# nseg=15\n"));
        assert!(text.contains("\nf psd\n"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 256);
    }
}
