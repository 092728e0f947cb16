//! Boltzmann inversion V = −k_BT ln P and quartic-coefficient fits.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;

use super::histogram::{quantile, EmpiricalPdf};
use crate::dynamics::Trajectory;
use crate::error::{ensure, Error, Result};
use crate::fit;
use crate::forces::QuarticCoefficients;
use crate::K_B;

/// One-axis potential from a histogram, offset so that min V = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential1d {
    pub centers: Vec<f64>,
    pub v_kt: Vec<f64>,
    pub v_joule: Vec<f64>,
    /// Fit weights; bin counts for sampled histograms, probabilities otherwise.
    pub weights: Vec<f64>,
    pub temperature: f64,
}

/// Inverts `pdf`, keeping bins with at least `min_count` samples (or any
/// positive density for histograms built from probabilities).
pub fn invert_pdf(pdf: &EmpiricalPdf, temperature: f64, min_count: f64) -> Result<Potential1d> {
    ensure(temperature.is_finite() && temperature > 0.0, "temperature", "must be finite and > 0")?;
    let sampled = pdf.samples() > 0;
    let keep: Vec<usize> =
        (0..pdf.bins()).filter(|&i| pdf.density()[i] > 0.0 && (!sampled || pdf.counts()[i] >= min_count)).collect();
    if keep.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: keep.len() });
    }
    let centers = pdf.centers();
    let raw: Vec<f64> = keep.iter().map(|&i| -pdf.density()[i].ln()).collect();
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let v_kt: Vec<f64> = raw.iter().map(|v| v - min).collect();
    let kt = K_B * temperature;
    Ok(Potential1d {
        centers: keep.iter().map(|&i| centers[i]).collect(),
        v_joule: v_kt.iter().map(|v| v * kt).collect(),
        v_kt,
        weights: keep.iter().map(|&i| pdf.counts()[i]).collect(),
        temperature,
    })
}

impl Potential1d {
    /// Weighted fit V(x) = c₀ + Σ c_k x^{p_k} in joules; returns (c₀, c_k…).
    pub fn fit_powers(&self, powers: &[i32]) -> Result<Vec<f64>> {
        let design = DMatrix::from_fn(self.centers.len(), powers.len() + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                self.centers[i].powi(powers[j - 1])
            }
        });
        Ok(fit::linear_least_squares(&design, &self.v_joule, Some(&self.weights))?.coefficients)
    }

    /// Curvature k of a quadratic fit V = c₀ + c₁x + (k/2)x².
    pub fn harmonic_stiffness(&self) -> Result<f64> {
        let c = self.fit_powers(&[1, 2])?;
        Ok(2.0 * c[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionOptions {
    pub rho_bins: usize,
    pub z_bins: usize,
    /// Histogram support: this quantile of ρ and of |z|.
    pub support_quantile: f64,
    /// Bins with fewer samples are excluded from the fit.
    pub min_count: f64,
    pub folds: usize,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        ReconstructionOptions { rho_bins: 30, z_bins: 40, support_quantile: 0.999, min_count: 10.0, folds: 5 }
    }
}

/// Joint (ρ, z) potential on the histogram grid; NaN marks excluded bins.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPotential {
    pub rho_edges: Vec<f64>,
    pub z_edges: Vec<f64>,
    /// Row-major, ρ slowest, in units of k_BT, min 0.
    pub v_kt: Vec<f64>,
    pub v_joule: Vec<f64>,
    pub bins_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialReconstruction {
    pub coefficients: QuarticCoefficients,
    /// Sample standard deviation over the folds, [k_z, k_ρz, k_ρ].
    pub uncertainties: [f64; 3],
    pub folds: Vec<QuarticCoefficients>,
    pub potential: JointPotential,
    pub temperature: f64,
    pub samples: usize,
}

impl fmt::Display for PotentialReconstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.coefficients;
        let u = &self.uncertainties;
        writeln!(f, "k_z={:e}", c.k_z)?;
        writeln!(f, "k_z_err={:e}", u[0])?;
        writeln!(f, "k_rho_z={:e}", c.k_rho_z)?;
        writeln!(f, "k_rho_z_err={:e}", u[1])?;
        writeln!(f, "k_rho={:e}", c.k_rho)?;
        writeln!(f, "k_rho_err={:e}", u[2])?;
        writeln!(f, "temperature={}", self.temperature)?;
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "folds={}", self.folds.len())?;
        writeln!(f, "bins_used={}", self.potential.bins_used)
    }
}

impl PotentialReconstruction {
    pub fn write_report<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "{self}")?;
        Ok(())
    }

    /// `rho z v_kt v_j` rows at bin centres (excluded bins skipped).
    pub fn write_grid<W: Write>(&self, mut out: W) -> Result<()> {
        let p = &self.potential;
        writeln!(out, "# offset=min zero")?;
        writeln!(out, "rho z v_kt v_j")?;
        let nz = p.z_edges.len() - 1;
        for (i, rw) in p.rho_edges.windows(2).enumerate() {
            for (j, zw) in p.z_edges.windows(2).enumerate() {
                let v = p.v_kt[i * nz + j];
                if v.is_finite() {
                    let (r, z) = (0.5 * (rw[0] + rw[1]), 0.5 * (zw[0] + zw[1]));
                    writeln!(out, "{r:e} {z:e} {v:e} {:e}", p.v_joule[i * nz + j])?;
                }
            }
        }
        Ok(())
    }
}

/// Weighted fit of −ln P(ρ, z) to c₀ + c₁z² + c₂ρ²z² + c₃ρ⁴, with each bin
/// represented by the sample means of its monomials.
pub fn fit_quartic_samples(
    positions: &[[f64; 3]],
    temperature: f64,
    opts: &ReconstructionOptions,
) -> Result<(QuarticCoefficients, JointPotential)> {
    ensure(temperature.is_finite() && temperature > 0.0, "temperature", "must be finite and > 0")?;
    ensure(opts.rho_bins >= 2 && opts.z_bins >= 2, "bins", "need at least two bins per axis")?;
    ensure(opts.support_quantile > 0.5 && opts.support_quantile <= 1.0, "support_quantile", "must lie in (0.5, 1]")?;
    ensure(opts.min_count >= 1.0, "min_count", "must be >= 1")?;
    let n = positions.len();
    if n < 1000 {
        return Err(Error::InsufficientData { needed: 1000, got: n });
    }
    ensure(positions.iter().flatten().all(|v| v.is_finite()), "positions", "must be finite")?;
    let rho: Vec<f64> = positions.iter().map(|p| p[0].hypot(p[1])).collect();
    let z: Vec<f64> = positions.iter().map(|p| p[2]).collect();
    let sorted = |v: Vec<f64>| {
        let mut v = v;
        v.sort_by(|a, b| a.total_cmp(b));
        v
    };
    let rho_max = quantile(&sorted(rho.clone()), opts.support_quantile);
    let z_max = quantile(&sorted(z.iter().map(|v| v.abs()).collect()), opts.support_quantile);
    if !(rho_max > 0.0 && z_max > 0.0) {
        return Err(Error::Degenerate("position samples have no spread".into()));
    }
    let (nr, nz) = (opts.rho_bins, opts.z_bins);
    let dr = rho_max / nr as f64;
    let dz = 2.0 * z_max / nz as f64;
    let mut count = vec![0.0; nr * nz];
    let mut sums = vec![[0.0; 3]; nr * nz];
    for (r, zz) in rho.iter().zip(&z) {
        if *r >= rho_max || zz.abs() >= z_max {
            continue;
        }
        let i = ((r / dr) as usize).min(nr - 1);
        let j = (((zz + z_max) / dz) as usize).min(nz - 1);
        let k = i * nz + j;
        count[k] += 1.0;
        let (r2, z2) = (r * r, zz * zz);
        sums[k][0] += z2;
        sums[k][1] += r2 * z2;
        sums[k][2] += r2 * r2;
    }
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut weights = Vec::new();
    let mut neg_log = vec![f64::NAN; nr * nz];
    for i in 0..nr {
        let volume = PI * dr * dr * ((i + 1) * (i + 1) - i * i) as f64 * dz;
        for j in 0..nz {
            let k = i * nz + j;
            if count[k] < opts.min_count {
                continue;
            }
            let y = -(count[k] / (n as f64 * volume)).ln();
            neg_log[k] = y;
            rows.push([1.0, sums[k][0] / count[k], sums[k][1] / count[k], sums[k][2] / count[k]]);
            rhs.push(y);
            weights.push(count[k]);
        }
    }
    if rows.len() < 8 {
        return Err(Error::InsufficientData { needed: 8, got: rows.len() });
    }
    let design = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]);
    let c = fit::linear_least_squares(&design, &rhs, Some(&weights))?.coefficients;
    let kt = K_B * temperature;
    let coefficients = QuarticCoefficients::new(2.0 * c[1] * kt, -c[2] * kt, 4.0 * c[3] * kt)?;
    let min = neg_log.iter().cloned().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let v_kt: Vec<f64> = neg_log.iter().map(|v| v - min).collect();
    let potential = JointPotential {
        rho_edges: (0..=nr).map(|i| i as f64 * dr).collect(),
        z_edges: (0..=nz).map(|j| -z_max + j as f64 * dz).collect(),
        v_joule: v_kt.iter().map(|v| v * kt).collect(),
        v_kt,
        bins_used: rows.len(),
    };
    Ok((coefficients, potential))
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Full-data quartic fit with uncertainties from contiguous k-fold splits.
pub fn reconstruct_potential(
    traj: &Trajectory,
    temperature: f64,
    opts: &ReconstructionOptions,
) -> Result<PotentialReconstruction> {
    ensure(opts.folds >= 2, "folds", "must be >= 2")?;
    let (coefficients, potential) = fit_quartic_samples(traj.positions(), temperature, opts)?;
    let folds: Vec<QuarticCoefficients> = traj
        .split(opts.folds)?
        .iter()
        .map(|part| fit_quartic_samples(part.positions(), temperature, opts).map(|r| r.0))
        .collect::<Result<_>>()?;
    let pick = |f: fn(&QuarticCoefficients) -> f64| sample_std(&folds.iter().map(f).collect::<Vec<_>>());
    let uncertainties = [pick(|c| c.k_z), pick(|c| c.k_rho_z), pick(|c| c.k_rho)];
    Ok(PotentialReconstruction { coefficients, uncertainties, folds, potential, temperature, samples: traj.len() })
}

#[cfg(test)]
mod tests {
    use super::super::histogram::{histogram_pdf, Binning};
    use super::*;
    use crate::beam::Axis;
    use crate::dynamics::{self, equilibrium_pdf, ForceModel, SimConfig};
    use crate::forces::ParticleMedium;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn harmonic_histogram_inversion() {
        let k = 1e-6;
        let sigma = (K_B * 293.0 / k).sqrt();
        let mut r = rng::stream(12);
        let xs: Vec<f64> = (0..1_000_000).map(|_| sigma * r.sample::<f64, _>(StandardNormal)).collect();
        let pdf = histogram_pdf(&xs, &Binning::FreedmanDiaconis).unwrap();
        let pot = invert_pdf(&pdf, 293.0, 10.0).unwrap();
        assert_eq!(pot.v_kt.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        let fitted = pot.harmonic_stiffness().unwrap();
        assert!((fitted / k - 1.0).abs() < 0.03, "{fitted:e}");
    }

    #[test]
    fn equilibrium_round_trip() {
        let kt = K_B * 293.0;
        let c4 = 2.26e8 / 4.0;
        let scale = (kt / c4).powf(0.25);
        let axis = Axis::symmetric(4.0 * scale, 401).unwrap();
        let v = |x: &[f64]| c4 * x[0].powi(4);
        let density = equilibrium_pdf(v, 293.0, &[axis]).unwrap();
        let edges: Vec<f64> = (0..=axis.count).map(|i| axis.value(i) - 0.5 * axis.step).collect();
        let probs: Vec<f64> = density.values.iter().map(|p| p * axis.step).collect();
        let pdf = EmpiricalPdf::from_probabilities(edges, &probs).unwrap();
        let pot = invert_pdf(&pdf, 293.0, 1.0).unwrap();
        for (x, vk) in pot.centers.iter().zip(&pot.v_kt) {
            if x.abs() < 3.0 * scale {
                assert!((vk - v(&[*x]) / kt).abs() < 0.05);
            }
        }

        // A constant offset in V leaves the density unchanged.
        let shifted = equilibrium_pdf(|x: &[f64]| v(x) + 7.0 * kt, 293.0, &[axis]).unwrap();
        for (a, b) in shifted.values.iter().zip(&density.values) {
            assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
        }
    }

    fn dipole_trajectory(seed: u64, seconds: f64) -> Trajectory {
        let pm = ParticleMedium::new(575e-9, 1.45, 1.53, 0.89e-3, 293.0).unwrap();
        let beam = crate::beam::BeamParams::new(780e-9, 1.53, 0.46, 3.19e-3).unwrap();
        let c = crate::forces::quartic_coefficients(&beam, &pm).unwrap();
        let mut cfg = SimConfig::new(ForceModel::Quartic(c), pm, 4e-5, seconds, seed);
        cfg.sample_every = 5;
        dynamics::simulate(&cfg).unwrap()
    }

    #[test]
    fn quartic_round_trip_on_confining_trap() {
        let pm = ParticleMedium::new(575e-9, 1.45, 1.53, 0.89e-3, 293.0).unwrap();
        let beam = crate::beam::BeamParams::new(780e-9, 1.53, 0.46, 3.19e-3).unwrap();
        let truth = crate::forces::quartic_coefficients(&beam, &pm).unwrap();
        let t = dipole_trajectory(6, 200.0);
        let rec = reconstruct_potential(&t, 293.0, &ReconstructionOptions::default()).unwrap();
        let c = rec.coefficients;
        for (got, want) in [(c.k_z, truth.k_z), (c.k_rho_z, truth.k_rho_z), (c.k_rho, truth.k_rho)] {
            assert!((got / want - 1.0).abs() < 0.15, "{got:e} vs {want:e}");
        }
        let ks: Vec<f64> = rec.folds.iter().map(|f| f.k_z).collect();
        assert_eq!(rec.uncertainties[0], sample_std(&ks));
        assert!(rec.uncertainties.iter().all(|u| *u > 0.0 && u.is_finite()));
        let report = rec.to_string();
        assert!(report.starts_with("k_z="));
    }

    #[test]
    fn calibration_factor_rescales_coefficients() {
        let t = dipole_trajectory(8, 20.0);
        let opts = ReconstructionOptions::default();
        let (a, _) = fit_quartic_samples(t.positions(), 293.0, &opts).unwrap();
        let c = 1.7;
        let (b, _) = fit_quartic_samples(t.scaled(c).unwrap().positions(), 293.0, &opts).unwrap();
        assert!((b.k_z * c * c / a.k_z - 1.0).abs() < 1e-9);
        assert!((b.k_rho_z * c.powi(4) / a.k_rho_z - 1.0).abs() < 1e-9);
        assert!((b.k_rho * c.powi(4) / a.k_rho - 1.0).abs() < 1e-9);
    }

    #[test]
    fn narrow_support_is_rejected() {
        // All samples on the axis: ρ carries no information.
        let mut r = rng::stream(2);
        let pos: Vec<[f64; 3]> = (0..20_000).map(|_| [0.0, 0.0, r.sample::<f64, _>(StandardNormal)]).collect();
        assert!(fit_quartic_samples(&pos, 293.0, &ReconstructionOptions::default()).is_err());
    }
}
