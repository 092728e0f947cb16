//! Kolmogorov-Smirnov tests of Gaussianity and sample decorrelation.

use std::f64::consts::SQRT_2;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{ensure, Error, Result};

pub const MIN_KS_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KsNull {
    /// Mean and variance estimated from the sample (Lilliefors).
    EstimatedGaussian,
    /// Fully specified Gaussian (classical Kolmogorov).
    KnownGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub significance: f64,
    pub reject: bool,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub null: KsNull,
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// sup |F_n − Φ((x − μ)/σ)| of the empirical CDF.
pub fn ks_statistic(samples: &[f64], mean: f64, std: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal_cdf((x - mean) / std);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov tail Q(λ) = 2 Σ (−1)^(k−1) exp(−2k²λ²).
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Dallal–Wilkinson approximation to the Lilliefors null distribution;
/// accurate for p ≤ 0.1, larger values are only indicative.
pub fn lilliefors_p_value(d: f64, n: usize) -> f64 {
    let (mut d, mut n) = (d, n as f64);
    if n > 100.0 {
        d *= (n / 100.0).powf(0.49);
        n = 100.0;
    }
    let m = n + 2.78019;
    (-7.01256 * d * d * m + 2.99587 * d * m.sqrt() - 0.122119 + 0.974598 / n.sqrt() + 1.67997 / n).exp().min(1.0)
}

fn moments(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_samples(samples: &[f64]) -> Result<()> {
    if samples.len() < MIN_KS_SAMPLES {
        return Err(Error::InsufficientData { needed: MIN_KS_SAMPLES, got: samples.len() });
    }
    ensure(samples.iter().all(|v| v.is_finite()), "samples", "must be finite")
}

/// Two-sided KS test against a Gaussian with the sample mean and variance,
/// referred to the Lilliefors null. `significance` must lie in (0, 0.1].
pub fn ks_gaussianity_test(samples: &[f64], significance: f64) -> Result<KsOutcome> {
    check_samples(samples)?;
    ensure(significance > 0.0 && significance <= 0.1, "significance", "must lie in (0, 0.1]")?;
    let (mean, std) = moments(samples);
    if !(std > 0.0) {
        return Err(Error::Degenerate("samples have zero variance".into()));
    }
    let d = ks_statistic(samples, mean, std);
    let p = lilliefors_p_value(d, samples.len());
    Ok(KsOutcome {
        statistic: d,
        p_value: p,
        significance,
        reject: p < significance,
        n: samples.len(),
        mean,
        std,
        null: KsNull::EstimatedGaussian,
    })
}

/// Two-sided KS test against N(mean, std²) fixed in advance.
pub fn ks_test_known_gaussian(samples: &[f64], mean: f64, std: f64, significance: f64) -> Result<KsOutcome> {
    check_samples(samples)?;
    ensure(significance > 0.0 && significance < 1.0, "significance", "must lie in (0, 1)")?;
    ensure(mean.is_finite() && std.is_finite() && std > 0.0, "gaussian", "mean finite and std > 0")?;
    let d = ks_statistic(samples, mean, std);
    let sn = (samples.len() as f64).sqrt();
    let p = kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d);
    Ok(KsOutcome {
        statistic: d,
        p_value: p,
        significance,
        reject: p < significance,
        n: samples.len(),
        mean,
        std,
        null: KsNull::KnownGaussian,
    })
}

/// Normalized autocorrelation for lags 0..n via zero-padded FFT.
pub fn autocorrelation(xs: &[f64]) -> Result<Vec<f64>> {
    ensure(xs.len() >= 2, "samples", "need at least two samples")?;
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let m = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = xs.iter().map(|x| Complex64::new(x - mean, 0.0)).collect();
    buf.resize(m, Complex64::new(0.0, 0.0));
    planner.plan_fft_forward(m).process(&mut buf);
    for b in &mut buf {
        *b = Complex64::new(b.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    let c0 = buf[0].re;
    if !(c0 > 0.0) {
        return Err(Error::Degenerate("series has zero variance".into()));
    }
    Ok(buf[..n].iter().map(|c| c.re / c0).collect())
}

/// Lag where the autocorrelation first drops below 1/e, times `dt`.
pub fn correlation_time(xs: &[f64], dt: f64) -> Result<f64> {
    ensure(dt.is_finite() && dt > 0.0, "dt", "must be finite and > 0")?;
    let acf = autocorrelation(xs)?;
    let target = (-1.0f64).exp();
    let k = acf
        .iter()
        .position(|c| *c < target)
        .ok_or_else(|| Error::Degenerate("autocorrelation never decays below 1/e".into()))?;
    let (a, b) = (acf[k - 1], acf[k]);
    let lag = (k - 1) as f64 + (a - target) / (a - b);
    Ok(lag * dt)
}

/// Keeps one sample every ⌈3τ/dt⌉, τ the measured correlation time.
pub fn decorrelate(xs: &[f64], dt: f64) -> Result<(Vec<f64>, usize)> {
    let tau = correlation_time(xs, dt)?;
    let stride = ((3.0 * tau / dt).ceil() as usize).max(1);
    Ok((xs.iter().step_by(stride).copied().collect(), stride))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn kolmogorov_tail_values() {
        // Q(1.36) ≈ 0.049, Q(1.63) ≈ 0.010
        assert!((kolmogorov_tail(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_tail(1.628) - 0.01).abs() < 3e-4);
        assert_eq!(kolmogorov_tail(0.0), 1.0);
    }

    #[test]
    fn lilliefors_critical_value() {
        // Large-n 5 % critical value ≈ 0.895/√n.
        let n = 1000;
        let d = 0.895 / (n as f64).sqrt();
        assert!((lilliefors_p_value(d, n) - 0.05).abs() < 0.01);
    }

    #[test]
    fn gaussian_false_positive_rate() {
        let mut r = rng::stream(17);
        let trials = 400;
        let rejections = (0..trials)
            .filter(|_| {
                let xs: Vec<f64> = (0..1000).map(|_| 3.0 + 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
                ks_gaussianity_test(&xs, 0.05).unwrap().reject
            })
            .count();
        let rate = rejections as f64 / trials as f64;
        assert!((rate - 0.05).abs() < 0.03, "{rate}");
    }

    #[test]
    fn uniform_is_rejected() {
        let mut r = rng::stream(4);
        let xs: Vec<f64> = (0..10_000).map(|_| r.random::<f64>()).collect();
        let out = ks_gaussianity_test(&xs, 0.05).unwrap();
        assert!(out.reject && out.p_value < 1e-6);
        assert!(ks_test_known_gaussian(&xs, 0.5, 0.29, 0.05).unwrap().reject);
    }

    #[test]
    fn input_checks() {
        assert!(matches!(ks_gaussianity_test(&[0.0; 999], 0.05), Err(Error::InsufficientData { .. })));
        let xs: Vec<f64> = (0..2000).map(|i| i as f64).collect();
        assert!(ks_gaussianity_test(&xs, 0.2).is_err());
    }

    #[test]
    fn ar1_correlation_time() {
        let mut r = rng::stream(9);
        let phi: f64 = (-1.0f64 / 50.0).exp();
        let mut x = 0.0;
        let xs: Vec<f64> = (0..400_000)
            .map(|_| {
                x = phi * x + (1.0 - phi * phi).sqrt() * r.sample::<f64, _>(StandardNormal);
                x
            })
            .collect();
        let tau = correlation_time(&xs, 0.5).unwrap();
        assert!((tau / 25.0 - 1.0).abs() < 0.1, "{tau}");
        let (thin, stride) = decorrelate(&xs, 0.5).unwrap();
        assert!((145..=165).contains(&stride));
        assert_eq!(thin.len(), xs.len().div_ceil(stride));
    }
}
