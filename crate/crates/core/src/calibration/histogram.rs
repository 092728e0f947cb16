//! Normalized histograms and Kullback-Leibler divergence between them.

use crate::error::{ensure, Error, Result};

/// Minimum sample count for a histogram.
pub const MIN_SAMPLES: usize = 100;
/// Pseudo-count added to empty reference bins before a KL comparison.
pub const KL_PSEUDO_COUNT: f64 = 0.5;
const MAX_BINS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Binning {
    FreedmanDiaconis,
    /// Equal-width bins over the sample range.
    Count(usize),
    Edges(Vec<f64>),
}

/// Histogram density on explicit bin edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPdf {
    edges: Vec<f64>,
    counts: Vec<f64>,
    density: Vec<f64>,
    samples: usize,
    outside: usize,
    pseudo_count: f64,
}

impl EmpiricalPdf {
    /// Density built from bin probabilities (renormalized to sum 1).
    pub fn from_probabilities(edges: Vec<f64>, probabilities: &[f64]) -> Result<Self> {
        check_edges(&edges)?;
        if probabilities.len() + 1 != edges.len() {
            return Err(Error::GridMismatch);
        }
        ensure(probabilities.iter().all(|p| p.is_finite() && *p >= 0.0), "probabilities", "must be finite and >= 0")?;
        let total: f64 = probabilities.iter().sum();
        ensure(total > 0.0, "probabilities", "must not all be zero")?;
        let counts: Vec<f64> = probabilities.iter().map(|p| p / total).collect();
        Ok(EmpiricalPdf::from_counts(edges, counts, 0, 0, 0.0))
    }

    fn from_counts(edges: Vec<f64>, counts: Vec<f64>, samples: usize, outside: usize, pseudo_count: f64) -> Self {
        let total: f64 = counts.iter().sum();
        let density = counts.iter().zip(edges.windows(2)).map(|(c, w)| c / (total * (w[1] - w[0]))).collect();
        EmpiricalPdf { edges, counts, density, samples, outside, pseudo_count }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Samples that fell outside the edges.
    pub fn outside(&self) -> usize {
        self.outside
    }

    pub fn pseudo_count(&self) -> f64 {
        self.pseudo_count
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Probability mass per bin.
    pub fn probabilities(&self) -> Vec<f64> {
        self.density.iter().zip(self.edges.windows(2)).map(|(d, w)| d * (w[1] - w[0])).collect()
    }

    pub fn integral(&self) -> f64 {
        self.probabilities().iter().sum()
    }

    /// Adds `eps` to every empty bin of `self` where `p` has mass, then renormalizes.
    pub fn regularized_against(&self, p: &EmpiricalPdf, eps: f64) -> Result<EmpiricalPdf> {
        ensure(eps.is_finite() && eps > 0.0, "eps", "must be finite and > 0")?;
        if !same_edges(&self.edges, &p.edges) {
            return Err(Error::GridMismatch);
        }
        let counts =
            self.counts.iter().zip(&p.counts).map(|(q, pc)| if *q == 0.0 && *pc > 0.0 { eps } else { *q }).collect();
        Ok(EmpiricalPdf::from_counts(self.edges.clone(), counts, self.samples, self.outside, eps))
    }

    /// Merges bins onto `edges`, which must be a subset of the current edges.
    pub fn rebin(&self, edges: &[f64]) -> Result<EmpiricalPdf> {
        check_edges(edges)?;
        let mut counts = vec![0.0; edges.len() - 1];
        let mut j = 0;
        if !self.edges.iter().any(|e| *e == edges[0]) || !self.edges.iter().any(|e| *e == edges[edges.len() - 1]) {
            return Err(Error::GridMismatch);
        }
        for (i, w) in self.edges.windows(2).enumerate() {
            if w[0] < edges[0] || w[1] > edges[edges.len() - 1] {
                continue;
            }
            while w[0] >= edges[j + 1] {
                j += 1;
            }
            if w[1] > edges[j + 1] {
                return Err(Error::GridMismatch);
            }
            counts[j] += self.counts[i];
        }
        Ok(EmpiricalPdf::from_counts(edges.to_vec(), counts, self.samples, self.outside, self.pseudo_count))
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    ensure(edges.len() >= 2, "edges", "need at least two edges")?;
    ensure(edges.iter().all(|e| e.is_finite()), "edges", "must be finite")?;
    ensure(edges.windows(2).all(|w| w[1] > w[0]), "edges", "must be strictly increasing")
}

fn same_edges(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()))
}

/// Linear-interpolated quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

fn sorted_finite(samples: &[f64]) -> Result<Vec<f64>> {
    ensure(samples.iter().all(|v| v.is_finite()), "samples", "must be finite")?;
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    Ok(s)
}

/// Freedman–Diaconis width 2·IQR·n^(−1/3); Scott's rule when the IQR vanishes.
pub fn freedman_diaconis_width(samples: &[f64]) -> Result<f64> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InsufficientData { needed: MIN_SAMPLES, got: samples.len() });
    }
    let s = sorted_finite(samples)?;
    let n = s.len() as f64;
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    if iqr > 0.0 {
        return Ok(2.0 * iqr * n.powf(-1.0 / 3.0));
    }
    let mean = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd > 0.0 {
        Ok(3.49 * sd * n.powf(-1.0 / 3.0))
    } else {
        Err(Error::Degenerate("samples have zero variance".into()))
    }
}

fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

fn edges_for_width(lo: f64, hi: f64, width: f64) -> Result<Vec<f64>> {
    let bins = ((hi - lo) / width).ceil().max(1.0);
    if bins > MAX_BINS as f64 {
        return Err(Error::GridTooLarge { requested: bins as usize, cap: MAX_BINS });
    }
    let bins = bins as usize;
    // Pad symmetrically so the extreme samples fall strictly inside.
    let pad = 0.5 * (bins as f64 * width - (hi - lo));
    Ok(uniform_edges(lo - pad, hi + pad + 1e-12 * width, bins))
}

pub fn histogram_pdf(samples: &[f64], binning: &Binning) -> Result<EmpiricalPdf> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InsufficientData { needed: MIN_SAMPLES, got: samples.len() });
    }
    let s = sorted_finite(samples)?;
    let (lo, hi) = (s[0], s[s.len() - 1]);
    let edges = match binning {
        Binning::Edges(e) => {
            check_edges(e)?;
            e.clone()
        }
        _ if hi <= lo => return Err(Error::Degenerate("samples have zero variance".into())),
        Binning::FreedmanDiaconis => edges_for_width(lo, hi, freedman_diaconis_width(&s)?)?,
        Binning::Count(n) => {
            ensure(*n >= 1 && *n <= MAX_BINS, "bins", "must be in 1..=100000")?;
            let mut e = uniform_edges(lo, hi, *n);
            let last = e.len() - 1;
            e[last] = hi + 1e-12 * (hi - lo);
            e
        }
    };
    let mut counts = vec![0.0; edges.len() - 1];
    let (first, last) = (edges[0], edges[edges.len() - 1]);
    let uniform_width = (last - first) / counts.len() as f64;
    let uniform = edges.windows(2).all(|w| ((w[1] - w[0]) / uniform_width - 1.0).abs() < 1e-9);
    let mut outside = 0;
    for &x in &s {
        if x < first || x >= last {
            outside += 1;
            continue;
        }
        let i = if uniform {
            (((x - first) / uniform_width) as usize).min(counts.len() - 1)
        } else {
            edges.partition_point(|e| *e <= x) - 1
        };
        // Guard the floating-point boundary of the uniform fast path.
        let i = if x < edges[i] {
            i - 1
        } else if x >= edges[i + 1] {
            i + 1
        } else {
            i
        };
        counts[i] += 1.0;
    }
    if outside == s.len() {
        return Err(Error::Degenerate("no samples fall inside the bin edges".into()));
    }
    Ok(EmpiricalPdf::from_counts(edges, counts, s.len(), outside, 0.0))
}

/// Common edges for two sample sets: the coarser Freedman–Diaconis width
/// over the union of their ranges.
pub fn shared_edges(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let wa = freedman_diaconis_width(a)?;
    let wb = freedman_diaconis_width(b)?;
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    edges_for_width(lo, hi, wa.max(wb))
}

/// D(p‖q) = Σ p·ln(p/q)·Δx in nats. Requires identical edges and q > 0
/// wherever p > 0.
pub fn kl_divergence(p: &EmpiricalPdf, q: &EmpiricalPdf) -> Result<f64> {
    if !same_edges(&p.edges, &q.edges) {
        return Err(Error::GridMismatch);
    }
    let (pp, qq) = (p.probabilities(), q.probabilities());
    let mut d = 0.0;
    for (a, b) in pp.iter().zip(&qq) {
        if *a > 0.0 {
            if *b <= 0.0 {
                return Err(Error::Degenerate("reference density vanishes where the target has mass".into()));
            }
            d += a * (a / b).ln();
        }
    }
    Ok(d.max(0.0))
}

/// KL divergence of two sample sets on shared edges, with the reference
/// (`q`) regularized by [`KL_PSEUDO_COUNT`].
pub fn kl_divergence_samples(p: &[f64], q: &[f64]) -> Result<f64> {
    let edges = shared_edges(p, q)?;
    let hp = histogram_pdf(p, &Binning::Edges(edges.clone()))?;
    let hq = histogram_pdf(q, &Binning::Edges(edges))?.regularized_against(&hp, KL_PSEUDO_COUNT)?;
    kl_divergence(&hp, &hq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed);
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    #[test]
    fn uniform_density() {
        let mut r = rng::stream(1);
        let xs: Vec<f64> = (0..200_000).map(|_| r.random::<f64>()).collect();
        let h = histogram_pdf(&xs, &Binning::Count(20)).unwrap();
        assert!((h.integral() - 1.0).abs() < 1e-9);
        assert!(h.density().iter().all(|d| (d - 1.0).abs() < 0.04));
    }

    #[test]
    fn normal_density() {
        let xs = normals(1_000_000, 2);
        let h = histogram_pdf(&xs, &Binning::Count(100)).unwrap();
        assert!((h.integral() - 1.0).abs() < 1e-9);
        let dev = h
            .centers()
            .iter()
            .zip(h.density())
            .map(|(x, d)| (d - (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
            .fold(0.0f64, f64::max);
        assert!(dev < 0.01, "{dev}");
        assert!(h.edges().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(histogram_pdf(&[1.5; 100], &Binning::FreedmanDiaconis), Err(Error::Degenerate(_))));
        assert!(matches!(histogram_pdf(&[1.0; 10], &Binning::FreedmanDiaconis), Err(Error::InsufficientData { .. })));
    }

    fn gaussian_pdf(mu: f64, sigma: f64, edges: &[f64]) -> EmpiricalPdf {
        let cdf = |x: f64| 0.5 * libm::erfc(-(x - mu) / (sigma * std::f64::consts::SQRT_2));
        let probs: Vec<f64> = edges.windows(2).map(|w| cdf(w[1]) - cdf(w[0])).collect();
        EmpiricalPdf::from_probabilities(edges.to_vec(), &probs).unwrap()
    }

    #[test]
    fn gaussian_kl_oracle() {
        let edges = uniform_edges(-12.0, 12.0, 4800);
        let (m1, m2, s) = (0.0, 0.7, 1.3);
        let p = gaussian_pdf(m1, s, &edges);
        let q = gaussian_pdf(m2, s, &edges);
        let d = kl_divergence(&p, &q).unwrap();
        let oracle = (m1 - m2) * (m1 - m2) / (2.0 * s * s);
        assert!((d / oracle - 1.0).abs() < 0.02, "{d} vs {oracle}");
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_asymmetric() {
        let edges = uniform_edges(0.0, 1.0, 4);
        let p = EmpiricalPdf::from_probabilities(edges.clone(), &[0.7, 0.2, 0.05, 0.05]).unwrap();
        let q = EmpiricalPdf::from_probabilities(edges, &[0.25, 0.25, 0.25, 0.25]).unwrap();
        let (a, b) = (kl_divergence(&p, &q).unwrap(), kl_divergence(&q, &p).unwrap());
        assert!(a > 0.0 && b > 0.0 && (a - b).abs() > 1e-3);
    }

    #[test]
    fn grid_mismatch_and_regularization() {
        let p = EmpiricalPdf::from_probabilities(uniform_edges(0.0, 1.0, 4), &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let q = EmpiricalPdf::from_probabilities(uniform_edges(0.0, 1.0, 5), &[1.0; 5]).unwrap();
        assert!(matches!(kl_divergence(&p, &q), Err(Error::GridMismatch)));
        let merged = q.rebin(&[0.0, 0.6, 1.0]);
        assert!(merged.is_ok());
        assert!(q.rebin(&[0.0, 0.5, 1.0]).is_err());

        let holey = EmpiricalPdf::from_probabilities(uniform_edges(0.0, 1.0, 4), &[2.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(kl_divergence(&p, &holey).is_err());
        let fixed = holey.regularized_against(&p, 0.5).unwrap();
        assert!(kl_divergence(&p, &fixed).unwrap().is_finite());
        assert_eq!(fixed.pseudo_count(), 0.5);
    }

    #[test]
    fn sample_kl_of_identical_sets_is_zero() {
        let xs = normals(5000, 3);
        assert_eq!(kl_divergence_samples(&xs, &xs).unwrap(), 0.0);
        let ys: Vec<f64> = normals(5000, 4).iter().map(|v| 1.5 * v).collect();
        assert!(kl_divergence_samples(&xs, &ys).unwrap() > 0.05);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(weights in proptest::collection::vec(0.01f64..1.0, 2..30), other in proptest::collection::vec(0.01f64..1.0, 30)) {
            let edges = uniform_edges(0.0, 1.0, weights.len());
            let p = EmpiricalPdf::from_probabilities(edges.clone(), &weights).unwrap();
            let q = EmpiricalPdf::from_probabilities(edges, &other[..weights.len()]).unwrap();
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn histogram_integrates_to_one(seed in 0u64..1000, n in 100usize..2000) {
            let xs = normals(n, seed);
            let h = histogram_pdf(&xs, &Binning::FreedmanDiaconis).unwrap();
            prop_assert!((h.integral() - 1.0).abs() < 1e-9);
            prop_assert_eq!(h.counts().iter().sum::<f64>() as usize, n);
        }
    }
}
