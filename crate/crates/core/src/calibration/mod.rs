//! Position-data calibration: histograms and KL divergence, Gaussianity
//! tests, Boltzmann inversion and NA estimation.

pub mod histogram;
pub mod ks;
pub mod na_sweep;
pub mod reconstruct;

pub use histogram::{histogram_pdf, kl_divergence, kl_divergence_samples, shared_edges, Binning, EmpiricalPdf};
pub use ks::{decorrelate, ks_gaussianity_test, ks_test_known_gaussian, KsOutcome};
pub use na_sweep::{estimate_na, NaSweepResult, SweepPoint, SweepSpec, SweepTarget};
pub use reconstruct::{invert_pdf, reconstruct_potential, Potential1d, PotentialReconstruction, ReconstructionOptions};
