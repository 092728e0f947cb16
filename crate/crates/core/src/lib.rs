//! Modelling and calibration toolkit for dark-focus optical tweezers.
//!
//! The crate covers the optics of the bottle beam ([`beam`]), Rayleigh-regime
//! forces and the quartic trap expansion ([`forces`]), overdamped Brownian
//! dynamics ([`dynamics`]), power-spectrum calibration ([`spectral`]),
//! Boltzmann-inversion and NA estimation ([`calibration`]) and the
//! absorption comparison against a Gaussian tweezer ([`absorption`]).
//!
//! All quantities are SI.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod absorption;
pub mod beam;
pub mod calibration;
pub mod dynamics;
pub mod error;
mod fit;
pub mod forces;
pub mod quadrature;
pub mod rng;
pub mod spectral;

pub use error::{Error, EscapeReport, Result};
pub use num_complex::Complex64;

/// Boltzmann constant (J/K).
pub const K_B: f64 = 1.380_649e-23;
/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
