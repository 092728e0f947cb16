//! Adaptive Gauss-Legendre quadrature on finite intervals.

use std::sync::OnceLock;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};

const ORDER: usize = 16;
const MAX_DEPTH: u32 = 40;

fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(ORDER.try_into().expect("nonzero order")))
}

/// ∫ₐᵇ f, bisecting panels until each agrees with its two halves to
/// `rel_tol` of the running estimate.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let whole = rule().integrate(a, b, &f);
    let scale = whole.abs().max(f64::MIN_POSITIVE);
    refine(&f, a, b, whole, rel_tol * scale, 0)
}

fn refine<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> Result<f64> {
    let m = 0.5 * (a + b);
    let left = rule().integrate(a, m, f);
    let right = rule().integrate(m, b, f);
    let sum = left + right;
    if !sum.is_finite() {
        return Err(Error::NonConvergence("quadrature produced a non-finite value".into()));
    }
    if (sum - whole).abs() <= tol {
        return Ok(sum);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::NonConvergence(format!("quadrature did not reach tolerance on [{a:e}, {b:e}]")));
    }
    Ok(refine(f, a, m, left, 0.5 * tol, depth + 1)? + refine(f, m, b, right, 0.5 * tol, depth + 1)?)
}
