//! Exponentiated-gradient (entropy Bregman proximal) steps on the probability
//! simplex, shared by both verifiers and the regularized training objective.

use crate::error::{Error, Result};

/// Point on the probability simplex: nonnegative entries summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint {
    eta: Vec<f64>,
}

impl SimplexPoint {
    /// Validates nonnegativity and Σηᵢ = 1 within 1e-12.
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::InvalidConfig("simplex point must be nonempty".into()));
        }
        if eta.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "simplex entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = eta.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "simplex entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self { eta })
    }

    /// The vertex eᵢ.
    pub fn vertex(dim: usize, i: usize) -> Self {
        let mut eta = vec![0.0; dim];
        eta[i] = 1.0;
        Self { eta }
    }

    pub fn uniform(dim: usize) -> Self {
        Self {
            eta: vec![1.0 / dim as f64; dim],
        }
    }

    /// Mass 1 − (dim−1)·delta on coordinate 0, delta elsewhere: a strict
    /// interior start near the first vertex. Multiplicative updates freeze
    /// exact zeros, so the literal vertex start can never move mass onto the
    /// other coordinates; this start can.
    pub fn near_vertex(dim: usize, delta: f64) -> Self {
        if dim == 1 {
            return Self::vertex(1, 0);
        }
        let mut eta = vec![delta; dim];
        eta[0] = 1.0 - (dim - 1) as f64 * delta;
        Self { eta }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.eta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.eta
    }
}

/// One entropy-mirror step: ηᵢ ← ηᵢ·exp(−2ν·gᵢ) / Σⱼ ηⱼ·exp(−2ν·gⱼ).
///
/// The exponent is shifted by its maximum (over coordinates with mass) before
/// exponentiating, which leaves the update invariant and avoids overflow.
/// Entries that are exactly 0 stay 0.
pub fn eg_step(eta: &SimplexPoint, grad: &[f64], step: f64) -> Result<SimplexPoint> {
    if grad.len() != eta.dim() {
        return Err(Error::ShapeMismatch {
            context: "eg_step gradient",
            expected: eta.dim(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| g.is_nan()) {
        return Err(Error::NonFinite("eg_step gradient".into()));
    }
    let exponents: Vec<f64> = grad.iter().map(|g| -2.0 * step * g).collect();
    let shift = eta
        .as_slice()
        .iter()
        .zip(&exponents)
        .filter(|(m, _)| **m > 0.0)
        .map(|(_, e)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = eta
        .as_slice()
        .iter()
        .zip(&exponents)
        .map(|(m, e)| if *m > 0.0 { m * (e - shift).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::NonFinite("eg_step normalizer".into()));
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    // Renormalize residual rounding so the invariant holds exactly enough.
    let s: f64 = out.iter().sum();
    if s != 1.0 {
        for v in out.iter_mut() {
            *v /= s;
        }
    }
    SimplexPoint::new(out)
}

/// Minimize a convex `objective` over the simplex by exponentiated gradient,
/// returning the best-seen iterate and value across all `iters` evaluations.
pub fn minimize_over_simplex<F>(
    objective: F,
    eta0: &SimplexPoint,
    step: f64,
    iters: usize,
) -> Result<(SimplexPoint, f64)>
where
    F: FnMut(&SimplexPoint) -> Result<(f64, Vec<f64>)>,
{
    minimize_over_simplex_until(objective, eta0, step, iters, None)
}

/// As [`minimize_over_simplex`], stopping early once the best value drops to
/// `stop_below` or less.
pub fn minimize_over_simplex_until<F>(
    mut objective: F,
    eta0: &SimplexPoint,
    step: f64,
    iters: usize,
    stop_below: Option<f64>,
) -> Result<(SimplexPoint, f64)>
where
    F: FnMut(&SimplexPoint) -> Result<(f64, Vec<f64>)>,
{
    let mut eta = eta0.clone();
    let mut best = eta.clone();
    let mut best_value = f64::INFINITY;
    for _ in 0..iters.max(1) {
        let (value, grad) = objective(&eta)?;
        if value < best_value {
            best_value = value;
            best = eta.clone();
        }
        if let Some(threshold) = stop_below {
            if best_value <= threshold {
                break;
            }
        }
        eta = eg_step(&eta, &grad, step)?;
    }
    Ok((best, best_value))
}
