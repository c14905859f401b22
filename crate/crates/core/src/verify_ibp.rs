//! Interval-bound certification of multi-abstain robustness.
//!
//! For a target class k ≠ y the certified quantity is
//!
//! ```text
//!   bound_k = −min over η in the simplex of  max over box z  −c_k(η)ᵀ(W_L z + b_L)
//! ```
//!
//! where `c_k(η) = η₀(e_y − e_k) + Σ_m η_m(e_{a_m} − e_k)` mixes the true-class
//! and abstain margin rows and the box is the penultimate activation interval.
//! Any η whose inner max is ≤ 0 certifies the target (the max-min direction of
//! the saddle inequality), so `bound_k ≥ 0` for some η implies the whole input
//! ball is classified y or abstained, never k. The inner max is solved in
//! closed form and η follows exponentiated-gradient descent with a Danskin
//! subgradient.

use serde::{Deserialize, Serialize};

use crate::bounds::{propagate, InputRegion};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::nn::Network;
use crate::simplex::{minimize_over_simplex_until, SimplexPoint};

/// A single verification target: true label `y` against class `k`, with the
/// abstain block implied by the network's (K, M) split. Labels are 1-based;
/// `k` must be a regular class distinct from `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetObjective {
    y: usize,
    k: usize,
    num_classes: usize,
    num_abstain: usize,
}

impl TargetObjective {
    pub fn new(y: usize, k: usize, num_classes: usize, num_abstain: usize) -> Result<Self> {
        if y == 0 || y > num_classes {
            return Err(Error::InvalidConfig(format!(
                "label y={y} outside regular classes 1..={num_classes}"
            )));
        }
        if k == 0 || k > num_classes || k == y {
            return Err(Error::InvalidConfig(format!(
                "target k={k} must be a regular class distinct from y={y}"
            )));
        }
        Ok(Self {
            y,
            k,
            num_classes,
            num_abstain,
        })
    }

    #[inline]
    pub fn y(&self) -> usize {
        self.y
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    /// Simplex dimension M + 1.
    #[inline]
    pub fn mix_dim(&self) -> usize {
        self.num_abstain + 1
    }

    #[inline]
    pub fn logit_dim(&self) -> usize {
        self.num_classes + self.num_abstain
    }

    /// 0-based logit index of mixture component m (m = 0 is y, m ≥ 1 the
    /// m-th abstain class).
    #[inline]
    fn component_index(&self, m: usize) -> usize {
        if m == 0 {
            self.y - 1
        } else {
            self.num_classes + m - 1
        }
    }

    /// Margin row for component m: `e_{a_m} − e_k` (with a₀ = y).
    pub fn margin_row(&self, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.logit_dim()];
        c[self.component_index(m)] += 1.0;
        c[self.k - 1] -= 1.0;
        c
    }

    /// Mixed objective row `c_k(η)`.
    pub fn mixed_row(&self, eta: &SimplexPoint) -> Vec<f64> {
        debug_assert_eq!(eta.dim(), self.mix_dim());
        let mut c = vec![0.0; self.logit_dim()];
        for (m, w) in eta.as_slice().iter().enumerate() {
            c[self.component_index(m)] += w;
        }
        c[self.k - 1] -= 1.0;
        c
    }
}

/// Exact maximizer of `−cᵀ(W z + b)` over the box `lower ≤ z ≤ upper`:
/// coordinate j sits at the lower face when `(Wᵀc)_j ≥ 0`, else the upper.
pub fn inner_max(
    lower: &[f64],
    upper: &[f64],
    weight: &Matrix,
    bias: &[f64],
    c: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if lower.len() != weight.cols() || upper.len() != weight.cols() {
        return Err(Error::ShapeMismatch {
            context: "inner_max box",
            expected: weight.cols(),
            got: lower.len(),
        });
    }
    if c.len() != weight.rows() || bias.len() != weight.rows() {
        return Err(Error::ShapeMismatch {
            context: "inner_max objective",
            expected: weight.rows(),
            got: c.len(),
        });
    }
    let v = weight.matvec_t(c);
    let z: Vec<f64> = v
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(vj, (l, u))| if *vj >= 0.0 { *l } else { *u })
        .collect();
    let value = -(dot(&v, &z) + dot(c, bias));
    Ok((value, z))
}

/// The convex piecewise-linear objective minimized over the simplex for one
/// target: value is the closed-form inner max at the mixed row, and the
/// subgradient component m is `−c_mᵀ(W z* + b)` through the fixed maximizer
/// (Danskin).
pub struct SimplexObjective<'a> {
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    pub weight: &'a Matrix,
    pub bias: &'a [f64],
    pub target: TargetObjective,
}

impl SimplexObjective<'_> {
    pub fn eval(&self, eta: &SimplexPoint) -> Result<(f64, Vec<f64>)> {
        let c = self.target.mixed_row(eta);
        let (value, z_star) = inner_max(self.lower, self.upper, self.weight, self.bias, &c)?;
        let mut affine = self.weight.matvec(&z_star);
        for (a, b) in affine.iter_mut().zip(self.bias) {
            *a += b;
        }
        let k0 = self.target.k() - 1;
        let subgrad: Vec<f64> = (0..self.target.mix_dim())
            .map(|m| -(affine[self.target.component_index(m)] - affine[k0]))
            .collect();
        Ok((value, subgrad))
    }
}

/// Single-class IBP margin bound computed directly in midpoint/half-width
/// algebra (no simplex machinery): a lower bound on `min c_ykᵀ z_L` over the
/// box. The M = 0 certificate must agree with this to float precision.
pub fn classical_margin_bound(net: &Network, lower: &[f64], upper: &[f64], y: usize, k: usize) -> f64 {
    let layer = net.layers().last().unwrap();
    let mut c = vec![0.0; net.output_dim()];
    c[y - 1] = 1.0;
    c[k - 1] = -1.0;
    let v = layer.weight().matvec_t(&c);
    let mut value = dot(&c, layer.bias());
    for (j, vj) in v.iter().enumerate() {
        let mid = 0.5 * (lower[j] + upper[j]);
        let half = 0.5 * (upper[j] - lower[j]);
        value += vj * mid - vj.abs() * half;
    }
    value
}

/// Solver settings for [`verify_ibp`].
#[derive(Debug, Clone)]
pub struct IbpConfig {
    /// Exponentiated-gradient step size ν.
    pub step: f64,
    /// Iteration budget T per target.
    pub iters: usize,
    /// Start at (1−Mδ, δ, …, δ) instead of the literal vertex e₀, which is a
    /// fixed point of multiplicative updates.
    pub interior_start: bool,
    pub interior_delta: f64,
    /// Stop a target's descent as soon as the certificate is achieved.
    pub early_exit: bool,
    /// Reuse the previous target's witness as the next target's start.
    pub warm_start: bool,
}

impl Default for IbpConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            iters: 500,
            interior_start: true,
            interior_delta: 1e-6,
            early_exit: true,
            warm_start: true,
        }
    }
}

/// Per-target certification outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetCertificate {
    /// Target class k (1-based regular class).
    pub target: usize,
    /// Certified lower bound on the worst-case margin `max(z_y, z_a…) − z_k`.
    pub bound: f64,
    /// `bound ≥ 0` exactly; borderline negatives fail (conservative).
    pub verified: bool,
    /// The mixing weights achieving the bound.
    pub eta: Vec<f64>,
}

/// Certification outcome for one sample: verified overall iff every target
/// k ≠ y is verified, in which case every point of the input ball is classified
/// as y or as an abstain class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationCertificate {
    pub label: usize,
    pub targets: Vec<TargetCertificate>,
    pub overall_verified: bool,
}

impl VerificationCertificate {
    pub fn bound_for(&self, k: usize) -> Option<f64> {
        self.targets.iter().find(|t| t.target == k).map(|t| t.bound)
    }
}

/// Certify one sample against every regular target class.
pub fn verify_ibp(
    net: &Network,
    region: &InputRegion,
    y: usize,
    config: &IbpConfig,
) -> Result<VerificationCertificate> {
    if net.num_classes() < 2 {
        return Err(Error::InvalidConfig(
            "verification needs at least two regular classes".into(),
        ));
    }
    let bounds = propagate(net, region)?;
    let (lower, upper) = bounds.penultimate();
    let layer = net.layers().last().unwrap();

    let mix_dim = net.num_abstain() + 1;
    let init = if config.interior_start {
        SimplexPoint::near_vertex(mix_dim, config.interior_delta)
    } else {
        SimplexPoint::vertex(mix_dim, 0)
    };

    let mut targets = Vec::with_capacity(net.num_classes() - 1);
    let mut warm: Option<SimplexPoint> = None;
    for k in 1..=net.num_classes() {
        if k == y {
            continue;
        }
        let objective = SimplexObjective {
            lower,
            upper,
            weight: layer.weight(),
            bias: layer.bias(),
            target: TargetObjective::new(y, k, net.num_classes(), net.num_abstain())?,
        };
        let eta0 = match (&warm, config.warm_start) {
            (Some(w), true) => w.clone(),
            _ => init.clone(),
        };
        let stop = if config.early_exit { Some(0.0) } else { None };
        let (eta, value) =
            minimize_over_simplex_until(|e| objective.eval(e), &eta0, config.step, config.iters, stop)?;
        let bound = -value;
        if config.warm_start {
            warm = Some(eta.clone());
        }
        targets.push(TargetCertificate {
            target: k,
            bound,
            verified: bound >= 0.0,
            eta: eta.into_vec(),
        });
    }
    let overall_verified = targets.iter().all(|t| t.verified);
    Ok(VerificationCertificate {
        label: y,
        targets,
        overall_verified,
    })
}
