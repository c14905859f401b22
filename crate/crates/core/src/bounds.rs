//! Interval bound propagation over an ℓ∞ ball.
//!
//! [`propagate`] pushes the input box through the network layer by layer in
//! midpoint/half-width form, applying ReLU at hidden layers only (the final
//! layer stays affine). Pre-activation intervals are kept for every hidden
//! layer because the linear-relaxation verifier needs them.

use crate::error::{Error, Result};
use crate::nn::{Gradient, Network};

/// ℓ∞ ball `{x : |x − center| ≤ radius}` with a per-coordinate radius so a
/// bias-lifted constant coordinate can be pinned (radius 0).
#[derive(Debug, Clone, PartialEq)]
pub struct InputRegion {
    center: Vec<f64>,
    radius: Vec<f64>,
}

impl InputRegion {
    /// Uniform radius `eps` on every coordinate.
    pub fn uniform(center: Vec<f64>, eps: f64) -> Result<Self> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(Error::InvalidConfig(format!("radius must be >= 0, got {eps}")));
        }
        if !center.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("region center".into()));
        }
        let radius = vec![eps; center.len()];
        Ok(Self { center, radius })
    }

    /// Uniform radius except the listed coordinates, which get radius 0.
    /// Used for the bias-lifting convention where a constant 1 input
    /// coordinate is not attackable.
    pub fn with_frozen(center: Vec<f64>, eps: f64, frozen: &[usize]) -> Result<Self> {
        let mut region = Self::uniform(center, eps)?;
        for &i in frozen {
            if i >= region.radius.len() {
                return Err(Error::ShapeMismatch {
                    context: "frozen coordinate index",
                    expected: region.radius.len(),
                    got: i,
                });
            }
            region.radius[i] = 0.0;
        }
        Ok(region)
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> &[f64] {
        &self.radius
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.radius)
            .map(|(c, r)| c - r)
            .collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.radius)
            .map(|(c, r)| c + r)
            .collect()
    }

    /// Intersect the box with `[lo, hi]` on every coordinate (image data clip).
    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        let lower: Vec<f64> = self.lower().iter().map(|v| v.clamp(lo, hi)).collect();
        let upper: Vec<f64> = self.upper().iter().map(|v| v.clamp(lo, hi)).collect();
        let center: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (l + u)).collect();
        let radius: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (u - l)).collect();
        Self { center, radius }
    }

    pub fn contains_point(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.center.iter().zip(&self.radius))
                .all(|(xi, (c, r))| (xi - c).abs() <= r + tol)
    }
}

/// Elementwise activation bounds for every layer of a network over a region.
///
/// `pre` holds pre-activation (affine) intervals, `post` the intervals after
/// ReLU; for the last layer the two coincide since no activation is applied.
#[derive(Debug, Clone)]
pub struct LayerBounds {
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub pre_lower: Vec<Vec<f64>>,
    pub pre_upper: Vec<Vec<f64>>,
    pub post_lower: Vec<Vec<f64>>,
    pub post_upper: Vec<Vec<f64>>,
}

impl LayerBounds {
    pub fn num_layers(&self) -> usize {
        self.post_lower.len()
    }

    /// Box on the last hidden activation (the network input when L = 1):
    /// the feasible set for the closed-form inner maximization.
    pub fn penultimate(&self) -> (&[f64], &[f64]) {
        let n = self.num_layers();
        if n == 1 {
            (&self.input_lower, &self.input_upper)
        } else {
            (&self.post_lower[n - 2], &self.post_upper[n - 2])
        }
    }

    /// Bounds on the logits.
    pub fn output(&self) -> (&[f64], &[f64]) {
        let n = self.num_layers();
        (&self.post_lower[n - 1], &self.post_upper[n - 1])
    }
}

/// IBP recursion: midpoint/half-width form with `|W|`, ReLU at hidden layers.
pub fn propagate(net: &Network, region: &InputRegion) -> Result<LayerBounds> {
    if region.dim() != net.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "propagate input region",
            expected: net.input_dim(),
            got: region.dim(),
        });
    }
    let mut lower = region.lower();
    let mut upper = region.upper();
    let input_lower = lower.clone();
    let input_upper = upper.clone();

    let last = net.num_layers() - 1;
    let mut pre_lower = Vec::with_capacity(net.num_layers());
    let mut pre_upper = Vec::with_capacity(net.num_layers());
    let mut post_lower = Vec::with_capacity(net.num_layers());
    let mut post_upper = Vec::with_capacity(net.num_layers());

    for (i, layer) in net.layers().iter().enumerate() {
        let mid: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (l + u)).collect();
        let half: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (u - l)).collect();
        let mut center = layer.weight().matvec(&mid);
        for (c, b) in center.iter_mut().zip(layer.bias()) {
            *c += b;
        }
        let spread = layer.weight().abs_matvec(&half);
        let pl: Vec<f64> = center.iter().zip(&spread).map(|(c, s)| c - s).collect();
        let pu: Vec<f64> = center.iter().zip(&spread).map(|(c, s)| c + s).collect();

        if i < last {
            lower = pl.iter().map(|v| v.max(0.0)).collect();
            upper = pu.iter().map(|v| v.max(0.0)).collect();
        } else {
            lower = pl.clone();
            upper = pu.clone();
        }
        pre_lower.push(pl);
        pre_upper.push(pu);
        post_lower.push(lower.clone());
        post_upper.push(upper.clone());
    }

    Ok(LayerBounds {
        input_lower,
        input_upper,
        pre_lower,
        pre_upper,
        post_lower,
        post_upper,
    })
}

/// True iff every layer's activation of `x` lies inside the bounds
/// (absolute tolerance 1e-9). Soundness audit helper.
pub fn contains(bounds: &LayerBounds, net: &Network, x: &[f64]) -> Result<bool> {
    const TOL: f64 = 1e-9;
    let acts = net.forward_trace(x)?;
    for (i, act) in acts.iter().enumerate() {
        for (j, &v) in act.iter().enumerate() {
            if v < bounds.post_lower[i][j] - TOL || v > bounds.post_upper[i][j] + TOL {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Gradient seeds for [`backward_bounds`]: upstream gradients w.r.t. the
/// post-activation lower/upper bound vectors of each layer. Callers fill only
/// the layers their loss touches.
#[derive(Debug, Clone)]
pub struct BoundsGrad {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

impl BoundsGrad {
    pub fn zeros_like(bounds: &LayerBounds) -> Self {
        Self {
            lower: bounds.post_lower.iter().map(|v| vec![0.0; v.len()]).collect(),
            upper: bounds.post_upper.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    /// Seed the box used by the inner maximization (the penultimate layer for
    /// deep nets; no-op gradients flow to the input box when L = 1, since the
    /// input does not depend on the weights).
    pub fn seed_penultimate(&mut self, bounds: &LayerBounds, gl: &[f64], gu: &[f64]) {
        let n = bounds.num_layers();
        if n >= 2 {
            for (a, b) in self.lower[n - 2].iter_mut().zip(gl) {
                *a += b;
            }
            for (a, b) in self.upper[n - 2].iter_mut().zip(gu) {
                *a += b;
            }
        }
    }
}

/// Reverse-mode sweep of the IBP recursion: accumulates parameter gradients
/// of any scalar whose bound-gradients are given in `seed`.
///
/// `d|W|/dW = sign(W)` elementwise (0 at 0), matching the forward's use of
/// `|W|` on half-widths; ReLU uses the same 0-at-0 subgradient as `nn`.
pub fn backward_bounds(
    net: &Network,
    bounds: &LayerBounds,
    seed: &BoundsGrad,
    grad: &mut Gradient,
) {
    let nl = net.num_layers();
    let mut g_low = vec![0.0; 0];
    let mut g_up = vec![0.0; 0];

    for i in (0..nl).rev() {
        let layer = &net.layers()[i];
        // Gradient w.r.t. this layer's post-activation bounds: external seed
        // plus whatever flowed down from layer i+1.
        let mut gpl = seed.lower[i].clone();
        let mut gpu = seed.upper[i].clone();
        if i + 1 < nl {
            for (a, b) in gpl.iter_mut().zip(&g_low) {
                *a += b;
            }
            for (a, b) in gpu.iter_mut().zip(&g_up) {
                *a += b;
            }
        }
        // Through the ReLU clamp (hidden layers only): post = max(pre, 0).
        if i < nl - 1 {
            for (g, &p) in gpl.iter_mut().zip(&bounds.pre_lower[i]) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
            for (g, &p) in gpu.iter_mut().zip(&bounds.pre_upper[i]) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        // pre_l = W·mid + b − |W|·half, pre_u = W·mid + b + |W|·half.
        let g_center: Vec<f64> = gpl.iter().zip(&gpu).map(|(l, u)| l + u).collect();
        let g_spread: Vec<f64> = gpu.iter().zip(&gpl).map(|(u, l)| u - l).collect();

        let (in_low, in_up): (&[f64], &[f64]) = if i == 0 {
            (&bounds.input_lower, &bounds.input_upper)
        } else {
            (&bounds.post_lower[i - 1], &bounds.post_upper[i - 1])
        };
        let mid: Vec<f64> = in_low.iter().zip(in_up).map(|(l, u)| 0.5 * (l + u)).collect();
        let half: Vec<f64> = in_low.iter().zip(in_up).map(|(l, u)| 0.5 * (u - l)).collect();

        let w = layer.weight();
        let gw = &mut grad.weights[i];
        for r in 0..w.rows() {
            let gc = g_center[r];
            let gs = g_spread[r];
            grad.biases[i][r] += gc;
            if gc != 0.0 || gs != 0.0 {
                let row = w.row(r);
                let grow = gw.row_mut(r);
                for j in 0..row.len() {
                    grow[j] += gc * mid[j] + gs * half[j] * row[j].signum_or_zero();
                }
            }
        }

        if i > 0 {
            // g_mid = Wᵀ g_center, g_half = |W|ᵀ g_spread;
            // mid = (l+u)/2, half = (u−l)/2.
            let g_mid = w.matvec_t(&g_center);
            let g_half = w.abs_matvec_t(&g_spread);
            g_low = g_mid
                .iter()
                .zip(&g_half)
                .map(|(m, h)| 0.5 * (m - h))
                .collect();
            g_up = g_mid
                .iter()
                .zip(&g_half)
                .map(|(m, h)| 0.5 * (m + h))
                .collect();
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    #[inline]
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
