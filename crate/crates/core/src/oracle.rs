//! Independent ground-truth machinery: dense-grid falsification of the
//! multi-abstain robustness condition, PGD attacks, random instance
//! generators for audit suites, and the closed-form one-dimensional
//! Laplace detection example.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bounds::InputRegion;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{DenseLayer, Network};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random dense ReLU net for audit suites: `hidden` lists hidden widths,
/// weights are uniform at ±`scale`/√in_dim.
pub fn random_net(
    rng: &mut ChaCha8Rng,
    input_dim: usize,
    hidden: &[usize],
    num_classes: usize,
    num_abstain: usize,
    scale: f64,
) -> Network {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(num_classes + num_abstain);
    let layers: Vec<DenseLayer> = dims
        .windows(2)
        .map(|d| {
            let (in_dim, out_dim) = (d[0], d[1]);
            let bound = scale / (in_dim as f64).sqrt();
            let mut w = Matrix::zeros(out_dim, in_dim);
            for i in 0..out_dim {
                for j in 0..in_dim {
                    w.set(i, j, rng.gen_range(-bound..bound));
                }
            }
            let bias: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-0.3..0.3) * scale).collect();
            DenseLayer::new(w, bias).expect("generated layer is valid")
        })
        .collect();
    Network::new(layers, num_classes, num_abstain).expect("generated network is valid")
}

/// Uniform sample from the region's box.
pub fn uniform_in_region(rng: &mut ChaCha8Rng, region: &InputRegion) -> Vec<f64> {
    region
        .center()
        .iter()
        .zip(region.radius())
        .map(|(c, r)| {
            if *r == 0.0 {
                *c
            } else {
                rng.gen_range(c - r..c + r)
            }
        })
        .collect()
}

/// Worst-target margin of the multi-abstain condition at a point:
/// `min over regular k ≠ y of  max(z_y, z_{a_1}, …, z_{a_M}) − z_k`.
/// Negative means some target class beats both the true label and every
/// abstain class, i.e. the condition is violated at `x`.
pub fn condition_margin(net: &Network, x: &[f64], y: usize) -> Result<(f64, usize)> {
    let z = net.forward(x)?;
    let k_classes = net.num_classes();
    let mut top = z[y - 1];
    for a in k_classes..net.output_dim() {
        top = top.max(z[a]);
    }
    let mut worst = f64::INFINITY;
    let mut worst_k = 0;
    for k in 1..=k_classes {
        if k == y {
            continue;
        }
        let margin = top - z[k - 1];
        if margin < worst {
            worst = margin;
            worst_k = k;
        }
    }
    Ok((worst, worst_k))
}

/// Outcome of a PGD search for a violation of the robustness condition.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub found: bool,
    /// A certified counterexample (inside the region, margin < 0), when found.
    pub x_adv: Option<Vec<f64>>,
    /// The target class the counterexample flips to.
    pub violated_target: Option<usize>,
    /// Lowest margin seen across all restarts and its point, found or not.
    pub best_margin: f64,
    pub best_point: Vec<f64>,
}

/// Multi-restart signed-gradient descent on the condition margin, projected
/// onto the region's box after every step.
pub fn pgd_attack(
    net: &Network,
    region: &InputRegion,
    y: usize,
    steps: usize,
    restarts: usize,
    seed: u64,
) -> Result<AttackResult> {
    if steps == 0 {
        return Err(Error::InvalidConfig("pgd needs at least one step".into()));
    }
    let mut rng = seeded_rng(seed);
    let lower = region.lower();
    let upper = region.upper();
    let max_radius = region.radius().iter().cloned().fold(0.0f64, f64::max);
    let step_size = 2.5 * max_radius / steps as f64;

    let mut best_margin = f64::INFINITY;
    let mut best_point = region.center().to_vec();
    let mut found = None;

    for restart in 0..restarts.max(1) {
        let mut x = if restart == 0 {
            region.center().to_vec()
        } else {
            uniform_in_region(&mut rng, region)
        };
        for _ in 0..steps {
            let (margin, worst_k) = condition_margin(net, &x, y)?;
            if margin < best_margin {
                best_margin = margin;
                best_point = x.clone();
                if margin < 0.0 && found.is_none() {
                    found = Some((x.clone(), worst_k));
                }
            }
            if step_size == 0.0 {
                break;
            }
            // Descend the active piece: margin = z_top − z_k with top the
            // argmax of {y, abstains}.
            let z = net.forward(&x)?;
            let mut top_idx = y - 1;
            for a in net.num_classes()..net.output_dim() {
                if z[a] > z[top_idx] {
                    top_idx = a;
                }
            }
            let mut upstream = vec![0.0; net.output_dim()];
            upstream[top_idx] = 1.0;
            upstream[worst_k - 1] -= 1.0;
            let (_, gx) = net.backward(&x, &upstream)?;
            for (j, xv) in x.iter_mut().enumerate() {
                let s = if gx[j] > 0.0 {
                    1.0
                } else if gx[j] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *xv = (*xv - step_size * s).clamp(lower[j], upper[j]);
            }
        }
        let (margin, worst_k) = condition_margin(net, &x, y)?;
        if margin < best_margin {
            best_margin = margin;
            best_point = x.clone();
        }
        if margin < 0.0 && found.is_none() {
            found = Some((x, worst_k));
        }
    }

    let (x_adv, violated_target) = match found {
        Some((x, k)) => (Some(x), Some(k)),
        None => (None, None),
    };
    Ok(AttackResult {
        found: x_adv.is_some(),
        x_adv,
        violated_target,
        best_margin,
        best_point,
    })
}

/// Empirical check of the robustness condition by dense grid enumeration plus
/// PGD endpoints. A `false` is a certified counterexample; a `true` is only
/// evidence (input dim is guarded to keep the grid honest).
pub fn exact_check(
    net: &Network,
    region: &InputRegion,
    y: usize,
    grid_resolution: f64,
) -> Result<bool> {
    const DIM_LIMIT: usize = 3;
    if region.dim() > DIM_LIMIT {
        return Err(Error::DimensionGuard(region.dim(), DIM_LIMIT));
    }
    if !(grid_resolution > 0.0) {
        return Err(Error::InvalidConfig("grid resolution must be positive".into()));
    }
    let lower = region.lower();
    let upper = region.upper();
    let steps: Vec<usize> = region
        .radius()
        .iter()
        .map(|r| {
            if *r == 0.0 {
                1
            } else {
                ((2.0 * r / grid_resolution).ceil() as usize).max(1) + 1
            }
        })
        .collect();
    let total: usize = steps.iter().product();
    if total > 20_000_000 {
        return Err(Error::InvalidConfig(format!(
            "grid of {total} points is too large; coarsen the resolution"
        )));
    }

    let dim = region.dim();
    let mut x = vec![0.0; dim];
    for flat in 0..total {
        let mut rem = flat;
        for j in 0..dim {
            let i = rem % steps[j];
            rem /= steps[j];
            x[j] = if steps[j] == 1 {
                lower[j]
            } else {
                lower[j] + (upper[j] - lower[j]) * i as f64 / (steps[j] - 1) as f64
            };
        }
        let (margin, _) = condition_margin(net, &x, y)?;
        if margin < 0.0 {
            return Ok(false);
        }
    }

    let attack = pgd_attack(net, region, y, 50, 10, 0x5eed)?;
    Ok(!attack.found)
}

/// Per-abstain-class counts of PGD-perturbed samples predicted into each
/// abstain class (the utilization histogram).
pub fn abstain_utilization(
    net: &Network,
    inputs: &[Vec<f64>],
    labels: &[usize],
    eps: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; net.num_abstain()];
    for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
        let region = InputRegion::uniform(x.clone(), eps)?;
        let attack = pgd_attack(net, &region, y, 50, 5, seed ^ (i as u64).wrapping_mul(0x9e3779b9))?;
        let pred = net.predict(&attack.best_point)?;
        if net.is_abstain(pred) {
            counts[pred - net.num_classes() - 1] += 1;
        }
    }
    Ok(counts)
}

/// PGD estimate (from below) of the worst-case robust-abstain loss
/// `max over the ball of  min_m ℓ_{xent∖A}(z(x+δ), a_m)` with a₀ = y, where
/// the softmax denominator runs over regular classes only.
pub fn robust_abstain_loss_pgd(
    net: &Network,
    region: &InputRegion,
    y: usize,
    steps: usize,
    restarts: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let lower = region.lower();
    let upper = region.upper();
    let max_radius = region.radius().iter().cloned().fold(0.0f64, f64::max);
    let step_size = 2.5 * max_radius / steps.max(1) as f64;

    let k_classes = net.num_classes();
    let m = net.num_abstain();
    let component_idx = |mm: usize| if mm == 0 { y - 1 } else { k_classes + mm - 1 };

    let eval = |z: &[f64]| -> (f64, usize) {
        // log Σ_{j regular} e^{z_j}, stabilized
        let zmax = z[..k_classes].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z[..k_classes].iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        let mut best = f64::INFINITY;
        let mut best_m = 0;
        for mm in 0..=m {
            let loss = lse - z[component_idx(mm)];
            if loss < best {
                best = loss;
                best_m = mm;
            }
        }
        (best, best_m)
    };

    let mut best_loss = f64::NEG_INFINITY;
    for restart in 0..restarts.max(1) {
        let mut x = if restart == 0 {
            region.center().to_vec()
        } else {
            uniform_in_region(&mut rng, region)
        };
        for _ in 0..steps.max(1) {
            let z = net.forward(&x)?;
            let (loss, active_m) = eval(&z);
            best_loss = best_loss.max(loss);
            if step_size == 0.0 {
                break;
            }
            // Gradient of the active branch: softmax over regular classes
            // minus the active component's indicator.
            let zmax = z[..k_classes].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z[..k_classes].iter().map(|v| (v - zmax).exp()).sum();
            let mut upstream = vec![0.0; net.output_dim()];
            for j in 0..k_classes {
                upstream[j] = (z[j] - zmax).exp() / denom;
            }
            upstream[component_idx(active_m)] -= 1.0;
            let (_, gx) = net.backward(&x, &upstream)?;
            for (j, xv) in x.iter_mut().enumerate() {
                let s = if gx[j] > 0.0 {
                    1.0
                } else if gx[j] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                // ascend
                *xv = (*xv + step_size * s).clamp(lower[j], upper[j]);
            }
        }
        let z = net.forward(&x)?;
        best_loss = best_loss.max(eval(&z).0);
    }
    Ok(best_loss)
}

/// Laplace(μ, 1) CDF.
fn laplace_cdf(t: f64, mu: f64) -> f64 {
    if t <= mu {
        0.5 * (t - mu).exp()
    } else {
        1.0 - 0.5 * (-(t - mu)).exp()
    }
}

/// Misclassification probability of the one-dimensional detection example
/// with a single threshold: real data is Laplace(0) with prior 1/3, the
/// attack mixture ½·Laplace(±10) with prior 2/3, and `x < t` is read as real.
pub fn laplace_error_single(t: f64) -> f64 {
    (1.0 - laplace_cdf(t, 0.0)) / 3.0
        + (2.0 / 3.0) * 0.5 * (laplace_cdf(t, 10.0) + laplace_cdf(t, -10.0))
}

/// Same detection problem with two thresholds: `t1 < x < t2` is read as real.
pub fn laplace_error_double(t1: f64, t2: f64) -> f64 {
    let (t1, t2) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    let real_out = laplace_cdf(t1, 0.0) + (1.0 - laplace_cdf(t2, 0.0));
    let adv_in = 0.5
        * ((laplace_cdf(t2, 10.0) - laplace_cdf(t1, 10.0))
            + (laplace_cdf(t2, -10.0) - laplace_cdf(t1, -10.0)));
    real_out / 3.0 + (2.0 / 3.0) * adv_in
}

/// The one-threshold error expressed through z = min(t₁, t₂) when both
/// detection boundaries degenerate to the same side.
pub fn laplace_collapsed_objective(z: f64) -> f64 {
    (1.0 / 6.0) * (-z).exp() + 1.0 / 3.0 - (1.0 / 6.0) * (-z - 10.0).exp()
        + (1.0 / 6.0) * (z - 10.0).exp()
}

/// Scan `[lo, hi]` at the given resolution for local minima of the collapsed
/// objective; returns their locations.
pub fn laplace_local_min_scan(lo: f64, hi: f64, resolution: f64) -> Result<Vec<f64>> {
    if !(resolution > 0.0) || hi <= lo {
        return Err(Error::InvalidConfig("bad scan range or resolution".into()));
    }
    let n = ((hi - lo) / resolution).ceil() as usize;
    let h: Vec<f64> = (0..=n)
        .map(|i| laplace_collapsed_objective(lo + (hi - lo) * i as f64 / n as f64))
        .collect();
    let mut minima = Vec::new();
    for i in 1..n {
        if h[i] < h[i - 1] && h[i] < h[i + 1] {
            minima.push(lo + (hi - lo) * i as f64 / n as f64);
        }
    }
    Ok(minima)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_margin_flags_violations() {
        let net = {
            let mut w = Matrix::zeros(3, 3);
            for i in 0..3 {
                w.set(i, i, 1.0);
            }
            Network::new(vec![DenseLayer::new(w, vec![0.0; 3]).unwrap()], 2, 1).unwrap()
        };
        // logits = x; y=1, abstain = coord 3
        let (m, k) = condition_margin(&net, &[0.0, 2.0, 1.0], 1).unwrap();
        assert_eq!(k, 2);
        assert!((m - (1.0 - 2.0)).abs() < 1e-12);
        let (m, _) = condition_margin(&net, &[0.0, 2.0, 5.0], 1).unwrap();
        assert!(m > 0.0); // abstain dominates the attacker class
    }

    #[test]
    fn exact_check_at_zero_radius_is_pointwise() {
        let mut rng = seeded_rng(12);
        let net = random_net(&mut rng, 2, &[4], 2, 1, 1.0);
        let x = vec![0.3, -0.4];
        let region = InputRegion::uniform(x.clone(), 0.0).unwrap();
        let (margin, _) = condition_margin(&net, &x, 1).unwrap();
        assert_eq!(exact_check(&net, &region, 1, 0.01).unwrap(), margin >= 0.0);
    }

    #[test]
    fn exact_check_true_inside_linear_region_with_margin() {
        // Identity single layer: condition holds on the whole box around a
        // confident point.
        let mut w = Matrix::zeros(2, 2);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let net = Network::new(vec![DenseLayer::new(w, vec![0.0, 0.0]).unwrap()], 2, 0).unwrap();
        let region = InputRegion::uniform(vec![1.0, 0.0], 0.2).unwrap();
        assert!(exact_check(&net, &region, 1, 0.05).unwrap());
    }

    #[test]
    fn dimension_guard_enforced() {
        let mut rng = seeded_rng(1);
        let net = random_net(&mut rng, 4, &[4], 2, 0, 1.0);
        let region = InputRegion::uniform(vec![0.0; 4], 0.1).unwrap();
        assert!(matches!(
            exact_check(&net, &region, 1, 0.05),
            Err(Error::DimensionGuard(4, 3))
        ));
    }

    #[test]
    fn pgd_finds_planted_boundary() {
        // Two classes, logits (x, −x): y = 1 correct for x > 0; the ball
        // around x = 0.05 with radius 0.2 crosses the boundary.
        let w = Matrix::from_rows(vec![vec![1.0], vec![-1.0]]).unwrap();
        let net = Network::new(vec![DenseLayer::new(w, vec![0.0, 0.0]).unwrap()], 2, 0).unwrap();
        let region = InputRegion::uniform(vec![0.05], 0.2).unwrap();
        let attack = pgd_attack(&net, &region, 1, 50, 5, 7).unwrap();
        assert!(attack.found);
        let x_adv = attack.x_adv.unwrap();
        assert!(region.contains_point(&x_adv, 1e-12));
        let (margin, k) = condition_margin(&net, &x_adv, 1).unwrap();
        assert!(margin < 0.0);
        assert_eq!(Some(k), attack.violated_target);
    }

    #[test]
    fn pgd_zero_radius_cannot_attack_correct_points() {
        let mut rng = seeded_rng(14);
        let net = random_net(&mut rng, 2, &[4], 2, 1, 1.0);
        for _ in 0..10 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pred = net.predict(&x).unwrap();
            if pred > 2 {
                continue;
            }
            let region = InputRegion::uniform(x, 0.0).unwrap();
            let attack = pgd_attack(&net, &region, pred, 10, 3, 5).unwrap();
            assert!(!attack.found);
        }
    }

    #[test]
    fn attack_success_implies_exact_check_false() {
        let mut rng = seeded_rng(90);
        let mut agreements = 0;
        for _ in 0..40 {
            let net = random_net(&mut rng, 2, &[5], 2, 1, 1.5);
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let region = InputRegion::uniform(x, 0.3).unwrap();
            let attack = pgd_attack(&net, &region, 1, 30, 5, 11).unwrap();
            if attack.found {
                assert!(!exact_check(&net, &region, 1, 0.02).unwrap());
                agreements += 1;
            }
        }
        assert!(agreements > 0, "suite never produced an attackable instance");
    }

    #[test]
    fn laplace_single_threshold_matches_paper_value() {
        let p = laplace_error_single(5.0);
        assert!(p > 0.335 && p < 0.345, "error at t=5 is {p}");
    }

    #[test]
    fn laplace_double_threshold_beats_single() {
        let p2 = laplace_error_double(-5.0, 5.0);
        assert!(p2 < 0.1, "two-abstain error {p2}");
        assert!(p2 < laplace_error_single(5.0));
    }

    #[test]
    fn laplace_limit_with_no_real_region() {
        // As t → −∞ every real point is misclassified and no attack point
        // is, so the error tends to 1/3 (the mass of the first integral).
        let p = laplace_error_single(-1e9);
        assert!((p - 1.0 / 3.0).abs() < 1e-9);
        // Opposite limit: everything classified real, error → 2/3.
        let p = laplace_error_single(1e9);
        assert!((p - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn collapsed_objective_has_local_min_near_five() {
        let minima = laplace_local_min_scan(0.0, 10.0, 1e-3).unwrap();
        assert!(minima.iter().any(|z| (z - 5.0).abs() < 0.5), "{minima:?}");
        let z = minima
            .iter()
            .find(|z| (*z - 5.0).abs() < 0.5)
            .copied()
            .unwrap();
        // Local-minimum definition against probes one unit away.
        let h = laplace_collapsed_objective(z);
        assert!(h < laplace_collapsed_objective(z - 1.0));
        assert!(h < laplace_collapsed_objective(z + 1.0));
        // Derivative changes sign across the bracket.
        let d = |z: f64| {
            (laplace_collapsed_objective(z + 1e-6) - laplace_collapsed_objective(z - 1e-6)) / 2e-6
        };
        assert!(d(z - 0.1) < 0.0);
        assert!(d(z + 0.1) > 0.0);
    }
}
