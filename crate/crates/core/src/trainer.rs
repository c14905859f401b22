//! Training with certified-robustness surrogates: the interval worst-case
//! cross-entropy, the abstain-loss upper bound evaluated at per-sample/target
//! mixing weights, and the anti-degeneracy penalty that keeps every abstain
//! class in use.
//!
//! One step computes, at the scheduled radius ε_t and mixing weight κ_t,
//!
//! ```text
//!   total = κ·L_nat + (1−κ)·L_rob + [after warmup] λ₁·(L_abstain + penalty) + λ₂·L_nat
//! ```
//!
//! refreshes the mixing weights η by a few exponentiated-gradient sweeps of
//! the penalty-regularized objective (warm-started across steps), then takes
//! an optimizer step on the weight gradients with η held fixed.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bounds::{propagate, BoundsGrad, InputRegion, LayerBounds};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Gradient, Network};
use crate::oracle::seeded_rng;
use crate::simplex::{eg_step, SimplexPoint};
use crate::verify_ibp::{SimplexObjective, TargetObjective};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Hyper-parameters for [`train`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Weight of the abstain surrogate (and its penalty).
    pub lambda1: f64,
    /// Weight of the extra natural-loss term.
    pub lambda2: f64,
    /// Degeneracy penalty weight; 0 disables the regularizer.
    pub mu: f64,
    /// Penalty threshold scale in (0, 1]; the recommended value is 1/(K+M).
    pub gamma: f64,
    /// Final perturbation radius.
    pub eps_train: f64,
    pub warmup_steps: usize,
    pub rampup_steps: usize,
    pub total_steps: usize,
    /// κ ramps linearly from 1 down to this over the ramp window.
    pub kappa_end: f64,
    pub learning_rate: f64,
    /// Steps at which the learning rate is divided by 10.
    pub lr_decay_steps: Vec<usize>,
    /// Exponentiated-gradient step for the per-batch η refresh.
    pub nu: f64,
    /// Exponentiated-gradient sweeps per batch.
    pub eta_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            mu: 0.0,
            gamma: 1.0,
            eps_train: 0.1,
            warmup_steps: 100,
            rampup_steps: 200,
            total_steps: 600,
            kappa_end: 0.5,
            learning_rate: 0.05,
            lr_decay_steps: Vec::new(),
            nu: 1e-3,
            eta_iters: 25,
            batch_size: 50,
            seed: 0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.mu < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig("gamma must lie in (0, 1]".into()));
        }
        if self.eps_train < 0.0 {
            return Err(Error::InvalidConfig("eps_train must be nonnegative".into()));
        }
        if self.warmup_steps + self.rampup_steps > self.total_steps {
            return Err(Error::InvalidConfig(
                "schedule must satisfy warmup + rampup <= total".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.kappa_end >= 0.0 && self.kappa_end <= 1.0) {
            return Err(Error::InvalidConfig("kappa_end must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The threshold scale the regularizer is calibrated for.
    pub fn recommended_gamma(num_classes: usize, num_abstain: usize) -> f64 {
        1.0 / (num_classes + num_abstain) as f64
    }
}

/// Mixing weights η for every (sample, target) pair of a batch, in target
/// order k = 1..K skipping y.
#[derive(Debug, Clone)]
pub struct BatchEtaState {
    pub eta: Vec<Vec<SimplexPoint>>,
}

impl BatchEtaState {
    pub fn fresh(labels: &[usize], num_classes: usize, num_abstain: usize) -> Self {
        let eta = labels
            .iter()
            .map(|_| {
                (0..num_classes.saturating_sub(1))
                    .map(|_| SimplexPoint::near_vertex(num_abstain + 1, 1e-6))
                    .collect()
            })
            .collect();
        Self { eta }
    }

    /// Average η over all samples and targets (the quantity the penalty sees).
    pub fn average(&self) -> Option<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for per_sample in &self.eta {
            for eta in per_sample {
                let slot = acc.get_or_insert_with(|| vec![0.0; eta.dim()]);
                for (a, v) in slot.iter_mut().zip(eta.as_slice()) {
                    *a += v;
                }
                count += 1;
            }
        }
        acc.map(|mut v| {
            for x in v.iter_mut() {
                *x /= count as f64;
            }
            v
        })
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn xent_from_logits(z: &[f64], y: usize) -> f64 {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
    lse - z[y - 1]
}

/// Mean cross-entropy of the clean logits over all K + M classes.
pub fn natural_loss(net: &Network, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        total += xent_from_logits(&net.forward(x)?, y);
    }
    Ok(total / inputs.len() as f64)
}

/// Worst-case logit vector of the interval relaxation: upper bounds
/// everywhere except the true class, which takes its lower bound.
fn worst_case_logits(bounds: &LayerBounds, y: usize) -> Vec<f64> {
    let (lo, hi) = bounds.output();
    let mut w = hi.to_vec();
    w[y - 1] = lo[y - 1];
    w
}

/// Mean cross-entropy of the interval worst-case logits at radius `eps`.
pub fn robust_loss_ibp(net: &Network, inputs: &[Vec<f64>], labels: &[usize], eps: f64) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let bounds = propagate(net, &InputRegion::uniform(x.clone(), eps)?)?;
        total += xent_from_logits(&worst_case_logits(&bounds, y), y);
    }
    Ok(total / inputs.len() as f64)
}

/// Margin vector for the abstain surrogate of one sample: entry k ≠ y is the
/// inner-max value at that target's current η, entry y is 0, and abstain
/// entries are excluded by construction.
fn margin_vector(
    net: &Network,
    bounds: &LayerBounds,
    y: usize,
    etas: &[SimplexPoint],
) -> Result<Vec<f64>> {
    let (lower, upper) = bounds.penultimate();
    let layer = net.layers().last().unwrap();
    let mut j = vec![0.0; net.num_classes()];
    let mut slot = 0;
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
        j[k - 1] = objective.eval(&etas[slot])?.0;
        slot += 1;
    }
    Ok(j)
}

/// Upper bound on the robust-abstain loss (mean over the batch): softmax
/// cross-entropy of the margin vector with the denominator restricted to the
/// regular classes.
pub fn abstain_loss_upper(
    net: &Network,
    inputs: &[Vec<f64>],
    labels: &[usize],
    eps: f64,
    eta_state: &BatchEtaState,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
        let bounds = propagate(net, &InputRegion::uniform(x.clone(), eps)?)?;
        let j = margin_vector(net, &bounds, y, &eta_state.eta[i])?;
        total += xent_from_logits(&j, y);
    }
    Ok(total / inputs.len() as f64)
}

/// Hinge-squared penalty pushing each component of the batch-average η above
/// `gamma/(M+1)`:  μ·‖[γ·1/(M+1) − η̄]₊‖².
pub fn degeneracy_penalty(
    eta_state: &BatchEtaState,
    mu: f64,
    gamma: f64,
    n: usize,
    num_classes: usize,
    num_abstain: usize,
) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let Some(avg) = eta_state.average() else {
        return 0.0;
    };
    debug_assert_eq!(
        eta_state.eta.iter().map(Vec::len).sum::<usize>(),
        n * (num_classes - 1)
    );
    let threshold = gamma / (num_abstain + 1) as f64;
    mu * avg
        .iter()
        .map(|a| (threshold - a).max(0.0).powi(2))
        .sum::<f64>()
}

/// Fixed weights for one evaluation of the total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub kappa: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub natural: f64,
    pub robust: f64,
    pub abstain: f64,
    pub penalty: f64,
}

/// Total loss and its weight gradient at fixed η, schedule values, and
/// weights. η is treated as a constant of the step (alternating scheme), so
/// the penalty contributes no weight gradient.
pub fn total_loss_and_grad(
    net: &Network,
    inputs: &[Vec<f64>],
    labels: &[usize],
    eps: f64,
    eta_state: &BatchEtaState,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradient)> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = inputs.len();
    let inv_n = 1.0 / n as f64;
    let k_classes = net.num_classes();
    let use_abstain = weights.lambda1 > 0.0;

    let mut grad = Gradient::zeros_like(net);
    let mut nat_sum = 0.0;
    let mut rob_sum = 0.0;
    let mut abs_sum = 0.0;

    let nat_weight = weights.kappa + weights.lambda2;
    let rob_weight = 1.0 - weights.kappa;

    for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
        // Natural term.
        let z = net.forward(x)?;
        nat_sum += xent_from_logits(&z, y);
        if nat_weight != 0.0 {
            let mut upstream = softmax(&z);
            upstream[y - 1] -= 1.0;
            for u in upstream.iter_mut() {
                *u *= nat_weight * inv_n;
            }
            let (g, _) = net.backward(x, &upstream)?;
            grad.add_scaled(&g, 1.0);
        }

        // Interval terms share one bound computation and one reverse sweep.
        let bounds = propagate(net, &InputRegion::uniform(x.clone(), eps)?)?;
        let mut seed = BoundsGrad::zeros_like(&bounds);
        let last_idx = bounds.num_layers() - 1;

        let w_logits = worst_case_logits(&bounds, y);
        rob_sum += xent_from_logits(&w_logits, y);
        if rob_weight != 0.0 {
            let p = softmax(&w_logits);
            for (j, pj) in p.iter().enumerate() {
                let g = if j == y - 1 { pj - 1.0 } else { *pj } * rob_weight * inv_n;
                if j == y - 1 {
                    seed.lower[last_idx][j] += g;
                } else {
                    seed.upper[last_idx][j] += g;
                }
            }
        }

        if use_abstain {
            let etas = &eta_state.eta[i];
            let j_vec = margin_vector(net, &bounds, y, etas)?;
            abs_sum += xent_from_logits(&j_vec, y);

            let p = softmax(&j_vec);
            let (lower, upper) = bounds.penultimate();
            let layer = net.layers().last().unwrap();
            let last_layer_idx = net.num_layers() - 1;
            let mut slot = 0;
            for k in 1..=k_classes {
                if k == y {
                    continue;
                }
                let coeff = p[k - 1] * weights.lambda1 * inv_n;
                let target = TargetObjective::new(y, k, k_classes, net.num_abstain())?;
                let c = target.mixed_row(&etas[slot]);
                slot += 1;
                if coeff == 0.0 {
                    continue;
                }
                // J = −cᵀ(W z* + b) with z* the corner picked by v = Wᵀc.
                let v = layer.weight().matvec_t(&c);
                let z_star: Vec<f64> = v
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(vj, (l, u))| if *vj >= 0.0 { *l } else { *u })
                    .collect();
                for (r, cr) in c.iter().enumerate() {
                    if *cr != 0.0 {
                        grad.biases[last_layer_idx][r] -= coeff * cr;
                        let row = grad.weights[last_layer_idx].row_mut(r);
                        for (g, zv) in row.iter_mut().zip(&z_star) {
                            *g -= coeff * cr * zv;
                        }
                    }
                }
                if bounds.num_layers() >= 2 {
                    let pen_idx = bounds.num_layers() - 2;
                    for (j, vj) in v.iter().enumerate() {
                        let g = -coeff * vj;
                        if *vj >= 0.0 {
                            seed.lower[pen_idx][j] += g;
                        } else {
                            seed.upper[pen_idx][j] += g;
                        }
                    }
                }
            }
        }

        crate::bounds::backward_bounds(net, &bounds, &seed, &mut grad);
    }

    let natural = nat_sum * inv_n;
    let robust = rob_sum * inv_n;
    let abstain = if use_abstain { abs_sum * inv_n } else { 0.0 };
    let penalty = degeneracy_penalty(
        eta_state,
        weights.mu,
        weights.gamma,
        n,
        k_classes,
        net.num_abstain(),
    );
    let total = weights.kappa * natural
        + rob_weight * robust
        + weights.lambda1 * (abstain + penalty)
        + weights.lambda2 * natural;
    let breakdown = LossBreakdown {
        total,
        natural,
        robust,
        abstain,
        penalty,
    };
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {total}")));
    }
    Ok((breakdown, grad))
}

/// Scheduled (ε, κ, learning-rate) at a step: ε ramps 0 → eps_train and κ
/// ramps 1 → kappa_end linearly over the ramp window after warmup; the
/// learning rate decays by 10× at each configured step.
pub fn schedule(step: usize, config: &TrainConfig) -> (f64, f64, f64) {
    let ramp = if step < config.warmup_steps {
        0.0
    } else if step >= config.warmup_steps + config.rampup_steps {
        1.0
    } else {
        (step - config.warmup_steps) as f64 / config.rampup_steps as f64
    };
    let eps = config.eps_train * ramp;
    let kappa = 1.0 + (config.kappa_end - 1.0) * ramp;
    let mut lr = config.learning_rate;
    for &at in &config.lr_decay_steps {
        if step >= at {
            lr *= 0.1;
        }
    }
    (eps, kappa, lr)
}

/// One metrics-log row per training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub eps: f64,
    pub kappa: f64,
    pub loss_total: f64,
    pub loss_nat: f64,
    pub loss_rob: f64,
    pub loss_abstain: f64,
    pub penalty: f64,
    pub train_acc: f64,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out =
        String::from("step,eps,kappa,loss_total,loss_nat,loss_rob,loss_abstain,penalty,train_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.eps,
            r.kappa,
            r.loss_total,
            r.loss_nat,
            r.loss_rob,
            r.loss_abstain,
            r.penalty,
            r.train_acc
        ));
    }
    out
}

/// Fraction of samples predicted exactly as their label (abstaining on a
/// clean sample counts as an error here).
pub fn standard_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        if net.predict(x)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

struct AdamState {
    m: Gradient,
    v: Gradient,
    t: usize,
}

impl AdamState {
    fn new(net: &Network) -> Self {
        Self {
            m: Gradient::zeros_like(net),
            v: Gradient::zeros_like(net),
            t: 0,
        }
    }

    fn apply(&mut self, net: &mut Network, grad: &Gradient, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (li, layer) in net.layers_mut().iter_mut().enumerate() {
            let (gw, gb) = (&grad.weights[li], &grad.biases[li]);
            let w = layer.weight_mut();
            for r in 0..w.rows() {
                for c in 0..w.cols() {
                    let g = gw.get(r, c);
                    let m = B1 * self.m.weights[li].get(r, c) + (1.0 - B1) * g;
                    let v = B2 * self.v.weights[li].get(r, c) + (1.0 - B2) * g * g;
                    self.m.weights[li].set(r, c, m);
                    self.v.weights[li].set(r, c, v);
                    let step = lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
                    w.set(r, c, w.get(r, c) - step);
                }
            }
            let b = layer.bias_mut();
            for r in 0..b.len() {
                let g = gb[r];
                let m = B1 * self.m.biases[li][r] + (1.0 - B1) * g;
                let v = B2 * self.v.biases[li][r] + (1.0 - B2) * g * g;
                self.m.biases[li][r] = m;
                self.v.biases[li][r] = v;
                b[r] -= lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
            }
        }
    }
}

fn sgd_apply(net: &mut Network, grad: &Gradient, lr: f64) {
    for (li, layer) in net.layers_mut().iter_mut().enumerate() {
        let w = layer.weight_mut();
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                w.set(r, c, w.get(r, c) - lr * grad.weights[li].get(r, c));
            }
        }
        for (bv, g) in layer.bias_mut().iter_mut().zip(&grad.biases[li]) {
            *bv -= lr * g;
        }
    }
}

/// Refresh the batch η by `iters` synchronous exponentiated-gradient sweeps
/// of the penalty-regularized objective, warm-starting from the given state.
fn refresh_eta(
    net: &Network,
    inputs: &[Vec<f64>],
    labels: &[usize],
    eps: f64,
    state: &mut BatchEtaState,
    weights: &LossWeights,
    nu: f64,
    iters: usize,
) -> Result<()> {
    if net.num_abstain() == 0 {
        return Ok(());
    }
    let n = inputs.len();
    let k_classes = net.num_classes();
    let threshold = weights.gamma / (net.num_abstain() + 1) as f64;
    let all_bounds: Vec<LayerBounds> = inputs
        .iter()
        .map(|x| propagate(net, &InputRegion::uniform(x.clone(), eps)?))
        .collect::<Result<Vec<_>>>()?;
    let layer = net.layers().last().unwrap();

    for _ in 0..iters {
        let penalty_grad: Option<Vec<f64>> = if weights.mu > 0.0 {
            state.average().map(|avg| {
                avg.iter()
                    .map(|a| {
                        -2.0 * weights.mu * (threshold - a).max(0.0)
                            / (n * (k_classes - 1)) as f64
                    })
                    .collect()
            })
        } else {
            None
        };
        for (i, &y) in labels.iter().enumerate() {
            let (lower, upper) = all_bounds[i].penultimate();
            let mut slot = 0;
            for k in 1..=k_classes {
                if k == y {
                    continue;
                }
                let objective = SimplexObjective {
                    lower,
                    upper,
                    weight: layer.weight(),
                    bias: layer.bias(),
                    target: TargetObjective::new(y, k, k_classes, net.num_abstain())?,
                };
                let (_, mut grad) = objective.eval(&state.eta[i][slot])?;
                if let Some(pg) = &penalty_grad {
                    for (g, p) in grad.iter_mut().zip(pg) {
                        *g += p;
                    }
                }
                state.eta[i][slot] = eg_step(&state.eta[i][slot], &grad, nu)?;
                slot += 1;
            }
        }
    }
    Ok(())
}

/// Train a network on the dataset per the scheduled objective; returns the
/// trained network and one metrics row per step. Deterministic for a fixed
/// seed and config (single-threaded).
pub fn train(
    mut net: Network,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, Vec<MetricsRow>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if data.num_classes != net.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, network {}",
            data.num_classes,
            net.num_classes()
        )));
    }

    let mut rng = seeded_rng(config.seed);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    // Per-dataset-sample η, warm-started across steps and epochs.
    let mut global_eta = BatchEtaState::fresh(&data.labels, net.num_classes(), net.num_abstain());

    let mut adam = AdamState::new(&net);
    let mut metrics = Vec::with_capacity(config.total_steps);

    for step in 0..config.total_steps {
        let (eps, kappa, lr) = schedule(step, config);
        let gate = step >= config.warmup_steps;
        let weights = LossWeights {
            kappa,
            lambda1: if gate { config.lambda1 } else { 0.0 },
            lambda2: if gate { config.lambda2 } else { 0.0 },
            mu: if gate { config.mu } else { 0.0 },
            gamma: config.gamma,
        };

        let mut batch_idx = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let inputs: Vec<Vec<f64>> = batch_idx.iter().map(|&i| data.inputs[i].clone()).collect();
        let labels: Vec<usize> = batch_idx.iter().map(|&i| data.labels[i]).collect();

        let mut batch_eta = BatchEtaState {
            eta: batch_idx.iter().map(|&i| global_eta.eta[i].clone()).collect(),
        };
        if gate && weights.lambda1 > 0.0 && net.num_abstain() > 0 {
            refresh_eta(
                &net,
                &inputs,
                &labels,
                eps,
                &mut batch_eta,
                &weights,
                config.nu,
                config.eta_iters,
            )?;
            for (local, &global) in batch_idx.iter().enumerate() {
                global_eta.eta[global] = batch_eta.eta[local].clone();
            }
        }

        let (loss, grad) =
            total_loss_and_grad(&net, &inputs, &labels, eps, &batch_eta, &weights)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        match config.optimizer {
            Optimizer::Sgd => sgd_apply(&mut net, &grad, lr),
            Optimizer::Adam => adam.apply(&mut net, &grad, lr),
        }

        let mut hits = 0usize;
        for (x, &y) in inputs.iter().zip(&labels) {
            if net.predict(x)? == y {
                hits += 1;
            }
        }
        metrics.push(MetricsRow {
            step,
            eps,
            kappa,
            loss_total: loss.total,
            loss_nat: loss.natural,
            loss_rob: loss.robust,
            loss_abstain: loss.abstain,
            penalty: loss.penalty,
            train_acc: hits as f64 / inputs.len() as f64,
        });
    }

    Ok((net, metrics))
}

/// Random initial network for training: uniform Xavier-style weights from
/// the given seed.
pub fn init_network(
    input_dim: usize,
    hidden: &[usize],
    num_classes: usize,
    num_abstain: usize,
    seed: u64,
) -> Network {
    let mut rng = seeded_rng(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(num_classes + num_abstain);
    let layers = dims
        .windows(2)
        .map(|d| {
            let bound = (6.0 / (d[0] + d[1]) as f64).sqrt();
            let mut w = Matrix::zeros(d[1], d[0]);
            for r in 0..d[1] {
                for c in 0..d[0] {
                    w.set(r, c, rng.gen_range(-bound..bound));
                }
            }
            crate::nn::DenseLayer::new(w, vec![0.0; d[1]]).expect("init layer")
        })
        .collect();
    Network::new(layers, num_classes, num_abstain).expect("init network")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{random_net, seeded_rng};

    fn small_batch(rng: &mut rand_chacha::ChaCha8Rng, n: usize, dim: usize, k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        use rand::Rng;
        let inputs = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.gen_range(1..=k)).collect();
        (inputs, labels)
    }

    #[test]
    fn natural_loss_uniform_logits() {
        // All-zero weights → uniform softmax over K + M = 4 → ln 4 per sample.
        let net = Network::new(
            vec![crate::nn::DenseLayer::new(Matrix::zeros(4, 2), vec![0.0; 4]).unwrap()],
            2,
            2,
        )
        .unwrap();
        let loss = natural_loss(&net, &[vec![0.3, -0.8]], &[1]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn natural_loss_vanishes_with_huge_margin() {
        let mut w = Matrix::zeros(2, 1);
        w.set(0, 0, 1.0);
        let net = Network::new(
            vec![crate::nn::DenseLayer::new(w, vec![1e3, -1e3]).unwrap()],
            2,
            0,
        )
        .unwrap();
        let loss = natural_loss(&net, &[vec![0.0]], &[1]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn natural_loss_matches_scalar_reimplementation() {
        let mut rng = seeded_rng(2);
        let net = random_net(&mut rng, 3, &[5], 3, 1, 1.0);
        let (inputs, labels) = small_batch(&mut rng, 8, 3, 3);
        let loss = natural_loss(&net, &inputs, &labels).unwrap();
        let mut manual = 0.0;
        for (x, &y) in inputs.iter().zip(&labels) {
            let z = net.forward(x).unwrap();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            manual += -(z[y - 1].exp() / denom).ln();
        }
        manual /= inputs.len() as f64;
        assert!((loss - manual).abs() < 1e-12);
    }

    #[test]
    fn robust_loss_collapses_at_zero_radius() {
        let mut rng = seeded_rng(3);
        let net = random_net(&mut rng, 3, &[4], 2, 1, 1.0);
        let (inputs, labels) = small_batch(&mut rng, 6, 3, 2);
        let nat = natural_loss(&net, &inputs, &labels).unwrap();
        let rob = robust_loss_ibp(&net, &inputs, &labels, 0.0).unwrap();
        assert!((nat - rob).abs() < 1e-12);
    }

    #[test]
    fn robust_loss_monotone_in_radius() {
        let mut rng = seeded_rng(5);
        let net = random_net(&mut rng, 2, &[4], 2, 1, 1.0);
        let (inputs, labels) = small_batch(&mut rng, 6, 2, 2);
        let mut prev = robust_loss_ibp(&net, &inputs, &labels, 0.0).unwrap();
        for eps in [0.05, 0.1, 0.2, 0.4] {
            let cur = robust_loss_ibp(&net, &inputs, &labels, eps).unwrap();
            assert!(cur >= prev - 1e-12, "loss shrank: {prev} -> {cur} at {eps}");
            prev = cur;
        }
    }

    #[test]
    fn robust_loss_single_linear_layer_closed_form() {
        // One affine layer: worst logits are analytic:
        // upper_j = w_j·x + b_j + ε‖w_j‖₁, lower_y likewise with −.
        let w = Matrix::from_rows(vec![vec![1.0, -2.0], vec![0.5, 0.5]]).unwrap();
        let net = Network::new(
            vec![crate::nn::DenseLayer::new(w, vec![0.1, -0.1]).unwrap()],
            2,
            0,
        )
        .unwrap();
        let x = vec![0.4, -0.3];
        let eps = 0.2;
        let loss = robust_loss_ibp(&net, &[x.clone()], &[1], eps).unwrap();
        let z1 = 1.0 * x[0] - 2.0 * x[1] + 0.1;
        let z2 = 0.5 * x[0] + 0.5 * x[1] - 0.1;
        let worst = [z1 - eps * 3.0, z2 + eps * 1.0];
        let manual = {
            let denom = worst.iter().map(|v| v.exp()).sum::<f64>();
            -(worst[0].exp() / denom).ln()
        };
        assert!((loss - manual).abs() < 1e-12);
    }

    #[test]
    fn abstain_loss_m0_is_plain_xent_of_margin_vector() {
        let mut rng = seeded_rng(6);
        let net = random_net(&mut rng, 2, &[4], 3, 0, 1.0);
        let (inputs, labels) = small_batch(&mut rng, 5, 2, 3);
        let state = BatchEtaState::fresh(&labels, 3, 0);
        let loss = abstain_loss_upper(&net, &inputs, &labels, 0.1, &state).unwrap();
        let mut manual = 0.0;
        for (i, (x, &y)) in inputs.iter().zip(&labels).enumerate() {
            let bounds = propagate(&net, &InputRegion::uniform(x.clone(), 0.1).unwrap()).unwrap();
            let j = margin_vector(&net, &bounds, y, &state.eta[i]).unwrap();
            manual += xent_from_logits(&j, y);
        }
        manual /= inputs.len() as f64;
        assert!((loss - manual).abs() < 1e-12);
    }

    #[test]
    fn abstain_loss_near_zero_for_confident_sample_at_zero_radius() {
        // A huge-margin correct sample at ε = 0: every target margin is very
        // negative, so the surrogate loss is ~0.
        let mut w = Matrix::zeros(3, 2);
        w.set(0, 0, 100.0);
        w.set(1, 0, -100.0);
        let net = Network::new(
            vec![crate::nn::DenseLayer::new(w, vec![0.0; 3]).unwrap()],
            2,
            1,
        )
        .unwrap();
        let state = BatchEtaState::fresh(&[1], 2, 1);
        let loss = abstain_loss_upper(&net, &[vec![1.0, 0.0]], &[1], 0.0, &state).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn penalty_zero_when_average_above_threshold() {
        let labels = vec![1, 2];
        let mut state = BatchEtaState::fresh(&labels, 3, 2);
        for per_sample in state.eta.iter_mut() {
            for eta in per_sample.iter_mut() {
                *eta = SimplexPoint::uniform(3);
            }
        }
        // uniform average = 1/3 ≥ γ/(M+1) for γ = 1
        let p = degeneracy_penalty(&state, 1.0, 1.0, 2, 3, 2);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn penalty_single_idle_coordinate() {
        // γ = 1, μ = 1, one abstain coordinate identically 0, the others
        // uniform: penalty = (1/(M+1))².
        let m = 2usize;
        let labels = vec![1];
        let mut state = BatchEtaState::fresh(&labels, 2, m);
        // M+1 = 3 coordinates; put mass only on coordinates 0 and 1.
        state.eta[0][0] = SimplexPoint::new(vec![0.5, 0.5, 0.0]).unwrap();
        let p = degeneracy_penalty(&state, 1.0, 1.0, 1, 2, m);
        let expect = (1.0 / (m + 1) as f64).powi(2);
        assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
    }

    #[test]
    fn penalty_matches_direct_formula_on_random_state() {
        use rand::Rng;
        let mut rng = seeded_rng(8);
        let labels = vec![1, 2, 1];
        let (k, m) = (3usize, 2usize);
        let mut state = BatchEtaState::fresh(&labels, k, m);
        for per_sample in state.eta.iter_mut() {
            for eta in per_sample.iter_mut() {
                let raw: Vec<f64> = (0..=m).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                *eta = SimplexPoint::new(raw.iter().map(|v| v / s).collect()).unwrap();
            }
        }
        let (mu, gamma) = (0.7, 0.4);
        let p = degeneracy_penalty(&state, mu, gamma, 3, k, m);
        // independent re-evaluation
        let mut avg = vec![0.0; m + 1];
        let mut count = 0;
        for per_sample in &state.eta {
            for eta in per_sample {
                for (a, v) in avg.iter_mut().zip(eta.as_slice()) {
                    *a += v;
                }
                count += 1;
            }
        }
        for a in avg.iter_mut() {
            *a /= count as f64;
        }
        let th = gamma / (m + 1) as f64;
        let manual: f64 = mu * avg.iter().map(|a| (th - a).max(0.0).powi(2)).sum::<f64>();
        assert!((p - manual).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let config = TrainConfig {
            warmup_steps: 100,
            rampup_steps: 200,
            total_steps: 400,
            eps_train: 0.3,
            kappa_end: 0.5,
            learning_rate: 0.1,
            lr_decay_steps: vec![350],
            ..TrainConfig::default()
        };
        let (eps, kappa, lr) = schedule(0, &config);
        assert_eq!((eps, kappa, lr), (0.0, 1.0, 0.1));
        let (eps, kappa, _) = schedule(200, &config); // midpoint of ramp
        assert!((eps - 0.15).abs() < 1e-12);
        assert!((kappa - 0.75).abs() < 1e-12);
        let (eps, kappa, lr) = schedule(400, &config);
        assert!((eps - 0.3).abs() < 1e-12);
        assert!((kappa - 0.5).abs() < 1e-12);
        assert!((lr - 0.01).abs() < 1e-12);
    }

    #[test]
    fn loss_decomposition_identities() {
        let mut rng = seeded_rng(9);
        let net = random_net(&mut rng, 2, &[4], 2, 1, 1.0);
        let (inputs, labels) = small_batch(&mut rng, 6, 2, 2);
        let state = BatchEtaState::fresh(&labels, 2, 1);

        // κ = 0, λ₁ = λ₂ = 0 → total equals the robust loss exactly.
        let w = LossWeights {
            kappa: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            mu: 0.0,
            gamma: 1.0,
        };
        let (loss, _) = total_loss_and_grad(&net, &inputs, &labels, 0.15, &state, &w).unwrap();
        let rob = robust_loss_ibp(&net, &inputs, &labels, 0.15).unwrap();
        assert!((loss.total - rob).abs() < 1e-12);

        // ε = 0, κ = 0, λ₁ = 0 → total = (1 + λ₂)·natural.
        let w = LossWeights {
            kappa: 0.0,
            lambda1: 0.0,
            lambda2: 0.7,
            mu: 0.0,
            gamma: 1.0,
        };
        let (loss, _) = total_loss_and_grad(&net, &inputs, &labels, 0.0, &state, &w).unwrap();
        let nat = natural_loss(&net, &inputs, &labels).unwrap();
        assert!((loss.total - 1.7 * nat).abs() < 1e-12);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(12);
        let net = random_net(&mut rng, 2, &[4], 2, 2, 1.0);
        let (inputs, labels) = small_batch(&mut rng, 4, 2, 2);
        let mut state = BatchEtaState::fresh(&labels, 2, 2);
        // interior η so the abstain rows participate
        for per_sample in state.eta.iter_mut() {
            for eta in per_sample.iter_mut() {
                *eta = SimplexPoint::new(vec![0.6, 0.25, 0.15]).unwrap();
            }
        }
        let weights = LossWeights {
            kappa: 0.4,
            lambda1: 0.8,
            lambda2: 0.3,
            mu: 0.5,
            gamma: 0.5,
        };
        let eps = 0.12;
        let (_, grad) = total_loss_and_grad(&net, &inputs, &labels, eps, &state, &weights).unwrap();

        let h = 1e-6;
        let mut checked = 0;
        for li in 0..net.num_layers() {
            for r in 0..net.layers()[li].out_dim() {
                for c in 0..net.layers()[li].in_dim() {
                    let mut plus = net.clone();
                    let v = plus.layers()[li].weight().get(r, c);
                    plus.layers_mut()[li].weight_mut().set(r, c, v + h);
                    let (lp, _) =
                        total_loss_and_grad(&plus, &inputs, &labels, eps, &state, &weights).unwrap();
                    let mut minus = net.clone();
                    minus.layers_mut()[li].weight_mut().set(r, c, v - h);
                    let (lm, _) =
                        total_loss_and_grad(&minus, &inputs, &labels, eps, &state, &weights)
                            .unwrap();
                    let fd = (lp.total - lm.total) / (2.0 * h);
                    let analytic = grad.weights[li].get(r, c);
                    let denom = analytic.abs().max(fd.abs()).max(1e-3);
                    assert!(
                        ((fd - analytic) / denom).abs() < 1e-3,
                        "layer {li} w[{r}][{c}]: fd {fd} vs {analytic}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn plain_xent_training_reduces_loss() {
        let data = crate::data::toy_dataset(120, 4).unwrap();
        let net = init_network(2, &[8], 4, 0, 11);
        let config = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            eps_train: 0.0,
            warmup_steps: 0,
            rampup_steps: 0,
            total_steps: 200,
            learning_rate: 0.1,
            batch_size: 40,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, metrics) = train(net, &data, &config).unwrap();
        let first = metrics.first().unwrap().loss_total;
        let last = metrics.last().unwrap().loss_total;
        assert!(
            last < first * 0.5,
            "loss did not decrease: {first} -> {last}"
        );
        assert!(metrics.last().unwrap().train_acc > 0.9);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = crate::data::toy_dataset(80, 4).unwrap();
        let config = TrainConfig {
            total_steps: 60,
            warmup_steps: 10,
            rampup_steps: 20,
            batch_size: 20,
            mu: 0.1,
            gamma: 0.25,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let net = init_network(2, &[6], 4, 2, 3);
            train(net, &data, &config).unwrap()
        };
        let (na, ma) = run();
        let (nb, mb) = run();
        assert_eq!(ma, mb);
        assert_eq!(na, nb);
        assert_eq!(metrics_to_csv(&ma), metrics_to_csv(&mb));
    }
}
