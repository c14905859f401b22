//! Scratch calibration runs for the acceptance-suite parameters.

use abstain_core::bounds::{propagate, InputRegion};
use abstain_core::oracle::{random_net, seeded_rng};
use abstain_core::simplex::{minimize_over_simplex, SimplexPoint};
use abstain_core::verify_ibp::{SimplexObjective, TargetObjective};
use rand::Rng;

// Grid oracle over the 1-simplex at the given resolution.
fn grid_min_m1(objective: &SimplexObjective, res: f64) -> f64 {
    let n = (1.0 / res) as usize;
    let mut best = f64::INFINITY;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let eta = SimplexPoint::new(vec![t, 1.0 - t]).unwrap();
        best = best.min(objective.eval(&eta).unwrap().0);
    }
    best
}

// Outer grid over eta0, inner ternary search along the remaining edge
// (each slice of a convex function is convex).
fn grid_min_m2(objective: &SimplexObjective, res: f64) -> f64 {
    let n = (1.0 / res) as usize;
    let mut best = f64::INFINITY;
    let eval = |a: f64, b: f64| {
        let eta = SimplexPoint::new(vec![a, b, (1.0 - a - b).max(0.0)]).unwrap();
        objective.eval(&eta).unwrap().0
    };
    for i in 0..=n {
        let a = i as f64 / n as f64;
        let (mut lo, mut hi) = (0.0f64, 1.0 - a);
        for _ in 0..60 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if eval(a, m1) <= eval(a, m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        best = best.min(eval(a, 0.5 * (lo + hi)));
    }
    best
}

fn criterion3_trial(scale: f64, step: f64) {
    let mut rng = seeded_rng(0xC3);
    let mut worst: f64 = 0.0;
    let mut fails = 0;
    let trials = 40;
    for t in 0..trials {
        let m = 1 + (t % 2); // M in {1, 2}
        let net = random_net(&mut rng, 3, &[5], 3, m, scale);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let region = InputRegion::uniform(x, rng.gen_range(0.1..0.4)).unwrap();
        let bounds = propagate(&net, &region).unwrap();
        let (lower, upper) = bounds.penultimate();
        let layer = net.layers().last().unwrap();
        let objective = SimplexObjective {
            lower,
            upper,
            weight: layer.weight(),
            bias: layer.bias(),
            target: TargetObjective::new(1, 2, 3, m).unwrap(),
        };
        let oracle = if m == 1 {
            grid_min_m1(&objective, 1e-5)
        } else {
            grid_min_m2(&objective, 1e-3) // coarse outer for speed in calibration
        };
        let eta0 = SimplexPoint::uniform(m + 1);
        let (_, best) =
            minimize_over_simplex(|e| objective.eval(e), &eta0, step, 500).unwrap();
        let gap = best - oracle;
        worst = worst.max(gap);
        if gap > 1e-3 {
            fails += 1;
        }
    }
    println!("criterion3 scale={scale} nu={step}: worst gap {worst:.6}, fails {fails}/{trials}");
}

fn main() {
    for step in [1e-3, 0.01, 0.05, 0.1, 0.3, 1.0] {
        for scale in [0.5, 1.0, 2.0, 5.0, 20.0] {
            criterion3_trial(scale, step);
        }
        println!();
    }
}
