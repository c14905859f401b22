//! Scratch calibration for the toy-task acceptance experiments.

use abstain_core::data::toy_dataset;
use abstain_core::oracle::abstain_utilization;
use abstain_core::report::{summarize, verify_dataset, Method, VerifySettings};
use abstain_core::trainer::{init_network, train, standard_accuracy, Optimizer, TrainConfig};

fn base_config(seed: u64, mu: f64, gamma: f64) -> TrainConfig {
    TrainConfig {
        lambda1: 1.0,
        lambda2: 0.5,
        mu,
        gamma,
        eps_train: 0.1,
        warmup_steps: 100,
        rampup_steps: 200,
        total_steps: 600,
        kappa_end: 0.5,
        learning_rate: 0.05,
        lr_decay_steps: vec![],
        nu: 1e-3,
        eta_iters: 25,
        batch_size: 50,
        seed,
        optimizer: Optimizer::Sgd,
    }
}

fn run_one(m: usize, seed: u64, mu: f64, width: usize, eps_eval: f64) -> (f64, f64, usize) {
    let train_set = toy_dataset(400, 7).unwrap();
    let test_set = toy_dataset(200, 1007).unwrap();
    let gamma = 1.0 / (4 + m) as f64;
    let config = base_config(seed, mu, gamma);
    let net = init_network(2, &[width], 4, m, seed);
    let (trained, _) = train(net, &train_set, &config).unwrap();
    let records =
        verify_dataset(&trained, &test_set, eps_eval, Method::Ibp, &VerifySettings::default())
            .unwrap();
    let summary = summarize(&records);
    let _ = standard_accuracy(&trained, &test_set);
    let idle = if m > 0 {
        abstain_utilization(&trained, &test_set.inputs, &test_set.labels, eps_eval, seed)
            .unwrap()
            .iter()
            .filter(|&&c| c == 0)
            .count()
    } else {
        0
    };
    (summary.standard_accuracy, summary.robust_verified_accuracy, idle)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("8a");
    let width: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let eps_eval: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let seeds = [1u64, 2, 3, 4, 5];

    match mode {
        "8a" => {
            let mut avg = [0.0f64; 4];
            for &s in &seeds {
                let (std0, rob0, _) = run_one(0, s, 0.0, width, eps_eval);
                let (std2, rob2, _) = run_one(2, s, 0.0, width, eps_eval);
                println!("seed {s}: M=0 std {std0:.3} rob {rob0:.3} | M=2 std {std2:.3} rob {rob2:.3}");
                avg[0] += std0;
                avg[1] += rob0;
                avg[2] += std2;
                avg[3] += rob2;
            }
            for a in avg.iter_mut() {
                *a /= seeds.len() as f64;
            }
            println!(
                "avg: M=0 std {:.4} rob {:.4} | M=2 std {:.4} rob {:.4} | rob gain {:+.4}, std gap {:+.4}",
                avg[0], avg[1], avg[2], avg[3], avg[3] - avg[1], avg[2] - avg[0]
            );
        }
        "8b" => {
            for reg in [false, true] {
                let mut by_m = Vec::new();
                for m in [2usize, 4, 6, 8] {
                    let mut acc = 0.0;
                    let mut idle_total = 0;
                    for &s in &seeds {
                        let (_, rob, idle) =
                            run_one(m, s, if reg { 10.0 } else { 0.0 }, width, eps_eval);
                        acc += rob;
                        idle_total += idle;
                    }
                    by_m.push((m, acc / seeds.len() as f64, idle_total));
                }
                let lo = by_m.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
                let hi = by_m.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
                println!("reg={reg}: {by_m:?} range {:.4}", hi - lo);
            }
        }
        "8c" => {
            for &s in &seeds {
                let (_, rob, idle) = run_one(4, s, 10.0, width, eps_eval);
                let (_, rob0, idle0) = run_one(4, s, 0.0, width, eps_eval);
                println!("seed {s}: mu>0 rob {rob:.3} idle {idle} | mu=0 rob {rob0:.3} idle {idle0}");
            }
        }
        "9" => {
            for &s in &seeds {
                let train_set = toy_dataset(400, 7).unwrap();
                let test_set = toy_dataset(200, 1007).unwrap();
                let config = base_config(s, 0.0, 1.0 / 6.0);
                let net = init_network(2, &[width], 4, 2, s);
                let (trained, _) = train(net, &train_set, &config).unwrap();
                let merged = trained.with_merged_abstains().unwrap();
                let settings = VerifySettings::default();
                let r1 =
                    verify_dataset(&trained, &test_set, eps_eval, Method::Ibp, &settings).unwrap();
                let r2 =
                    verify_dataset(&merged, &test_set, eps_eval, Method::Ibp, &settings).unwrap();
                let c1 = r1.iter().filter(|r| r.overall_verified).count();
                let c2 = r2.iter().filter(|r| r.overall_verified).count();
                println!("seed {s}: multi-abstain verified {c1}, merged single-abstain {c2}");
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
