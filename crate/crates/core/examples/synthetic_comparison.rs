// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains a polynomial SAE and a linear Top-K SAE of the same width on the
//! default synthetic scenario and prints reconstruction, probing and
//! correlation numbers side by side.
//!
//! cargo run --release -p polysae --example synthetic_comparison [steps] [lr] [batch]
//!
//! Scenario overrides: BASE_PROB, BOOST, NOISE (environment variables).

use std::collections::BTreeMap;
use std::time::Instant;

use polysae::baseline::{LinearSae, LinearTrainer};
use polysae::eval::{encode_corpus, evaluate_tasks, mse, Split};
use polysae::interactions::{activation_mass, correlation_study, covariance_correlation};
use polysae::linalg::Rng;
use polysae::synth::{calibrate_interaction_energy, default_scenario, generate, ScenarioConfig};
use polysae::train::{BatchStream, Trainer};
use polysae::{ModelConfig, PolySaeParams, Ranks, SparseCode, TrainConfig};

const D: usize = 32;
const D_SAE: usize = 128;
const K: usize = 8;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args()
        .nth(i)
        .map_or(default, |s| s.parse().unwrap_or_else(|_| panic!("bad argument {s}")))
}

fn env(key: &str, default: f64) -> f64 {
    std::env::var(key)
        .ok()
        .map_or(default, |v| v.parse().unwrap_or_else(|_| panic!("bad {key}={v}")))
}

fn alive(codes: &[SparseCode]) -> usize {
    activation_mass(codes, D_SAE).iter().filter(|&&m| m > 0.0).count()
}

fn main() -> polysae::Result<()> {
    let steps: u64 = arg(1, 2000);
    let lr: f64 = arg(2, 3e-3);
    let batch: usize = arg(3, 1024);
    let t0 = Instant::now();

    let scenario = ScenarioConfig {
        base_prob: env("BASE_PROB", 0.1),
        boost_coupling: env("BOOST", 3.0),
        noise_sigma: env("NOISE", 0.05),
        ..ScenarioConfig::default()
    };
    let gt = calibrate_interaction_energy(&default_scenario(&scenario)?, 0.3, &Rng::new(100))?;
    let train_set = generate(&gt, 200_000, &mut Rng::new(1))?;
    let eval_set = generate(&gt, 50_000, &mut Rng::new(2))?;

    let model = ModelConfig::new(D, D_SAE, K, Ranks { r1: D, r2: 8, r3: 8 });
    let tc = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        total_tokens: steps * batch as u64,
        ..TrainConfig::default()
    };

    let mut poly = Trainer::new(PolySaeParams::init(&model, &mut Rng::new(7))?, model.clone(), tc.clone())?;
    let mut stream = BatchStream::new(&train_set.activations, batch, 3);
    for _ in 0..steps {
        poly.step(&stream.next_batch())?;
    }
    let mut lin = LinearTrainer::new(LinearSae::init_dense(D, D_SAE, K, &mut Rng::new(7)), tc);
    let mut stream = BatchStream::new(&train_set.activations, batch, 3);
    for _ in 0..steps {
        lin.step(&stream.next_batch())?;
    }
    println!(
        "trained {steps} steps in {:.1?}; lambda2 {:.4} lambda3 {:.4}",
        t0.elapsed(),
        poly.params.lambda2,
        poly.params.lambda3
    );

    let x = &eval_set.activations;
    println!(
        "mse poly {:.5} linear {:.5}",
        mse(&poly.params, &model, x)?,
        lin.sae.mse(x)?
    );

    let split = Split::seeded(x.rows(), Split::DEFAULT_TEST_FRACTION, 5);
    let pc = encode_corpus(&poly.params, &model, x)?;
    let lc = lin.sae.encode_corpus(x)?;
    let pair_labels: BTreeMap<String, Vec<u32>> = eval_set
        .labels
        .into_iter()
        .filter(|(k, _)| k.starts_with("pair_"))
        .collect();
    let pr = evaluate_tasks(&pc, &pair_labels, &split, &[1, 5])?;
    let lr = evaluate_tasks(&lc, &pair_labels, &split, &[1, 5])?;
    for (a, b) in pr.iter().zip(&lr) {
        println!(
            "{}: poly f1 {:.4}/{:.4} w1 {:.4} | linear f1 {:.4}/{:.4} w1 {:.4}",
            a.task, a.f1[&1], a.f1[&5], a.wasserstein, b.f1[&1], b.f1[&5], b.wasserstein
        );
    }

    for top_m in [32, 64, 128] {
        let study = correlation_study(&poly.params, &pc, top_m)?;
        println!(
            "top_m {top_m}: r_poly {} r_cov {} r_cov(linear codes) {}",
            study.r_poly,
            study.r_cov,
            covariance_correlation(&lc, D_SAE, top_m)?
        );
    }
    println!("alive latents poly {} linear {}", alive(&pc), alive(&lc));
    Ok(())
}
