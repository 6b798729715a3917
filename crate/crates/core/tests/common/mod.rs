#![allow(dead_code)]

use bmfal::model::{Activation, CovarianceKind, MfModel, ModelConfig, TrainConfig};
use bmfal::{Dataset, Example, Fidelity, Query};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        num_fidelities: 2,
        input_dim: 2,
        latent_dims: vec![3, 3],
        output_dims: vec![6, 8],
        hidden_width: 6,
        hidden_layers: 2,
        activation: Activation::Tanh,
        covariance: CovarianceKind::Full,
        init_posterior_std: 0.1,
        init_noise_var: 0.1,
    }
}

/// Smooth two-fidelity target with output sizes matching [`toy_config`].
pub fn toy_target(x: &[f64], fidelity: usize) -> Vec<f64> {
    let d = if fidelity == 0 { 6 } else { 8 };
    (0..d)
        .map(|i| {
            let s = i as f64 / d as f64;
            let base = (3.0 * x[0] + s).sin() * (2.0 * x[1] - s).cos();
            if fidelity == 0 {
                0.8 * base + 0.1 * s
            } else {
                base
            }
        })
        .collect()
}

pub fn toy_dataset(n_low: usize, n_high: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Dataset::new();
    for (f, n) in [(0, n_low), (1, n_high)] {
        for _ in 0..n {
            let x = vec![rng.random::<f64>(), rng.random::<f64>()];
            data.push(Example {
                y: toy_target(&x, f),
                x,
                fidelity: Fidelity::from_index(f),
                cost: 1.0,
            });
        }
    }
    data
}

/// Small model trained briefly on [`toy_dataset`].
pub fn trained_toy_model(seed: u64) -> MfModel {
    let data = toy_dataset(12, 4, seed);
    MfModel::new(toy_config(), seed)
        .unwrap()
        .train(
            &data,
            &TrainConfig {
                learning_rate: 1e-2,
                epochs: 300,
                seed,
                ..TrainConfig::default()
            },
        )
        .unwrap()
}

pub fn random_query(rng: &mut ChaCha8Rng, num_fidelities: usize) -> Query {
    Query::new(
        vec![rng.random::<f64>(), rng.random::<f64>()],
        Fidelity::from_index(rng.random_range(0..num_fidelities)),
    )
}
