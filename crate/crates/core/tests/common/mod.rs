#![allow(dead_code)]

use feddpa::data::{build_suite, FederatedDataset, SuiteSizes};
use feddpa::federation::FedConfig;
use feddpa::lora::LoraAdapter;
use feddpa::model::{Backbone, BackboneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(seed: u64) -> BackboneConfig {
    BackboneConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 64,
        seed,
    }
}

pub fn tiny_backbone(seed: u64) -> Backbone {
    Backbone::new(tiny_config(seed)).unwrap()
}

pub fn small_suite(seed: u64) -> FederatedDataset {
    build_suite(
        seed,
        SuiteSizes {
            train_per_task: 12,
            test_per_task: 4,
            unseen_tasks: true,
            max_seq_len: 64,
        },
    )
    .unwrap()
}

/// Few rounds, one epoch, small batches.
pub fn small_fed(seed: u64) -> FedConfig {
    FedConfig {
        rounds: 2,
        local_epochs: 1,
        batch_size: 4,
        rank: 2,
        lr: 0.5,
        local_only_epochs: 2,
        centralized_epochs: 1,
        seed,
        ..FedConfig::default()
    }
}

/// Adapter with every buffer (including the zero-initialized ones) filled
/// with small random values.
pub fn random_adapter(config: &BackboneConfig, rank: usize, seed: u64, scale: f64) -> LoraAdapter {
    let mut a = LoraAdapter::new(config, rank, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in a.params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
    }
    a
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    // ids 0..4 are specials; stay in the symbol range
    (0..len).map(|_| rng.random_range(4..64)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
