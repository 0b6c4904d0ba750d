//! Instance-wise dynamic weighting: a test instance's local-adapter weight is
//! `λ` times its mean similarity to a few sampled local training instances.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Instance, Vocab};
use crate::lora::LoraAdapter;
use crate::model::{Backbone, EmbeddingMode, ModelError};
use crate::seed::{derive_rng, purpose, Rng};

#[derive(Debug, Error)]
pub enum WeightingError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("context error: {0}")]
    Context(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] data::DataError),
}

pub type Result<T> = std::result::Result<T, WeightingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SimMetric {
    Cosine,
    NegL2,
    Pearson,
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Similarity in `[0, 1]`: clamped cosine, `1/(1+‖u−v‖)`, or clamped
/// Pearson correlation across dimensions.
pub fn similarity(u: &[f64], v: &[f64], metric: SimMetric) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(WeightingError::Degenerate(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let cos = |u: &[f64], v: &[f64], what: &str| {
        let (nu, nv) = (norm(u), norm(v));
        if nu == 0.0 || nv == 0.0 {
            return Err(WeightingError::Degenerate(format!("zero {what} vector")));
        }
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        Ok((dot / (nu * nv)).clamp(0.0, 1.0))
    };
    match metric {
        SimMetric::Cosine => cos(u, v, "input"),
        SimMetric::NegL2 => {
            let d: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            Ok(1.0 / (1.0 + d))
        }
        SimMetric::Pearson => {
            let center = |x: &[f64]| {
                let m = x.iter().sum::<f64>() / x.len() as f64;
                x.iter().map(|a| a - m).collect::<Vec<_>>()
            };
            cos(&center(u), &center(v), "centered")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightingParams {
    pub lambda: f64,
    pub num_samples: usize,
    pub metric: SimMetric,
    pub mode: EmbeddingMode,
    pub resample_per_instance: bool,
    pub seed: u64,
}

/// Cached embeddings of one client's sampled training instances.
#[derive(Debug, Clone)]
pub struct WeightingContext {
    pub client: usize,
    pub params: WeightingParams,
    /// Indices into the client's training set.
    pub sampled: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    /// Every training embedding, kept only for per-instance resampling.
    pool: Option<Vec<Vec<f64>>>,
}

/// `k` indices out of `n`: without replacement when `n ≥ k`, otherwise with.
pub fn sample_indices(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    if n >= k {
        rand::seq::index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Prompt tokens of each instance, embedded with the global adapter alone.
pub fn embed_instances(
    backbone: &Backbone,
    global: Option<&LoraAdapter>,
    instances: &[Instance],
    mode: EmbeddingMode,
) -> Result<Vec<Vec<f64>>> {
    let vocab = Vocab::standard();
    let prompts = instances
        .iter()
        .map(|i| data::render_prompt(&vocab, i))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(backbone.embed_batch(global, &prompts, mode)?)
}

pub fn build_context(
    backbone: &Backbone,
    global: Option<&LoraAdapter>,
    client: usize,
    train: &[Instance],
    params: WeightingParams,
) -> Result<WeightingContext> {
    if train.is_empty() {
        return Err(WeightingError::Context(format!("client {client} has no training data")));
    }
    if params.num_samples == 0 {
        return Err(WeightingError::Context("num_samples must be at least 1".into()));
    }
    let mut rng = derive_rng(params.seed, &[purpose::WEIGHTING, client as u64]);
    let sampled = sample_indices(train.len(), params.num_samples, &mut rng);
    let (embeddings, pool) = if params.resample_per_instance {
        let all = embed_instances(backbone, global, train, params.mode)?;
        (sampled.iter().map(|&i| all[i].clone()).collect(), Some(all))
    } else {
        let picked: Vec<Instance> = sampled.iter().map(|&i| train[i].clone()).collect();
        (embed_instances(backbone, global, &picked, params.mode)?, None)
    };
    Ok(WeightingContext {
        client,
        params,
        sampled,
        embeddings,
        pool,
    })
}

/// `λ · mean(scores)`.
pub fn alpha_from_scores(scores: &[f64], lambda: f64) -> f64 {
    lambda * scores.iter().sum::<f64>() / scores.len() as f64
}

impl WeightingContext {
    /// Similarity of `embedding` to each reference embedding. `instance`
    /// keys the fresh draw in per-instance mode and is ignored otherwise.
    pub fn scores(&self, embedding: &[f64], instance: usize) -> Result<Vec<f64>> {
        match &self.pool {
            Some(pool) => {
                let mut rng = derive_rng(
                    self.params.seed,
                    &[purpose::WEIGHTING, self.client as u64, 1 + instance as u64],
                );
                sample_indices(pool.len(), self.params.num_samples, &mut rng)
                    .into_iter()
                    .map(|i| similarity(embedding, &pool[i], self.params.metric))
                    .collect()
            }
            None => self
                .embeddings
                .iter()
                .map(|e| similarity(embedding, e, self.params.metric))
                .collect(),
        }
    }

    /// The local-adapter weight `α_t ∈ [0, λ]`.
    pub fn compute_alpha(&self, embedding: &[f64], instance: usize) -> Result<f64> {
        Ok(alpha_from_scores(&self.scores(embedding, instance)?, self.params.lambda))
    }
}
