//! Repeated runs over shuffled stream orders.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::run::{Pipeline, RunReport};
use crate::error::{Result, SageError};
use crate::sample::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    /// Held-out exact match after adaptation, per seed.
    pub post_em: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStabilityReport {
    pub summary: SeedSummary,
    pub runs: Vec<RunReport>,
}

/// Stream order for one seed.
pub fn shuffled(samples: &[Sample], seed: u64) -> Vec<Sample> {
    let mut out = samples.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Runs the full pipeline once per seed on a seed-shuffled stream.
pub fn seed_stability_run(pipeline: &Pipeline<'_>, samples: &[Sample], holdout: &[Sample], seeds: &[u64]) -> Result<SeedStabilityReport> {
    if seeds.len() < 2 {
        return Err(SageError::InvalidInput("seed stability needs at least 2 seeds".into()));
    }
    if holdout.is_empty() {
        return Err(SageError::InvalidInput("seed stability needs a held-out set".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        log::info!("seed {seed}");
        runs.push(pipeline.run_stream(&shuffled(samples, seed), holdout, seed)?.report);
    }
    let post_em: Vec<f64> = runs.iter().map(|r| r.post_em().expect("held-out set given")).collect();
    let n = post_em.len() as f64;
    let mean = post_em.iter().sum::<f64>() / n;
    let std = (post_em.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(SeedStabilityReport {
        summary: SeedSummary {
            seeds: seeds.to_vec(),
            post_em,
            mean,
            std,
        },
        runs,
    })
}
