//! Adapter hyperparameters and the space the search draws them from.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SageError};

/// Hyperparameters of one adapter training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(SageError::Config("adapter rank must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SageError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SageError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SageError::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Same rank, learning rate and dropout. Seeds and schedules are ignored.
    pub fn same_point(&self, other: &AdapterConfig) -> bool {
        self.rank == other.rank && self.learning_rate == other.learning_rate && self.dropout == other.dropout
    }
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 4,
            learning_rate: 0.05,
            dropout: 0.0,
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Search space for adapter hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamSpace {
    pub ranks: Vec<usize>,
    /// Sampled log-uniformly.
    pub lr_range: [f64; 2],
    pub dropouts: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_initial: usize,
    pub top_k: usize,
}

impl Default for ParamSpace {
    fn default() -> Self {
        ParamSpace {
            ranks: vec![2, 4, 6, 8, 10, 12],
            lr_range: [5e-3, 2e-1],
            dropouts: vec![0.0, 0.05, 0.1],
            epochs: 30,
            batch_size: 8,
            n_initial: 8,
            top_k: 3,
        }
    }
}

impl ParamSpace {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.dropouts.is_empty() {
            return Err(SageError::Config("ranks and dropouts must be non-empty".into()));
        }
        if self.ranks.contains(&0) {
            return Err(SageError::Config("ranks must be at least 1".into()));
        }
        if self.dropouts.iter().any(|d| !(0.0..1.0).contains(d)) {
            return Err(SageError::Config("dropouts must lie in [0, 1)".into()));
        }
        let [lo, hi] = self.lr_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(SageError::Config(format!("lr_range [{lo}, {hi}] must be positive and ordered")));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_initial == 0 || self.top_k == 0 {
            return Err(SageError::Config("epochs, batch_size, n_initial and top_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rank_hull(&self) -> (usize, usize) {
        let lo = *self.ranks.iter().min().expect("validated");
        let hi = *self.ranks.iter().max().expect("validated");
        (lo, hi)
    }
}
