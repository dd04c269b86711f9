//! Two-phase adapter search for one cluster.
//!
//! Phase one trains `n_initial` random configurations. Phase two trains
//! the rank/learning-rate neighbours of the best `top_k`. All records are
//! ranked together and the best three successful adapters are kept.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AdapterConfig, ParamSpace};
use crate::buffer::ClusterRecord;
use crate::error::{Result, SageError};
use crate::learner::{Learner, LowRankAdapter};
use crate::sample::Sample;

pub const KEEP_TOP: usize = 3;
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config: AdapterConfig,
    pub val_accuracy: f64,
    pub ce_loss: f64,
    pub adapter_id: String,
    pub phase: Phase,
    /// Set when training failed; such records score 0 and are never stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `n_initial` configurations: rank and dropout uniform over their sets,
/// learning rate log-uniform.
pub fn sample_initial_configs(space: &ParamSpace, seed: u64) -> Result<Vec<AdapterConfig>> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = space.lr_range;
    let (llo, lhi) = (lo.ln(), hi.ln());
    Ok((0..space.n_initial)
        .map(|i| {
            let rank = *space.ranks.choose(&mut rng).expect("non-empty");
            let dropout = *space.dropouts.choose(&mut rng).expect("non-empty");
            let u: f64 = rng.random();
            let learning_rate = if lo == hi { lo } else { (llo + u * (lhi - llo)).exp().clamp(lo, hi) };
            AdapterConfig {
                rank,
                learning_rate,
                dropout,
                epochs: space.epochs,
                batch_size: space.batch_size,
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            }
        })
        .collect())
}

/// Accuracy descending, then loss ascending; equal records keep their order.
pub fn rank_records(records: &[TrainRecord]) -> Vec<TrainRecord> {
    let mut out = records.to_vec();
    out.sort_by(|a, b| b.val_accuracy.total_cmp(&a.val_accuracy).then(a.ce_loss.total_cmp(&b.ce_loss)));
    out
}

/// Neighbours of `config`: rank +-2 within the hull of the space's ranks,
/// learning rate halved or doubled within the range, centre excluded.
pub fn local_search(config: &AdapterConfig, space: &ParamSpace) -> Vec<AdapterConfig> {
    let (rlo, rhi) = space.rank_hull();
    let [lo, hi] = space.lr_range;
    let ranks: Vec<usize> = [config.rank.checked_sub(2), Some(config.rank), Some(config.rank + 2)]
        .into_iter()
        .flatten()
        .filter(|r| (rlo..=rhi).contains(r))
        .collect();
    let lrs: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|m| config.learning_rate * m)
        .filter(|lr| *lr >= lo * (1.0 - 1e-12) && *lr <= hi * (1.0 + 1e-12))
        .collect();
    let mut out = Vec::new();
    for &rank in &ranks {
        for &learning_rate in &lrs {
            if rank == config.rank && learning_rate == config.learning_rate {
                continue;
            }
            out.push(AdapterConfig {
                rank,
                learning_rate,
                ..config.clone()
            });
        }
    }
    out
}

/// Seeded 80/20 split. Returns (train, validation).
pub fn split_train_val(samples: &[Sample], seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((samples.len() as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, samples.len().saturating_sub(1).max(1));
    let val = idx[..n_val].iter().map(|&i| samples[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| samples[i].clone()).collect();
    (train, val)
}

/// Outcome of one search.
#[derive(Debug, Clone)]
pub struct CloResult {
    pub cluster_id: u64,
    /// Phase-one records in training order.
    pub initial: Vec<TrainRecord>,
    /// All records, ranked.
    pub ranked: Vec<TrainRecord>,
    /// Up to three best successful records with their adapters.
    pub top: Vec<(TrainRecord, LowRankAdapter)>,
    pub best: AdapterConfig,
    pub n_trainings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloSummary {
    pub cluster_id: u64,
    pub n_samples: usize,
    pub n_trainings: usize,
    pub best: AdapterConfig,
    pub best_val_accuracy: f64,
    pub best_initial_val_accuracy: f64,
    pub kept: Vec<String>,
}

impl CloResult {
    pub fn summary(&self, n_samples: usize) -> CloSummary {
        let best_of = |r: &[TrainRecord]| r.iter().map(|x| x.val_accuracy).fold(0.0, f64::max);
        CloSummary {
            cluster_id: self.cluster_id,
            n_samples,
            n_trainings: self.n_trainings,
            best: self.best.clone(),
            best_val_accuracy: best_of(&self.ranked),
            best_initial_val_accuracy: best_of(&self.initial),
            kept: self.top.iter().map(|(r, _)| r.adapter_id.clone()).collect(),
        }
    }
}

fn train_one(
    learner: &dyn Learner,
    train: &[Sample],
    val: &[Sample],
    config: AdapterConfig,
    adapter_id: String,
    phase: Phase,
) -> (TrainRecord, Option<LowRankAdapter>) {
    match learner.fine_tune(train, &config) {
        Ok(out) => {
            let ev = learner.evaluate(Some(&out.adapter), val);
            let record = TrainRecord {
                config,
                val_accuracy: ev.accuracy,
                ce_loss: ev.ce_loss,
                adapter_id,
                phase,
                error: None,
            };
            (record, Some(out.adapter))
        }
        Err(e) => {
            log::warn!("training {adapter_id} failed: {e}");
            let record = TrainRecord {
                config,
                val_accuracy: 0.0,
                ce_loss: f64::INFINITY,
                adapter_id,
                phase,
                error: Some(e.to_string()),
            };
            (record, None)
        }
    }
}

/// Runs the search on an arbitrary sample set.
pub fn run_clo_on_samples(
    cluster_id: u64,
    samples: &[Sample],
    learner: &dyn Learner,
    space: &ParamSpace,
    seed: u64,
) -> Result<CloResult> {
    space.validate()?;
    let need = 2 * space.batch_size;
    if samples.len() < need {
        return Err(SageError::ClusterTooSmall {
            have: samples.len(),
            need,
        });
    }
    let (train, val) = split_train_val(samples, seed);
    let mut adapters: Vec<Option<LowRankAdapter>> = Vec::new();
    let mut records: Vec<TrainRecord> = Vec::new();

    for (i, cfg) in sample_initial_configs(space, seed)?.into_iter().enumerate() {
        let (rec, ad) = train_one(learner, &train, &val, cfg, format!("c{cluster_id}-i{i}"), Phase::Initial);
        records.push(rec);
        adapters.push(ad);
    }
    let initial = records.clone();

    let top_k: Vec<AdapterConfig> = rank_records(&initial)
        .into_iter()
        .take(space.top_k)
        .map(|r| r.config)
        .collect();
    let mut j = 0;
    for parent in &top_k {
        for cfg in local_search(parent, space) {
            // a neighbour shared by two parents, or equal to a trained point, is trained once
            if records.iter().any(|r| r.config.same_point(&cfg)) {
                continue;
            }
            let (rec, ad) = train_one(learner, &train, &val, cfg, format!("c{cluster_id}-r{j}"), Phase::Refined);
            records.push(rec);
            adapters.push(ad);
            j += 1;
        }
    }

    let n_trainings = records.len();
    let ranked = rank_records(&records);
    let best = ranked[0].config.clone();
    let mut top = Vec::new();
    for r in ranked.iter().filter(|r| r.error.is_none()).take(KEEP_TOP) {
        let pos = records.iter().position(|x| x.adapter_id == r.adapter_id).expect("record exists");
        if let Some(ad) = adapters[pos].take() {
            top.push((r.clone(), ad));
        }
    }
    Ok(CloResult {
        cluster_id,
        initial,
        ranked,
        top,
        best,
        n_trainings,
    })
}

/// Runs the search on a buffer cluster.
pub fn run_clo(cluster: &ClusterRecord, learner: &dyn Learner, space: &ParamSpace, seed: u64) -> Result<CloResult> {
    run_clo_on_samples(cluster.id, &cluster.samples(), learner, space, seed)
}
