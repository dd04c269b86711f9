//! Scripted synthetic streams for experiments and demos.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::learner::{gen_atomic_tasks, gen_id_tasks, TaskKind};
use crate::sample::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedStream {
    /// Story templates in the stream.
    pub kinds: Vec<TaskKind>,
    pub per_template: usize,
    /// Canonical samples mixed in, spread over add, sub and mul.
    pub id_samples: usize,
    pub holdout_per_template: usize,
    pub seed: u64,
}

impl Default for ScriptedStream {
    fn default() -> Self {
        ScriptedStream {
            kinds: vec![TaskKind::Add, TaskKind::Sub, TaskKind::Mul],
            per_template: 72,
            id_samples: 36,
            holdout_per_template: 100,
            seed: 2024,
        }
    }
}

impl ScriptedStream {
    /// Shuffled stream plus a held-out set drawn with a different seed from
    /// the same story templates.
    pub fn generate(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let mut stream: Vec<Sample> = Vec::new();
        let mut holdout: Vec<Sample> = Vec::new();
        for (i, &kind) in self.kinds.iter().enumerate() {
            let s = self.seed.wrapping_add(100 * i as u64);
            if self.per_template > 0 {
                stream.extend(gen_atomic_tasks(kind, 1, self.per_template, s)?.iter().map(|t| t.to_sample()));
            }
            if self.holdout_per_template > 0 {
                holdout.extend(gen_atomic_tasks(kind, 1, self.holdout_per_template, s + 50)?.iter().map(|t| t.to_sample()));
            }
        }
        if self.id_samples > 0 {
            let per_kind = self.id_samples.div_ceil(3);
            let id = gen_id_tasks(per_kind, self.seed.wrapping_add(7))?;
            stream.extend(id.iter().take(self.id_samples).map(|t| t.to_sample()));
        }
        stream.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        // interleave held-out templates so every fold sees all of them
        holdout = interleave(holdout, self.kinds.len());
        Ok((stream, holdout))
    }
}

fn interleave(samples: Vec<Sample>, groups: usize) -> Vec<Sample> {
    if groups <= 1 {
        return samples;
    }
    let per = samples.len() / groups;
    let mut out = Vec::with_capacity(samples.len());
    for i in 0..per {
        for g in 0..groups {
            out.push(samples[g * per + i].clone());
        }
    }
    out
}

/// Labelled detection set: canonical (label 0) and story (label 1) samples,
/// shuffled.
pub fn detection_set(n_id: usize, n_ood: usize, ood_kinds: &[TaskKind], seed: u64) -> Result<Vec<Sample>> {
    let mut out: Vec<Sample> = Vec::new();
    if n_id > 0 {
        out.extend(gen_id_tasks(n_id.div_ceil(3), seed)?.iter().take(n_id).map(|t| t.to_sample()));
    }
    if n_ood > 0 && !ood_kinds.is_empty() {
        let per = n_ood.div_ceil(ood_kinds.len());
        let mut ood: Vec<Sample> = Vec::new();
        for (i, &k) in ood_kinds.iter().enumerate() {
            ood.extend(gen_atomic_tasks(k, 1, per, seed.wrapping_add(31 * (i as u64 + 1)))?.iter().map(|t| t.to_sample()));
        }
        out.extend(interleave(ood, ood_kinds.len()).into_iter().take(n_ood));
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xd17));
    Ok(out)
}
