//! Reasoning-failure detection.
//!
//! Four signals are compared against the gold answer: the mean top-two
//! logits margin of the generated tokens, BLEU, ROUGE-L and the cosine
//! similarity of answer embeddings. Each is mapped to `s_i` in `[0, 1]`
//! and aggregated into an anomaly score `sum w_i (1 - s_i)`.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::clusterlib::EmbeddingVector;
use crate::error::{Result, SageError};
use crate::text::tokenize;

/// Probability floor applied to higher-order BLEU precisions inside the log.
pub const BLEU_SMOOTHING_FLOOR: f64 = 1e-9;

/// Everything the trigger needs to know about one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub predicted_text: String,
    pub gold_text: String,
    /// One logits vector per generated token.
    pub step_logits: Vec<Vec<f64>>,
    pub pred_embedding: EmbeddingVector,
    pub gold_embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerConfig {
    /// Weights for margin, BLEU, ROUGE-L and embedding similarity.
    pub weights: [f64; 4],
    pub threshold: f64,
    /// Margin value that maps to full confidence.
    pub lm_max: f64,
    pub attenuation_enabled: bool,
    /// Percentile band `[lo, hi]` (0..=100) of the in-distribution similarity table.
    pub attenuation_band: [f64; 2],
    pub attenuation_factor: f64,
    pub bleu_order: usize,
    pub rouge_beta: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            weights: [0.25; 4],
            threshold: 0.5,
            lm_max: 5.0,
            attenuation_enabled: true,
            attenuation_band: [25.0, 100.0],
            attenuation_factor: 0.5,
            bleu_order: 4,
            rouge_beta: 1.0,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SageError::Config("trigger weights must be finite and non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SageError::Config(format!("trigger weights sum to {total}, expected 1")));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(SageError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.lm_max > 0.0 && self.lm_max.is_finite()) {
            return Err(SageError::Config("lm_max must be positive".into()));
        }
        let [lo, hi] = self.attenuation_band;
        if !(0.0 <= lo && lo <= hi && hi <= 100.0) {
            return Err(SageError::Config(format!("attenuation band [{lo}, {hi}] is not a percentile range")));
        }
        if !(self.attenuation_factor > 0.0 && self.attenuation_factor <= 1.0) {
            return Err(SageError::Config("attenuation_factor must lie in (0, 1]".into()));
        }
        if self.bleu_order == 0 {
            return Err(SageError::Config("bleu_order must be at least 1".into()));
        }
        if !(self.rouge_beta > 0.0 && self.rouge_beta.is_finite()) {
            return Err(SageError::Config("rouge_beta must be positive".into()));
        }
        Ok(())
    }
}

/// Raw metric values before normalization. Cached by the sensitivity sweeps
/// so verdicts can be recomputed without generating again.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentScores {
    pub margin: f64,
    pub bleu: f64,
    pub rouge: f64,
    pub embed_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerVerdict {
    pub s1_margin: f64,
    pub s2_bleu: f64,
    pub s3_rouge: f64,
    pub s4_embed: f64,
    pub anomaly_score: f64,
    pub is_anomaly: bool,
    pub attenuated: bool,
}

/// Mean over generated steps of `max_i z_i - max_{j != i} z_j`.
pub fn logits_margin(step_logits: &[Vec<f64>]) -> Result<f64> {
    if step_logits.is_empty() {
        return Err(SageError::InvalidInput("logits margin needs at least one step".into()));
    }
    let mut total = 0.0;
    for (step, z) in step_logits.iter().enumerate() {
        if z.len() < 2 {
            return Err(SageError::InvalidInput(format!(
                "logits vector at step {step} has length {}, need at least 2",
                z.len()
            )));
        }
        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &v in z {
            if v > first {
                second = first;
                first = v;
            } else if v > second {
                second = v;
            }
        }
        total += first - second;
    }
    Ok(total / step_logits.len() as f64)
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with clipped n-gram precision and brevity penalty.
///
/// Conventions for short or degenerate inputs:
/// * empty prediction scores 0;
/// * no unigram overlap scores exactly 0;
/// * orders with no candidate n-gram (prediction shorter than `n`) are
///   skipped and the remaining weights renormalized;
/// * every other precision is floored at [`BLEU_SMOOTHING_FLOOR`] inside the log.
pub fn bleu<S: AsRef<str>>(pred: &[S], gold: &[S], weights: &[f64]) -> f64 {
    if pred.is_empty() || weights.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut weight_used = 0.0;
    for (idx, &w) in weights.iter().enumerate() {
        let n = idx + 1;
        if pred.len() < n {
            break;
        }
        let cand = ngram_counts(pred, n);
        let refs = ngram_counts(gold, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let p = clipped as f64 / total as f64;
        if n == 1 && clipped == 0 {
            return 0.0;
        }
        log_sum += w * p.max(BLEU_SMOOTHING_FLOOR).ln();
        weight_used += w;
    }
    if weight_used <= 0.0 {
        return 0.0;
    }
    let bp = (1.0 - gold.len() as f64 / pred.len() as f64).exp().min(1.0);
    (bp * (log_sum / weight_used).exp()).clamp(0.0, 1.0)
}

/// BLEU-N with uniform weights `1/N`.
pub fn bleu_uniform<S: AsRef<str>>(pred: &[S], gold: &[S], order: usize) -> f64 {
    let weights = vec![1.0 / order as f64; order];
    bleu(pred, gold, &weights)
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure. Two empty sequences score 1.
pub fn rouge_l<S: AsRef<str>>(pred: &[S], gold: &[S], beta: f64) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(pred, gold) as f64;
    let p = lcs / pred.len() as f64;
    let r = lcs / gold.len() as f64;
    if p == 0.0 && r == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (b2 * p + r)
}

/// Cosine similarity. Zero-norm or mismatched vectors are rejected.
pub fn embedding_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(SageError::InvalidInput(format!(
            "embedding dimensions differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(SageError::InvalidInput("zero-norm embedding".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Sorted in-distribution embedding similarities with percentile lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdReference {
    sorted: Vec<f64>,
}

impl IdReference {
    pub const MIN_SAMPLES: usize = 10;

    pub fn from_similarities(mut values: Vec<f64>) -> Result<Self> {
        if values.len() < Self::MIN_SAMPLES {
            return Err(SageError::Config(format!(
                "ID reference needs at least {} samples, got {}",
                Self::MIN_SAMPLES,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SageError::InvalidInput("non-finite similarity in ID reference".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(IdReference { sorted: values })
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted
    }

    /// Linear interpolation between closest ranks, `p` in `[0, 100]`.
    pub fn percentile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 100.0);
        let pos = p / 100.0 * (self.sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        self.sorted[lo] + (self.sorted[hi] - self.sorted[lo]) * frac
    }
}

/// Builds the in-distribution similarity table from predictions on ID data.
pub fn build_id_reference(id_samples: &[PredictionOutcome]) -> Result<IdReference> {
    let sims = id_samples
        .iter()
        .map(|o| embedding_similarity(&o.pred_embedding.values, &o.gold_embedding.values))
        .collect::<Result<Vec<_>>>()?;
    IdReference::from_similarities(sims)
}

/// Normalizes the four raw metrics and aggregates them into a verdict.
pub fn anomaly_score(
    lm: f64,
    bleu_n: f64,
    f_beta: f64,
    es: f64,
    config: &TriggerConfig,
    id_reference: Option<&IdReference>,
) -> Result<TriggerVerdict> {
    config.validate()?;
    let s = [
        (lm / config.lm_max).clamp(0.0, 1.0),
        bleu_n.clamp(0.0, 1.0),
        f_beta.clamp(0.0, 1.0),
        es.clamp(0.0, 1.0),
    ];
    let mut score: f64 = config.weights.iter().zip(&s).map(|(w, si)| w * (1.0 - si)).sum();
    let mut attenuated = false;
    if config.attenuation_enabled {
        let reference = id_reference.ok_or_else(|| {
            SageError::Config("attenuation enabled but no ID reference was provided".into())
        })?;
        let lo = reference.percentile(config.attenuation_band[0]);
        let hi = reference.percentile(config.attenuation_band[1]);
        if es >= lo && es <= hi {
            score *= config.attenuation_factor;
            attenuated = true;
        }
    }
    let score = score.clamp(0.0, 1.0);
    Ok(TriggerVerdict {
        s1_margin: s[0],
        s2_bleu: s[1],
        s3_rouge: s[2],
        s4_embed: s[3],
        anomaly_score: score,
        is_anomaly: score > config.threshold,
        attenuated,
    })
}

/// Computes the raw metrics for one prediction.
pub fn component_scores(outcome: &PredictionOutcome, config: &TriggerConfig) -> Result<ComponentScores> {
    let pred = tokenize(&outcome.predicted_text);
    let gold = tokenize(&outcome.gold_text);
    // a prediction with no generated token has no confidence
    let margin = if outcome.step_logits.is_empty() {
        0.0
    } else {
        logits_margin(&outcome.step_logits)?
    };
    Ok(ComponentScores {
        margin,
        bleu: bleu_uniform(&pred, &gold, config.bleu_order),
        rouge: rouge_l(&pred, &gold, config.rouge_beta),
        embed_similarity: embedding_similarity(&outcome.pred_embedding.values, &outcome.gold_embedding.values)?,
    })
}

/// A configured detector: thresholds plus the immutable ID reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trigger {
    pub config: TriggerConfig,
    pub reference: Option<IdReference>,
}

impl Trigger {
    pub fn new(config: TriggerConfig, reference: Option<IdReference>) -> Result<Self> {
        config.validate()?;
        if config.attenuation_enabled && reference.is_none() {
            return Err(SageError::Config("attenuation enabled but no ID reference was provided".into()));
        }
        Ok(Trigger { config, reference })
    }

    pub fn evaluate(&self, outcome: &PredictionOutcome) -> Result<(ComponentScores, TriggerVerdict)> {
        let c = component_scores(outcome, &self.config)?;
        let v = self.rescore(&c)?;
        Ok((c, v))
    }

    pub fn rescore(&self, c: &ComponentScores) -> Result<TriggerVerdict> {
        anomaly_score(c.margin, c.bleu, c.rouge, c.embed_similarity, &self.config, self.reference.as_ref())
    }
}
