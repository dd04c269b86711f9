#![allow(dead_code)]

use std::sync::OnceLock;

use sage::learner::ToyModel;
use sage::pipeline::config::LearnerConfig;
use sage::pipeline::load_or_pretrain;

/// Base model pretrained with the default configuration, once per binary.
pub fn base_model() -> &'static ToyModel {
    static MODEL: OnceLock<ToyModel> = OnceLock::new();
    MODEL.get_or_init(|| load_or_pretrain(&LearnerConfig::default()).expect("pretraining succeeds"))
}

pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Pair-counting ROC AUC: P(score_pos > score_neg) + P(tie) / 2.
pub fn auc_by_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
