//! Sensitivity sweeps over the trigger threshold, the trigger weights and
//! the adapter rank and learning rate. Results are matrices written as JSON
//! and long-format CSV.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use super::metrics::{roc_auc, Confusion};
use super::run::Pipeline;
use crate::error::{Result, SageError};
use crate::learner::Learner;
use crate::lora_store::{split_train_val, AdapterConfig};
use crate::sample::Sample;
use crate::trigger::{ComponentScores, Trigger, TriggerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum SweepKind {
    Threshold,
    Weights,
    RankLr,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Threshold => "threshold",
            SweepKind::Weights => "weights",
            SweepKind::RankLr => "rank_lr",
        }
    }
}

/// Cached trigger inputs for one labelled sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub components: ComponentScores,
    pub label: u8,
}

/// Generates once with the base model and keeps the raw components, so
/// detection sweeps never generate again.
pub fn score_detection_set(pipeline: &Pipeline<'_>, samples: &[Sample]) -> Result<Vec<ScoredSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let label = s
                .label
                .ok_or_else(|| SageError::InvalidInput(format!("sample {i} has no label")))?;
            let (_, components, _) = pipeline.score(None, s)?;
            Ok(ScoredSample { components, label })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
}

pub fn detection(trigger: &Trigger, scored: &[ScoredSample]) -> Result<Detection> {
    let mut confusion = Confusion::default();
    for s in scored {
        confusion.add(s.label, trigger.rescore(&s.components)?.is_anomaly);
    }
    let (p, r, f) = confusion.macro_prf();
    Ok(Detection {
        accuracy: confusion.accuracy().value().unwrap_or(0.0),
        macro_precision: p,
        macro_recall: r,
        macro_f1: f,
        confusion,
    })
}

/// ROC AUC of the anomaly score for telling label 1 from label 0.
pub fn detection_auc(trigger: &Trigger, scored: &[ScoredSample]) -> Result<f64> {
    let scores = scored
        .iter()
        .map(|s| trigger.rescore(&s.components).map(|v| v.anomaly_score))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = scored.iter().map(|s| s.label).collect();
    roc_auc(&scores, &labels)
}

/// Metric matrices over a row by column grid. Single-axis sweeps have one
/// column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub kind: SweepKind,
    pub row_name: String,
    pub row_values: Vec<f64>,
    pub col_name: Option<String>,
    pub col_values: Vec<f64>,
    /// metric name to `[row][col]`; `None` marks an invalid or failed cell.
    pub metrics: BTreeMap<String, Vec<Vec<Option<f64>>>>,
}

impl MatrixReport {
    fn new(kind: SweepKind, row_name: &str, rows: &[f64], col: Option<(&str, &[f64])>, names: &[&str]) -> Self {
        let cols = col.map(|c| c.1.to_vec()).unwrap_or_else(|| vec![0.0]);
        MatrixReport {
            kind,
            row_name: row_name.into(),
            row_values: rows.to_vec(),
            col_name: col.map(|c| c.0.to_string()),
            metrics: names
                .iter()
                .map(|n| (n.to_string(), vec![vec![None; cols.len()]; rows.len()]))
                .collect(),
            col_values: cols,
        }
    }

    fn set(&mut self, metric: &str, r: usize, c: usize, v: f64) {
        self.metrics.get_mut(metric).expect("declared metric")[r][c] = Some(v);
    }

    pub fn get(&self, metric: &str, r: usize, c: usize) -> Option<f64> {
        self.metrics.get(metric)?.get(r)?.get(c).copied().flatten()
    }

    /// One metric along the rows of the first column.
    pub fn column(&self, metric: &str) -> Vec<Option<f64>> {
        self.metrics.get(metric).map(|m| m.iter().map(|row| row[0]).collect()).unwrap_or_default()
    }

    /// Long format: one line per cell, empty fields for missing values.
    pub fn to_csv(&self) -> String {
        let names: Vec<&String> = self.metrics.keys().collect();
        let mut out = self.row_name.clone();
        if let Some(c) = &self.col_name {
            out.push(',');
            out.push_str(c);
        }
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (r, rv) in self.row_values.iter().enumerate() {
            for (c, cv) in self.col_values.iter().enumerate() {
                out.push_str(&rv.to_string());
                if self.col_name.is_some() {
                    out.push(',');
                    out.push_str(&cv.to_string());
                }
                for n in &names {
                    out.push(',');
                    if let Some(v) = self.metrics[*n][r][c] {
                        out.push_str(&v.to_string());
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// Writes `sweep_<kind>.json` and `sweep_<kind>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SageError::io(dir, e))?;
        let base = format!("sweep_{}", self.kind.name());
        let json = dir.join(format!("{base}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self).expect("report serializes"))
            .map_err(|e| SageError::io(&json, e))?;
        let csv = dir.join(format!("{base}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| SageError::io(&csv, e))?;
        Ok(())
    }
}

/// `lo, lo + step, ..., hi` with values rounded to 1e-9 so that decimal
/// steps land on decimal values.
pub fn grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(SageError::InvalidInput(format!("bad grid {lo}:{hi}:{step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect())
}

pub fn threshold_sweep(trigger: &Trigger, scored: &[ScoredSample], thresholds: &[f64]) -> Result<MatrixReport> {
    if thresholds.is_empty() {
        return Err(SageError::InvalidInput("threshold grid is empty".into()));
    }
    let names = ["accuracy", "macro_precision", "macro_recall", "macro_f1"];
    let mut m = MatrixReport::new(SweepKind::Threshold, "threshold", thresholds, None, &names);
    for (r, &t) in thresholds.iter().enumerate() {
        let tr = Trigger {
            config: TriggerConfig {
                threshold: t,
                ..trigger.config.clone()
            },
            reference: trigger.reference.clone(),
        };
        let d = detection(&tr, scored)?;
        m.set("accuracy", r, 0, d.accuracy);
        m.set("macro_precision", r, 0, d.macro_precision);
        m.set("macro_recall", r, 0, d.macro_recall);
        m.set("macro_f1", r, 0, d.macro_f1);
    }
    Ok(m)
}

/// Rows vary the margin weight, columns the embedding weight; BLEU and
/// ROUGE-L share the remainder equally. Cells whose two weights exceed 1
/// are left empty.
pub fn weights_sweep(
    trigger: &Trigger,
    scored: &[ScoredSample],
    margin_weights: &[f64],
    embed_weights: &[f64],
) -> Result<MatrixReport> {
    if margin_weights.is_empty() || embed_weights.is_empty() {
        return Err(SageError::InvalidInput("weight grid is empty".into()));
    }
    let mut m = MatrixReport::new(
        SweepKind::Weights,
        "w_margin",
        margin_weights,
        Some(("w_embed", embed_weights)),
        &["accuracy", "macro_f1"],
    );
    for (r, &wm) in margin_weights.iter().enumerate() {
        for (c, &we) in embed_weights.iter().enumerate() {
            let rest = 1.0 - wm - we;
            if rest < -1e-9 {
                continue;
            }
            let rest = rest.max(0.0);
            let tr = Trigger {
                config: TriggerConfig {
                    weights: [wm, rest / 2.0, rest / 2.0, we],
                    ..trigger.config.clone()
                },
                reference: trigger.reference.clone(),
            };
            let d = detection(&tr, scored)?;
            m.set("accuracy", r, c, d.accuracy);
            m.set("macro_f1", r, c, d.macro_f1);
        }
    }
    Ok(m)
}

/// Validation accuracy and loss of one adapter per (rank, learning rate)
/// on a seeded 80/20 split of `samples`. Failed trainings leave empty cells.
pub fn rank_lr_sweep(
    learner: &dyn Learner,
    samples: &[Sample],
    ranks: &[usize],
    learning_rates: &[f64],
    base: &AdapterConfig,
    seed: u64,
) -> Result<MatrixReport> {
    if ranks.is_empty() || learning_rates.is_empty() {
        return Err(SageError::InvalidInput("rank/lr grid is empty".into()));
    }
    if samples.len() < 2 {
        return Err(SageError::InvalidInput("rank/lr sweep needs at least 2 samples".into()));
    }
    let (train, val) = split_train_val(samples, seed);
    let rows: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    let mut m = MatrixReport::new(
        SweepKind::RankLr,
        "rank",
        &rows,
        Some(("learning_rate", learning_rates)),
        &["val_accuracy", "val_ce_loss", "train_loss"],
    );
    for (r, &rank) in ranks.iter().enumerate() {
        for (c, &lr) in learning_rates.iter().enumerate() {
            let cfg = AdapterConfig {
                rank,
                learning_rate: lr,
                ..base.clone()
            };
            match learner.fine_tune(&train, &cfg) {
                Ok(out) => {
                    let ev = learner.evaluate(Some(&out.adapter), &val);
                    m.set("val_accuracy", r, c, ev.accuracy);
                    m.set("val_ce_loss", r, c, ev.ce_loss);
                    m.set("train_loss", r, c, out.final_train_loss);
                }
                Err(e) => log::warn!("rank {rank} lr {lr}: {e}"),
            }
        }
    }
    Ok(m)
}

/// Widest contiguous run of grid points whose values stay within `tol` of
/// each other (max - min < tol). Returns the run's end points.
pub fn widest_plateau(xs: &[f64], ys: &[f64], tol: f64) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for i in 0..xs.len().min(ys.len()) {
        let (mut lo, mut hi) = (ys[i], ys[i]);
        for j in i..xs.len().min(ys.len()) {
            lo = lo.min(ys[j]);
            hi = hi.max(ys[j]);
            if hi - lo >= tol {
                break;
            }
            if best.is_none_or(|(a, b)| xs[j] - xs[i] > b - a) {
                best = Some((xs[i], xs[j]));
            }
        }
    }
    best
}
