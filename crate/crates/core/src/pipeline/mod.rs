//! End-to-end orchestration, reports and experiment harnesses.

pub mod config;
pub mod metrics;
pub mod run;
pub mod scripted;
pub mod stability;
pub mod sweep;

use std::path::Path;

pub use config::PipelineConfig;
pub use metrics::{compute_report_metrics, exact_match, wilcoxon_signed_rank, ReportMetrics, WilcoxonOutcome};
pub use run::{Pipeline, RunOutcome, RunReport, TraceEntry};
pub use scripted::{detection_set, ScriptedStream};
pub use stability::{seed_stability_run, SeedStabilityReport};
pub use sweep::{rank_lr_sweep, threshold_sweep, weights_sweep, MatrixReport, SweepKind};

use crate::error::Result;
use crate::learner::{gen_id_tasks, pretrain_base, ToyModel};
use crate::sample::Sample;
use config::LearnerConfig;

/// Loads the cached base model, or pretrains one (and caches it when a
/// path is configured).
pub fn load_or_pretrain(config: &LearnerConfig) -> Result<ToyModel> {
    if let Some(path) = &config.base_path {
        if path.exists() {
            log::info!("loading base model from {}", path.display());
            return ToyModel::load(path);
        }
    }
    let p = &config.pretrain;
    let train: Vec<Sample> = gen_id_tasks(p.per_kind, config.seed)?.iter().map(|t| t.to_sample()).collect();
    let holdout: Vec<Sample> = gen_id_tasks(p.holdout_per_kind, config.seed.wrapping_add(1))?
        .iter()
        .map(|t| t.to_sample())
        .collect();
    log::info!("pretraining base model on {} canonical tasks", train.len());
    let model = pretrain_base(&train, &holdout, p, config.seed)?;
    if let Some(path) = &config.base_path {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| crate::SageError::io(dir, e))?;
        }
        model.save(path)?;
    }
    Ok(model)
}

/// Writes `report.json`, `trace.csv`, `clusters.csv`, `embeddings.csv`,
/// `buffer.json` and the adapter pool under `dir`.
pub fn write_run_outputs(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    use crate::SageError;
    let io = |p: &Path, e| SageError::io(p, e);
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let r = &outcome.report;

    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(r).expect("report serializes")).map_err(|e| io(&path, e))?;

    let mut trace = String::from("index,label,template,is_anomaly,anomaly_score,adapter_id,exact_match,prediction,gold\n");
    for t in &r.trace {
        trace.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            t.index,
            t.label.map(|l| l.to_string()).unwrap_or_default(),
            t.template.as_deref().unwrap_or(""),
            t.verdict.is_anomaly,
            t.verdict.anomaly_score,
            t.adapter_id.as_deref().unwrap_or(""),
            exact_match(&t.prediction, &t.gold),
            csv_field(&t.prediction),
            csv_field(&t.gold),
        ));
    }
    let path = dir.join("trace.csv");
    std::fs::write(&path, trace).map_err(|e| io(&path, e))?;

    let mut series = String::from("index,n_clusters,mean_intra_distance,mean_inter_centroid_distance,buffered,unassigned\n");
    for p in &r.cluster_series {
        let m = &p.metrics;
        series.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.index, m.n_clusters, m.mean_intra_distance, m.mean_inter_centroid_distance, m.buffered, m.unassigned
        ));
    }
    let path = dir.join("clusters.csv");
    std::fs::write(&path, series).map_err(|e| io(&path, e))?;

    // raw question embeddings of clustered and buffered samples, for external plots
    let mut emb = String::from("cluster,template,values\n");
    let rows = outcome
        .buffer
        .clusters
        .values()
        .flat_map(|c| c.members.iter().map(move |m| (c.id.to_string(), m)))
        .chain(outcome.buffer.tags.values().flat_map(|t| t.buffer.iter().map(|m| ("noise".to_string(), m))));
    for (cluster, m) in rows {
        let values: Vec<String> = m.embedding.values.iter().map(|v| v.to_string()).collect();
        emb.push_str(&format!(
            "{cluster},{},{}\n",
            m.sample.template.as_deref().unwrap_or(""),
            values.join(" ")
        ));
    }
    let path = dir.join("embeddings.csv");
    std::fs::write(&path, emb).map_err(|e| io(&path, e))?;

    let path = dir.join("buffer.json");
    std::fs::write(&path, outcome.buffer.to_json()).map_err(|e| io(&path, e))?;
    crate::lora_store::save_pool(&outcome.pool, &dir.join("adapters"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}
