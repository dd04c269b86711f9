//! Scores a labelled mix of canonical and story questions with the base
//! model and reports how well the anomaly score separates them, plus the
//! threshold sweep.
//!
//! `cargo run --release --example trigger_detection -- [base.json]`

use sage::clusterlib::HashEmbedder;
use sage::learner::TaskKind;
use sage::pipeline::sweep::{detection, detection_auc, grid, score_detection_set, threshold_sweep, widest_plateau};
use sage::pipeline::{detection_set, load_or_pretrain, Pipeline, PipelineConfig};

fn main() -> sage::Result<()> {
    env_logger::init();
    let mut config = PipelineConfig::default();
    config.learner.base_path = std::env::args().nth(1).map(Into::into);
    let model = load_or_pretrain(&config.learner)?;
    let embedder = HashEmbedder::default();
    let pipeline = Pipeline::new(config, &model, &embedder)?;

    let samples = detection_set(100, 100, &TaskKind::ALL, 99)?;
    let scored = score_detection_set(&pipeline, &samples)?;
    let d = detection(pipeline.trigger(), &scored)?;
    println!("ROC AUC {:.4}", detection_auc(pipeline.trigger(), &scored)?);
    println!("accuracy at threshold {}: {:.3}, macro F1 {:.3}", pipeline.config().trigger.threshold, d.accuracy, d.macro_f1);
    println!("confusion (rows ID, OOD; cols predicted ID, OOD) {:?}", d.confusion.matrix);

    let thresholds = grid(0.0, 1.0, 0.01)?;
    let sweep = threshold_sweep(pipeline.trigger(), &scored, &thresholds)?;
    let acc: Vec<f64> = sweep.column("accuracy").into_iter().map(|v| v.unwrap_or(0.0)).collect();
    for (t, a) in thresholds.iter().zip(&acc).step_by(10) {
        println!("  threshold {t:.2}: accuracy {a:.3}");
    }
    if let Some((lo, hi)) = widest_plateau(&thresholds, &acc, 0.05) {
        println!("widest band with accuracy varying < 5 points: [{lo:.2}, {hi:.2}]");
    }
    Ok(())
}
