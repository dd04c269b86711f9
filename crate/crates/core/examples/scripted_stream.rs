//! Runs the full pipeline on the scripted three-template story stream and
//! prints the before/after held-out exact match.
//!
//! `cargo run --release --example scripted_stream -- [seed] [base.json] [min_batches] [per_template]`

use sage::clusterlib::HashEmbedder;
use sage::pipeline::{load_or_pretrain, Pipeline, PipelineConfig, ScriptedStream};

fn main() -> sage::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(123);
    let mut config = PipelineConfig::default();
    config.learner.base_path = args.next().map(Into::into);
    if let Some(m) = args.next() {
        config.clo.min_batches = m.parse().expect("min batches");
    }
    let mut script = ScriptedStream::default();
    if let Some(n) = args.next() {
        script.per_template = n.parse().expect("per template");
    }

    let model = load_or_pretrain(&config.learner)?;
    let embedder = HashEmbedder::default();
    let pipeline = Pipeline::new(config, &model, &embedder)?;
    let (stream, holdout) = script.generate()?;
    let report = pipeline.run_stream(&stream, &holdout, seed)?.report;

    println!("stream: {} samples, {} anomalies, EM {}", report.n_samples, report.n_anomalies, report.metrics.em);
    for s in &report.searches {
        println!(
            "  after sample {:>3}: searched cluster {} ({} samples, {} trainings), best val acc {:.3}",
            s.index, s.summary.cluster_id, s.summary.n_samples, s.summary.n_trainings, s.summary.best_val_accuracy
        );
    }
    for c in &report.final_clusters {
        println!("  cluster {}: {} members {:?}", c.id, c.size, c.templates);
    }
    if let Some(a) = &report.cluster_agreement {
        println!("cluster/template ARI {:.3}", a.ari);
    }
    if let Some(h) = &report.heldout {
        println!("held-out EM {:.3} -> {:.3} (routed {:.2})", h.pre_em, h.post_em, h.routed);
        for (t, e) in &h.per_template {
            println!("  {t:<14} {:.3} -> {:.3}", e.pre_em, e.post_em);
        }
        println!("signed-rank test over folds: {:?}", h.wilcoxon);
    }
    println!("timings {:?}", report.timings);
    Ok(())
}
