//! Same scripted stream with per-cluster adapters and with a single adapter
//! trained on every anomaly.
//!
//! `cargo run --release --example ablation -- [base.json] [seed]`

use sage::clusterlib::HashEmbedder;
use sage::pipeline::{load_or_pretrain, Pipeline, PipelineConfig, ScriptedStream};

fn main() -> sage::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let base_path: Option<std::path::PathBuf> = args.next().map(Into::into);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let (stream, holdout) = ScriptedStream::default().generate()?;
    let embedder = HashEmbedder::default();
    let mut config = PipelineConfig::default();
    config.learner.base_path = base_path;
    let model = load_or_pretrain(&config.learner)?;

    for disable in [false, true] {
        let mut c = config.clone();
        c.ablation.disable_clustering = disable;
        let report = Pipeline::new(c, &model, &embedder)?.run_stream(&stream, &holdout, seed)?.report;
        let h = report.heldout.expect("held-out set given");
        println!(
            "{:<22} held-out EM {:.3} -> {:.3}",
            if disable { "single pooled adapter" } else { "per-cluster adapters" },
            h.pre_em,
            h.post_em
        );
        for (t, e) in &h.per_template {
            println!("  {t:<12} {:.3}", e.post_em);
        }
    }
    Ok(())
}
