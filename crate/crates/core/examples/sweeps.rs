//! Threshold and trigger-weight sweeps over a labelled detection set, plus
//! a small rank by learning-rate grid, written as JSON and CSV.
//!
//! `cargo run --release --example sweeps -- [base.json] [out_dir]`

use sage::clusterlib::HashEmbedder;
use sage::learner::{gen_atomic_tasks, TaskKind};
use sage::lora_store::AdapterConfig;
use sage::pipeline::sweep::{grid, rank_lr_sweep, score_detection_set, threshold_sweep, weights_sweep};
use sage::pipeline::{detection_set, load_or_pretrain, Pipeline, PipelineConfig};
use sage::Sample;

fn main() -> sage::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let mut config = PipelineConfig::default();
    config.learner.base_path = args.next().map(Into::into);
    let out = args.next().map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("sage_sweeps"));
    let model = load_or_pretrain(&config.learner)?;
    let embedder = HashEmbedder::default();
    let pipeline = Pipeline::new(config, &model, &embedder)?;

    let scored = score_detection_set(&pipeline, &detection_set(100, 100, &TaskKind::ALL, 99)?)?;
    let t = threshold_sweep(pipeline.trigger(), &scored, &grid(0.0, 1.0, 0.05)?)?;
    let w = weights_sweep(pipeline.trigger(), &scored, &grid(0.0, 1.0, 0.25)?, &grid(0.0, 1.0, 0.25)?)?;
    for (i, m) in w.row_values.iter().enumerate() {
        let row: Vec<String> = w.metrics["accuracy"][i]
            .iter()
            .map(|v| v.map_or("   - ".into(), |a| format!("{a:.3}")))
            .collect();
        println!("w_margin {m:.2}: {}", row.join(" "));
    }

    let train: Vec<Sample> = gen_atomic_tasks(TaskKind::Add, 1, 48, 2)?.iter().map(|t| t.to_sample()).collect();
    let r = rank_lr_sweep(&model, &train, &[2, 4, 8], &[0.01, 0.05, 0.2], &AdapterConfig::default(), 0)?;
    for (i, rank) in r.row_values.iter().enumerate() {
        let row: Vec<String> = r.metrics["val_accuracy"][i]
            .iter()
            .map(|v| v.map_or("  - ".into(), |a| format!("{a:.2}")))
            .collect();
        println!("rank {rank:>2}: val accuracy {}", row.join(" "));
    }
    for m in [&t, &w, &r] {
        m.write(&out)?;
    }
    println!("sweeps written to {}", out.display());
    Ok(())
}
