//! Repeats the scripted-stream run over shuffled stream orders and reports
//! the spread of held-out exact match.
//!
//! `cargo run --release --example seed_stability -- [base.json] [seeds]`

use sage::clusterlib::HashEmbedder;
use sage::pipeline::{load_or_pretrain, seed_stability_run, Pipeline, PipelineConfig, ScriptedStream};

fn main() -> sage::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let mut config = PipelineConfig::default();
    config.learner.base_path = args.next().map(Into::into);
    let seeds: Vec<u64> = args
        .next()
        .unwrap_or_else(|| "123,42,7".into())
        .split(',')
        .map(|s| s.parse().expect("seed"))
        .collect();
    let model = load_or_pretrain(&config.learner)?;
    let embedder = HashEmbedder::default();
    let pipeline = Pipeline::new(config, &model, &embedder)?;
    let (stream, holdout) = ScriptedStream::default().generate()?;
    let report = seed_stability_run(&pipeline, &stream, &holdout, &seeds)?;
    for (seed, em) in report.summary.seeds.iter().zip(&report.summary.post_em) {
        println!("seed {seed:>4}: held-out EM {em:.3}");
    }
    println!("mean {:.3}, std {:.3}", report.summary.mean, report.summary.std);
    Ok(())
}
