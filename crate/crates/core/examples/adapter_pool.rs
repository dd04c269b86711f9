//! Trains adapters for two templates, stores them in a pool, saves and
//! reloads it, and routes fresh questions through nearest-centroid lookup.
//!
//! `cargo run --release --example adapter_pool -- [base.json] [pool_dir]`

use sage::clusterlib::{centroid, Embedder, HashEmbedder};
use sage::learner::{gen_atomic_tasks, Learner, TaskKind};
use sage::lora_store::{load_pool, run_clo_on_samples, save_pool, select_adapter, AdapterPool, ParamSpace};
use sage::pipeline::config::LearnerConfig;
use sage::pipeline::{exact_match, load_or_pretrain};
use sage::Sample;

fn main() -> sage::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let learner = LearnerConfig {
        base_path: args.next().map(Into::into),
        ..LearnerConfig::default()
    };
    let dir = args.next().map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("sage_pool"));
    let model = load_or_pretrain(&learner)?;
    let embedder = HashEmbedder::default();
    let space = ParamSpace {
        n_initial: 4,
        top_k: 1,
        ..ParamSpace::default()
    };

    let mut pool = AdapterPool::new();
    for (id, kind) in [(0, TaskKind::Add), (1, TaskKind::Mul)] {
        let samples: Vec<Sample> = gen_atomic_tasks(kind, 1, 48, id)?.iter().map(|t| t.to_sample()).collect();
        let embeddings: Vec<_> = samples.iter().map(|s| embedder.embed(&s.question)).collect();
        let c = centroid(&embeddings.iter().collect::<Vec<_>>())?;
        let result = run_clo_on_samples(id, &samples, &model, &space, 3)?;
        pool.register(id, c, result.top);
    }
    save_pool(&pool, &dir)?;
    let reloaded = load_pool(&dir)?;
    println!("pool saved to {} and reloaded equal: {}", dir.display(), reloaded == pool);

    for kind in [TaskKind::Add, TaskKind::Mul, TaskKind::Sub] {
        let test = gen_atomic_tasks(kind, 1, 50, 99)?;
        let mut hits = 0;
        let mut routed = 0;
        for t in &test {
            let chosen = select_adapter(&embedder.embed(&t.question), &reloaded, 0.5);
            routed += chosen.is_some() as usize;
            let g = model.generate(chosen.map(|(_, p)| &p.adapter), &t.question)?;
            hits += exact_match(&g.text, &t.answer) as usize;
        }
        println!("{:<4} routed {routed}/50, exact match {hits}/50", kind.name());
    }
    Ok(())
}
