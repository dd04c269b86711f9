//! Pretrains the toy base model on canonical arithmetic and reports exact
//! match on held-out canonical tasks and on each story template.
//!
//! `cargo run --release --example pretrain_base -- [seed] [out.json]`

use std::time::Instant;

use sage::learner::{gen_atomic_tasks, gen_id_tasks, pretrain_base, Learner, PretrainConfig, TaskKind};
use sage::Sample;

fn main() -> sage::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let out = args.next();

    let cfg = PretrainConfig::default();
    let train: Vec<Sample> = gen_id_tasks(cfg.per_kind, seed)?.iter().map(|t| t.to_sample()).collect();
    let holdout: Vec<Sample> = gen_id_tasks(cfg.holdout_per_kind, seed + 1)?.iter().map(|t| t.to_sample()).collect();

    let t0 = Instant::now();
    let model = pretrain_base(&train, &holdout, &cfg, seed)?;
    println!("pretrained in {:.1}s, checksum {}", t0.elapsed().as_secs_f64(), model.checksum());
    println!("held-out canonical EM {:.3}", model.evaluate(None, &holdout).accuracy);
    for kind in TaskKind::ALL {
        let story: Vec<Sample> = gen_atomic_tasks(kind, 1, 200, seed + 2)?.iter().map(|t| t.to_sample()).collect();
        println!("story/{:<8} EM {:.3}", kind.name(), model.evaluate(None, &story).accuracy);
    }
    if let Some(path) = out {
        model.save(std::path::Path::new(&path))?;
        println!("saved to {path}");
    }
    Ok(())
}
