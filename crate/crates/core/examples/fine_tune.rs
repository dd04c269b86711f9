//! Fine-tunes adapters on one story template and reports held-out exact
//! match for a few ranks and learning rates.
//!
//! `cargo run --release --example fine_tune -- <base.json> <kind> [n_train]`

use std::time::Instant;

use sage::learner::{gen_atomic_tasks, Learner, TaskKind, ToyModel};
use sage::lora_store::AdapterConfig;
use sage::Sample;

fn main() -> sage::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = ToyModel::load(std::path::Path::new(args.first().expect("usage: fine_tune <base.json> <kind> [n]")))?;
    // a comma-separated list of kinds trains one adapter on their union
    let kinds: Vec<TaskKind> = args
        .get(1)
        .map(String::as_str)
        .unwrap_or("add")
        .split(',')
        .map(|k| match k {
            "add" => TaskKind::Add,
            "sub" => TaskKind::Sub,
            "mul" => TaskKind::Mul,
            _ => TaskKind::TwoStep,
        })
        .collect();
    let n: usize = args.get(2).map(|s| s.parse().expect("n")).unwrap_or(48);
    let mut train: Vec<Sample> = Vec::new();
    let mut test: Vec<Sample> = Vec::new();
    for &kind in &kinds {
        train.extend(gen_atomic_tasks(kind, 1, n, 11)?.iter().map(|t| t.to_sample()));
        test.extend(gen_atomic_tasks(kind, 1, 300, 12)?.iter().map(|t| t.to_sample()));
    }
    println!("base EM {:.3}", model.evaluate(None, &test).accuracy);
    for rank in [2, 4, 8, 12] {
        for lr in [0.01, 0.03, 0.1, 0.2] {
            let cfg = AdapterConfig {
                rank,
                learning_rate: lr,
                dropout: 0.0,
                epochs: 30,
                batch_size: 8,
                seed: 5,
            };
            let t0 = Instant::now();
            let out = match model.fine_tune(&train, &cfg) {
                Ok(o) => o,
                Err(e) => {
                    println!("rank {rank:>2} lr {lr:<5} failed: {e}");
                    continue;
                }
            };
            let ev = model.evaluate(Some(&out.adapter), &test);
            println!(
                "rank {rank:>2} lr {lr:<5} train loss {:.3} -> {:.3}  held-out EM {:.3} CE {:.3}  ({:.2}s)",
                out.initial_loss,
                out.final_train_loss,
                ev.accuracy,
                ev.ce_loss,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
