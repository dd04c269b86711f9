//! Runs the two-phase adapter search on one story template and prints the
//! ranked trainings.
//!
//! `cargo run --release --example clo_search -- [base.json] [kind]`

use sage::learner::{gen_atomic_tasks, TaskKind};
use sage::lora_store::{run_clo_on_samples, ParamSpace};
use sage::pipeline::config::LearnerConfig;
use sage::pipeline::load_or_pretrain;
use sage::Sample;

fn main() -> sage::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let learner = LearnerConfig {
        base_path: args.next().map(Into::into),
        ..LearnerConfig::default()
    };
    let kind = match args.next().as_deref() {
        Some("sub") => TaskKind::Sub,
        Some("mul") => TaskKind::Mul,
        _ => TaskKind::Add,
    };
    let model = load_or_pretrain(&learner)?;
    let samples: Vec<Sample> = gen_atomic_tasks(kind, 1, 48, 1)?.iter().map(|t| t.to_sample()).collect();
    let result = run_clo_on_samples(0, &samples, &model, &ParamSpace::default(), 7)?;

    println!("{} trainings on {} samples", result.n_trainings, samples.len());
    for r in &result.ranked {
        println!(
            "  {:<8} {:?} rank {:>2} lr {:.4} dropout {:.2}: val acc {:.3}, loss {:.4}",
            r.adapter_id, r.phase, r.config.rank, r.config.learning_rate, r.config.dropout, r.val_accuracy, r.ce_loss
        );
    }
    let s = result.summary(samples.len());
    println!("best initial {:.3}, best overall {:.3}, kept {:?}", s.best_initial_val_accuracy, s.best_val_accuracy, s.kept);
    Ok(())
}
