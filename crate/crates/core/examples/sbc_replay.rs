//! Replays a shuffled three-template anomaly stream through the streaming
//! buffer and prints how clusters form and settle.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sage::buffer::{AssignmentOutcome, BufferState, SbcConfig};
use sage::clusterlib::{Embedder, HashEmbedder};
use sage::learner::{gen_atomic_tasks, TaskKind};
use sage::pipeline::run::agreement;
use sage::Sample;

fn main() -> sage::Result<()> {
    let mut stream: Vec<Sample> = Vec::new();
    for (i, kind) in [TaskKind::Add, TaskKind::Sub, TaskKind::Mul].into_iter().enumerate() {
        stream.extend(gen_atomic_tasks(kind, 1, 30, 10 + i as u64)?.iter().map(|t| t.to_sample()));
    }
    stream.shuffle(&mut ChaCha8Rng::seed_from_u64(5));

    let embedder = HashEmbedder::default();
    let mut state = BufferState::new(SbcConfig::default())?;
    let mut assigned = 0;
    for (i, s) in stream.iter().enumerate() {
        match state.submit(s.clone(), embedder.embed(&s.question))? {
            AssignmentOutcome::Buffered { .. } => {}
            AssignmentOutcome::Assigned { .. } => assigned += 1,
            other => println!("{i:>3}: {other:?}"),
        }
    }
    println!("{assigned} samples joined an existing cluster directly");
    let m = state.metrics();
    println!(
        "final: {} clusters, {} buffered, {} unassigned, mean intra distance {:.3}",
        m.n_clusters, m.buffered, m.unassigned, m.mean_intra_distance
    );
    if let Some(a) = agreement(&state)? {
        println!("ARI against templates over {} clustered samples: {:.3}", a.n_clustered, a.ari);
    }
    println!("state hash {}", state.state_hash());
    Ok(())
}
