//! Clusters three Gaussian blobs with a little uniform noise and compares
//! the partition with the generating labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sage::clusterlib::{adjusted_rand_index, hdbscan, ClusterLabels, HdbscanParams};

fn main() -> sage::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers = [[0.0, 0.0], [5.0, 0.0], [2.5, 4.0]];
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        let n = Normal::new(0.0, 0.4).expect("normal");
        for _ in 0..20 {
            points.push(vec![c[0] + n.sample(&mut rng), c[1] + n.sample(&mut rng)]);
            truth.push(k as i64);
        }
    }
    for _ in 0..5 {
        points.push(vec![rng.random_range(-2.0..7.0), rng.random_range(-2.0..6.0)]);
        truth.push(-1);
    }

    let params = HdbscanParams {
        min_cluster_size: 5,
        min_samples: 3,
        allow_single_cluster: false,
    };
    let labels = hdbscan(&points, &params)?;
    println!("{} clusters, {} noise points", labels.n_clusters, labels.noise().len());
    for c in 0..labels.n_clusters {
        println!("  cluster {c}: {} points", labels.members(c).len());
    }
    let truth = ClusterLabels::from_raw(&truth);
    println!("ARI against the generating blobs: {:.3}", adjusted_rand_index(&truth, &labels)?);
    Ok(())
}
