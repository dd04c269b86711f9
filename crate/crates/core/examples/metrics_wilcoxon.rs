//! Report metrics on a handful of predictions and the signed-rank test on
//! paired before/after scores.

use sage::pipeline::metrics::{compute_report_metrics, roc_auc, MetricInput};
use sage::pipeline::wilcoxon_signed_rank;

fn main() -> sage::Result<()> {
    let rows = [
        ("42", "42", true, 1),
        ("17", "18", true, 1),
        ("abc", "5", false, 1),
        ("9", "9", false, 0),
        ("1,000", "1000", true, 0),
    ];
    let m = compute_report_metrics(rows.iter().map(|&(prediction, gold, is_anomaly, label)| MetricInput {
        prediction,
        gold,
        is_anomaly,
        label: Some(label),
    }));
    println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));

    let scores = [0.9, 0.8, 0.35, 0.1, 0.4];
    let labels = [1, 1, 1, 0, 0];
    println!("ROC AUC {:.3}", roc_auc(&scores, &labels)?);

    // nine adapters, each better after adaptation
    let before = [0.02, 0.05, 0.01, 0.03, 0.04, 0.02, 0.00, 0.06, 0.03];
    let after = [0.97, 0.99, 0.95, 1.00, 0.98, 0.96, 0.99, 0.97, 1.00];
    println!("{:?}", wilcoxon_signed_rank(&after, &before)?);
    Ok(())
}
