//! Report metrics: exact match, numeric error, detection quality and the
//! exact Wilcoxon signed-rank test.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, SageError};
use crate::text::{extract_number, normalize_answer};

/// Exact match after answer normalization. The single EM definition used by
/// the learner's evaluation and every report.
pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

/// A number that may be undefined. Serialized as a JSON number or the string
/// `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Measured(pub Option<f64>);

impl Measured {
    pub fn value(self) -> Option<f64> {
        self.0
    }
}

impl std::fmt::Display for Measured {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.4}"),
            None => f.write_str("undefined"),
        }
    }
}

impl Serialize for Measured {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Measured {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Measured(Some(v))),
            Raw::Text(t) if t == "undefined" => Ok(Measured(None)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"undefined\", got {t:?}"))),
        }
    }
}

/// One scored prediction, the unit every aggregate is computed from.
#[derive(Debug, Clone, Copy)]
pub struct MetricInput<'a> {
    pub prediction: &'a str,
    pub gold: &'a str,
    pub is_anomaly: bool,
    pub label: Option<u8>,
}

/// Rows are the true class (ID, OOD), columns the predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: [[usize; 2]; 2],
}

impl Confusion {
    pub fn add(&mut self, label: u8, is_anomaly: bool) {
        self.matrix[usize::from(label.min(1))][usize::from(is_anomaly)] += 1;
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> Measured {
        let t = self.total();
        Measured((t > 0).then(|| (self.matrix[0][0] + self.matrix[1][1]) as f64 / t as f64))
    }

    /// Macro-averaged precision, recall and F1 over the two classes. A class
    /// with an empty denominator contributes 0.
    pub fn macro_prf(&self) -> (f64, f64, f64) {
        let m = &self.matrix;
        let mut sums = (0.0, 0.0, 0.0);
        for c in 0..2 {
            let tp = m[c][c] as f64;
            let predicted = (m[0][c] + m[1][c]) as f64;
            let actual = (m[c][0] + m[c][1]) as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = if actual > 0.0 { tp / actual } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            sums.0 += p;
            sums.1 += r;
            sums.2 += f;
        }
        (sums.0 / 2.0, sums.1 / 2.0, sums.2 / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub n: usize,
    pub em: Measured,
    pub mae: Measured,
    pub mse: Measured,
    pub ner: Measured,
    /// Pairs where both gold and prediction parse as numbers.
    pub n_numeric_pairs: usize,
    pub macro_precision: Measured,
    pub macro_recall: Measured,
    pub macro_f1: Measured,
    pub detection_accuracy: Measured,
    pub confusion: Confusion,
}

pub fn compute_report_metrics<'a>(items: impl IntoIterator<Item = MetricInput<'a>>) -> ReportMetrics {
    let mut n = 0usize;
    let mut em = 0usize;
    let mut ner = 0usize;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pairs = 0usize;
    let mut confusion = Confusion::default();
    for it in items {
        n += 1;
        em += usize::from(exact_match(it.prediction, it.gold));
        let p = extract_number(it.prediction);
        ner += usize::from(p.is_some());
        if let (Some(p), Some(g)) = (p, extract_number(it.gold)) {
            abs += (p - g).abs();
            sq += (p - g) * (p - g);
            pairs += 1;
        }
        if let Some(l) = it.label {
            confusion.add(l, it.is_anomaly);
        }
    }
    let frac = |k: usize| Measured((n > 0).then(|| k as f64 / n as f64));
    let labelled = confusion.total() > 0;
    let (p, r, f) = confusion.macro_prf();
    let lab = |v: f64| Measured(labelled.then_some(v));
    ReportMetrics {
        n,
        em: frac(em),
        mae: Measured((pairs > 0).then(|| abs / pairs as f64)),
        mse: Measured((pairs > 0).then(|| sq / pairs as f64)),
        ner: frac(ner),
        n_numeric_pairs: pairs,
        macro_precision: lab(p),
        macro_recall: lab(r),
        macro_f1: lab(f),
        detection_accuracy: confusion.accuracy(),
        confusion,
    }
}

/// ROC AUC of `scores` for separating label 1 from label 0, as the
/// Mann-Whitney probability that a positive outscores a negative (ties 1/2).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SageError::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SageError::InvalidInput("ROC AUC needs both classes".into()));
    }
    // average ranks over tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub const WILCOXON_MIN_PAIRS: usize = 5;
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WilcoxonOutcome {
    Test { w: f64, p_two_sided: f64, n: usize, exact: bool },
    /// Every paired difference is zero.
    NoTest,
}

/// Average ranks of `values` (1-based), ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on `a - b`. Zero differences are
/// dropped and tied magnitudes get average ranks. `W` is the smaller of the
/// two signed-rank sums. Up to 20 pairs the p-value is exact over all sign
/// assignments, beyond that a tie- and continuity-corrected normal approximation is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonOutcome> {
    if a.len() != b.len() {
        return Err(SageError::InvalidInput(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(SageError::Numeric("non-finite paired difference".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonOutcome::NoTest);
    }
    if n < WILCOXON_MIN_PAIRS {
        return Err(SageError::InvalidInput(format!(
            "{n} non-zero differences, need at least {WILCOXON_MIN_PAIRS}"
        )));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);

    if n <= WILCOXON_EXACT_MAX {
        // average ranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let t2: usize = doubled.iter().sum();
        let mut counts = vec![0u64; t2 + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=t2).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w2 = (w * 2.0).round() as usize;
        let hits: u64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (*s).min(t2 - s) <= w2)
            .map(|(_, c)| c)
            .sum();
        let p = hits as f64 / (1u64 << n) as f64;
        return Ok(WilcoxonOutcome::Test {
            w,
            p_two_sided: p.min(1.0),
            n,
            exact: true,
        });
    }

    let mean = total / 2.0;
    let mut tie_term = 0.0;
    let mut sorted: Vec<f64> = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term / 48.0;
    // continuity correction toward the mean
    let z = ((w - mean + 0.5).min(0.0)) / var.sqrt();
    let p = (2.0 * normal_cdf(z)).min(1.0);
    Ok(WilcoxonOutcome::Test {
        w,
        p_two_sided: p,
        n,
        exact: false,
    })
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

// Numerical Recipes erfc, relative error below 1.2e-7.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
