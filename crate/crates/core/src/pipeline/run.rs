//! The streaming loop: serve, trigger, buffer, search, adopt.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

use super::config::PipelineConfig;
use super::metrics::{compute_report_metrics, exact_match, wilcoxon_signed_rank, MetricInput, ReportMetrics, WilcoxonOutcome};
use crate::buffer::{AssignmentOutcome, BufferEntry, BufferMetrics, BufferState};
use crate::clusterlib::{self, adjusted_rand_index, ClusterLabels, ClusteringQuality, Embedder, EmbeddingVector};
use crate::error::{Result, SageError};
use crate::learner::{gen_id_tasks, predict, Learner, LowRankAdapter};
use crate::lora_store::{run_clo_on_samples, select_adapter, AdapterPool, CloSummary};
use crate::sample::Sample;
use crate::trigger::{build_id_reference, ComponentScores, Trigger, TriggerVerdict};

/// Cluster id used for the single adapter group when clustering is disabled.
pub const POOLED_GROUP: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub question: String,
    pub gold: String,
    pub prediction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Adapter that served the sample; `None` means the base model.
    pub adapter_id: Option<String>,
    pub served_cluster: Option<u64>,
    pub components: ComponentScores,
    pub verdict: TriggerVerdict,
    /// Buffer outcome for anomalies.
    pub assignment: Option<AssignmentOutcome>,
    /// Set for anomalies collected without clustering.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pooled: bool,
    /// Groups searched right after this sample.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub searched: Vec<u64>,
}

impl TraceEntry {
    pub fn metric_input(&self) -> MetricInput<'_> {
        MetricInput {
            prediction: &self.prediction,
            gold: &self.gold,
            is_anomaly: self.verdict.is_anomaly,
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPoint {
    pub index: usize,
    pub metrics: BufferMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEvent {
    /// Stream position after which the search ran.
    pub index: usize,
    pub summary: CloSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchFailure {
    pub index: usize,
    pub cluster_id: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub id: u64,
    pub size: usize,
    /// Member counts per template, when samples carry one.
    pub templates: BTreeMap<String, usize>,
}

/// Clustered samples against their template labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAgreement {
    pub n_clustered: usize,
    pub ari: f64,
    pub quality: ClusteringQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEval {
    pub n: usize,
    pub pre_em: f64,
    pub post_em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEval {
    pub n: usize,
    pub pre_em: f64,
    pub post_em: f64,
}

/// Held-out evaluation with the final adapter pool. "pre" is the base
/// model, "post" routes each sample through adapter selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutReport {
    pub n: usize,
    pub pre_em: f64,
    pub post_em: f64,
    /// Fraction of samples served by an adapter.
    pub routed: f64,
    pub per_template: BTreeMap<String, TemplateEval>,
    pub folds: Vec<FoldEval>,
    pub wilcoxon: Option<WilcoxonOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wilcoxon_error: Option<String>,
}

/// Wall-clock seconds. The only part of a report that differs between two
/// identical runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub setup_s: f64,
    pub stream_s: f64,
    pub search_s: f64,
    pub eval_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub n_samples: usize,
    pub clustering_disabled: bool,
    pub learner_checksum: String,
    pub metrics: ReportMetrics,
    pub n_anomalies: usize,
    pub searches: Vec<SearchEvent>,
    pub search_failures: Vec<SearchFailure>,
    pub cluster_series: Vec<ClusterPoint>,
    pub final_clusters: Vec<ClusterInfo>,
    pub cluster_agreement: Option<ClusterAgreement>,
    pub buffer_state_hash: String,
    pub heldout: Option<HeldOutReport>,
    pub timings: Timings,
    pub config: PipelineConfig,
    /// The config file exactly as read, when one was given.
    pub config_text: Option<String>,
    pub trace: Vec<TraceEntry>,
}

impl RunReport {
    /// Aggregates recomputed from the trace alone.
    pub fn recompute_metrics(&self) -> ReportMetrics {
        compute_report_metrics(self.trace.iter().map(TraceEntry::metric_input))
    }

    /// Copy with timings zeroed, for comparing runs.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn post_em(&self) -> Option<f64> {
        self.heldout.as_ref().map(|h| h.post_em)
    }
}

/// Report plus the state a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub buffer: BufferState,
    pub pool: AdapterPool,
}

/// A configured pipeline around a frozen learner.
pub struct Pipeline<'a> {
    config: PipelineConfig,
    config_text: Option<String>,
    learner: &'a dyn Learner,
    embedder: &'a dyn Embedder,
    trigger: Trigger,
    setup_s: f64,
}

/// Canonical tasks for calibrating the trigger.
pub fn reference_samples(config: &PipelineConfig) -> Result<Vec<Sample>> {
    Ok(gen_id_tasks(config.id_reference.per_kind, config.id_reference.seed)?
        .iter()
        .map(|t| t.to_sample())
        .collect())
}

impl<'a> Pipeline<'a> {
    /// Calibrates the trigger on synthetic canonical tasks.
    pub fn new(config: PipelineConfig, learner: &'a dyn Learner, embedder: &'a dyn Embedder) -> Result<Self> {
        config.validate()?;
        let reference = reference_samples(&config)?;
        Self::with_reference(config, learner, embedder, &reference)
    }

    /// Calibrates the trigger on the base model's predictions for `id_samples`.
    pub fn with_reference(
        config: PipelineConfig,
        learner: &'a dyn Learner,
        embedder: &'a dyn Embedder,
        id_samples: &[Sample],
    ) -> Result<Self> {
        let t0 = Instant::now();
        config.validate()?;
        let reference = if config.trigger.attenuation_enabled {
            let outcomes = id_samples
                .iter()
                .map(|s| predict(learner, embedder, None, s))
                .collect::<Result<Vec<_>>>()?;
            Some(build_id_reference(&outcomes)?)
        } else {
            None
        };
        let trigger = Trigger::new(config.trigger.clone(), reference)?;
        Ok(Pipeline {
            config,
            config_text: None,
            learner,
            embedder,
            trigger,
            setup_s: t0.elapsed().as_secs_f64(),
        })
    }

    pub fn with_config_text(mut self, text: impl Into<String>) -> Self {
        self.config_text = Some(text.into());
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn trigger(&self) -> &Trigger {
        &self.trigger
    }

    pub fn learner(&self) -> &dyn Learner {
        self.learner
    }

    /// Serves one sample and scores the answer.
    pub fn score(&self, adapter: Option<&LowRankAdapter>, sample: &Sample) -> Result<(String, ComponentScores, TriggerVerdict)> {
        let outcome = predict(self.learner, self.embedder, adapter, sample)?;
        let (c, v) = self.trigger.evaluate(&outcome)?;
        Ok((outcome.predicted_text, c, v))
    }

    /// Runs the stream in order. `holdout` (possibly empty) is evaluated
    /// with the final adapter pool.
    pub fn run_stream(&self, samples: &[Sample], holdout: &[Sample], seed: u64) -> Result<RunOutcome> {
        let t0 = Instant::now();
        for (i, s) in samples.iter().chain(holdout).enumerate() {
            s.validate()
                .map_err(|m| SageError::InvalidInput(format!("sample {i}: {m}")))?;
        }
        let mut st = StreamState {
            buffer: BufferState::new(self.config.buffer.clone())?,
            pooled: Vec::new(),
            pool: AdapterPool::new(),
            searched_size: BTreeMap::new(),
            runs: BTreeMap::new(),
            searches: Vec::new(),
            failures: Vec::new(),
            search_s: 0.0,
        };
        let mut trace = Vec::with_capacity(samples.len());
        let mut series = Vec::new();
        let disabled = self.config.ablation.disable_clustering;

        for (index, sample) in samples.iter().enumerate() {
            let q_emb = self.embedder.embed(&sample.question);
            let served = select_adapter(&q_emb, &st.pool, self.config.clo.reuse_threshold);
            let (prediction, components, verdict) = self.score(served.map(|(_, p)| &p.adapter), sample)?;
            let mut entry = TraceEntry {
                index,
                question: sample.question.clone(),
                gold: sample.real_answer.clone(),
                prediction,
                label: sample.label,
                template: sample.template.clone(),
                adapter_id: served.map(|(_, p)| p.record.adapter_id.clone()),
                served_cluster: served.map(|(c, _)| c),
                components,
                verdict,
                assignment: None,
                pooled: false,
                searched: Vec::new(),
            };
            if entry.verdict.is_anomaly {
                if disabled {
                    let e = st.buffer.make_entry(sample.clone(), q_emb);
                    st.pooled.push(e);
                    entry.pooled = true;
                } else {
                    let outcome = st.buffer.submit(sample.clone(), q_emb)?;
                    if let AssignmentOutcome::ClustersCreated { merges, .. } = &outcome {
                        for m in merges {
                            st.pool.clusters.remove(&m.absorbed);
                            st.searched_size.remove(&m.absorbed);
                        }
                    }
                    entry.assignment = Some(outcome);
                }
                entry.searched = self.schedule(&mut st, index, seed)?;
                series.push(ClusterPoint {
                    index,
                    metrics: st.buffer.metrics(),
                });
            }
            trace.push(entry);
        }
        let stream_s = t0.elapsed().as_secs_f64();

        let t_eval = Instant::now();
        let heldout = if holdout.is_empty() {
            None
        } else {
            Some(self.evaluate_heldout(&st.pool, holdout)?)
        };
        let eval_s = t_eval.elapsed().as_secs_f64();

        let final_clusters = if disabled {
            if st.pooled.is_empty() {
                Vec::new()
            } else {
                vec![cluster_info(POOLED_GROUP, &st.pooled)]
            }
        } else {
            st.buffer.clusters.values().map(|c| cluster_info(c.id, &c.members)).collect()
        };
        let cluster_agreement = if disabled { None } else { agreement(&st.buffer)? };

        let report = RunReport {
            seed,
            n_samples: samples.len(),
            clustering_disabled: disabled,
            learner_checksum: self.learner.checksum(),
            metrics: compute_report_metrics(trace.iter().map(TraceEntry::metric_input)),
            n_anomalies: trace.iter().filter(|t| t.verdict.is_anomaly).count(),
            searches: st.searches,
            search_failures: st.failures,
            cluster_series: series,
            final_clusters,
            cluster_agreement,
            buffer_state_hash: st.buffer.state_hash(),
            heldout,
            timings: Timings {
                setup_s: self.setup_s,
                stream_s,
                search_s: st.search_s,
                eval_s,
                total_s: self.setup_s + t0.elapsed().as_secs_f64(),
            },
            config: self.config.clone(),
            config_text: self.config_text.clone(),
            trace,
        };
        Ok(RunOutcome {
            report,
            buffer: st.buffer,
            pool: st.pool,
        })
    }

    /// Searches every group that became due. Returns the searched ids.
    fn schedule(&self, st: &mut StreamState, index: usize, seed: u64) -> Result<Vec<u64>> {
        let need = self.config.clo.min_cluster_size();
        let growth = self.config.clo.retrain_growth;
        let due = |size: usize, dirty: bool, last: Option<usize>| {
            size >= need
                && match last {
                    None => true,
                    Some(prev) => dirty || size as f64 >= growth * prev as f64,
                }
        };

        let mut jobs: Vec<(u64, Vec<Sample>, EmbeddingVector)> = Vec::new();
        if self.config.ablation.disable_clustering {
            let size = st.pooled.len();
            if due(size, false, st.searched_size.get(&POOLED_GROUP).copied()) {
                let refs: Vec<&EmbeddingVector> = st.pooled.iter().map(|e| &e.embedding).collect();
                let centroid = clusterlib::centroid(&refs)?;
                jobs.push((POOLED_GROUP, st.pooled.iter().map(|e| e.sample.clone()).collect(), centroid));
            }
        } else {
            for c in st.buffer.clusters.values() {
                if due(c.members.len(), c.dirty, st.searched_size.get(&c.id).copied()) {
                    jobs.push((c.id, c.samples(), c.centroid.clone()));
                } else if st.pool.clusters.contains_key(&c.id) {
                    st.pool.update_centroid(c.id, c.centroid.clone());
                }
            }
        }

        let mut searched = Vec::new();
        for (id, samples, centroid) in jobs {
            let run = st.runs.entry(id).or_insert(0);
            let run_no = *run;
            let clo_seed = derive_seed(seed, id, run_no);
            *run += 1;
            let t = Instant::now();
            let result = run_clo_on_samples(id, &samples, self.learner, &self.config.clo.space, clo_seed);
            st.search_s += t.elapsed().as_secs_f64();
            st.searched_size.insert(id, samples.len());
            st.buffer.clear_dirty(id);
            searched.push(id);
            match result {
                Ok(mut res) => {
                    // ids from repeated searches of one cluster stay distinct
                    let (from, to) = (format!("c{id}-"), format!("c{id}.{run_no}-"));
                    for r in res.initial.iter_mut().chain(res.ranked.iter_mut()).chain(res.top.iter_mut().map(|t| &mut t.0)) {
                        r.adapter_id = r.adapter_id.replacen(&from, &to, 1);
                    }
                    let summary = res.summary(samples.len());
                    if res.top.is_empty() {
                        log::warn!("search on group {id} produced no usable adapter");
                    }
                    st.pool.register(id, centroid, res.top);
                    st.searches.push(SearchEvent { index, summary });
                }
                Err(e) => {
                    log::warn!("search on group {id} failed: {e}");
                    st.failures.push(SearchFailure {
                        index,
                        cluster_id: id,
                        error: e.to_string(),
                    });
                }
            }
        }
        Ok(searched)
    }

    /// Exact match of the base model and of the routed final pool.
    pub fn evaluate_heldout(&self, pool: &AdapterPool, holdout: &[Sample]) -> Result<HeldOutReport> {
        let folds_n = self.config.eval.folds;
        let mut pre = Vec::with_capacity(holdout.len());
        let mut post = Vec::with_capacity(holdout.len());
        let mut routed = 0usize;
        for s in holdout {
            let base = self.learner.generate(None, &s.question)?;
            pre.push(exact_match(&base.text, &s.real_answer));
            let q = self.embedder.embed(&s.question);
            let hit = match select_adapter(&q, pool, self.config.clo.reuse_threshold) {
                Some((_, p)) => {
                    routed += 1;
                    exact_match(&self.learner.generate(Some(&p.adapter), &s.question)?.text, &s.real_answer)
                }
                None => *pre.last().expect("pushed"),
            };
            post.push(hit);
        }
        let rate = |v: &[bool]| if v.is_empty() { 0.0 } else { v.iter().filter(|b| **b).count() as f64 / v.len() as f64 };

        let mut groups: BTreeMap<String, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
        for (i, s) in holdout.iter().enumerate() {
            let key = s.template.clone().unwrap_or_else(|| "(none)".into());
            let g = groups.entry(key).or_default();
            g.0.push(pre[i]);
            g.1.push(post[i]);
        }
        let per_template = groups
            .into_iter()
            .map(|(k, (a, b))| {
                (
                    k,
                    TemplateEval {
                        n: a.len(),
                        pre_em: rate(&a),
                        post_em: rate(&b),
                    },
                )
            })
            .collect();

        let folds: Vec<FoldEval> = (0..folds_n.min(holdout.len()))
            .map(|f| {
                let idx: Vec<usize> = (f..holdout.len()).step_by(folds_n).collect();
                let a: Vec<bool> = idx.iter().map(|&i| pre[i]).collect();
                let b: Vec<bool> = idx.iter().map(|&i| post[i]).collect();
                FoldEval {
                    n: idx.len(),
                    pre_em: rate(&a),
                    post_em: rate(&b),
                }
            })
            .collect();
        let after: Vec<f64> = folds.iter().map(|f| f.post_em).collect();
        let before: Vec<f64> = folds.iter().map(|f| f.pre_em).collect();
        let (wilcoxon, wilcoxon_error) = match wilcoxon_signed_rank(&after, &before) {
            Ok(w) => (Some(w), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(HeldOutReport {
            n: holdout.len(),
            pre_em: rate(&pre),
            post_em: rate(&post),
            routed: if holdout.is_empty() { 0.0 } else { routed as f64 / holdout.len() as f64 },
            per_template,
            folds,
            wilcoxon,
            wilcoxon_error,
        })
    }
}

struct StreamState {
    buffer: BufferState,
    pooled: Vec<BufferEntry>,
    pool: AdapterPool,
    /// Group size at its last search.
    searched_size: BTreeMap<u64, usize>,
    /// Searches started per group, for seed derivation.
    runs: BTreeMap<u64, u64>,
    searches: Vec<SearchEvent>,
    failures: Vec<SearchFailure>,
    search_s: f64,
}

fn derive_seed(seed: u64, group: u64, run: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(group.wrapping_mul(1_000_003))
        .wrapping_add(run)
}

fn cluster_info(id: u64, members: &[BufferEntry]) -> ClusterInfo {
    let mut templates = BTreeMap::new();
    for m in members {
        if let Some(t) = &m.sample.template {
            *templates.entry(t.clone()).or_insert(0) += 1;
        }
    }
    ClusterInfo {
        id,
        size: members.len(),
        templates,
    }
}

/// Agreement between formal clusters and the samples' templates. `None`
/// when fewer than two samples are clustered or any lacks a template.
pub fn agreement(buffer: &BufferState) -> Result<Option<ClusterAgreement>> {
    let mut truth_names: Vec<&str> = Vec::new();
    let mut pred = Vec::new();
    let mut embeddings = Vec::new();
    for c in buffer.clusters.values() {
        for m in &c.members {
            let Some(t) = m.sample.template.as_deref() else {
                return Ok(None);
            };
            truth_names.push(t);
            pred.push(c.id as i64);
            embeddings.push(m.embedding.clone());
        }
    }
    if pred.len() < 2 {
        return Ok(None);
    }
    let mut ids: BTreeMap<&str, i64> = BTreeMap::new();
    let truth_raw: Vec<i64> = truth_names
        .iter()
        .map(|t| {
            let next = ids.len() as i64;
            *ids.entry(t).or_insert(next)
        })
        .collect();
    let truth = ClusterLabels::from_raw(&truth_raw);
    let pred = ClusterLabels::from_raw(&pred);
    Ok(Some(ClusterAgreement {
        n_clustered: pred.len(),
        ari: adjusted_rand_index(&truth, &pred)?,
        quality: clusterlib::clustering_quality(&truth, &pred, &embeddings)?,
    }))
}
