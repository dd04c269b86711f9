//! Streaming buffer clustering.
//!
//! Anomalous samples are bucketed by answer shape. Once a bucket has stable
//! clusters, new samples join the best-matching one; everything else waits
//! in the bucket's buffer. A full buffer is clustered with HDBSCAN and the
//! result is kept only if it agrees with the previous attempt.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

use crate::clusterlib::{self, adjusted_rand_index, centroid_set_similarity, ClusterLabels, EmbeddingVector, HdbscanParams};
use crate::error::{Result, SageError};
use crate::sample::Sample;
use crate::text::{normalize_answer, tokenize};

pub const KEYWORD_COUNT: usize = 5;

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "been", "before", "being",
    "but", "by", "can", "could", "did", "do", "does", "each", "for", "from", "had", "has", "have", "he", "her", "him",
    "his", "how", "i", "if", "in", "into", "is", "it", "its", "many", "more", "much", "my", "no", "not", "of", "on",
    "or", "our", "she", "so", "than", "that", "the", "their", "them", "then", "there", "these", "they", "this", "to",
    "was", "we", "were", "what", "when", "where", "which", "who", "will", "with", "would", "you", "your",
];

/// Coarse answer-shape bucket.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StructureTag(String);

impl StructureTag {
    pub const NUMERIC: &'static str = "numeric";
    pub const YES_NO_MAYBE: &'static str = "yes_no_maybe";
    pub const FREE_TEXT: &'static str = "free_text";

    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.trim().is_empty() {
            return Err(SageError::InvalidInput("structure tag must be non-empty".into()));
        }
        Ok(StructureTag(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for StructureTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Classifies the gold answer: number, yes/no/maybe, or anything else.
pub fn infer_structure(sample: &Sample) -> StructureTag {
    let gold = normalize_answer(&sample.real_answer);
    let tag = if gold.parse::<f64>().is_ok_and(f64::is_finite) {
        StructureTag::NUMERIC
    } else if matches!(gold.as_str(), "yes" | "no" | "maybe") {
        StructureTag::YES_NO_MAYBE
    } else {
        StructureTag::FREE_TEXT
    };
    StructureTag(tag.to_owned())
}

/// Top tokens of the question by frequency after stopword removal; ties are
/// broken lexicographically.
pub fn extract_keywords(sample: &Sample) -> BTreeSet<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for tok in tokenize(&sample.question) {
        if !STOPWORDS.contains(&tok.as_str()) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(KEYWORD_COUNT).map(|(t, _)| t).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    /// Submission sequence number.
    pub id: u64,
    pub sample: Sample,
    pub embedding: EmbeddingVector,
    pub keywords: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: u64,
    pub tag: StructureTag,
    pub members: Vec<BufferEntry>,
    pub centroid: EmbeddingVector,
    pub keyword_union: BTreeSet<String>,
    /// Set when the membership changed through a merge.
    pub dirty: bool,
}

impl ClusterRecord {
    fn new(id: u64, tag: StructureTag, members: Vec<BufferEntry>) -> Result<Self> {
        let mut c = ClusterRecord {
            id,
            tag,
            centroid: members
                .first()
                .map(|m| m.embedding.clone())
                .ok_or_else(|| SageError::InvalidInput("cluster needs at least one member".into()))?,
            members,
            keyword_union: BTreeSet::new(),
            dirty: false,
        };
        c.refresh()?;
        Ok(c)
    }

    fn refresh(&mut self) -> Result<()> {
        let refs: Vec<&EmbeddingVector> = self.members.iter().map(|m| &m.embedding).collect();
        self.centroid = clusterlib::centroid(&refs)?;
        self.keyword_union = self.members.iter().flat_map(|m| m.keywords.iter().cloned()).collect();
        Ok(())
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.members.iter().map(|m| m.sample.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbcConfig {
    /// Match threshold for joining a stable cluster.
    pub tau: f64,
    /// Buffer size that triggers a clustering attempt.
    pub buffer_threshold: usize,
    pub theta_ari: f64,
    pub theta_sim: f64,
    /// Centroid cosine at or above which clusters merge.
    pub delta: f64,
    pub merge_min_clusters: usize,
    pub lambda_emb: f64,
    pub lambda_kw: f64,
    pub hdbscan: HdbscanParams,
}

impl Default for SbcConfig {
    fn default() -> Self {
        SbcConfig {
            tau: 0.6,
            buffer_threshold: 12,
            theta_ari: 0.8,
            theta_sim: 0.8,
            delta: 0.9,
            merge_min_clusters: 3,
            lambda_emb: 0.7,
            lambda_kw: 0.3,
            hdbscan: HdbscanParams::default(),
        }
    }
}

impl SbcConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("theta_ari", self.theta_ari),
            ("theta_sim", self.theta_sim),
            ("delta", self.delta),
            ("lambda_emb", self.lambda_emb),
            ("lambda_kw", self.lambda_kw),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SageError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if (self.lambda_emb + self.lambda_kw - 1.0).abs() > 1e-9 {
            return Err(SageError::Config("lambda_emb + lambda_kw must equal 1".into()));
        }
        self.hdbscan.validate()?;
        if self.buffer_threshold < self.hdbscan.min_cluster_size {
            return Err(SageError::Config(format!(
                "buffer_threshold {} is below min_cluster_size {}",
                self.buffer_threshold, self.hdbscan.min_cluster_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub kept: u64,
    pub absorbed: u64,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    pub ari: f64,
    pub sim: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssignmentOutcome {
    Assigned { cluster_id: u64, gamma: f64 },
    Buffered { tag: StructureTag, buffer_size: usize },
    ClustersCreated { cluster_ids: Vec<u64>, merges: Vec<MergeEvent> },
    UnstableDeferred { check: StabilityCheck },
    Unassigned { tag: StructureTag, moved: usize },
}

/// One clustering attempt over a buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAttempt {
    pub sample_ids: Vec<u64>,
    pub labels: ClusterLabels,
    pub centroids: Vec<EmbeddingVector>,
}

impl ClusterAttempt {
    fn from_entries(entries: &[BufferEntry], labels: ClusterLabels) -> Result<Self> {
        let centroids = (0..labels.n_clusters)
            .map(|c| {
                let refs: Vec<&EmbeddingVector> = labels.members(c).into_iter().map(|i| &entries[i].embedding).collect();
                clusterlib::centroid(&refs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterAttempt {
            sample_ids: entries.iter().map(|e| e.id).collect(),
            labels,
            centroids,
        })
    }
}

/// Compares two consecutive attempts.
///
/// ARI is taken over the samples present in both. Centroid similarity is 0
/// when exactly one attempt found clusters and 1 when neither did.
pub fn check_stability(current: &ClusterAttempt, previous: Option<&ClusterAttempt>, config: &SbcConfig) -> StabilityCheck {
    let Some(prev) = previous else {
        return StabilityCheck {
            ari: 0.0,
            sim: 0.0,
            stable: false,
        };
    };
    let position: BTreeMap<u64, usize> = current.sample_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, id) in prev.sample_ids.iter().enumerate() {
        if let Some(&j) = position.get(id) {
            a.push(prev.labels.labels[i] as i64);
            b.push(current.labels.labels[j] as i64);
        }
    }
    let ari = if a.is_empty() {
        0.0
    } else {
        adjusted_rand_index(&ClusterLabels::from_raw(&a), &ClusterLabels::from_raw(&b)).unwrap_or(0.0)
    };
    let sim = match (prev.centroids.is_empty(), current.centroids.is_empty()) {
        (true, true) => 1.0,
        (false, false) => centroid_set_similarity(&prev.centroids, &current.centroids).unwrap_or(0.0),
        _ => 0.0,
    };
    StabilityCheck {
        ari,
        sim,
        stable: ari >= config.theta_ari && sim >= config.theta_sim,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagState {
    pub buffer: Vec<BufferEntry>,
    pub stable: bool,
    pub previous: Option<ClusterAttempt>,
}

/// Cluster geometry summary at one point of the stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferMetrics {
    pub n_clusters: usize,
    /// Mean Euclidean distance of members to their centroid.
    pub mean_intra_distance: f64,
    /// Mean Euclidean distance between centroids of the same tag.
    pub mean_inter_centroid_distance: f64,
    pub buffered: usize,
    pub unassigned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferState {
    pub config: SbcConfig,
    pub tags: BTreeMap<StructureTag, TagState>,
    pub clusters: BTreeMap<u64, ClusterRecord>,
    pub unassigned: Vec<BufferEntry>,
    pub next_cluster_id: u64,
    pub next_entry_id: u64,
}

/// Embedding-and-keyword match score of an entry against a cluster.
pub fn match_score(entry: &BufferEntry, entry_tag: &StructureTag, cluster: &ClusterRecord, config: &SbcConfig) -> Result<f64> {
    if *entry_tag != cluster.tag {
        return Err(SageError::InvalidInput(format!(
            "tag mismatch: entry {} vs cluster {}",
            entry_tag, cluster.tag
        )));
    }
    let cos = entry.embedding.dot(&cluster.centroid).max(0.0);
    let union = entry.keywords.union(&cluster.keyword_union).count();
    let jaccard = if union == 0 {
        0.0
    } else {
        entry.keywords.intersection(&cluster.keyword_union).count() as f64 / union as f64
    };
    Ok((config.lambda_emb * cos + config.lambda_kw * jaccard).clamp(0.0, 1.0))
}

impl BufferState {
    pub fn new(config: SbcConfig) -> Result<Self> {
        config.validate()?;
        Ok(BufferState {
            config,
            tags: BTreeMap::new(),
            clusters: BTreeMap::new(),
            unassigned: Vec::new(),
            next_cluster_id: 0,
            next_entry_id: 0,
        })
    }

    /// Builds the entry that [`submit`](Self::submit) would store.
    pub fn make_entry(&self, sample: Sample, embedding: EmbeddingVector) -> BufferEntry {
        let keywords = extract_keywords(&sample);
        BufferEntry {
            id: self.next_entry_id,
            sample,
            embedding,
            keywords,
        }
    }

    /// Routes one anomalous sample. `embedding` is the embedding of its question.
    pub fn submit(&mut self, sample: Sample, embedding: EmbeddingVector) -> Result<AssignmentOutcome> {
        let tag = infer_structure(&sample);
        let entry = self.make_entry(sample, embedding);
        self.next_entry_id += 1;

        let stable = self.tags.get(&tag).is_some_and(|t| t.stable);
        if stable {
            let mut best: Option<(u64, f64)> = None;
            for c in self.clusters.values().filter(|c| c.tag == tag) {
                let g = match_score(&entry, &tag, c, &self.config)?;
                if best.is_none_or(|(_, bg)| g > bg) {
                    best = Some((c.id, g));
                }
            }
            if let Some((id, gamma)) = best {
                if gamma >= self.config.tau {
                    let cluster = self.clusters.get_mut(&id).expect("cluster exists");
                    cluster.members.push(entry);
                    cluster.refresh()?;
                    return Ok(AssignmentOutcome::Assigned { cluster_id: id, gamma });
                }
            }
        }

        let state = self.tags.entry(tag.clone()).or_default();
        state.buffer.push(entry);
        if state.buffer.len() < self.config.buffer_threshold {
            return Ok(AssignmentOutcome::Buffered {
                tag,
                buffer_size: state.buffer.len(),
            });
        }
        self.attempt(tag)
    }

    fn attempt(&mut self, tag: StructureTag) -> Result<AssignmentOutcome> {
        let state = self.tags.get_mut(&tag).expect("tag exists");
        let labels = clusterlib::hdbscan(&state.buffer.iter().map(|e| &e.embedding).collect::<Vec<_>>(), &self.config.hdbscan)?;
        let attempt = ClusterAttempt::from_entries(&state.buffer, labels)?;
        let check = check_stability(&attempt, state.previous.as_ref(), &self.config);
        if !check.stable {
            state.previous = Some(attempt);
            return Ok(AssignmentOutcome::UnstableDeferred { check });
        }
        state.previous = None;

        if attempt.labels.n_clusters == 0 {
            // consistently all noise: nothing here will ever form a cluster
            let moved = std::mem::take(&mut state.buffer);
            let n = moved.len();
            self.unassigned.extend(moved);
            return Ok(AssignmentOutcome::Unassigned { tag, moved: n });
        }

        let buffer = std::mem::take(&mut state.buffer);
        state.stable = true;
        let mut groups: Vec<Vec<BufferEntry>> = vec![Vec::new(); attempt.labels.n_clusters];
        for (entry, &label) in buffer.into_iter().zip(&attempt.labels.labels) {
            if label < 0 {
                state.buffer.push(entry);
            } else {
                groups[label as usize].push(entry);
            }
        }
        let mut created = Vec::new();
        for members in groups {
            let id = self.next_cluster_id;
            self.next_cluster_id += 1;
            self.clusters.insert(id, ClusterRecord::new(id, tag.clone(), members)?);
            created.push(id);
        }
        let merges = self.merge_similar_clusters(&tag)?;
        created.retain(|id| self.clusters.contains_key(id));
        Ok(AssignmentOutcome::ClustersCreated {
            cluster_ids: created,
            merges,
        })
    }

    /// Merges the most similar pair of same-tag clusters while its centroid
    /// cosine is at least `delta`. Only runs when the tag has at least
    /// `merge_min_clusters` clusters.
    pub fn merge_similar_clusters(&mut self, tag: &StructureTag) -> Result<Vec<MergeEvent>> {
        let mut events = Vec::new();
        let count = self.clusters.values().filter(|c| &c.tag == tag).count();
        if count < self.config.merge_min_clusters {
            return Ok(events);
        }
        loop {
            let ids: Vec<u64> = self.clusters.values().filter(|c| &c.tag == tag).map(|c| c.id).collect();
            let mut best: Option<(u64, u64, f64)> = None;
            for (i, &a) in ids.iter().enumerate() {
                for &b in &ids[i + 1..] {
                    let s = self.clusters[&a].centroid.dot(&self.clusters[&b].centroid);
                    if s >= self.config.delta && best.is_none_or(|(_, _, bs)| s > bs) {
                        best = Some((a, b, s));
                    }
                }
            }
            let Some((kept, absorbed, similarity)) = best else {
                break;
            };
            let gone = self.clusters.remove(&absorbed).expect("cluster exists");
            let target = self.clusters.get_mut(&kept).expect("cluster exists");
            target.members.extend(gone.members);
            target.refresh()?;
            target.dirty = true;
            events.push(MergeEvent {
                kept,
                absorbed,
                similarity,
            });
        }
        Ok(events)
    }

    /// Copies of all formal clusters, ordered by id.
    pub fn stable_clusters(&self) -> Vec<ClusterRecord> {
        self.clusters.values().cloned().collect()
    }

    pub fn clear_dirty(&mut self, cluster_id: u64) {
        if let Some(c) = self.clusters.get_mut(&cluster_id) {
            c.dirty = false;
        }
    }

    pub fn buffered(&self) -> usize {
        self.tags.values().map(|t| t.buffer.len()).sum()
    }

    pub fn metrics(&self) -> BufferMetrics {
        let dist = |a: &EmbeddingVector, b: &EmbeddingVector| clusterlib::hdbscan::euclidean(&a.values, &b.values);
        let (mut intra, mut n_members) = (0.0, 0usize);
        for c in self.clusters.values() {
            for m in &c.members {
                intra += dist(&m.embedding, &c.centroid);
                n_members += 1;
            }
        }
        let (mut inter, mut n_pairs) = (0.0, 0usize);
        let all: Vec<&ClusterRecord> = self.clusters.values().collect();
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                if a.tag == b.tag {
                    inter += dist(&a.centroid, &b.centroid);
                    n_pairs += 1;
                }
            }
        }
        BufferMetrics {
            n_clusters: self.clusters.len(),
            mean_intra_distance: if n_members > 0 { intra / n_members as f64 } else { 0.0 },
            mean_inter_centroid_distance: if n_pairs > 0 { inter / n_pairs as f64 } else { 0.0 },
            buffered: self.buffered(),
            unassigned: self.unassigned.len(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("buffer state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: BufferState =
            serde_json::from_str(text).map_err(|e| SageError::InvalidInput(format!("buffer snapshot: {e}")))?;
        state.config.validate()?;
        Ok(state)
    }

    /// SHA-256 of the compact JSON snapshot, hex encoded.
    pub fn state_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("buffer state serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
