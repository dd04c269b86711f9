//! Persistent per-cluster adapter store.
//!
//! Layout: `<root>/cluster_<id>/manifest.json` plus one binary per adapted
//! layer, `adapter_<n>_<layer>.bin`, where `n` is the record's rank within
//! the cluster.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::search::TrainRecord;
use crate::clusterlib::{EmbeddingSource, EmbeddingVector};
use crate::error::{Result, SageError};
use crate::learner::{LayerAdapter, LowRankAdapter};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_REUSE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PooledAdapter {
    pub record: TrainRecord,
    pub adapter: LowRankAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAdapters {
    pub cluster_id: u64,
    pub centroid: EmbeddingVector,
    /// Position in registration order across the pool.
    pub created_seq: u64,
    /// Ranked, at most three.
    pub records: Vec<PooledAdapter>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterPool {
    pub clusters: BTreeMap<u64, ClusterAdapters>,
}

impl AdapterPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Replaces the cluster's adapters with the newest search winners.
    pub fn register(&mut self, cluster_id: u64, centroid: EmbeddingVector, top: Vec<(TrainRecord, LowRankAdapter)>) {
        if top.is_empty() {
            return;
        }
        let records = top
            .into_iter()
            .take(super::search::KEEP_TOP)
            .map(|(record, adapter)| PooledAdapter { record, adapter })
            .collect();
        let created_seq = self.clusters.values().map(|c| c.created_seq + 1).max().unwrap_or(0);
        self.clusters.insert(
            cluster_id,
            ClusterAdapters {
                cluster_id,
                centroid,
                created_seq,
                records,
            },
        );
    }

    /// Refreshes the stored centroid of a cluster whose membership changed.
    pub fn update_centroid(&mut self, cluster_id: u64, centroid: EmbeddingVector) {
        if let Some(c) = self.clusters.get_mut(&cluster_id) {
            c.centroid = centroid;
        }
    }

    pub fn find(&self, adapter_id: &str) -> Option<&PooledAdapter> {
        self.clusters
            .values()
            .flat_map(|c| c.records.iter())
            .find(|r| r.record.adapter_id == adapter_id)
    }
}

/// Nearest-centroid lookup. Returns the cluster id and its best adapter, or
/// `None` when the pool is empty or no centroid reaches `threshold`.
pub fn select_adapter<'a>(embedding: &EmbeddingVector, pool: &'a AdapterPool, threshold: f64) -> Option<(u64, &'a PooledAdapter)> {
    let mut best: Option<(&ClusterAdapters, f64)> = None;
    for c in pool.clusters.values() {
        if c.records.is_empty() || c.centroid.dim() != embedding.dim() {
            continue;
        }
        let s = c.centroid.dot(embedding);
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((c, s));
        }
    }
    let (c, s) = best?;
    if s < threshold {
        return None;
    }
    Some((c.cluster_id, &c.records[0]))
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    file: String,
    rank: usize,
    d_in: usize,
    d_out: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordEntry {
    #[serde(flatten)]
    record: TrainRecord,
    scaling: f64,
    dropout: f64,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    cluster_id: u64,
    created_seq: u64,
    centroid: Vec<f64>,
    centroid_source: EmbeddingSource,
    records: Vec<RecordEntry>,
}

fn cluster_dir(root: &Path, id: u64) -> PathBuf {
    root.join(format!("cluster_{id}"))
}

pub fn save_pool(pool: &AdapterPool, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| SageError::io(root, e))?;
    for c in pool.clusters.values() {
        let dir = cluster_dir(root, c.cluster_id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| SageError::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| SageError::io(&dir, e))?;
        let mut records = Vec::new();
        for (n, p) in c.records.iter().enumerate() {
            let mut layers = Vec::new();
            for l in &p.adapter.layers {
                let file = format!("adapter_{n}_{}.bin", l.name);
                l.write(&dir.join(&file))?;
                layers.push(LayerEntry {
                    name: l.name.clone(),
                    file,
                    rank: l.rank,
                    d_in: l.d_in,
                    d_out: l.d_out,
                });
            }
            records.push(RecordEntry {
                record: p.record.clone(),
                scaling: p.adapter.scaling,
                dropout: p.adapter.dropout,
                layers,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            cluster_id: c.cluster_id,
            created_seq: c.created_seq,
            centroid: c.centroid.values.clone(),
            centroid_source: c.centroid.source,
            records,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| SageError::io(&path, e))?;
    }
    Ok(())
}

pub fn load_pool(root: &Path) -> Result<AdapterPool> {
    let mut pool = AdapterPool::new();
    if !root.exists() {
        return Err(SageError::load(root, "root", "pool directory does not exist"));
    }
    let entries = std::fs::read_dir(root).map_err(|e| SageError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| SageError::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(id_text) = name.strip_prefix("cluster_") else {
            continue;
        };
        let dir = entry.path();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| SageError::load(&path, "manifest", e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| SageError::load(&path, "manifest", e))?;
        for field in ["version", "cluster_id", "created_seq", "centroid", "centroid_source", "records"] {
            if value.get(field).is_none() {
                return Err(SageError::load(&path, field, "missing"));
            }
        }
        let m: Manifest = serde_json::from_value(value).map_err(|e| SageError::load(&path, "manifest", e))?;
        if m.version != MANIFEST_VERSION {
            return Err(SageError::load(&path, "version", format!("unsupported version {}", m.version)));
        }
        if id_text.parse::<u64>().ok() != Some(m.cluster_id) {
            return Err(SageError::load(&path, "cluster_id", format!("does not match directory {name}")));
        }
        let mut records = Vec::new();
        for r in m.records {
            let mut layers = Vec::new();
            for l in &r.layers {
                let layer = LayerAdapter::read(&l.name, &dir.join(&l.file))?;
                if (layer.rank, layer.d_in, layer.d_out) != (l.rank, l.d_in, l.d_out) {
                    return Err(SageError::load(&path, "layers", format!("{} shape differs from its binary", l.file)));
                }
                layers.push(layer);
            }
            records.push(PooledAdapter {
                record: r.record,
                adapter: LowRankAdapter {
                    layers,
                    scaling: r.scaling,
                    dropout: r.dropout,
                },
            });
        }
        pool.clusters.insert(
            m.cluster_id,
            ClusterAdapters {
                cluster_id: m.cluster_id,
                centroid: EmbeddingVector {
                    values: m.centroid,
                    source: m.centroid_source,
                },
                created_seq: m.created_seq,
                records,
            },
        );
    }
    Ok(pool)
}
