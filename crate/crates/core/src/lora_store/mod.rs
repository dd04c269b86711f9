//! Cluster-aware adapter search and the adapter pool.

pub mod config;
pub mod pool;
pub mod search;

pub use config::{AdapterConfig, ParamSpace};
pub use pool::{load_pool, save_pool, select_adapter, AdapterPool, ClusterAdapters, PooledAdapter};
pub use search::{
    local_search, rank_records, run_clo, run_clo_on_samples, sample_initial_configs, split_train_val, CloResult,
    CloSummary, Phase, TrainRecord,
};
