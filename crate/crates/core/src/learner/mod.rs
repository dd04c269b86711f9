//! The learner contract and the reference toy model.

pub mod adapter;
pub mod model;
pub mod tasks;

use serde::{Deserialize, Serialize};

pub use adapter::{LayerAdapter, LowRankAdapter};
pub use model::{featurize, pretrain_base, PretrainConfig, ToyModel};
pub use tasks::{gen_atomic_tasks, gen_id_tasks, gen_tasks, TaskKind, TaskSample, TemplateFamily};

use crate::clusterlib::Embedder;
use crate::error::Result;
use crate::lora_store::AdapterConfig;
use crate::sample::Sample;
use crate::trigger::PredictionOutcome;

/// Greedy decoding result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    /// One vector of vocabulary logits per decoded step, END included.
    pub step_logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneOutcome {
    pub adapter: LowRankAdapter,
    pub initial_loss: f64,
    pub final_train_loss: f64,
    /// Training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Exact-match rate.
    pub accuracy: f64,
    /// Mean token cross-entropy under teacher forcing.
    pub ce_loss: f64,
}

/// What the pipeline needs from a model it adapts.
pub trait Learner: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn generate(&self, adapter: Option<&LowRankAdapter>, question: &str) -> Result<Generation>;

    /// Trains a fresh adapter; base weights are never modified.
    fn fine_tune(&self, samples: &[Sample], config: &AdapterConfig) -> Result<FineTuneOutcome>;

    fn evaluate(&self, adapter: Option<&LowRankAdapter>, samples: &[Sample]) -> Evaluation;

    /// Digest of the frozen base weights.
    fn checksum(&self) -> String;
}

/// Generates an answer and packages everything the trigger looks at. The
/// gold answer is only embedded, never shown to the model.
pub fn predict(
    learner: &dyn Learner,
    embedder: &dyn Embedder,
    adapter: Option<&LowRankAdapter>,
    sample: &Sample,
) -> Result<PredictionOutcome> {
    let g = learner.generate(adapter, &sample.question)?;
    let mut emb = embedder.embed_batch(&[g.text.as_str(), sample.real_answer.as_str()]);
    let gold_embedding = emb.pop().expect("two embeddings");
    let pred_embedding = emb.pop().expect("two embeddings");
    Ok(PredictionOutcome {
        predicted_text: g.text,
        gold_text: sample.real_answer.clone(),
        step_logits: g.step_logits,
        pred_embedding,
        gold_embedding,
    })
}
