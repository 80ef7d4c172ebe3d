//! Instruction-aware universal multimodal retrieval.
//!
//! A deterministic hashing featurizer feeds a linear score-fusion encoder
//! trained with InfoNCE. Modality-aware hard negatives are mined from the
//! model's own rankings, retrieval is exact inner-product kNN, and an
//! optional pointwise reranker rescores the head of each list.

pub mod encoder;
pub mod error;
pub mod featurizer;
pub mod index;
pub mod ingest;
pub mod metrics;
pub mod miner;
pub mod reranker;
pub mod trainer;
pub mod types;

pub use encoder::{
    encode_candidate, encode_corpus, encode_query, EncodeOptions, Features, FusionParams,
};
pub use error::{Error, Result};
pub use featurizer::{FeaturizerConfig, SparseVec};
pub use index::{SearchHit, VectorIndex};
pub use ingest::Query;
pub use metrics::{evaluate_run, RecallConvention, RunReport};
pub use miner::{MinedNegatives, MinerConfig, MiningQuery};
pub use reranker::{rerank, RerankConfig, Scorer, ScorerResponse};
pub use trainer::{train, train_continual, Stage, TrainConfig, TrainExample};
pub use types::{EmbeddingRecord, Item, MetricKind, Modality, Qrels, TaskSpec};
