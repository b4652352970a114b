//! Motivation-aware personalized product search.
//!
//! Search sessions are ranked with a user representation that fuses the
//! current query, prior searches and prior consultations with an assistant.
//! Text is encoded from frozen token embeddings through a mixture of
//! attention-pooling experts, and training combines a personalized ranking
//! loss with a token-item contrastive alignment loss.

pub mod align_general;
pub mod align_personal;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod consult_rules;
pub mod corpus;
pub mod embed_store;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod model;
pub mod moae;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use corpus::{InteractionCorpus, ItemIdx, SearchSession, Consultation, UserIdx};
pub use embed_store::TokenEmbeddingStore;
pub use error::{MapsError, Result};
pub use evaluator::{EvalReport, SessionScorer};
pub use model::{MapsModel, ModelConfig};
pub use tensor::Mat;
pub use trainer::{TrainConfig, TrainOutcome};
