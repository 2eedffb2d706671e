//! Representation learning with ranked class similarities.
//!
//! The core idea: a supervised contrastive loss generalized to user-defined
//! class-similarity rankings. Each anchor pulls in its own class hardest,
//! then each ranked class set at a progressively softer temperature, with
//! already-handled ranks removed from the denominator as the level deepens.
//! The crate carries everything needed to study that loss at desk scale: a
//! small reverse-mode autodiff engine, ranking-table parsing, models, data
//! synthesis and ingestion, probes, OOD protocols, and run pipelines.

pub mod conv;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod ranking;
pub mod report;
pub mod run;
pub mod svg;
pub mod tensor;

pub use loss::{
    cosine_similarity, ranked_contrastive_loss, ranked_loss_with_reference, softmax_ce_loss,
    supcon_loss, LossBreakdown, LossError, SimilarityMatrix,
};
pub use ranking::{Rank, RankingError, RankingTable, TemperatureSchedule};
pub use tensor::{Tensor, TensorError};
