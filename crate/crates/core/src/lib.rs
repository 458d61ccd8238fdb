//! Position-aware relation network for image-caption matching: object
//! features with boxes on one side, token sequences on the other, a learned
//! similarity between them.

pub mod checkpoint;
pub mod config;
pub mod cross_modal;
pub mod data;
pub mod error;
pub mod eval;
mod heads;
pub mod model;
pub mod numerics;
pub mod spatial;
pub mod text_pipeline;
pub mod training;
pub mod visual_relation;

pub use checkpoint::{AdamState, Checkpoint};
pub use config::{Precision, ScaleDim, TrainConfig};
pub use cross_modal::{AttendedImage, ScoreMatrix};
pub use data::{Caption, Dataset, FeatureSet, ImageRecord, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{AttentionRecord, Direction, RetrievalReport};
pub use model::ParNet;
pub use numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};
pub use spatial::BoxMatrix;
pub use text_pipeline::Vocabulary;
pub use training::{Batch, Trainer};
pub use visual_relation::ObjectSet;
