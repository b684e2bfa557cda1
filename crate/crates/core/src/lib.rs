//! Prototype dictionary learning for unsupervised domain-adaptive retrieval.
//!
//! Labelled source data and unlabelled target data are trained jointly with
//! a category-level contrastive loss: every query is compared against one
//! prototype per source class and per target cluster. Target clusters come
//! from DBSCAN over k-reciprocal Jaccard distances and are recomputed every
//! epoch, together with the prototypes themselves.

pub mod clustering;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod format;
pub mod loss;
pub mod optim;
pub mod prototype;
pub mod trainer;

pub use clustering::{ClusterAssignment, DistanceMatrix, JaccardMode};
pub use data::{Dataset, Domain, Sample, SynthConfig, UnlabeledView};
pub use encoder::{EncoderParams, EncoderShape, EnhanceConfig, FeatureMap};
pub use error::{PdlError, Result};
pub use eval::{Meta, RetrievalResult};
pub use format::EmbeddingTable;
pub use loss::LossOutput;
pub use optim::{AdamState, LrSchedule};
pub use prototype::{Prototype, PrototypeDictionary};
pub use trainer::{LossKind, TrainConfig, TrainOutcome, Trainer};
