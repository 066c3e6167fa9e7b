//! Sparse base models with elastic low-rank adapters.
//!
//! The pipeline prunes a small transformer with activation-aware scores,
//! trains a weight-sharing super-adapter on the frozen sparse base by
//! sampling a sub-adapter every step, and then searches the sub-adapter
//! space for good accuracy/size trade-offs.

pub mod adapters;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nls;
pub mod pruning;
pub mod search;

pub use adapters::{attach, merge, Scaling, SubAdapterConfig, SuperAdapter};
pub use error::{Result, ShearsError};
pub use linalg::{CsrMatrix, DenseMatrix, Rng};
pub use model::{Batch, Model, ModelConfig};
pub use pruning::{sparsify_model, PruneMethod, PruneReport};
