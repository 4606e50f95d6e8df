//! Multi-block feature fusion and contrastive clustering toolkit.
//!
//! The pipeline fuses sample-aligned feature blocks, learns per-sample
//! embeddings with a shared-weight multi-head attention encoder trained on
//! two augmented views (decoupled instance contrast plus cluster-level
//! contrast), clusters the embeddings with k-means and scores the result with
//! C-index, Silhouette, Davies-Bouldin and (when ground truth exists) ARI.

pub mod clustering;
pub mod data_io;
pub mod error;
pub mod io_util;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod smae;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use nn::Matrix;
