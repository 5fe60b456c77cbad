//! Parameterized layers, optimizer and EMA tracking.

mod attention;
mod knn;
mod optim;
mod params;

pub use attention::{AttentionTrace, LocalAttentionBlock};
pub use knn::{knn_search, KnnIndex};
pub use optim::{AdamWConfig, AdamWState, EmaTracker};
pub use params::{init_linear, linear, Bound, ParamStore};
