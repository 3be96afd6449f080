//! Training-light adaptation of frozen dual encoders for open-set multi-view
//! object retrieval: additive-bias low-rank adapters, a contrastive
//! objective against text-encoded class weights, text/visual fusion and
//! retrieval metrics.

pub mod ablora;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod numcore;
pub mod pipeline;
pub mod retrieval;
pub mod training;

pub use error::{DacError, Result};
