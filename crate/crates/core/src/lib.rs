//! Recurrent cells from the mGRUIP family (GRU, mGRU, mGRUIP and mGRUIP with
//! temporal-encoding / temporal-convolution future-context modules), stacked
//! into trainable networks with input splicing, mixed frame rates, and an
//! output delay; plus parameter/latency accounting and a frame-incremental
//! streaming inference engine with bounded lookahead.

pub mod cells;
pub mod config;
pub mod context;
pub mod error;
pub mod model_io;
pub mod network;
pub mod streaming;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{BatchNormState, BnMode, Real, TensorBuffer};
