//! Partially dynamic networks at desk scale: dynamic convolution and
//! mixture-of-experts layers whose parameters are split into a dynamic and a
//! static mode, trained, partitioned, and compacted — all on a deterministic
//! single-threaded tape.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod model;
pub mod error;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod optim;
pub mod pad;
pub mod params;
pub mod partition;
pub mod rng;
pub mod tensor;

pub use error::{PadError, Result};
