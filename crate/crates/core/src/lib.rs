//! Plug-and-play depth refinement.
//!
//! A frozen depth network is split at a tap into a front and a rear segment.
//! At inference time the tap's feature map is iteratively nudged so that the
//! rear segment's prediction agrees with a handful of sparse depth
//! observations, without touching the network weights.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod pnm;
pub mod refine;
pub mod rng;
pub mod scene;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use loss::LossKind;
pub use tensor::Tensor;
