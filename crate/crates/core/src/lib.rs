//! Shared-encoder multi-task perception models on a small static-graph
//! autodiff core: layers, model assembly, losses and their scalarization,
//! metrics, synthetic driving scenes and a deterministic trainer.

// `!(x > 0.0)` guards are written that way to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod architectures;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod io_util;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Feed, Graph, GraphBuilder, NodeId, ParamStore};
pub use tensor::{Precision, Real, Tensor};
