//! A universal search space of neural-network blocks.
//!
//! A block is a DAG of 27 elementary tensor operations whose output shape
//! equals its input shape; a network stacks different blocks in stages.
//! The crate provides the graph IR with shape inference and validation, an
//! exact analytic Params/FLOPs model, feasibility-preserving mutations and
//! budget-constrained search drivers, a reference interpreter, a
//! Fisher-spectrum proxy score, and the JSON/DOT interchange formats.

pub mod builders;
pub mod cost;
pub mod graph;
pub mod interp;
pub mod io;
pub mod mutation;
pub mod proxy;
pub mod search;
pub mod tensor;

pub use cost::{Budget, Cost};
pub use graph::{BlockGraph, NetworkSpec, NodeId, OpKind, Skeleton};
pub use tensor::{Rng, Shape, Tensor};
