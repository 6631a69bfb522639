//! Block graphs, shape inference, validation and network assembly.

mod block;
mod network;
mod op;
mod validate;

pub use block::{
    BlockGraph, CanonicalBlock, Edge, NodeId, NodeShapes, ShapeError, ShapeMap, INPUT, OUTPUT,
};
pub use network::{
    assemble_network, fusion_for, halve, ExecutablePlan, FusedProjection, NetworkError,
    NetworkSpec, PlanStep, Skeleton, StageSpec,
};
pub use op::{OpKind, PortShapes, RuleViolation, MASK_BAND};
pub use validate::{
    check_search_rules, validate, validated_shapes, RuleBreach, ValidationReport, Violation,
};
