use std::fmt;

use super::block::{BlockGraph, Dense, NodeId, ShapeError, ShapeMap, INPUT, OUTPUT};
use super::op::OpKind;
use crate::tensor::{exact_sqrt, Shape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownNode { node: NodeId },
    PortOutOfRange { node: NodeId, port: u8, output: bool },
    UnconnectedPort { node: NodeId, port: u8, output: bool },
    MultiplyConnectedPort { node: NodeId, port: u8, output: bool },
    Cycle,
    Shape(ShapeError),
    BlockOutputShape { expected: Shape, found: Shape },
    CoupleNotLive { head: NodeId, tail: NodeId },
    CoupleWithoutPath { head: NodeId, tail: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = |o: bool| if o { "output" } else { "input" };
        match self {
            Violation::UnknownNode { node } => write!(f, "edge references unknown node {node}"),
            Violation::PortOutOfRange { node, port, output } => {
                write!(f, "{node}: {} port {port} out of range", dir(*output))
            }
            Violation::UnconnectedPort { node, port, output } => {
                write!(f, "{node}: {} port {port} is dangling", dir(*output))
            }
            Violation::MultiplyConnectedPort { node, port, output } => {
                write!(f, "{node}: {} port {port} has more than one edge", dir(*output))
            }
            Violation::Cycle => f.write_str("graph contains a cycle"),
            Violation::Shape(e) => write!(f, "{e}"),
            Violation::BlockOutputShape { expected, found } => {
                write!(f, "block output shape {found} differs from input shape {expected}")
            }
            Violation::CoupleNotLive { head, tail } => {
                write!(f, "couple ({head}, {tail}) names a missing node")
            }
            Violation::CoupleWithoutPath { head, tail } => {
                write!(f, "couple ({head}, {tail}) has no directed path")
            }
        }
    }
}

/// All invariant violations of a block; empty iff the block is feasible.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn arity(d: &Dense, i: usize) -> Option<(usize, usize)> {
    match d.ids[i] {
        INPUT => Some((0, 1)),
        OUTPUT => Some((1, 0)),
        _ => d.ops[i].map(|op| (op.input_arity(), op.output_arity())),
    }
}

fn structural(d: &Dense, out: &mut Vec<Violation>) {
    let mut in_count = vec![[0u32; 3]; d.len()];
    let mut out_count = vec![[0u32; 3]; d.len()];
    for i in 0..d.len() {
        for &(sp, j, dp) in d.succ(i) {
            for (k, port, output) in [(i, sp, true), (j, dp, false)] {
                let node = d.ids[k];
                match arity(d, k) {
                    Some((ni, no)) => {
                        let limit = if output { no } else { ni };
                        if port as usize >= limit {
                            out.push(Violation::PortOutOfRange { node, port, output });
                        } else if output {
                            out_count[k][port as usize] += 1;
                        } else {
                            in_count[k][port as usize] += 1;
                        }
                    }
                    None => out.push(Violation::UnknownNode { node }),
                }
            }
        }
    }
    for (i, &node) in d.ids.iter().enumerate() {
        let Some((ni, no)) = arity(d, i) else { continue };
        for (n, counts, output) in [(ni, &in_count[i], false), (no, &out_count[i], true)] {
            for port in 0..n as u8 {
                match counts[port as usize] {
                    0 => out.push(Violation::UnconnectedPort { node, port, output }),
                    1 => {}
                    _ => out.push(Violation::MultiplyConnectedPort { node, port, output }),
                }
            }
        }
    }
}

/// Check every block invariant and collect all violations.
pub fn validate(block: &BlockGraph) -> ValidationReport {
    check(block).0
}

/// Shapes of a feasible block, or every violation of an infeasible one.
pub fn validated_shapes(block: &BlockGraph) -> Result<ShapeMap, ValidationReport> {
    match check(block) {
        (r, Some(shapes)) if r.is_ok() => Ok(shapes),
        (r, _) => Err(r),
    }
}

fn check(block: &BlockGraph) -> (ValidationReport, Option<ShapeMap>) {
    let mut v = Vec::new();
    let d = Dense::new(block);
    structural(&d, &mut v);
    let order = d.kahn().ok();
    if order.is_none() {
        v.push(Violation::Cycle);
    }
    let pos = order.as_ref().map(|o| {
        let mut pos = vec![0; d.len()];
        for (k, &i) in o.iter().enumerate() {
            pos[i] = k;
        }
        pos
    });
    let mut seen = vec![0u32; d.len()];
    for (stamp, &(head, tail)) in (1..).zip(block.couples()) {
        if !block.contains(head) || !block.contains(tail) || head.is_virtual() || tail.is_virtual()
        {
            v.push(Violation::CoupleNotLive { head, tail });
            continue;
        }
        let linked = match (&pos, d.index(head), d.index(tail)) {
            (Some(pos), Some(h), Some(t)) => d.reaches(h, t, pos, &mut seen, stamp),
            _ => block.reaches(head, tail),
        };
        if !linked {
            v.push(Violation::CoupleWithoutPath { head, tail });
        }
    }
    let mut shapes = None;
    if let (true, Some(order)) = (v.is_empty(), &order) {
        match block.infer_on(&d, order) {
            Ok(s) => {
                if s.output != block.input_shape() {
                    v.push(Violation::BlockOutputShape {
                        expected: block.input_shape(),
                        found: s.output,
                    });
                }
                shapes = Some(s);
            }
            Err(e) => v.push(Violation::Shape(e)),
        }
    }
    (ValidationReport { violations: v }, shapes)
}

/// A breach of the insertion rules the search must never produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleBreach {
    /// RelPosBias where the spatial dims have no integer square root.
    RelPosBiasNonSquare(NodeId),
    /// Chunk2/Chunk3 on an indivisible channel count.
    ChunkIndivisible(NodeId),
    /// ConvRed4 on a channel count not divisible by 4.
    ReduceIndivisible(NodeId),
    /// Dimension-changing or multi-output node outside any coupled pair.
    Uncoupled(NodeId),
}

/// Check the four insertion rules on a shape-annotated block.
pub fn check_search_rules(block: &BlockGraph, shapes: &ShapeMap) -> Vec<RuleBreach> {
    let mut out = Vec::new();
    let endpoints: std::collections::BTreeSet<NodeId> =
        block.couples().iter().flat_map(|(h, t)| [*h, *t]).collect();
    let mut dense = None;
    let mut aligned = shapes.nodes.iter();
    for (&id, &op) in block.nodes() {
        let x = match aligned.next() {
            Some((k, io)) if *k == id => io.inputs[0],
            _ => shapes.input_shape_of(id),
        };
        match op {
            OpKind::RelPosBias if exact_sqrt(x.h).is_none() || exact_sqrt(x.w).is_none() => {
                out.push(RuleBreach::RelPosBiasNonSquare(id))
            }
            OpKind::Chunk2 if x.c % 2 != 0 => out.push(RuleBreach::ChunkIndivisible(id)),
            OpKind::Chunk3 if x.c % 3 != 0 => out.push(RuleBreach::ChunkIndivisible(id)),
            OpKind::ConvRed4 if x.c % 4 != 0 => out.push(RuleBreach::ReduceIndivisible(id)),
            _ => {}
        }
        if !op.is_simple() && !endpoints.contains(&id) {
            let enclosed = op == OpKind::Matmul1 && {
                let d = dense.get_or_insert_with(|| Dense::new(block));
                d.enclosing_couples(block, id)
                    .any(|(h, _)| block.op(h) == Some(OpKind::ConvChunk3))
            };
            if !enclosed {
                out.push(RuleBreach::Uncoupled(id));
            }
        }
    }
    out
}
