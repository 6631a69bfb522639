//! The search step: feasibility-preserving node addition and coupled
//! elimination under a Params/FLOPs budget.
//!
//! Dimension-changing and multi-output operations only enter a block as part
//! of an insertion [`Template`] that restores the shape of the edge it is
//! placed on:
//!
//! | template | nodes | coupled pair |
//! |---|---|---|
//! | `single` | one shape-preserving op | none |
//! | `chunk_concat2` / `chunk_concat3` | Chunk*k* feeding Concat*k* port by port | (Chunk, Concat) |
//! | `copy_add` / `copy_multiply` | Copy feeding both ports of Add / Multiply | (Copy, merge) |
//! | `expand_reduce` | ConvExp4 -> ConvRed4 | (ConvExp4, ConvRed4) |
//! | `pool_upsample` | GlobalAvg -> UpSample | (GlobalAvg, UpSample) |
//! | `attention` | ConvChunk3 -> (Q,K) Matmul1 -> Softmax -> Matmul2 <- V | (ConvChunk3, Matmul2) |
//!
//! Branches start empty; later steps populate them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{delta_cost_with, stage_entry_delta, Cost, CostDelta, CostError};
use crate::cost::Budget;
use crate::graph::{
    BlockGraph, Edge, NetworkSpec, NodeId, NodeShapes, OpKind, PortShapes, RuleViolation, ShapeMap, INPUT,
    OUTPUT,
};
use crate::tensor::{Rng, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Single(OpKind),
    ChunkConcat2,
    ChunkConcat3,
    CopyAdd,
    CopyMultiply,
    ExpandReduce,
    PoolUpSample,
    Attention,
}

struct TemplateSpec {
    ops: &'static [OpKind],
    /// (src, src_port, dst, dst_port) between template nodes.
    wiring: &'static [(usize, u8, usize, u8)],
}

impl Template {
    pub const ALL: [Template; 20] = [
        Template::Single(OpKind::Softmax),
        Template::Single(OpKind::Dropout),
        Template::Single(OpKind::MaxPool2d),
        Template::Single(OpKind::Mask),
        Template::Single(OpKind::Sigmoid),
        Template::Single(OpKind::Gelu),
        Template::Single(OpKind::Conv1),
        Template::Single(OpKind::Conv3),
        Template::Single(OpKind::ConvDepth3),
        Template::Single(OpKind::ConvDepth5),
        Template::Single(OpKind::BatchNorm),
        Template::Single(OpKind::LayerNorm),
        Template::Single(OpKind::RelPosBias),
        Template::ChunkConcat2,
        Template::ChunkConcat3,
        Template::CopyAdd,
        Template::CopyMultiply,
        Template::ExpandReduce,
        Template::PoolUpSample,
        Template::Attention,
    ];

    fn spec(self) -> TemplateSpec {
        use OpKind::*;
        macro_rules! single {
            ($($op:ident),*) => {
                match self {
                    $(Template::Single($op) => return TemplateSpec { ops: &[$op], wiring: &[] },)*
                    _ => {}
                }
            };
        }
        single!(
            Softmax, Dropout, MaxPool2d, Mask, Sigmoid, Gelu, Conv1, Conv3, ConvDepth3,
            ConvDepth5, BatchNorm, LayerNorm, RelPosBias
        );
        match self {
            Template::Single(op) => panic!("{op} cannot be inserted alone"),
            Template::ChunkConcat2 => TemplateSpec {
                ops: &[Chunk2, Concat2],
                wiring: &[(0, 0, 1, 0), (0, 1, 1, 1)],
            },
            Template::ChunkConcat3 => TemplateSpec {
                ops: &[Chunk3, Concat3],
                wiring: &[(0, 0, 1, 0), (0, 1, 1, 1), (0, 2, 1, 2)],
            },
            Template::CopyAdd => TemplateSpec {
                ops: &[Copy, Add],
                wiring: &[(0, 0, 1, 0), (0, 1, 1, 1)],
            },
            Template::CopyMultiply => TemplateSpec {
                ops: &[Copy, Multiply],
                wiring: &[(0, 0, 1, 0), (0, 1, 1, 1)],
            },
            Template::ExpandReduce => TemplateSpec {
                ops: &[ConvExp4, ConvRed4],
                wiring: &[(0, 0, 1, 0)],
            },
            Template::PoolUpSample => TemplateSpec {
                ops: &[GlobalAvg, UpSample],
                wiring: &[(0, 0, 1, 0)],
            },
            Template::Attention => TemplateSpec {
                ops: &[ConvChunk3, Matmul1, Softmax, Matmul2],
                wiring: &[(0, 0, 1, 0), (0, 1, 1, 1), (1, 0, 2, 0), (2, 0, 3, 0), (0, 2, 3, 1)],
            },
        }
    }

    pub fn ops(self) -> &'static [OpKind] {
        self.spec().ops
    }

    pub fn head_op(self) -> OpKind {
        self.ops()[0]
    }

    /// Shapes of every template node when placed on an edge of shape `at`;
    /// fails if any rule is violated or the exit shape differs from `at`.
    pub fn node_shapes(self, at: Shape) -> Result<Vec<(OpKind, NodeShapes)>, RuleViolation> {
        let spec = self.spec();
        let mut out: Vec<(OpKind, NodeShapes)> = Vec::with_capacity(spec.ops.len());
        for (i, &op) in spec.ops.iter().enumerate() {
            let mut inputs: PortShapes = std::iter::repeat_n(at, op.input_arity()).collect();
            for &(s, sp, d, dp) in spec.wiring {
                if d == i {
                    inputs[dp as usize] = out[s].1.outputs[sp as usize];
                }
            }
            let target = (op == OpKind::UpSample).then(|| (out[0].1.inputs[0].h, out[0].1.inputs[0].w));
            let outputs = op.output_shapes(&inputs, target)?;
            out.push((op, NodeShapes { inputs, outputs }));
        }
        let exit = out.last().expect("non-empty template").1.outputs[0];
        if exit != at {
            return Err(RuleViolation::Mismatch {
                expected: at,
                found: exit,
            });
        }
        Ok(out)
    }

    pub fn is_feasible_at(self, at: Shape) -> bool {
        self.node_shapes(at).is_ok()
    }

    /// Templates insertable on an edge of shape `at`.
    pub fn feasible_at(at: Shape) -> Vec<Template> {
        Template::ALL
            .into_iter()
            .filter(|t| t.is_feasible_at(at))
            .collect()
    }

    /// Insert into `block` on `edge`, returning the new node ids in template
    /// order. Does not check shapes.
    pub fn instantiate(self, block: &mut BlockGraph, edge: &Edge) -> Vec<NodeId> {
        let spec = self.spec();
        block.remove_edge(edge);
        let ids: Vec<NodeId> = spec.ops.iter().map(|&op| block.add_node(op)).collect();
        for &(s, sp, d, dp) in spec.wiring {
            block.connect(ids[s], sp, ids[d], dp);
        }
        block.connect(edge.src, edge.src_port, ids[0], 0);
        block.connect(*ids.last().unwrap(), 0, edge.dst, edge.dst_port);
        if ids.len() > 1 {
            block.couple(ids[0], *ids.last().unwrap());
        }
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditKind {
    /// Cut `edge` and splice `template` into it.
    Add { edge: Edge, template: Template },
    /// Remove `nodes` and bridge the single edge entering them to the single
    /// edge leaving them.
    Eliminate { nodes: BTreeSet<NodeId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub block: usize,
    /// Node after which to add, or the node selected for elimination.
    pub anchor: NodeId,
    /// Fingerprint of the target block when the edit was proposed.
    pub base: u64,
    #[serde(flatten)]
    pub kind: EditKind,
}

/// An accepted proposal and its network-level cost change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub edit: Edit,
    pub delta: CostDelta,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MutationError {
    #[error("edit targets block {0}, which does not exist")]
    NoSuchBlock(usize),
    #[error("block {block} changed since the edit was proposed")]
    StaleEdit { block: usize },
    #[error("edit is not applicable: {0}")]
    InfeasibleEdit(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchStepConfig {
    pub p_eliminate: f64,
    pub n_try: usize,
    pub budget: Budget,
}

impl SearchStepConfig {
    pub fn new(budget: Budget) -> Self {
        SearchStepConfig {
            p_eliminate: 0.3,
            n_try: 32,
            budget,
        }
    }
}

fn is_endpoint(block: &BlockGraph, v: NodeId) -> bool {
    block.couples().iter().any(|&(h, t)| h == v || t == v)
}

/// Nodes removed when `v` is eliminated: `{v}` for a shape-preserving
/// single-input single-output node, otherwise the innermost coupled pair
/// around `v` together with everything on paths between the pair.
pub fn minimal_coupled_subgraph(block: &BlockGraph, v: NodeId) -> BTreeSet<NodeId> {
    let Some(op) = block.op(v) else {
        return BTreeSet::new();
    };
    if op.is_simple() && !is_endpoint(block, v) {
        return [v].into_iter().collect();
    }
    block
        .enclosing_couples(v)
        .into_iter()
        .map(|(h, t)| block.region(h, t))
        .min_by_key(|r| r.len())
        .unwrap_or_else(|| [v].into_iter().collect())
}

/// The unique edges entering and leaving `nodes`, if the set is a
/// single-entry single-exit region.
pub fn region_boundary(block: &BlockGraph, nodes: &BTreeSet<NodeId>) -> Option<(Edge, Edge)> {
    let mut entry = None;
    let mut exit = None;
    for &n in nodes {
        for e in block.in_edges(n) {
            if !nodes.contains(&e.src) && entry.replace(e).is_some() {
                return None;
            }
        }
        for e in block.out_edges(n) {
            if !nodes.contains(&e.dst) && exit.replace(e).is_some() {
                return None;
            }
        }
    }
    Some((entry?, exit?))
}

/// Leading op of the edited block, derived from the edit payload.
fn leading_after(block: &BlockGraph, edit: &Edit) -> Option<OpKind> {
    let current = block.leading_node();
    match &edit.kind {
        EditKind::Add { edge, template } if edge.src == INPUT => Some(template.head_op()),
        EditKind::Eliminate { nodes } if current.is_some_and(|(id, _)| nodes.contains(&id)) => {
            let (_, exit) = region_boundary(block, nodes)?;
            if exit.dst == OUTPUT {
                None
            } else {
                block.op(exit.dst)
            }
        }
        _ => current.map(|(_, op)| op),
    }
}

/// Network-level cost change of `edit`, including any change in how the
/// stage projection is realized when the block's first node changes.
pub fn network_delta(net: &NetworkSpec, shapes: &ShapeMap, edit: &Edit) -> Result<CostDelta, CostError> {
    let block = &net.blocks[edit.block];
    let mut delta = delta_cost_with(block, shapes, edit)?;
    if let Some(from) = net.projection_source(edit.block) {
        let shape = block.input_shape();
        let before = stage_entry_delta(Some(from), block.leading_node().map(|(_, op)| op), shape)?;
        let after = stage_entry_delta(Some(from), leading_after(block, edit), shape)?;
        delta = delta + after + before.neg();
    }
    Ok(delta)
}

/// One search step: up to `n_try` attempts, each drawing a block, a node and
/// `u ~ U(0,1)`. Below `p_eliminate` the node's coupled subgraph is proposed
/// for removal, otherwise a uniformly drawn template is proposed after it
/// (an infeasible draw uses up the attempt). The first proposal that keeps the network inside the budget is
/// returned; `None` means every attempt failed.
///
/// `current` must be the network's total cost. The virtual input can anchor
/// additions but is never eliminated.
pub fn propose_step(
    net: &NetworkSpec,
    current: Cost,
    cfg: &SearchStepConfig,
    rng: &mut Rng,
) -> Result<Option<Proposal>, CostError> {
    propose_step_cached(net, current, cfg, rng, &mut vec![None; net.blocks.len()])
}

/// [`propose_step`] reading and filling a per-block shape cache, which must
/// have one entry per block and hold only shapes of the current blocks.
pub fn propose_step_cached(
    net: &NetworkSpec,
    current: Cost,
    cfg: &SearchStepConfig,
    rng: &mut Rng,
    shape_cache: &mut [Option<ShapeMap>],
) -> Result<Option<Proposal>, CostError> {
    if net.blocks.is_empty() {
        return Ok(None);
    }
    assert_eq!(shape_cache.len(), net.blocks.len(), "one cache slot per block");
    for _ in 0..cfg.n_try {
        let b = rng.below(net.blocks.len());
        let block = &net.blocks[b];
        let k = rng.below(block.len() + 1);
        let v = if k == 0 {
            INPUT
        } else {
            *block.nodes().keys().nth(k - 1).expect("index below len")
        };
        let u = rng.uniform();
        if shape_cache[b].is_none() {
            shape_cache[b] = Some(block.infer_shapes()?);
        }
        let shapes = shape_cache[b].as_ref().unwrap();
        let kind = if u < cfg.p_eliminate {
            if v == INPUT {
                continue;
            }
            let nodes = minimal_coupled_subgraph(block, v);
            match region_boundary(block, &nodes) {
                Some((entry, exit)) if shapes.edge_shape(&entry) == shapes.edge_shape(&exit) => {}
                _ => continue,
            }
            EditKind::Eliminate { nodes }
        } else {
            let outs = block.out_edges(v);
            let edge = outs[rng.below(outs.len())];
            let template = Template::ALL[rng.below(Template::ALL.len())];
            if !template.is_feasible_at(shapes.edge_shape(&edge)) {
                continue;
            }
            EditKind::Add { edge, template }
        };
        let mut edit = Edit {
            block: b,
            anchor: v,
            base: 0,
            kind,
        };
        let delta = network_delta(net, shapes, &edit)?;
        let Ok(next) = current.apply(delta) else { continue };
        if cfg.budget.contains(next) {
            edit.base = block.fingerprint();
            return Ok(Some(Proposal { edit, delta }));
        }
    }
    Ok(None)
}

/// Apply `edit` to a copy of `net`. The edited block is re-checked for shape
/// closure; the original is untouched.
pub fn apply(net: &NetworkSpec, edit: &Edit) -> Result<NetworkSpec, MutationError> {
    let mut out = net.clone();
    apply_in_place(&mut out, edit)?;
    Ok(out)
}

/// [`apply`] without copying the untouched blocks. Returns the shapes of the
/// edited block; on error `net` is unchanged.
pub fn apply_in_place(net: &mut NetworkSpec, edit: &Edit) -> Result<ShapeMap, MutationError> {
    apply_in_place_cached(net, edit, None)
}

/// [`apply_in_place`] given the current shapes of the target block. Edits
/// preserve the shape of the edge they act on, so only the inserted or
/// removed nodes change the map.
pub fn apply_in_place_cached(
    net: &mut NetworkSpec,
    edit: &Edit,
    shapes: Option<ShapeMap>,
) -> Result<ShapeMap, MutationError> {
    let block = net
        .blocks
        .get(edit.block)
        .ok_or(MutationError::NoSuchBlock(edit.block))?;
    if block.fingerprint() != edit.base {
        return Err(MutationError::StaleEdit { block: edit.block });
    }
    let infeasible = |e: &dyn std::fmt::Display| MutationError::InfeasibleEdit(e.to_string());
    match &edit.kind {
        EditKind::Add { edge, template } => {
            if !block.has_edge(edge) {
                return Err(MutationError::InfeasibleEdit(format!("edge {edge} not in block")));
            }
            if let Some(mut shapes) = shapes {
                let at = shapes.edge_shape(edge);
                let placed = template
                    .node_shapes(at)
                    .map_err(|v| MutationError::InfeasibleEdit(format!("{template:?} at {at}: {v:?}")))?;
                let ids = template.instantiate(&mut net.blocks[edit.block], edge);
                shapes.nodes.extend(ids.into_iter().zip(placed).map(|(id, (_, ns))| (id, ns)));
                return Ok(shapes);
            }
            let mut edited = block.clone();
            template.instantiate(&mut edited, edge);
            finish(net, edit.block, edited)
        }
        EditKind::Eliminate { nodes } => {
            if nodes.is_empty() || nodes.iter().any(|n| block.op(*n).is_none()) {
                return Err(MutationError::InfeasibleEdit("eliminated node missing".into()));
            }
            let (entry, exit) = region_boundary(block, nodes).ok_or_else(|| {
                MutationError::InfeasibleEdit("eliminated set is not single-entry single-exit".into())
            })?;
            let splits_couple = block
                .couples()
                .iter()
                .any(|(h, t)| nodes.contains(h) != nodes.contains(t));
            match shapes {
                Some(mut shapes) if !splits_couple => {
                    let (from, to) = (shapes.edge_shape(&entry), shapes.edge_shape(&exit));
                    if from != to {
                        return Err(infeasible(&format!("removal joins {from} to {to}")));
                    }
                    let b = &mut net.blocks[edit.block];
                    b.remove_nodes(nodes);
                    b.connect(entry.src, entry.src_port, exit.dst, exit.dst_port);
                    shapes.nodes.retain(|id, _| !nodes.contains(id));
                    Ok(shapes)
                }
                _ => {
                    let mut edited = block.clone();
                    edited.remove_nodes(nodes);
                    edited.connect(entry.src, entry.src_port, exit.dst, exit.dst_port);
                    finish(net, edit.block, edited)
                }
            }
        }
    }
}

fn finish(net: &mut NetworkSpec, index: usize, edited: BlockGraph) -> Result<ShapeMap, MutationError> {
    let shapes = edited
        .infer_shapes()
        .map_err(|e| MutationError::InfeasibleEdit(e.to_string()))?;
    if shapes.output != edited.input_shape() {
        return Err(MutationError::InfeasibleEdit(format!(
            "block output {} no longer matches input {}",
            shapes.output,
            edited.input_shape()
        )));
    }
    net.blocks[index] = edited;
    Ok(shapes)
}
