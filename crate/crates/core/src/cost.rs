//! Analytic Params/FLOPs accounting.
//!
//! FLOPs count every multiplication and every addition of one forward pass
//! at the node's inferred shape, so totals are higher than what runtime
//! profilers report. All arithmetic is checked; overflow is an error.
//!
//! Per-operation rules, with `(C,H,W)` the input shape:
//!
//! | op | Params | FLOPs |
//! |---|---|---|
//! | Softmax | 0 | `CH(3W-1)` |
//! | Dropout, Mask | 0 | `CHW` |
//! | MaxPool2d | 0 | `9CHW` |
//! | Sigmoid, GELU | 0 | `3CHW` |
//! | Conv1 | `C(C+1)` | `2C²HW` |
//! | Conv3 | `C(9C+1)` | `18C²HW` |
//! | ConvDepth3 / ConvDepth5 | `9C` / `25C` | `18CHW` / `50CHW` |
//! | BatchNorm, LayerNorm | `2C` | `2CHW` |
//! | RelPosBias | `round(2(√H-½)(√W-½))`, halves rounded up | `CHW` |
//! | Chunk2, Chunk3, Copy, Concat2, Concat3 | 0 | 0 |
//! | Add | 0 | `CHW` |
//! | Multiply | 0 | `4CHW` |
//! | ConvChunk3 | `3C(C+1)` | `6C²HW` |
//! | ConvExp4 | `4C(C+1)` | `8C²HW` |
//! | ConvRed4 | `4c(c+1)`, `c = C/4` | `8c²HW` |
//! | Matmul1 | 0 | `2CH²W²` |
//! | Matmul2 | 0 | `2CH²W²`, `(C,H,W)` the second input |
//! | GlobalAvg | 0 | `CHW` |
//! | UpSample | 0 | `CHW`, `(H,W)` the restored size |
//!
//! The ConvRed4 row is written in the reduced width `c`, the only reading in
//! which the FLOPs equal those of a `4c -> c` pointwise convolution.
//!
//! Outside blocks: a stride-2 3x3 stem convolution costs `Co(9Ci+1)` params
//! and `18·Ci·Co·H'W'` FLOPs at output size `H'W'`, plus `3·Co·H'W'` for its
//! GELU; a stride-2 max-pool costs `9·C·H'W'`; a 1x1 projection costs
//! `Co(Ci+1)` and `2·Ci·Co·HW`; the head costs `CHW` (pooling) and
//! `K(C+1)` params with `2CK` FLOPs (fully connected).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    assemble_network, BlockGraph, FusedProjection, NetworkError, NetworkSpec, NodeId,
    NodeShapes, OpKind, PlanStep, ShapeError, ShapeMap, ValidationReport,
};
use crate::mutation::{Edit, EditKind};
use crate::tensor::{exact_sqrt, Shape};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("cost arithmetic overflowed 64 bits")]
    Overflow,
    #[error("{op} is infeasible at {shape}")]
    InfeasibleShape { op: OpKind, shape: Shape },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("block is invalid: {0}")]
    InvalidBlock(ValidationReport),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("edit cannot be applied: {0}")]
    InfeasibleEdit(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Cost {
    pub const ZERO: Cost = Cost { params: 0, flops: 0 };

    pub fn new(params: u64, flops: u64) -> Self {
        Cost { params, flops }
    }

    pub fn checked_add(self, o: Cost) -> Result<Cost, CostError> {
        Ok(Cost {
            params: self.params.checked_add(o.params).ok_or(CostError::Overflow)?,
            flops: self.flops.checked_add(o.flops).ok_or(CostError::Overflow)?,
        })
    }

    pub fn apply(self, d: CostDelta) -> Result<Cost, CostError> {
        let p = self.params as i128 + d.params as i128;
        let f = self.flops as i128 + d.flops as i128;
        Ok(Cost {
            params: u64::try_from(p).map_err(|_| CostError::Overflow)?,
            flops: u64::try_from(f).map_err(|_| CostError::Overflow)?,
        })
    }

    pub fn delta_to(self, after: Cost) -> CostDelta {
        CostDelta {
            params: after.params as i64 - self.params as i64,
            flops: after.flops as i64 - self.flops as i64,
        }
    }
}

impl Add for Cost {
    type Output = Cost;
    /// # Panics
    /// On overflow; use [`Cost::checked_add`] where inputs are unbounded.
    fn add(self, o: Cost) -> Cost {
        self.checked_add(o).expect("cost overflow")
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "params={} flops={}", self.params, self.flops)
    }
}

/// Signed change in cost produced by an edit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostDelta {
    pub params: i64,
    pub flops: i64,
}

impl CostDelta {
    pub fn of(c: Cost) -> Self {
        CostDelta {
            params: c.params as i64,
            flops: c.flops as i64,
        }
    }

    pub fn neg(self) -> Self {
        CostDelta {
            params: -self.params,
            flops: -self.flops,
        }
    }
}

impl Add for CostDelta {
    type Output = CostDelta;
    fn add(self, o: CostDelta) -> CostDelta {
        CostDelta {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

/// Inclusive Params/FLOPs intervals every visited network must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub params_min: u64,
    pub params_max: u64,
    pub flops_min: u64,
    pub flops_max: u64,
}

impl Budget {
    pub fn new(params_min: u64, params_max: u64, flops_min: u64, flops_max: u64) -> Result<Self, String> {
        if params_min > params_max || flops_min > flops_max {
            return Err(format!(
                "budget bounds out of order: params [{params_min}, {params_max}], flops [{flops_min}, {flops_max}]"
            ));
        }
        Ok(Budget {
            params_min,
            params_max,
            flops_min,
            flops_max,
        })
    }

    pub fn unbounded() -> Self {
        Budget::new(0, u64::MAX, 0, u64::MAX).unwrap()
    }

    /// Upper bounds of the ImageNet search: 27M params, 20G FLOPs.
    pub fn imagenet_search() -> Self {
        Budget::new(0, 27_000_000, 0, 20_000_000_000).unwrap()
    }

    /// Random-walk window: 22-28M params, 6-20G FLOPs.
    pub fn imagenet_walk() -> Self {
        Budget::new(22_000_000, 28_000_000, 6_000_000_000, 20_000_000_000).unwrap()
    }

    pub fn contains(&self, c: Cost) -> bool {
        (self.params_min..=self.params_max).contains(&c.params)
            && (self.flops_min..=self.flops_max).contains(&c.flops)
    }

    pub fn above_min(&self, c: Cost) -> bool {
        c.params >= self.params_min && c.flops >= self.flops_min
    }

    pub fn below_max(&self, c: Cost) -> bool {
        c.params <= self.params_max && c.flops <= self.flops_max
    }
}

impl FromStr for Budget {
    type Err = String;

    /// `params_min,params_max,flops_min,flops_max`; integers with optional
    /// `k`, `M` or `G` suffix.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u64> = s
            .split(',')
            .map(|p| parse_count(p.trim()))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [a, b, c, d] => Budget::new(a, b, c, d),
            _ => Err(format!("expected 4 comma-separated bounds, got `{s}`")),
        }
    }
}

fn parse_count(s: &str) -> Result<u64, String> {
    let (num, mult) = match s.chars().last() {
        Some('k' | 'K') => (&s[..s.len() - 1], 1_000),
        Some('M' | 'm') => (&s[..s.len() - 1], 1_000_000),
        Some('G' | 'g') => (&s[..s.len() - 1], 1_000_000_000),
        _ => (s, 1),
    };
    if let Ok(n) = num.parse::<u64>() {
        return n.checked_mul(mult).ok_or_else(|| format!("`{s}` overflows"));
    }
    let f: f64 = num.parse().map_err(|_| format!("invalid count `{s}`"))?;
    if !(f >= 0.0) {
        return Err(format!("invalid count `{s}`"));
    }
    Ok((f * mult as f64).round() as u64)
}

fn prod(factors: &[u64]) -> Result<u64, CostError> {
    factors
        .iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x).ok_or(CostError::Overflow))
}

fn n(x: usize) -> u64 {
    x as u64
}

/// Params of RelPosBias: `2(√H-½)(√W-½) = (2a-1)(2b-1)/2`, rounded half up.
pub fn relpos_params(a: usize, b: usize) -> u64 {
    ((2 * n(a) - 1) * (2 * n(b) - 1)).div_ceil(2)
}

/// Scalars in the RelPosBias relative-offset table, `(2a-1)(2b-1)`.
pub fn relpos_table_len(a: usize, b: usize) -> usize {
    (2 * a - 1) * (2 * b - 1)
}

/// Cost of one node given its inferred input and output shapes.
pub fn node_cost(op: OpKind, io: &NodeShapes) -> Result<Cost, CostError> {
    let x = io.inputs[0];
    let (c, h, w) = (n(x.c), n(x.h), n(x.w));
    let chw = prod(&[c, h, w])?;
    let infeasible = || CostError::InfeasibleShape { op, shape: x };
    let cost = match op {
        OpKind::Softmax => Cost::new(0, prod(&[c, h, (3 * w).checked_sub(1).ok_or_else(infeasible)?])?),
        OpKind::Dropout | OpKind::Mask | OpKind::Add | OpKind::GlobalAvg => Cost::new(0, chw),
        OpKind::MaxPool2d => Cost::new(0, prod(&[9, chw])?),
        OpKind::Sigmoid | OpKind::Gelu => Cost::new(0, prod(&[3, chw])?),
        OpKind::Conv1 => Cost::new(prod(&[c, c + 1])?, prod(&[2, c, chw])?),
        OpKind::Conv3 => Cost::new(prod(&[c, 9 * c + 1])?, prod(&[18, c, chw])?),
        OpKind::ConvDepth3 => Cost::new(9 * c, prod(&[18, chw])?),
        OpKind::ConvDepth5 => Cost::new(25 * c, prod(&[50, chw])?),
        OpKind::BatchNorm | OpKind::LayerNorm => Cost::new(2 * c, prod(&[2, chw])?),
        OpKind::RelPosBias => {
            let a = exact_sqrt(x.h).ok_or_else(infeasible)?;
            let b = exact_sqrt(x.w).ok_or_else(infeasible)?;
            Cost::new(relpos_params(a, b), chw)
        }
        OpKind::Chunk2 | OpKind::Chunk3 | OpKind::Copy | OpKind::Concat2 | OpKind::Concat3 => {
            Cost::ZERO
        }
        OpKind::Multiply => Cost::new(0, prod(&[4, chw])?),
        OpKind::ConvChunk3 => Cost::new(prod(&[3, c, c + 1])?, prod(&[6, c, chw])?),
        OpKind::ConvExp4 => Cost::new(prod(&[4, c, c + 1])?, prod(&[8, c, chw])?),
        OpKind::ConvRed4 => {
            if x.c % 4 != 0 {
                return Err(infeasible());
            }
            let r = c / 4;
            Cost::new(prod(&[4, r, r + 1])?, prod(&[8, r, r, h, w])?)
        }
        OpKind::Matmul1 => Cost::new(0, prod(&[2, c, h, h, w, w])?),
        OpKind::Matmul2 => {
            let v = io.inputs[1];
            Cost::new(0, prod(&[2, n(v.c), n(v.h), n(v.h), n(v.w), n(v.w)])?)
        }
        OpKind::UpSample => {
            let o = io.outputs[0];
            Cost::new(0, prod(&[n(o.c), n(o.h), n(o.w)])?)
        }
    };
    Ok(cost)
}

/// Cost of `op` at the given input shapes, inferring outputs. Not usable for
/// `UpSample`, whose output size comes from its coupled `GlobalAvg`.
pub fn node_cost_at(op: OpKind, inputs: &[Shape]) -> Result<Cost, CostError> {
    let outputs = op
        .output_shapes(inputs, None)
        .map_err(|_| CostError::InfeasibleShape { op, shape: inputs[0] })?;
    node_cost(
        op,
        &NodeShapes {
            inputs: inputs.iter().copied().collect(),
            outputs,
        },
    )
}

/// Cost of a block-leading convolution that also performs the stage
/// projection from `in_channels` to the block width `out.c`.
pub fn fused_node_cost(op: OpKind, in_channels: usize, out: Shape) -> Result<Cost, CostError> {
    let (ci, c, hw) = (n(in_channels), n(out.c), n(out.plane()));
    let (mult, flops_k) = match op {
        OpKind::Conv1 => (1, 2),
        OpKind::Conv3 => (1, 18),
        OpKind::ConvExp4 => (4, 8),
        OpKind::ConvChunk3 => (3, 6),
        _ => return Err(CostError::InfeasibleShape { op, shape: out }),
    };
    let k = if op == OpKind::Conv3 { 9 } else { 1 };
    Ok(Cost::new(
        prod(&[mult, c, k * ci + 1])?,
        prod(&[flops_k, ci, c, hw])?,
    ))
}

pub fn projection_cost(in_channels: usize, out: Shape) -> Result<Cost, CostError> {
    let (ci, co) = (n(in_channels), n(out.c));
    Ok(Cost::new(prod(&[co, ci + 1])?, prod(&[2, ci, co, n(out.plane())])?))
}

/// Cost change at a stage entry relative to the bare block cost: the
/// projection when unfused, or the fused convolution's surplus when fused.
pub fn stage_entry_delta(
    from_channels: Option<usize>,
    leading: Option<OpKind>,
    shape: Shape,
) -> Result<CostDelta, CostError> {
    let Some(from) = from_channels else {
        return Ok(CostDelta::default());
    };
    match leading {
        Some(op) if op.can_fuse_projection() => {
            let fused = fused_node_cost(op, from, shape)?;
            let plain = node_cost_at(op, &[shape])?;
            Ok(plain.delta_to(fused))
        }
        _ => Ok(CostDelta::of(projection_cost(from, shape)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: NodeId,
    pub op: OpKind,
    pub input: Shape,
    pub cost: Cost,
}

/// Per-node breakdown of a block in topological order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCostReport {
    pub nodes: Vec<NodeCost>,
    pub total: Cost,
}

impl BlockCostReport {
    pub fn op_flops(&self) -> BTreeMap<OpKind, u64> {
        let mut m = BTreeMap::new();
        for nc in &self.nodes {
            *m.entry(nc.op).or_insert(0) += nc.cost.flops;
        }
        m
    }
}

/// Block cost from precomputed shapes (no validation).
pub fn block_cost_with(block: &BlockGraph, shapes: &ShapeMap) -> Result<BlockCostReport, CostError> {
    let mut nodes = Vec::with_capacity(block.len());
    let mut total = Cost::ZERO;
    for id in block.topo_order()? {
        let op = block.op(id).expect("interior node");
        let io = &shapes.nodes[&id];
        let cost = node_cost(op, io)?;
        total = total.checked_add(cost)?;
        nodes.push(NodeCost {
            node: id,
            op,
            input: io.inputs[0],
            cost,
        });
    }
    Ok(BlockCostReport { nodes, total })
}

/// Validated per-node cost report of a block.
pub fn block_cost(block: &BlockGraph) -> Result<BlockCostReport, CostError> {
    let shapes = crate::graph::validated_shapes(block).map_err(CostError::InvalidBlock)?;
    block_cost_with(block, &shapes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTerm {
    pub label: String,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInNetwork {
    pub index: usize,
    /// Cost of the block on its own.
    pub standalone: Cost,
    /// Cost inside the network, with any fused projection included.
    pub in_network: Cost,
    pub fused: Option<FusedProjection>,
}

/// Network cost: every stem, transition and head term plus each block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkCostReport {
    pub terms: Vec<CostTerm>,
    pub blocks: Vec<BlockInNetwork>,
    pub total: Cost,
}

impl NetworkCostReport {
    pub fn blocks_total(&self) -> Cost {
        self.blocks.iter().fold(Cost::ZERO, |a, b| a + b.in_network)
    }
}

pub fn network_cost(spec: &NetworkSpec) -> Result<NetworkCostReport, CostError> {
    let plan = assemble_network(spec)?;
    let mut terms = Vec::new();
    let mut blocks = Vec::new();
    let mut total = Cost::ZERO;
    let mut stem_i = 0;
    for step in &plan.steps {
        let term = match *step {
            PlanStep::StemConv {
                input,
                out_channels,
            } => {
                stem_i += 1;
                let (ci, co) = (n(input.c), n(out_channels));
                let out_hw = n(crate::graph::halve(input.h)) * n(crate::graph::halve(input.w));
                let conv = Cost::new(prod(&[co, 9 * ci + 1])?, prod(&[18, ci, co, out_hw])?);
                let gelu = Cost::new(0, prod(&[3, co, out_hw])?);
                Some(CostTerm {
                    label: format!("stem conv{stem_i} 3x3/2 {}->{} + GELU", ci, co),
                    cost: conv.checked_add(gelu)?,
                })
            }
            PlanStep::MaxPool { input } => {
                let out_hw = n(crate::graph::halve(input.h)) * n(crate::graph::halve(input.w));
                Some(CostTerm {
                    label: format!("maxpool 3/2 at {input}"),
                    cost: Cost::new(0, prod(&[9, n(input.c), out_hw])?),
                })
            }
            PlanStep::Projection {
                input,
                out_channels,
            } => Some(CostTerm {
                label: format!("projection 1x1 {}->{} at {}x{}", input.c, out_channels, input.h, input.w),
                cost: projection_cost(input.c, input.with_channels(out_channels))?,
            }),
            PlanStep::Block {
                index,
                shape,
                fused,
            } => {
                let block = &spec.blocks[index];
                let standalone = block_cost_with(block, &block.infer_shapes()?)?.total;
                let in_network = match fused {
                    Some(f) => {
                        let d = stage_entry_delta(Some(f.in_channels), Some(f.op), shape)?;
                        standalone.apply(d)?
                    }
                    None => standalone,
                };
                total = total.checked_add(in_network)?;
                blocks.push(BlockInNetwork {
                    index,
                    standalone,
                    in_network,
                    fused,
                });
                None
            }
            PlanStep::GlobalAvgPool { input } => Some(CostTerm {
                label: format!("head global average pool at {input}"),
                cost: Cost::new(0, n(input.numel())),
            }),
            PlanStep::FullyConnected {
                in_features,
                out_features,
            } => Some(CostTerm {
                label: format!("head fully connected {in_features}->{out_features}"),
                cost: Cost::new(
                    prod(&[n(out_features), n(in_features) + 1])?,
                    prod(&[2, n(in_features), n(out_features)])?,
                ),
            }),
        };
        if let Some(t) = term {
            total = total.checked_add(t.cost)?;
            terms.push(t);
        }
    }
    Ok(NetworkCostReport {
        terms,
        blocks,
        total,
    })
}

/// Block-level cost change of `edit`, computed from the current block's
/// shapes and the edit payload without building the edited graph.
pub fn delta_cost(block: &BlockGraph, edit: &Edit) -> Result<CostDelta, CostError> {
    let shapes = block.infer_shapes()?;
    delta_cost_with(block, &shapes, edit)
}

pub fn delta_cost_with(block: &BlockGraph, shapes: &ShapeMap, edit: &Edit) -> Result<CostDelta, CostError> {
    match &edit.kind {
        EditKind::Add { edge, template } => {
            if !block.has_edge(edge) {
                return Err(CostError::InfeasibleEdit(format!("edge {edge} not in block")));
            }
            let at = shapes.edge_shape(edge);
            let mut total = Cost::ZERO;
            for (op, io) in template
                .node_shapes(at)
                .map_err(|v| CostError::InfeasibleEdit(format!("{template:?} at {at}: {v:?}")))?
            {
                total = total.checked_add(node_cost(op, &io)?)?;
            }
            Ok(CostDelta::of(total))
        }
        EditKind::Eliminate { nodes } => {
            let mut total = Cost::ZERO;
            for id in nodes {
                let op = block
                    .op(*id)
                    .ok_or_else(|| CostError::InfeasibleEdit(format!("{id} not in block")))?;
                total = total.checked_add(node_cost(op, &shapes.nodes[id])?)?;
            }
            Ok(CostDelta::of(total).neg())
        }
    }
}
