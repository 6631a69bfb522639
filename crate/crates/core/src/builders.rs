//! Hand-crafted modules expressed as blocks. Used as search seeds and as
//! semantic oracles.
//!
//! Node sequences (residual branches in brackets):
//!
//! - `Identity`: no interior nodes.
//! - `MBConv4`: Copy -> [ConvExp4 -> BatchNorm -> GELU -> ConvDepth3 -> BatchNorm -> GELU
//!   -> SE(4C) -> ConvRed4 -> BatchNorm] -> Add, where SE(4C) is
//!   Copy -> [GlobalAvg -> ConvRed4 -> GELU -> ConvExp4 -> Sigmoid -> UpSample] -> Multiply.
//! - `SelfAttention2Head`: Copy -> [Chunk2 -> per head (ConvChunk3 -> Q,K -> Matmul1 ->
//!   RelPosBias -> Softmax -> Matmul2 <- V) -> Concat2 -> Conv1] -> Add.
//! - `ResNetBasic`: Copy -> [Conv3 -> BatchNorm -> GELU -> Conv3 -> BatchNorm] -> Add.
//! - `SqueezeExcite`: Copy -> [GlobalAvg -> Conv1 -> GELU -> Conv1 -> Sigmoid -> UpSample] -> Multiply.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{validate, BlockGraph, NetworkSpec, NodeId, OpKind, Skeleton, INPUT, OUTPUT};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BuilderVariant {
    Identity,
    MBConv4,
    SelfAttention2Head,
    ResNetBasic,
    SqueezeExcite,
}

impl BuilderVariant {
    pub const ALL: [BuilderVariant; 5] = [
        BuilderVariant::Identity,
        BuilderVariant::MBConv4,
        BuilderVariant::SelfAttention2Head,
        BuilderVariant::ResNetBasic,
        BuilderVariant::SqueezeExcite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuilderVariant::Identity => "identity",
            BuilderVariant::MBConv4 => "mbconv4",
            BuilderVariant::SelfAttention2Head => "attention2",
            BuilderVariant::ResNetBasic => "resnet",
            BuilderVariant::SqueezeExcite => "se",
        }
    }
}

impl fmt::Display for BuilderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BuilderVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        BuilderVariant::ALL
            .into_iter()
            .find(|v| v.name() == key || format!("{v:?}").to_ascii_lowercase() == key)
            .ok_or_else(|| {
                format!("unknown builder `{s}` (expected identity, mbconv4, attention2, resnet or se)")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuilderParams {
    pub variant: BuilderVariant,
    pub input_shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("{variant} cannot be built at {shape}: {reason}")]
    InfeasibleShape {
        variant: BuilderVariant,
        shape: Shape,
        reason: String,
    },
}

/// Append `ops` as a chain starting from `(from, port)`; returns the last node.
fn chain(b: &mut BlockGraph, from: (NodeId, u8), ops: &[OpKind]) -> (NodeId, u8) {
    let mut at = from;
    for &op in ops {
        let id = b.add_node(op);
        b.connect(at.0, at.1, id, 0);
        at = (id, 0);
    }
    at
}

/// Copy -> branch -> merge, with the skip path on the merge's second port.
fn residual(
    b: &mut BlockGraph,
    from: (NodeId, u8),
    merge: OpKind,
    branch: impl FnOnce(&mut BlockGraph, (NodeId, u8)) -> (NodeId, u8),
) -> (NodeId, u8) {
    let copy = b.add_node(OpKind::Copy);
    b.connect(from.0, from.1, copy, 0);
    let end = branch(b, (copy, 0));
    let m = b.add_node(merge);
    b.connect(end.0, end.1, m, 0);
    b.connect(copy, 1, m, 1);
    b.couple(copy, m);
    (m, 0)
}

fn squeeze_excite(b: &mut BlockGraph, from: (NodeId, u8), reduce: bool) -> (NodeId, u8) {
    residual(b, from, OpKind::Multiply, |b, at| {
        let pool = b.add_node(OpKind::GlobalAvg);
        b.connect(at.0, at.1, pool, 0);
        let (first, second) = if reduce {
            (OpKind::ConvRed4, OpKind::ConvExp4)
        } else {
            (OpKind::Conv1, OpKind::Conv1)
        };
        let squeeze = b.add_node(first);
        b.connect(pool, 0, squeeze, 0);
        let g = chain(b, (squeeze, 0), &[OpKind::Gelu]);
        let excite = b.add_node(second);
        b.connect(g.0, g.1, excite, 0);
        if reduce {
            b.couple(squeeze, excite);
        }
        let s = chain(b, (excite, 0), &[OpKind::Sigmoid]);
        let up = b.add_node(OpKind::UpSample);
        b.connect(s.0, s.1, up, 0);
        b.couple(pool, up);
        (up, 0)
    })
}

fn attention_head(b: &mut BlockGraph, from: (NodeId, u8)) -> (NodeId, u8) {
    let qkv = b.add_node(OpKind::ConvChunk3);
    b.connect(from.0, from.1, qkv, 0);
    let m1 = b.add_node(OpKind::Matmul1);
    b.connect(qkv, 0, m1, 0);
    b.connect(qkv, 1, m1, 1);
    let s = chain(b, (m1, 0), &[OpKind::RelPosBias, OpKind::Softmax]);
    let m2 = b.add_node(OpKind::Matmul2);
    b.connect(s.0, s.1, m2, 0);
    b.connect(qkv, 2, m2, 1);
    b.couple(qkv, m2);
    (m2, 0)
}

pub fn build(params: BuilderParams) -> Result<BlockGraph, BuildError> {
    let BuilderParams { variant, input_shape } = params;
    let mut b = BlockGraph::empty(input_shape);
    let start = (INPUT, 0u8);
    let end = match variant {
        BuilderVariant::Identity => start,
        BuilderVariant::MBConv4 => residual(&mut b, start, OpKind::Add, |b, at| {
            let exp = b.add_node(OpKind::ConvExp4);
            b.connect(at.0, at.1, exp, 0);
            let mid = chain(
                b,
                (exp, 0),
                &[OpKind::BatchNorm, OpKind::Gelu, OpKind::ConvDepth3, OpKind::BatchNorm, OpKind::Gelu],
            );
            let se = squeeze_excite(b, mid, true);
            let red = b.add_node(OpKind::ConvRed4);
            b.connect(se.0, se.1, red, 0);
            b.couple(exp, red);
            chain(b, (red, 0), &[OpKind::BatchNorm])
        }),
        BuilderVariant::SelfAttention2Head => residual(&mut b, start, OpKind::Add, |b, at| {
            let split = b.add_node(OpKind::Chunk2);
            b.connect(at.0, at.1, split, 0);
            let h0 = attention_head(b, (split, 0));
            let h1 = attention_head(b, (split, 1));
            let cat = b.add_node(OpKind::Concat2);
            b.connect(h0.0, h0.1, cat, 0);
            b.connect(h1.0, h1.1, cat, 1);
            b.couple(split, cat);
            chain(b, (cat, 0), &[OpKind::Conv1])
        }),
        BuilderVariant::ResNetBasic => residual(&mut b, start, OpKind::Add, |b, at| {
            chain(
                b,
                at,
                &[OpKind::Conv3, OpKind::BatchNorm, OpKind::Gelu, OpKind::Conv3, OpKind::BatchNorm],
            )
        }),
        BuilderVariant::SqueezeExcite => squeeze_excite(&mut b, start, false),
    };
    b.connect(end.0, end.1, OUTPUT, 0);
    let report = validate(&b);
    if !report.is_ok() {
        return Err(BuildError::InfeasibleShape {
            variant,
            shape: input_shape,
            reason: report.to_string(),
        });
    }
    Ok(b)
}

/// A network whose block `i` of stage `s` is built from `variants[s]`.
pub fn seed_network(skeleton: &Skeleton, variants: &[BuilderVariant]) -> Result<NetworkSpec, BuildError> {
    let stages = skeleton.stages();
    let mut blocks = Vec::new();
    for (s, stage) in stages.iter().enumerate() {
        let variant = variants[s.min(variants.len().saturating_sub(1))];
        let input_shape = Shape::new(stage.channels, stage.spatial.0, stage.spatial.1);
        for _ in 0..stage.n_blocks {
            blocks.push(build(BuilderParams {
                variant,
                input_shape,
            })?);
        }
    }
    Ok(NetworkSpec::from_blocks(skeleton, blocks))
}
