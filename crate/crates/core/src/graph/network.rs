//! Hierarchical network: stem, stages of blocks separated by transitions,
//! classification head.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::block::{BlockGraph, NodeId};
use super::op::OpKind;
use super::validate::{validate, ValidationReport};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub n_blocks: usize,
    pub channels: usize,
    pub spatial: (usize, usize),
}

/// Spatial size after a stride-2 window with padding 1 (kernel 3).
pub fn halve(x: usize) -> usize {
    x.div_ceil(2)
}

/// Size parameters of a network, without block topologies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub input_channels: usize,
    pub input_resolution: (usize, usize),
    pub stem_out_channels: usize,
    pub stage_blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
}

impl Skeleton {
    /// ImageNet-scale search layout: stem 64, stages of 2/3/5/2 blocks with
    /// 96/192/384/768 channels, 224x224 input.
    pub fn imagenet() -> Self {
        Skeleton {
            input_channels: 3,
            input_resolution: (224, 224),
            stem_out_channels: 64,
            stage_blocks: vec![2, 3, 5, 2],
            stage_channels: vec![96, 192, 384, 768],
            num_classes: 1000,
        }
    }

    /// Small layout for tests and laptop runs: 32x32 input, two stages of
    /// two blocks at 12 and 24 channels (8x8 and 4x4 maps).
    pub fn desk() -> Self {
        Skeleton {
            input_channels: 3,
            input_resolution: (32, 32),
            stem_out_channels: 8,
            stage_blocks: vec![2, 2],
            stage_channels: vec![12, 24],
            num_classes: 10,
        }
    }

    /// Stem output spatial size (two stride-2 convolutions).
    pub fn stem_spatial(&self) -> (usize, usize) {
        let (h, w) = self.input_resolution;
        (halve(halve(h)), halve(halve(w)))
    }

    pub fn stages(&self) -> Vec<StageSpec> {
        let mut spatial = self.stem_spatial();
        self.stage_blocks
            .iter()
            .zip(&self.stage_channels)
            .enumerate()
            .map(|(i, (&n_blocks, &channels))| {
                if i > 0 {
                    spatial = (halve(spatial.0), halve(spatial.1));
                }
                StageSpec {
                    n_blocks,
                    channels,
                    spatial,
                }
            })
            .collect()
    }

    /// Input shape of each block position.
    pub fn block_shapes(&self) -> Vec<Shape> {
        self.stages()
            .iter()
            .flat_map(|s| {
                std::iter::repeat_n(Shape::new(s.channels, s.spatial.0, s.spatial.1), s.n_blocks)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_resolution: (usize, usize),
    pub stem_out_channels: usize,
    pub stages: Vec<StageSpec>,
    pub blocks: Vec<BlockGraph>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("network has no stages")]
    NoStages,
    #[error("a size parameter is zero")]
    ZeroSize,
    #[error("stages declare {expected} blocks but {found} are given")]
    BlockCount { expected: usize, found: usize },
    #[error("stage {stage} spatial size {found:?} does not follow the downsampling chain ({expected:?})")]
    StageSpatial {
        stage: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("block {block} input shape {found} differs from its stage shape {expected}")]
    BlockShape {
        block: usize,
        expected: Shape,
        found: Shape,
    },
    #[error("block {block} is invalid: {report}")]
    InvalidBlock {
        block: usize,
        report: ValidationReport,
    },
}

impl NetworkSpec {
    /// Network whose blocks are all the identity.
    pub fn identity(skeleton: &Skeleton) -> Self {
        Self::from_blocks(
            skeleton,
            skeleton.block_shapes().into_iter().map(BlockGraph::identity).collect(),
        )
    }

    pub fn from_blocks(skeleton: &Skeleton, blocks: Vec<BlockGraph>) -> Self {
        NetworkSpec {
            input_channels: skeleton.input_channels,
            input_resolution: skeleton.input_resolution,
            stem_out_channels: skeleton.stem_out_channels,
            stages: skeleton.stages(),
            blocks,
            num_classes: skeleton.num_classes,
        }
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton {
            input_channels: self.input_channels,
            input_resolution: self.input_resolution,
            stem_out_channels: self.stem_out_channels,
            stage_blocks: self.stages.iter().map(|s| s.n_blocks).collect(),
            stage_channels: self.stages.iter().map(|s| s.channels).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Stage index of block position `block`.
    pub fn stage_of(&self, block: usize) -> usize {
        let mut acc = 0;
        for (i, s) in self.stages.iter().enumerate() {
            acc += s.n_blocks;
            if block < acc {
                return i;
            }
        }
        panic!("block index {block} out of range");
    }

    /// Channel count entering stage `stage` (stem output or previous stage).
    pub fn channels_before(&self, stage: usize) -> usize {
        if stage == 0 {
            self.stem_out_channels
        } else {
            self.stages[stage - 1].channels
        }
    }

    /// If `block` opens a stage whose transition changes channels, the
    /// channel count the projection maps from.
    pub fn projection_source(&self, block: usize) -> Option<usize> {
        let mut first = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if block == first {
                let from = self.channels_before(i);
                return (from != s.channels).then_some(from);
            }
            first += s.n_blocks;
        }
        None
    }

    /// The block-leading convolution that absorbs the stage projection, when
    /// `block` opens a projecting stage and starts with a fusable convolution.
    pub fn fused_node(&self, block: usize) -> Option<FusedProjection> {
        let from = self.projection_source(block)?;
        fusion_for(&self.blocks[block], from)
    }
}

/// Fusion target of a block given the channel count entering it.
pub fn fusion_for(block: &BlockGraph, from_channels: usize) -> Option<FusedProjection> {
    let (node, op) = block.leading_node()?;
    op.can_fuse_projection().then_some(FusedProjection {
        node,
        op,
        in_channels: from_channels,
    })
}

/// A stage projection merged into the first convolution of a block: that
/// convolution reads `in_channels` instead of the block width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedProjection {
    pub node: NodeId,
    pub op: OpKind,
    pub in_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PlanStep {
    /// 3x3 convolution, stride 2, padding 1, followed by GELU.
    StemConv { input: Shape, out_channels: usize },
    /// Max-pool kernel 3, stride 2, padding 1.
    MaxPool { input: Shape },
    /// Unfused 1x1 channel projection.
    Projection { input: Shape, out_channels: usize },
    Block {
        index: usize,
        shape: Shape,
        fused: Option<FusedProjection>,
    },
    GlobalAvgPool { input: Shape },
    FullyConnected { in_features: usize, out_features: usize },
}

/// Linearized execution order of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutablePlan {
    pub steps: Vec<PlanStep>,
    pub head_input: Shape,
    pub num_classes: usize,
}

impl ExecutablePlan {
    pub fn block_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, PlanStep::Block { .. }))
            .count()
    }
}

/// Check the network invariants and linearize it.
pub fn assemble_network(spec: &NetworkSpec) -> Result<ExecutablePlan, NetworkError> {
    if spec.stages.is_empty() {
        return Err(NetworkError::NoStages);
    }
    let (h0, w0) = spec.input_resolution;
    if spec.input_channels == 0
        || h0 == 0
        || w0 == 0
        || spec.stem_out_channels == 0
        || spec.num_classes == 0
        || spec.stages.iter().any(|s| s.n_blocks == 0 || s.channels == 0)
    {
        return Err(NetworkError::ZeroSize);
    }
    let expected: usize = spec.stages.iter().map(|s| s.n_blocks).sum();
    if expected != spec.blocks.len() {
        return Err(NetworkError::BlockCount {
            expected,
            found: spec.blocks.len(),
        });
    }
    let mut steps = Vec::new();
    let mut cur = Shape::new(spec.input_channels, h0, w0);
    for _ in 0..2 {
        steps.push(PlanStep::StemConv {
            input: cur,
            out_channels: spec.stem_out_channels,
        });
        cur = Shape::new(spec.stem_out_channels, halve(cur.h), halve(cur.w));
    }
    let mut block_idx = 0;
    for (si, stage) in spec.stages.iter().enumerate() {
        if si > 0 {
            steps.push(PlanStep::MaxPool { input: cur });
            cur = Shape::new(cur.c, halve(cur.h), halve(cur.w));
        }
        if (cur.h, cur.w) != stage.spatial {
            return Err(NetworkError::StageSpatial {
                stage: si,
                expected: (cur.h, cur.w),
                found: stage.spatial,
            });
        }
        let stage_shape = cur.with_channels(stage.channels);
        for k in 0..stage.n_blocks {
            let block = &spec.blocks[block_idx];
            if block.input_shape() != stage_shape {
                return Err(NetworkError::BlockShape {
                    block: block_idx,
                    expected: stage_shape,
                    found: block.input_shape(),
                });
            }
            let report = validate(block);
            if !report.is_ok() {
                return Err(NetworkError::InvalidBlock {
                    block: block_idx,
                    report,
                });
            }
            let mut fused = None;
            if k == 0 && cur.c != stage.channels {
                fused = fusion_for(block, cur.c);
                if fused.is_none() {
                    steps.push(PlanStep::Projection {
                        input: cur,
                        out_channels: stage.channels,
                    });
                }
            }
            steps.push(PlanStep::Block {
                index: block_idx,
                shape: stage_shape,
                fused,
            });
            cur = stage_shape;
            block_idx += 1;
        }
    }
    steps.push(PlanStep::GlobalAvgPool { input: cur });
    steps.push(PlanStep::FullyConnected {
        in_features: cur.c,
        out_features: spec.num_classes,
    });
    Ok(ExecutablePlan {
        steps,
        head_input: cur,
        num_classes: spec.num_classes,
    })
}
