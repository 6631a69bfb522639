use std::fmt;
use std::str::FromStr;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::tensor::{exact_sqrt, Shape};

/// The 27 elementary operations a block may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Softmax,
    Dropout,
    MaxPool2d,
    Mask,
    Sigmoid,
    #[serde(rename = "GELU")]
    Gelu,
    Conv1,
    Conv3,
    ConvDepth3,
    ConvDepth5,
    BatchNorm,
    LayerNorm,
    RelPosBias,
    Chunk2,
    Chunk3,
    Copy,
    Concat2,
    Concat3,
    Add,
    ConvChunk3,
    ConvExp4,
    ConvRed4,
    Multiply,
    Matmul1,
    Matmul2,
    GlobalAvg,
    UpSample,
}

/// Violated shape rule of a single operation, before it is attributed to a node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleViolation {
    Mismatch { expected: Shape, found: Shape },
    Divisibility(&'static str),
    NonSquareSpatial(Shape),
    DiagonalUndefined(Shape),
    MissingUpsampleTarget,
}

/// Diagonal band half-width kept by `Mask`.
pub const MASK_BAND: usize = 5;

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Softmax,
        OpKind::Dropout,
        OpKind::MaxPool2d,
        OpKind::Mask,
        OpKind::Sigmoid,
        OpKind::Gelu,
        OpKind::Conv1,
        OpKind::Conv3,
        OpKind::ConvDepth3,
        OpKind::ConvDepth5,
        OpKind::BatchNorm,
        OpKind::LayerNorm,
        OpKind::RelPosBias,
        OpKind::Chunk2,
        OpKind::Chunk3,
        OpKind::Copy,
        OpKind::Concat2,
        OpKind::Concat3,
        OpKind::Add,
        OpKind::ConvChunk3,
        OpKind::ConvExp4,
        OpKind::ConvRed4,
        OpKind::Multiply,
        OpKind::Matmul1,
        OpKind::Matmul2,
        OpKind::GlobalAvg,
        OpKind::UpSample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Softmax => "Softmax",
            OpKind::Dropout => "Dropout",
            OpKind::MaxPool2d => "MaxPool2d",
            OpKind::Mask => "Mask",
            OpKind::Sigmoid => "Sigmoid",
            OpKind::Gelu => "GELU",
            OpKind::Conv1 => "Conv1",
            OpKind::Conv3 => "Conv3",
            OpKind::ConvDepth3 => "ConvDepth3",
            OpKind::ConvDepth5 => "ConvDepth5",
            OpKind::BatchNorm => "BatchNorm",
            OpKind::LayerNorm => "LayerNorm",
            OpKind::RelPosBias => "RelPosBias",
            OpKind::Chunk2 => "Chunk2",
            OpKind::Chunk3 => "Chunk3",
            OpKind::Copy => "Copy",
            OpKind::Concat2 => "Concat2",
            OpKind::Concat3 => "Concat3",
            OpKind::Add => "Add",
            OpKind::ConvChunk3 => "ConvChunk3",
            OpKind::ConvExp4 => "ConvExp4",
            OpKind::ConvRed4 => "ConvRed4",
            OpKind::Multiply => "Multiply",
            OpKind::Matmul1 => "Matmul1",
            OpKind::Matmul2 => "Matmul2",
            OpKind::GlobalAvg => "GlobalAvg",
            OpKind::UpSample => "UpSample",
        }
    }

    pub fn input_arity(self) -> usize {
        match self {
            OpKind::Concat2 | OpKind::Add | OpKind::Multiply | OpKind::Matmul1 | OpKind::Matmul2 => 2,
            OpKind::Concat3 => 3,
            _ => 1,
        }
    }

    pub fn output_arity(self) -> usize {
        match self {
            OpKind::Chunk2 | OpKind::Copy => 2,
            OpKind::Chunk3 | OpKind::ConvChunk3 => 3,
            _ => 1,
        }
    }

    /// Single input, single output, output shape equal to input shape.
    /// These are the only operations that may be added or removed alone.
    pub fn is_simple(self) -> bool {
        matches!(
            self,
            OpKind::Softmax
                | OpKind::Dropout
                | OpKind::MaxPool2d
                | OpKind::Mask
                | OpKind::Sigmoid
                | OpKind::Gelu
                | OpKind::Conv1
                | OpKind::Conv3
                | OpKind::ConvDepth3
                | OpKind::ConvDepth5
                | OpKind::BatchNorm
                | OpKind::LayerNorm
                | OpKind::RelPosBias
        )
    }

    /// Carries trainable parameters.
    pub fn is_parameterized(self) -> bool {
        matches!(
            self,
            OpKind::Conv1
                | OpKind::Conv3
                | OpKind::ConvDepth3
                | OpKind::ConvDepth5
                | OpKind::BatchNorm
                | OpKind::LayerNorm
                | OpKind::RelPosBias
                | OpKind::ConvChunk3
                | OpKind::ConvExp4
                | OpKind::ConvRed4
        )
    }

    /// Convolutions that can absorb a preceding channel projection.
    pub fn can_fuse_projection(self) -> bool {
        matches!(
            self,
            OpKind::Conv1 | OpKind::Conv3 | OpKind::ConvExp4 | OpKind::ConvChunk3
        )
    }

    /// Output shapes for the given input shapes. `upsample_to` is the spatial
    /// size an `UpSample` restores (taken from its coupled `GlobalAvg`).
    pub fn output_shapes(
        self,
        inputs: &[Shape],
        upsample_to: Option<(usize, usize)>,
    ) -> Result<PortShapes, RuleViolation> {
        debug_assert_eq!(inputs.len(), self.input_arity());
        let x = inputs[0];
        let same = |other: Shape| {
            if other == x {
                Ok(())
            } else {
                Err(RuleViolation::Mismatch {
                    expected: x,
                    found: other,
                })
            }
        };
        let out = match self {
            OpKind::Mask => {
                if x.h != x.w {
                    return Err(RuleViolation::DiagonalUndefined(x));
                }
                ports(&[x])
            }
            OpKind::RelPosBias => {
                if exact_sqrt(x.h).is_none() || exact_sqrt(x.w).is_none() {
                    return Err(RuleViolation::NonSquareSpatial(x));
                }
                ports(&[x])
            }
            op if op.is_simple() => ports(&[x]),
            OpKind::Chunk2 => {
                if x.c % 2 != 0 {
                    return Err(RuleViolation::Divisibility("Chunk2 needs channels divisible by 2"));
                }
                ports(&[x.with_channels(x.c / 2); 2])
            }
            OpKind::Chunk3 => {
                if x.c % 3 != 0 {
                    return Err(RuleViolation::Divisibility("Chunk3 needs channels divisible by 3"));
                }
                ports(&[x.with_channels(x.c / 3); 3])
            }
            OpKind::Copy => ports(&[x; 2]),
            OpKind::Concat2 => {
                same(inputs[1])?;
                ports(&[x.with_channels(2 * x.c)])
            }
            OpKind::Concat3 => {
                same(inputs[1])?;
                same(inputs[2])?;
                ports(&[x.with_channels(3 * x.c)])
            }
            OpKind::Add | OpKind::Multiply => {
                same(inputs[1])?;
                ports(&[x])
            }
            OpKind::ConvChunk3 => ports(&[x; 3]),
            OpKind::ConvExp4 => ports(&[x.with_channels(4 * x.c)]),
            OpKind::ConvRed4 => {
                if x.c % 4 != 0 {
                    return Err(RuleViolation::Divisibility("ConvRed4 needs channels divisible by 4"));
                }
                ports(&[x.with_channels(x.c / 4)])
            }
            OpKind::Matmul1 => {
                same(inputs[1])?;
                ports(&[Shape::new(1, x.h * x.h, x.w * x.w)])
            }
            OpKind::Matmul2 => {
                let v = inputs[1];
                let expected = Shape::new(1, v.h * v.h, v.w * v.w);
                if x != expected {
                    return Err(RuleViolation::Mismatch { expected, found: x });
                }
                ports(&[v])
            }
            OpKind::GlobalAvg => ports(&[Shape::new(x.c, 1, 1)]),
            OpKind::UpSample => {
                let (h, w) = upsample_to.ok_or(RuleViolation::MissingUpsampleTarget)?;
                if x.h != 1 || x.w != 1 {
                    return Err(RuleViolation::Mismatch {
                        expected: Shape::new(x.c, 1, 1),
                        found: x,
                    });
                }
                ports(&[Shape::new(x.c, h, w)])
            }
            _ => unreachable!("simple ops handled above"),
        };
        Ok(out)
    }
}

/// Shapes on the ports of one node; no op has more than three.
pub type PortShapes = ArrayVec<Shape, 3>;

fn ports(s: &[Shape]) -> PortShapes {
    s.iter().copied().collect()
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown operation `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk2_halves_channels() {
        let out = OpKind::Chunk2.output_shapes(&[Shape::new(4, 8, 8)], None).unwrap();
        assert_eq!(out.to_vec(), vec![Shape::new(2, 8, 8); 2]);
    }

    #[test]
    fn matmul1_squares_spatial() {
        let s = Shape::new(3, 4, 5);
        let out = OpKind::Matmul1.output_shapes(&[s, s], None).unwrap();
        assert_eq!(out.to_vec(), vec![Shape::new(1, 16, 25)]);
    }

    #[test]
    fn chunk3_rejects_indivisible() {
        let err = OpKind::Chunk3.output_shapes(&[Shape::new(4, 8, 8)], None).unwrap_err();
        assert!(matches!(err, RuleViolation::Divisibility(_)));
    }

    #[test]
    fn matmul2_requires_single_channel_map() {
        let v = Shape::new(3, 2, 2);
        let ok = OpKind::Matmul2.output_shapes(&[Shape::new(1, 4, 4), v], None).unwrap();
        assert_eq!(ok.to_vec(), vec![v]);
        assert!(OpKind::Matmul2
            .output_shapes(&[Shape::new(3, 4, 4), v], None)
            .is_err());
    }

    #[test]
    fn relpos_and_mask_rules() {
        assert!(OpKind::RelPosBias.output_shapes(&[Shape::new(1, 16, 9)], None).is_ok());
        assert!(matches!(
            OpKind::RelPosBias.output_shapes(&[Shape::new(1, 8, 9)], None),
            Err(RuleViolation::NonSquareSpatial(_))
        ));
        assert!(OpKind::Mask.output_shapes(&[Shape::new(2, 7, 7)], None).is_ok());
        assert!(matches!(
            OpKind::Mask.output_shapes(&[Shape::new(2, 7, 6)], None),
            Err(RuleViolation::DiagonalUndefined(_))
        ));
    }

    #[test]
    fn upsample_needs_target() {
        let x = Shape::new(5, 1, 1);
        assert_eq!(
            OpKind::UpSample.output_shapes(&[x], None),
            Err(RuleViolation::MissingUpsampleTarget)
        );
        assert_eq!(
            OpKind::UpSample.output_shapes(&[x], Some((3, 4))).unwrap().to_vec(),
            vec![Shape::new(5, 3, 4)]
        );
    }

    #[test]
    fn names_round_trip() {
        for op in OpKind::ALL {
            assert_eq!(op.name().parse::<OpKind>().unwrap(), op);
            let json = serde_json::to_string(&op).unwrap();
            assert_eq!(json, format!("\"{}\"", op.name()));
        }
    }

    #[test]
    fn thirteen_simple_ops() {
        assert_eq!(OpKind::ALL.iter().filter(|o| o.is_simple()).count(), 13);
    }
}
