//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod dot;

use uninas::builders::{seed_network, BuilderVariant};
use uninas::graph::{BlockGraph, NodeId, OpKind, INPUT};
use uninas::interp::ParamStore;
use uninas::{Budget, NetworkSpec, Shape, Skeleton, Tensor};

/// Trainable-parameter count of one op at input shape `s`, written out from
/// the operation table independently of the library.
pub fn table_params(op: OpKind, s: Shape) -> u64 {
    let c = s.c as u64;
    match op {
        OpKind::Conv1 => c * (c + 1),
        OpKind::Conv3 => c * (9 * c + 1),
        OpKind::ConvDepth3 => 9 * c,
        OpKind::ConvDepth5 => 25 * c,
        OpKind::BatchNorm | OpKind::LayerNorm => 2 * c,
        OpKind::ConvChunk3 => 3 * c * (c + 1),
        OpKind::ConvExp4 => 4 * c * (c + 1),
        OpKind::ConvRed4 => {
            let r = c / 4;
            4 * r * (r + 1)
        }
        OpKind::RelPosBias => {
            // 2(√H-½)(√W-½), halves rounded up
            let a = (s.h as f64).sqrt();
            let b = (s.w as f64).sqrt();
            (2.0 * (a - 0.5) * (b - 0.5)).round() as u64
        }
        _ => 0,
    }
}

/// `(1,H²,W²)` by the defining sum, indexed `[h1][w1][h2][w2]`.
pub fn matmul1_ref(x: &Tensor, y: &Tensor) -> Vec<Vec<Vec<Vec<f64>>>> {
    let s = x.shape();
    let mut out = vec![vec![vec![vec![0.0; s.w]; s.h]; s.w]; s.h];
    for h1 in 0..s.h {
        for w1 in 0..s.w {
            for h2 in 0..s.h {
                for w2 in 0..s.w {
                    let mut acc = 0.0;
                    for c in 0..s.c {
                        acc += x.at(c, h1, w1) * y.at(c, h2, w2);
                    }
                    out[h1][w1][h2][w2] = acc / (s.c as f64).sqrt();
                }
            }
        }
    }
    out
}

/// `out[c][h][w] = Σ x[h][w][h̃][w̃]·y[c][h̃][w̃]`.
pub fn matmul2_ref(x: &[Vec<Vec<Vec<f64>>>], y: &Tensor) -> Vec<f64> {
    let s = y.shape();
    let mut out = Vec::with_capacity(s.numel());
    for c in 0..s.c {
        for h in 0..s.h {
            for w in 0..s.w {
                let mut acc = 0.0;
                for ht in 0..s.h {
                    for wt in 0..s.w {
                        acc += x[h][w][ht][wt] * y.at(c, ht, wt);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn param<'a>(store: &'a ParamStore, id: NodeId, name: &str) -> &'a [f64] {
    &store
        .get(id)
        .unwrap()
        .iter()
        .find(|p| p.name == name)
        .unwrap()
        .data
}

/// Two-head attention written with plain loops: each head projects its
/// channel slice to Q, K, V and takes `softmax(QᵀK/√d + bias)·V`; the heads
/// are concatenated, projected and added to the input.
pub fn attention_ref(block: &BlockGraph, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let n = s.plane();
    let split = block
        .nodes()
        .iter()
        .find(|(_, &op)| op == OpKind::Chunk2)
        .map(|(id, _)| *id)
        .unwrap();
    let heads: Vec<NodeId> = (0..2u8)
        .map(|p| block.output_edge(split, p).unwrap().dst)
        .collect();
    let proj = block
        .nodes()
        .iter()
        .find(|(_, &op)| op == OpKind::Conv1)
        .map(|(id, _)| *id)
        .unwrap();
    let d = s.c / 2;
    let mut concat = vec![0.0; s.c * n];
    for (hi, &qkv) in heads.iter().enumerate() {
        let mm2 = block
            .couples()
            .iter()
            .find(|(h, _)| *h == qkv)
            .map(|(_, t)| *t)
            .unwrap();
        let slot = block.output_edge(mm2, 0).unwrap().dst_port as usize;
        let bias_node = block
            .nodes()
            .iter()
            .find(|(id, &op)| {
                op == OpKind::RelPosBias && {
                    let m1 = block.input_edge(**id, 0).unwrap().src;
                    block.input_edge(m1, 0).unwrap().src == qkv
                }
            })
            .map(|(id, _)| *id)
            .unwrap();
        let table = param(store, bias_node, "table");
        let w = param(store, qkv, "weight");
        let b = param(store, qkv, "bias");
        // rows 0..d: Q, d..2d: K, 2d..3d: V
        let mut proj3 = vec![vec![0.0; n]; 3 * d];
        for (o, row) in proj3.iter_mut().enumerate() {
            for (p, v) in row.iter_mut().enumerate() {
                let mut acc = b[o];
                for i in 0..d {
                    acc += w[o * d + i] * x.data()[(hi * d + i) * n + p];
                }
                *v = acc;
            }
        }
        for q in 0..n {
            let (h1, w1) = (q / s.w, q % s.w);
            let mut logits = vec![0.0; n];
            for (k, l) in logits.iter_mut().enumerate() {
                let (h2, w2) = (k / s.w, k % s.w);
                let mut acc = 0.0;
                for c in 0..d {
                    acc += proj3[c][q] * proj3[d + c][k];
                }
                let rel = (h1 + s.h - 1 - h2) * (2 * s.w - 1) + (w1 + s.w - 1 - w2);
                *l = acc / (d as f64).sqrt() + table[rel];
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..d {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += (logits[k] - m).exp() / z * proj3[2 * d + c][k];
                }
                concat[(slot * d + c) * n + q] = acc;
            }
        }
    }
    let w = param(store, proj, "weight");
    let b = param(store, proj, "bias");
    let mut out = vec![0.0; s.c * n];
    for o in 0..s.c {
        for p in 0..n {
            let mut acc = b[o];
            for i in 0..s.c {
                acc += w[o * s.c + i] * concat[i * n + p];
            }
            out[o * n + p] = acc + x.data()[o * n + p];
        }
    }
    out
}

/// Desk walk seed: residual convolutions in stage one, inverted bottlenecks
/// in stage two.
pub fn desk_seed() -> NetworkSpec {
    seed_network(&Skeleton::desk(), &[BuilderVariant::ResNetBasic, BuilderVariant::MBConv4]).unwrap()
}

pub fn desk_budget() -> Budget {
    Budget::new(20_000, 200_000, 500_000, 10_000_000).unwrap()
}

/// Builder mix within the ImageNet-scale walk window (22-28M, 6-20G).
pub fn imagenet_seed() -> NetworkSpec {
    seed_network(
        &Skeleton::imagenet(),
        &[
            BuilderVariant::MBConv4,
            BuilderVariant::ResNetBasic,
            BuilderVariant::SelfAttention2Head,
            BuilderVariant::MBConv4,
        ],
    )
    .unwrap()
}

/// Single-node block on `op`, wired input -> op -> output.
pub fn single(op: OpKind, s: Shape) -> BlockGraph {
    let mut b = BlockGraph::empty(s);
    let n = b.add_node(op);
    b.connect(INPUT, 0, n, 0);
    b.connect(n, 0, uninas::graph::OUTPUT, 0);
    b
}
