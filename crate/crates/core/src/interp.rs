//! Reference forward executor.
//!
//! Tensors are `f64`, one [`Tensor`] per batch element. Semantics per op:
//!
//! - Softmax normalizes along the last (W) axis; Matmul1 lays out its
//!   `(1, H², W²)` output so that the last axis ranges over keys for square
//!   inputs, making Softmax the attention normalization.
//! - MaxPool2d: 3x3 window, stride 1, padding 1 (padding never wins).
//! - Conv3/ConvDepth3/ConvDepth5 zero-pad to keep `H, W`. Depthwise convs
//!   have no bias.
//! - BatchNorm normalizes each channel over batch and space with the current
//!   batch statistics; LayerNorm normalizes each position over channels.
//!   Both use `eps = 1e-5` and per-channel scale/shift.
//! - Mask keeps entries with `|h - w| <= 5`.
//! - GELU is the exact `x·Φ(x)`.
//! - ConvRed4 computes `W(x + b)` with `W` of shape `(c, 4c)` and the bias on
//!   the `4c` input side.
//! - RelPosBias on `(C, H', W')`, `a = √H'`, `b = √W'`, reads position
//!   `p = i·W' + j` as a (query, key) pair `(p / ab, p % ab)` of an `a x b`
//!   grid and adds `table[(h1-h2+a-1)(2b-1) + (w1-w2+b-1)]`, shared across
//!   channels.
//! - Dropout is the identity in [`Mode::Deterministic`]; in
//!   [`Mode::Stochastic`] it zeroes with probability 0.5 and scales by 2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::relpos_table_len;
use crate::graph::{
    assemble_network, BlockGraph, FusedProjection, NetworkError, NetworkSpec, NodeId, OpKind,
    PlanStep, ShapeError, INPUT, MASK_BAND, OUTPUT,
};
use crate::tensor::{exact_sqrt, Rng, Shape, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterpError {
    #[error("node {node} ({op}): expected input {expected}, got {found}")]
    ShapeMismatch {
        node: NodeId,
        op: OpKind,
        expected: String,
        found: Shape,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("no parameters stored for node {0}")]
    MissingParams(NodeId),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch elements have differing shapes")]
    RaggedBatch,
    #[error("parameter store does not match the network")]
    StoreMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone)]
pub struct EvalContext {
    pub mode: Mode,
    pub rng: Rng,
}

impl EvalContext {
    pub fn deterministic() -> Self {
        EvalContext {
            mode: Mode::Deterministic,
            rng: Rng::new(0),
        }
    }

    pub fn stochastic(rng: Rng) -> Self {
        EvalContext {
            mode: Mode::Stochastic,
            rng,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn zeros(name: &'static str, dims: &[usize]) -> Self {
        Param {
            name,
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    fn full(name: &'static str, dims: &[usize], v: f64) -> Self {
        Param {
            name,
            dims: dims.to_vec(),
            data: vec![v; dims.iter().product()],
        }
    }

    fn he(name: &'static str, dims: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let n = dims.iter().product();
        Param {
            name,
            dims: dims.to_vec(),
            data: rng.normal_vec(n, 0.0, (2.0 / fan_in as f64).sqrt()),
        }
    }
}

/// Trainable tensors of a block, keyed by node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    nodes: BTreeMap<NodeId, Vec<Param>>,
}

impl ParamStore {
    pub fn get(&self, node: NodeId) -> Option<&[Param]> {
        self.nodes.get(&node).map(|v| v.as_slice())
    }

    pub fn get_mut(&mut self, node: NodeId) -> Option<&mut Vec<Param>> {
        self.nodes.get_mut(&node)
    }

    pub fn insert(&mut self, node: NodeId, params: Vec<Param>) {
        self.nodes.insert(node, params);
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &[Param])> {
        self.nodes.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn node_scalars(&self, node: NodeId) -> usize {
        self.nodes
            .get(&node)
            .map_or(0, |ps| ps.iter().map(|p| p.data.len()).sum())
    }

    /// Total trainable scalars.
    pub fn len(&self) -> usize {
        self.nodes.keys().map(|&k| self.node_scalars(k)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All scalars in node order, then parameter order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.nodes
            .values()
            .flat_map(|ps| ps.iter().flat_map(|p| p.data.iter().copied()))
            .collect()
    }

    /// Mutable reference to the `i`-th scalar of [`ParamStore::to_flat`].
    pub fn scalar_mut(&mut self, mut i: usize) -> Option<&mut f64> {
        for ps in self.nodes.values_mut() {
            for p in ps.iter_mut() {
                if i < p.data.len() {
                    return Some(&mut p.data[i]);
                }
                i -= p.data.len();
            }
        }
        None
    }

    /// Set every scalar of parameters named `name` to `v`.
    pub fn fill(&mut self, name: &str, v: f64) {
        for ps in self.nodes.values_mut() {
            for p in ps.iter_mut().filter(|p| p.name == name) {
                p.data.fill(v);
            }
        }
    }
}

/// Fresh parameters for one node reading `cin` channels at shape `x`.
fn node_params(op: OpKind, x: Shape, cin: usize, rng: &mut Rng) -> Vec<Param> {
    let c = x.c;
    let pointwise = |rng: &mut Rng, cout: usize| {
        vec![
            Param::he("weight", &[cout, cin], cin, rng),
            Param::zeros("bias", &[cout]),
        ]
    };
    match op {
        OpKind::Conv1 => pointwise(rng, c),
        OpKind::ConvChunk3 => pointwise(rng, 3 * c),
        OpKind::ConvExp4 => pointwise(rng, 4 * c),
        OpKind::Conv3 => vec![
            Param::he("weight", &[c, cin, 3, 3], 9 * cin, rng),
            Param::zeros("bias", &[c]),
        ],
        OpKind::ConvDepth3 => vec![Param::he("weight", &[c, 3, 3], 9, rng)],
        OpKind::ConvDepth5 => vec![Param::he("weight", &[c, 5, 5], 25, rng)],
        OpKind::BatchNorm | OpKind::LayerNorm => {
            vec![Param::full("scale", &[c], 1.0), Param::zeros("shift", &[c])]
        }
        OpKind::RelPosBias => {
            let a = exact_sqrt(x.h).unwrap_or(0);
            let b = exact_sqrt(x.w).unwrap_or(0);
            vec![Param::zeros("table", &[relpos_table_len(a.max(1), b.max(1))])]
        }
        OpKind::ConvRed4 => {
            let r = c / 4;
            vec![
                Param::he("weight", &[r, c], c, rng),
                Param::zeros("input_bias", &[c]),
            ]
        }
        _ => Vec::new(),
    }
}

/// Parameters of a standalone block. Deterministic given the RNG state.
pub fn init_params(block: &BlockGraph, rng: &mut Rng) -> Result<ParamStore, InterpError> {
    init_params_fused(block, None, rng)
}

/// Parameters of a block whose leading convolution may absorb a projection.
pub fn init_params_fused(
    block: &BlockGraph,
    fused: Option<FusedProjection>,
    rng: &mut Rng,
) -> Result<ParamStore, InterpError> {
    let shapes = block.infer_shapes()?;
    let mut store = ParamStore::default();
    for id in block.topo_order()? {
        let op = block.op(id).expect("topo order yields live nodes");
        let x = shapes.nodes[&id].inputs[0];
        let cin = match fused {
            Some(f) if f.node == id => f.in_channels,
            _ => x.c,
        };
        let ps = node_params(op, x, cin, rng);
        if !ps.is_empty() {
            store.insert(id, ps);
        }
    }
    Ok(store)
}

fn weight<'a>(ps: &'a [Param], name: &str) -> &'a [f64] {
    &ps.iter().find(|p| p.name == name).expect("parameter present").data
}

/// `y[o,p] = b[o] + Σ_i w[o,i] x[i,p]`.
fn pointwise(x: &Tensor, w: &[f64], b: Option<&[f64]>, cout: usize) -> Tensor {
    let s = x.shape();
    let plane = s.plane();
    let cin = s.c;
    let mut out = vec![0.0; cout * plane];
    let xd = x.data();
    for o in 0..cout {
        let row = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = b {
            row.fill(b[o]);
        }
        for i in 0..cin {
            let wi = w[o * cin + i];
            if wi == 0.0 {
                continue;
            }
            let xi = &xd[i * plane..(i + 1) * plane];
            for (r, v) in row.iter_mut().zip(xi) {
                *r += wi * v;
            }
        }
    }
    Tensor::from_vec(Shape::new(cout, s.h, s.w), out).expect("sized")
}

/// Zero-padded stride-`stride` convolution with kernel `k`, padding `k/2`.
fn conv_kxk(x: &Tensor, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize) -> Tensor {
    let s = x.shape();
    let pad = (k / 2) as isize;
    let ho = (s.h + 2 * pad as usize - k) / stride + 1;
    let wo = (s.w + 2 * pad as usize - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    let xd = x.data();
    for o in 0..cout {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = b[o];
                for i in 0..s.c {
                    for kh in 0..k {
                        let ih = (oh * stride) as isize + kh as isize - pad;
                        if ih < 0 || ih >= s.h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (ow * stride) as isize + kw as isize - pad;
                            if iw < 0 || iw >= s.w as isize {
                                continue;
                            }
                            acc += w[((o * s.c + i) * k + kh) * k + kw]
                                * xd[(i * s.h + ih as usize) * s.w + iw as usize];
                        }
                    }
                }
                out[(o * ho + oh) * wo + ow] = acc;
            }
        }
    }
    Tensor::from_vec(Shape::new(cout, ho, wo), out).expect("sized")
}

fn depthwise(x: &Tensor, w: &[f64], k: usize) -> Tensor {
    let s = x.shape();
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; s.numel()];
    let xd = x.data();
    for c in 0..s.c {
        for h in 0..s.h {
            for ww in 0..s.w {
                let mut acc = 0.0;
                for kh in 0..k {
                    let ih = h as isize + kh as isize - pad;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = ww as isize + kw as isize - pad;
                        if iw < 0 || iw >= s.w as isize {
                            continue;
                        }
                        acc += w[(c * k + kh) * k + kw] * xd[(c * s.h + ih as usize) * s.w + iw as usize];
                    }
                }
                out[(c * s.h + h) * s.w + ww] = acc;
            }
        }
    }
    Tensor::from_vec(s, out).expect("sized")
}

/// Max-pool with a 3x3 window and padding 1.
fn max_pool(x: &Tensor, stride: usize) -> Tensor {
    let s = x.shape();
    let ho = (s.h + 2 - 3) / stride + 1;
    let wo = (s.w + 2 - 3) / stride + 1;
    let mut out = vec![f64::NEG_INFINITY; s.c * ho * wo];
    for c in 0..s.c {
        for oh in 0..ho {
            for ow in 0..wo {
                let o = &mut out[(c * ho + oh) * wo + ow];
                for kh in 0..3 {
                    let ih = (oh * stride + kh) as isize - 1;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    for kw in 0..3 {
                        let iw = (ow * stride + kw) as isize - 1;
                        if iw < 0 || iw >= s.w as isize {
                            continue;
                        }
                        *o = o.max(x.at(c, ih as usize, iw as usize));
                    }
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.c, ho, wo), out).expect("sized")
}

fn softmax_last(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(s.w) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_vec(s, out).expect("sized")
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn split_channels(x: &Tensor, parts: usize) -> Vec<Tensor> {
    let s = x.shape();
    let c = s.c / parts;
    let n = c * s.plane();
    x.data()
        .chunks(n)
        .map(|d| Tensor::from_vec(s.with_channels(c), d.to_vec()).expect("sized"))
        .collect()
}

fn concat_channels(xs: &[Tensor]) -> Tensor {
    let s = xs[0].shape();
    let c = xs.iter().map(|t| t.shape().c).sum();
    let data = xs.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(s.with_channels(c), data).expect("sized")
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.shape(), data).expect("sized")
}

/// `(1, H², W²)` scores, entry `(h1·W+w1)·HW + (h2·W+w2)` holding
/// `Σ_c x[c,h1,w1]·y[c,h2,w2] / √C`.
pub fn matmul1(x: &Tensor, y: &Tensor) -> Tensor {
    let s = x.shape();
    let p = s.plane();
    let scale = 1.0 / (s.c as f64).sqrt();
    let mut out = vec![0.0; p * p];
    let (xd, yd) = (x.data(), y.data());
    for c in 0..s.c {
        let xc = &xd[c * p..(c + 1) * p];
        let yc = &yd[c * p..(c + 1) * p];
        for (q, xv) in xc.iter().enumerate() {
            let row = &mut out[q * p..(q + 1) * p];
            for (r, yv) in row.iter_mut().zip(yc) {
                *r += xv * yv;
            }
        }
    }
    for v in out.iter_mut() {
        *v *= scale;
    }
    Tensor::from_vec(Shape::new(1, s.h * s.h, s.w * s.w), out).expect("sized")
}

/// `out[c,h,w] = Σ_{h̃,w̃} x[(h·W+w)·HW + h̃·W+w̃] · y[c,h̃,w̃]`.
pub fn matmul2(x: &Tensor, y: &Tensor) -> Tensor {
    let s = y.shape();
    let p = s.plane();
    let xd = x.data();
    let yd = y.data();
    let mut out = vec![0.0; s.numel()];
    for c in 0..s.c {
        let yc = &yd[c * p..(c + 1) * p];
        for q in 0..p {
            let row = &xd[q * p..(q + 1) * p];
            out[c * p + q] = row.iter().zip(yc).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::from_vec(s, out).expect("sized")
}

fn relpos_bias(x: &Tensor, table: &[f64]) -> Tensor {
    let s = x.shape();
    let a = exact_sqrt(s.h).expect("checked by shape inference");
    let b = exact_sqrt(s.w).expect("checked by shape inference");
    let grid = a * b;
    let mut out = x.data().to_vec();
    let plane = s.plane();
    for pos in 0..plane {
        let (q, k) = (pos / grid, pos % grid);
        let (h1, w1) = (q / b, q % b);
        let (h2, w2) = (k / b, k % b);
        let t = table[(h1 + a - 1 - h2) * (2 * b - 1) + (w1 + b - 1 - w2)];
        for c in 0..s.c {
            out[c * plane + pos] += t;
        }
    }
    Tensor::from_vec(s, out).expect("sized")
}

fn mask_diag(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = x.data().to_vec();
    for c in 0..s.c {
        for h in 0..s.h {
            for w in 0..s.w {
                if h.abs_diff(w) > MASK_BAND {
                    out[(c * s.h + h) * s.w + w] = 0.0;
                }
            }
        }
    }
    Tensor::from_vec(s, out).expect("sized")
}

fn global_avg(x: &Tensor) -> Tensor {
    let s = x.shape();
    let p = s.plane() as f64;
    let data = (0..s.c).map(|c| x.channel(c).iter().sum::<f64>() / p).collect();
    Tensor::from_vec(Shape::new(s.c, 1, 1), data).expect("sized")
}

fn upsample(x: &Tensor, h: usize, w: usize) -> Tensor {
    let s = x.shape();
    let data = (0..s.c)
        .flat_map(|c| {
            let v = x.data()[c * s.plane()];
            std::iter::repeat_n(v, h * w)
        })
        .collect();
    Tensor::from_vec(Shape::new(s.c, h, w), data).expect("sized")
}

fn batch_norm(xs: &[Tensor], scale: &[f64], shift: &[f64]) -> Vec<Tensor> {
    let s = xs[0].shape();
    let n = (xs.len() * s.plane()) as f64;
    let mut out: Vec<Vec<f64>> = xs.iter().map(|t| t.data().to_vec()).collect();
    for c in 0..s.c {
        let mean = xs.iter().map(|t| t.channel(c).iter().sum::<f64>()).sum::<f64>() / n;
        let var = xs
            .iter()
            .map(|t| t.channel(c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for o in out.iter_mut() {
            for v in &mut o[c * s.plane()..(c + 1) * s.plane()] {
                *v = scale[c] * (*v - mean) * inv + shift[c];
            }
        }
    }
    out.into_iter()
        .map(|d| Tensor::from_vec(s, d).expect("sized"))
        .collect()
}

fn layer_norm(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let s = x.shape();
    let p = s.plane();
    let xd = x.data();
    let mut out = vec![0.0; s.numel()];
    for pos in 0..p {
        let mean = (0..s.c).map(|c| xd[c * p + pos]).sum::<f64>() / s.c as f64;
        let var = (0..s.c)
            .map(|c| (xd[c * p + pos] - mean).powi(2))
            .sum::<f64>()
            / s.c as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for c in 0..s.c {
            out[c * p + pos] = scale[c] * (xd[c * p + pos] - mean) * inv + shift[c];
        }
    }
    Tensor::from_vec(s, out).expect("sized")
}

type Batch = Vec<Tensor>;

fn per_sample(xs: &[Tensor], f: impl Fn(&Tensor) -> Tensor) -> Batch {
    xs.iter().map(f).collect()
}

/// Evaluate one node on a batch. `inputs[k]` is the batch on port `k`.
fn eval_node(
    op: OpKind,
    inputs: Vec<Batch>,
    ps: &[Param],
    upsample_to: Option<(usize, usize)>,
    ctx: &mut EvalContext,
) -> Vec<Batch> {
    let mut inputs = inputs.into_iter();
    let x = inputs.next().expect("at least one input");
    let one = |b: Batch| vec![b];
    match op {
        OpKind::Softmax => one(per_sample(&x, softmax_last)),
        OpKind::Dropout => match ctx.mode {
            Mode::Deterministic => one(x),
            Mode::Stochastic => one(
                x.iter()
                    .map(|t| {
                        let d = t
                            .data()
                            .iter()
                            .map(|v| if ctx.rng.uniform() < 0.5 { 0.0 } else { 2.0 * v })
                            .collect();
                        Tensor::from_vec(t.shape(), d).expect("sized")
                    })
                    .collect(),
            ),
        },
        OpKind::MaxPool2d => one(per_sample(&x, |t| max_pool(t, 1))),
        OpKind::Mask => one(per_sample(&x, mask_diag)),
        OpKind::Sigmoid => one(per_sample(&x, |t| t.map(sigmoid))),
        OpKind::Gelu => one(per_sample(&x, |t| t.map(gelu))),
        OpKind::Conv1 | OpKind::ConvChunk3 | OpKind::ConvExp4 => {
            let w = weight(ps, "weight");
            let b = weight(ps, "bias");
            let y = per_sample(&x, |t| pointwise(t, w, Some(b), b.len()));
            if op == OpKind::ConvChunk3 {
                let mut outs = vec![Vec::new(), Vec::new(), Vec::new()];
                for t in &y {
                    for (k, part) in split_channels(t, 3).into_iter().enumerate() {
                        outs[k].push(part);
                    }
                }
                outs
            } else {
                one(y)
            }
        }
        OpKind::Conv3 => {
            let b = weight(ps, "bias");
            let w = weight(ps, "weight");
            one(per_sample(&x, |t| conv_kxk(t, w, b, b.len(), 3, 1)))
        }
        OpKind::ConvDepth3 => one(per_sample(&x, |t| depthwise(t, weight(ps, "weight"), 3))),
        OpKind::ConvDepth5 => one(per_sample(&x, |t| depthwise(t, weight(ps, "weight"), 5))),
        OpKind::BatchNorm => one(batch_norm(&x, weight(ps, "scale"), weight(ps, "shift"))),
        OpKind::LayerNorm => {
            let (sc, sh) = (weight(ps, "scale"), weight(ps, "shift"));
            one(per_sample(&x, |t| layer_norm(t, sc, sh)))
        }
        OpKind::RelPosBias => one(per_sample(&x, |t| relpos_bias(t, weight(ps, "table")))),
        OpKind::Chunk2 | OpKind::Chunk3 => {
            let k = if op == OpKind::Chunk2 { 2 } else { 3 };
            let mut outs = vec![Vec::new(); k];
            for t in &x {
                for (i, part) in split_channels(t, k).into_iter().enumerate() {
                    outs[i].push(part);
                }
            }
            outs
        }
        OpKind::Copy => vec![x.clone(), x],
        OpKind::Concat2 | OpKind::Concat3 => {
            let rest: Vec<Batch> = inputs.collect();
            one((0..x.len())
                .map(|i| {
                    let mut parts = vec![x[i].clone()];
                    parts.extend(rest.iter().map(|b| b[i].clone()));
                    concat_channels(&parts)
                })
                .collect())
        }
        OpKind::Add | OpKind::Multiply | OpKind::Matmul1 | OpKind::Matmul2 => {
            let y = inputs.next().expect("binary op");
            one(x
                .iter()
                .zip(&y)
                .map(|(a, b)| match op {
                    OpKind::Add => zip_with(a, b, |p, q| p + q),
                    OpKind::Multiply => zip_with(a, b, |p, q| p * q),
                    OpKind::Matmul1 => matmul1(a, b),
                    _ => matmul2(a, b),
                })
                .collect())
        }
        OpKind::ConvRed4 => {
            let w = weight(ps, "weight");
            let bin = weight(ps, "input_bias");
            let out_c = w.len() / bin.len();
            one(per_sample(&x, |t| {
                let p = t.shape().plane();
                let shifted: Vec<f64> = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + bin[i / p])
                    .collect();
                let shifted = Tensor::from_vec(t.shape(), shifted).expect("sized");
                pointwise(&shifted, w, None, out_c)
            }))
        }
        OpKind::GlobalAvg => one(per_sample(&x, global_avg)),
        OpKind::UpSample => {
            let (h, w) = upsample_to.expect("UpSample is coupled");
            one(per_sample(&x, |t| upsample(t, h, w)))
        }
    }
}

fn check_batch(batch: &[Tensor]) -> Result<Shape, InterpError> {
    let first = batch.first().ok_or(InterpError::EmptyBatch)?.shape();
    if batch.iter().any(|t| t.shape() != first) {
        return Err(InterpError::RaggedBatch);
    }
    Ok(first)
}

/// Run `block` on a batch of inputs of its input shape.
pub fn forward(
    block: &BlockGraph,
    params: &ParamStore,
    batch: &[Tensor],
    ctx: &mut EvalContext,
) -> Result<Vec<Tensor>, InterpError> {
    forward_fused(block, params, None, batch, ctx)
}

/// [`forward`] for a block whose leading convolution may read a wider or
/// narrower input than the block width.
pub fn forward_fused(
    block: &BlockGraph,
    params: &ParamStore,
    fused: Option<FusedProjection>,
    batch: &[Tensor],
    ctx: &mut EvalContext,
) -> Result<Vec<Tensor>, InterpError> {
    let shape = check_batch(batch)?;
    let expected_in = match fused {
        Some(f) => block.input_shape().with_channels(f.in_channels),
        None => block.input_shape(),
    };
    if shape != expected_in {
        return Err(InterpError::ShapeMismatch {
            node: INPUT,
            op: OpKind::Copy,
            expected: expected_in.to_string(),
            found: shape,
        });
    }
    let shapes = block.infer_shapes()?;
    let mut values: BTreeMap<(NodeId, u8), Batch> = BTreeMap::new();
    values.insert((INPUT, 0), batch.to_vec());
    let mut pooled: BTreeMap<NodeId, (usize, usize)> = BTreeMap::new();
    for id in block.topo_order()? {
        let op = block.op(id).expect("live node");
        let mut inputs = Vec::with_capacity(op.input_arity());
        for port in 0..op.input_arity() as u8 {
            let e = block.input_edge(id, port).ok_or(ShapeError::MissingInput { node: id, port })?;
            let v = values
                .remove(&(e.src, e.src_port))
                .expect("producer evaluated before consumer");
            inputs.push(v);
        }
        let expected = &shapes.nodes[&id].inputs;
        for (k, b) in inputs.iter().enumerate() {
            let found = b[0].shape();
            let ok = found == expected[k]
                || (k == 0 && fused.is_some_and(|f| f.node == id) && found == expected[k].with_channels(fused.unwrap().in_channels));
            if !ok {
                return Err(InterpError::ShapeMismatch {
                    node: id,
                    op,
                    expected: expected[k].to_string(),
                    found,
                });
            }
        }
        if op == OpKind::GlobalAvg {
            let s = inputs[0][0].shape();
            pooled.insert(id, (s.h, s.w));
        }
        let upsample_to = (op == OpKind::UpSample).then(|| {
            block
                .couples()
                .iter()
                .find(|&&(_, t)| t == id)
                .and_then(|(h, _)| pooled.get(h).copied())
        });
        let ps: &[Param] = if op.is_parameterized() {
            params.get(id).ok_or(InterpError::MissingParams(id))?
        } else {
            &[]
        };
        let outs = eval_node(op, inputs, ps, upsample_to.flatten(), ctx);
        for (port, b) in outs.into_iter().enumerate() {
            values.insert((id, port as u8), b);
        }
    }
    let e = block
        .input_edge(OUTPUT, 0)
        .ok_or(ShapeError::MissingInput { node: OUTPUT, port: 0 })?;
    Ok(values.remove(&(e.src, e.src_port)).expect("output produced"))
}

/// Parameters of a whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    /// Weight `(Co, Ci, 3, 3)` and bias of each stem convolution.
    pub stem: Vec<Vec<Param>>,
    /// Unfused projections, keyed by the block index they feed.
    pub projections: BTreeMap<usize, Vec<Param>>,
    pub blocks: Vec<ParamStore>,
    /// Weight `(K, C)` and bias `K`.
    pub head: Vec<Param>,
}

impl NetworkParams {
    pub fn len(&self) -> usize {
        let sum = |ps: &[Param]| ps.iter().map(|p| p.data.len()).sum::<usize>();
        self.stem.iter().map(|p| sum(p)).sum::<usize>()
            + self.projections.values().map(|p| sum(p)).sum::<usize>()
            + self.blocks.iter().map(ParamStore::len).sum::<usize>()
            + sum(&self.head)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters for every part of `spec`: the stem, projections, each block
/// (from an independent stream per block) and the head.
pub fn init_network_params(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams, InterpError> {
    let plan = assemble_network(spec)?;
    let mut rng = Rng::derive(seed, u64::MAX);
    let mut out = NetworkParams {
        stem: Vec::new(),
        projections: BTreeMap::new(),
        blocks: Vec::new(),
        head: Vec::new(),
    };
    let mut pending_projection = None;
    for step in &plan.steps {
        match *step {
            PlanStep::StemConv { input, out_channels } => out.stem.push(vec![
                Param::he("weight", &[out_channels, input.c, 3, 3], 9 * input.c, &mut rng),
                Param::zeros("bias", &[out_channels]),
            ]),
            PlanStep::Projection { input, out_channels } => {
                pending_projection = Some(vec![
                    Param::he("weight", &[out_channels, input.c], input.c, &mut rng),
                    Param::zeros("bias", &[out_channels]),
                ]);
            }
            PlanStep::Block { index, fused, .. } => {
                if let Some(p) = pending_projection.take() {
                    out.projections.insert(index, p);
                }
                let mut brng = Rng::derive(seed, index as u64);
                out.blocks
                    .push(init_params_fused(&spec.blocks[index], fused, &mut brng)?);
            }
            PlanStep::FullyConnected { in_features, out_features } => {
                out.head = vec![
                    Param::he("weight", &[out_features, in_features], in_features, &mut rng),
                    Param::zeros("bias", &[out_features]),
                ];
            }
            PlanStep::MaxPool { .. } | PlanStep::GlobalAvgPool { .. } => {}
        }
    }
    Ok(out)
}

/// Class scores, row-major `batch x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }
}

/// Stem, stages (pool, projection, blocks) and head on a batch of images.
pub fn forward_network(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &[Tensor],
    ctx: &mut EvalContext,
) -> Result<Logits, InterpError> {
    let plan = assemble_network(spec)?;
    let shape = check_batch(batch)?;
    let expected = Shape::new(spec.input_channels, spec.input_resolution.0, spec.input_resolution.1);
    if shape != expected {
        return Err(InterpError::ShapeMismatch {
            node: INPUT,
            op: OpKind::Copy,
            expected: expected.to_string(),
            found: shape,
        });
    }
    if params.blocks.len() != spec.blocks.len() || params.stem.len() != 2 {
        return Err(InterpError::StoreMismatch);
    }
    let mut x: Batch = batch.to_vec();
    let mut stem = params.stem.iter();
    let mut pooled: Option<Vec<Vec<f64>>> = None;
    for step in &plan.steps {
        match *step {
            PlanStep::StemConv { out_channels, .. } => {
                let ps = stem.next().ok_or(InterpError::StoreMismatch)?;
                let (w, b) = (weight(ps, "weight"), weight(ps, "bias"));
                x = per_sample(&x, |t| conv_kxk(t, w, b, out_channels, 3, 2).map(gelu));
            }
            PlanStep::MaxPool { .. } => x = per_sample(&x, |t| max_pool(t, 2)),
            PlanStep::Projection { .. } => {}
            PlanStep::Block { index, fused, .. } => {
                if let Some(ps) = params.projections.get(&index) {
                    let (w, b) = (weight(ps, "weight"), weight(ps, "bias"));
                    x = per_sample(&x, |t| pointwise(t, w, Some(b), b.len()));
                }
                x = forward_fused(&spec.blocks[index], &params.blocks[index], fused, &x, ctx)?;
            }
            PlanStep::GlobalAvgPool { .. } => {
                pooled = Some(x.iter().map(|t| global_avg(t).into_data()).collect());
            }
            PlanStep::FullyConnected { in_features, out_features } => {
                let feats = pooled.take().ok_or(InterpError::StoreMismatch)?;
                let (w, b) = (weight(&params.head, "weight"), weight(&params.head, "bias"));
                let mut data = Vec::with_capacity(feats.len() * out_features);
                for f in &feats {
                    for k in 0..out_features {
                        let row = &w[k * in_features..(k + 1) * in_features];
                        data.push(b[k] + row.iter().zip(f).map(|(a, v)| a * v).sum::<f64>());
                    }
                }
                return Ok(Logits {
                    batch: feats.len(),
                    classes: out_features,
                    data,
                });
            }
        }
    }
    Err(InterpError::StoreMismatch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Skeleton;
    use crate::mutation::Template;
    use crate::tensor::normal_sample;

    fn single(op: OpKind, s: Shape) -> BlockGraph {
        let mut b = BlockGraph::identity(s);
        let e = *b.edges().next().unwrap();
        Template::Single(op).instantiate(&mut b, &e);
        b
    }

    #[test]
    fn softmax_uniform_row() {
        let t = Tensor::zeros(Shape::new(1, 1, 3));
        let y = softmax_last(&t);
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul1_on_ones() {
        let x = Tensor::full(Shape::new(1, 2, 2), 1.0);
        let y = matmul1(&x, &x);
        assert_eq!(y.shape(), Shape::new(1, 4, 4));
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv1_store_size() {
        let b = single(OpKind::Conv1, Shape::new(4, 2, 2));
        let store = init_params(&b, &mut Rng::new(1)).unwrap();
        assert_eq!(store.len(), 20);
    }

    #[test]
    fn identity_block_has_empty_store() {
        let b = BlockGraph::identity(Shape::new(4, 2, 2));
        assert!(init_params(&b, &mut Rng::new(1)).unwrap().is_empty());
    }

    #[test]
    fn deterministic_mode_ignores_rng() {
        let b = single(OpKind::Dropout, Shape::new(2, 3, 3));
        let p = init_params(&b, &mut Rng::new(1)).unwrap();
        let x = vec![normal_sample(&mut Rng::new(2), Shape::new(2, 3, 3), 0.0, 1.0)];
        let mut c1 = EvalContext { mode: Mode::Deterministic, rng: Rng::new(5) };
        let mut c2 = EvalContext { mode: Mode::Deterministic, rng: Rng::new(6) };
        let y1 = forward(&b, &p, &x, &mut c1).unwrap();
        let y2 = forward(&b, &p, &x, &mut c2).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(y1, x);
    }

    #[test]
    fn stochastic_dropout_scales_survivors() {
        let b = single(OpKind::Dropout, Shape::new(1, 8, 8));
        let p = init_params(&b, &mut Rng::new(1)).unwrap();
        let x = vec![Tensor::full(Shape::new(1, 8, 8), 1.5)];
        let y = forward(&b, &p, &x, &mut EvalContext::stochastic(Rng::new(3))).unwrap();
        assert!(y[0].data().iter().all(|&v| v == 0.0 || v == 3.0));
        assert!(y[0].data().iter().any(|&v| v == 0.0));
    }

    #[test]
    fn network_logits_shape_and_determinism() {
        let net = NetworkSpec::identity(&Skeleton::desk());
        let params = init_network_params(&net, 11).unwrap();
        let mut rng = Rng::new(4);
        let batch: Vec<Tensor> = (0..2).map(|_| normal_sample(&mut rng, Shape::new(3, 32, 32), 0.0, 1.0)).collect();
        let a = forward_network(&net, &params, &batch, &mut EvalContext::deterministic()).unwrap();
        let b = forward_network(&net, &init_network_params(&net, 11).unwrap(), &batch, &mut EvalContext::deterministic()).unwrap();
        assert_eq!((a.batch, a.classes), (2, 10));
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let net = NetworkSpec::identity(&Skeleton::desk());
        let mut params = init_network_params(&net, 1).unwrap();
        for p in params.head.iter_mut() {
            p.data.fill(0.0);
        }
        let x = vec![Tensor::full(Shape::new(3, 32, 32), 0.3); 2];
        let l = forward_network(&net, &params, &x, &mut EvalContext::deterministic()).unwrap();
        assert!(l.data.iter().all(|&v| v == 0.0));
    }
}
