//! Interchange formats: the JSON graph document, line-delimited walk logs,
//! DOT export and the training-protocol emitter.
//!
//! Graph documents are topology only; parameters are regenerated from a seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{network_cost, Cost, CostError};
use crate::graph::{
    assemble_network, BlockGraph, Edge, NetworkError, NetworkSpec, NodeId, OpKind, StageSpec, INPUT,
    OUTPUT,
};
use crate::search::WalkRecord;
use crate::tensor::Shape;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IoError {
    #[error("malformed document: {0}")]
    Format(String),
    #[error("unsupported format_version {0} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("block {block} lists node {node} twice")]
    DuplicateNode { block: usize, node: u32 },
    #[error("node id {node} in block {block} is virtual or not below next_id {next_id}")]
    BadNodeId { block: usize, node: u32, next_id: u32 },
    #[error(transparent)]
    Invalid(#[from] NetworkError),
    #[error("embedded cost {embedded:?} differs from recomputed {computed:?}")]
    CostMismatch { embedded: Cost, computed: Cost },
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl From<serde_json::Error> for IoError {
    fn from(e: serde_json::Error) -> Self {
        IoError::Format(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub input_channels: usize,
    pub input_resolution: [usize; 2],
    pub stem_out_channels: usize,
    pub stages: Vec<StageDoc>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDoc {
    pub blocks: usize,
    pub channels: usize,
    pub spatial: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: u32,
    pub op: OpKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDoc {
    pub input_shape: Shape,
    pub next_id: u32,
    /// Topological order.
    pub nodes: Vec<NodeDoc>,
    /// `[src, src_port, dst, dst_port]`, sorted; 0 is the input, 1 the output.
    pub edges: Vec<[u32; 4]>,
    /// `[head, tail]`, sorted.
    pub couples: Vec<[u32; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostAnnotation {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub format_version: u32,
    pub network: NetworkMeta,
    pub blocks: Vec<BlockDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostAnnotation>,
}

fn block_doc(b: &BlockGraph) -> Result<BlockDoc, IoError> {
    let order = b
        .topo_order()
        .map_err(|e| IoError::Format(e.to_string()))?;
    Ok(BlockDoc {
        input_shape: b.input_shape(),
        next_id: b.next_id(),
        nodes: order
            .into_iter()
            .map(|id| NodeDoc {
                id: id.0,
                op: b.op(id).expect("live"),
            })
            .collect(),
        edges: b
            .edges()
            .map(|e| [e.src.0, e.src_port as u32, e.dst.0, e.dst_port as u32])
            .collect(),
        couples: b.couples().iter().map(|(h, t)| [h.0, t.0]).collect(),
    })
}

pub fn to_document(net: &NetworkSpec) -> Result<GraphDocument, IoError> {
    assemble_network(net)?;
    let total = network_cost(net)?.total;
    Ok(GraphDocument {
        format_version: FORMAT_VERSION,
        network: NetworkMeta {
            input_channels: net.input_channels,
            input_resolution: [net.input_resolution.0, net.input_resolution.1],
            stem_out_channels: net.stem_out_channels,
            stages: net
                .stages
                .iter()
                .map(|s| StageDoc {
                    blocks: s.n_blocks,
                    channels: s.channels,
                    spatial: [s.spatial.0, s.spatial.1],
                })
                .collect(),
            num_classes: net.num_classes,
        },
        blocks: net.blocks.iter().map(block_doc).collect::<Result<_, _>>()?,
        cost: Some(CostAnnotation {
            params: total.params,
            flops: total.flops,
        }),
    })
}

/// Canonical pretty JSON with a trailing newline.
pub fn serialize(net: &NetworkSpec) -> Result<String, IoError> {
    let mut s = serde_json::to_string_pretty(&to_document(net)?)?;
    s.push('\n');
    Ok(s)
}

fn port(v: u32, block: usize) -> Result<u8, IoError> {
    u8::try_from(v).map_err(|_| IoError::Format(format!("port {v} out of range in block {block}")))
}

fn block_from_doc(i: usize, d: &BlockDoc) -> Result<BlockGraph, IoError> {
    let mut nodes = BTreeMap::new();
    for n in &d.nodes {
        if n.id < 2 || n.id >= d.next_id {
            return Err(IoError::BadNodeId {
                block: i,
                node: n.id,
                next_id: d.next_id,
            });
        }
        if nodes.insert(NodeId(n.id), n.op).is_some() {
            return Err(IoError::DuplicateNode { block: i, node: n.id });
        }
    }
    let edges = d
        .edges
        .iter()
        .map(|e| Ok(Edge::new(NodeId(e[0]), port(e[1], i)?, NodeId(e[2]), port(e[3], i)?)))
        .collect::<Result<Vec<_>, IoError>>()?;
    let couples = d.couples.iter().map(|c| (NodeId(c[0]), NodeId(c[1])));
    Ok(BlockGraph::from_parts(d.input_shape, nodes, edges, couples, d.next_id))
}

pub fn from_document(doc: &GraphDocument) -> Result<NetworkSpec, IoError> {
    if doc.format_version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(doc.format_version));
    }
    let m = &doc.network;
    let net = NetworkSpec {
        input_channels: m.input_channels,
        input_resolution: (m.input_resolution[0], m.input_resolution[1]),
        stem_out_channels: m.stem_out_channels,
        stages: m
            .stages
            .iter()
            .map(|s| StageSpec {
                n_blocks: s.blocks,
                channels: s.channels,
                spatial: (s.spatial[0], s.spatial[1]),
            })
            .collect(),
        blocks: doc
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| block_from_doc(i, b))
            .collect::<Result<_, _>>()?,
        num_classes: m.num_classes,
    };
    assemble_network(&net)?;
    if let Some(c) = doc.cost {
        let computed = network_cost(&net)?.total;
        let embedded = Cost::new(c.params, c.flops);
        if computed != embedded {
            return Err(IoError::CostMismatch { embedded, computed });
        }
    }
    Ok(net)
}

/// Parse and validate a graph document, checking any embedded cost.
pub fn parse(text: &str) -> Result<NetworkSpec, IoError> {
    from_document(&serde_json::from_str(text)?)
}

/// One JSON object per line.
pub fn write_walk_log(records: &[WalkRecord]) -> Result<String, IoError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_walk_log(text: &str) -> Result<Vec<WalkRecord>, IoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IoError::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn dot_id(block: usize, id: NodeId) -> String {
    match id {
        INPUT => format!("b{block}_in"),
        OUTPUT => format!("b{block}_out"),
        NodeId(n) => format!("b{block}_n{n}"),
    }
}

fn write_block_dot(out: &mut String, index: usize, b: &BlockGraph) -> Result<(), IoError> {
    let shapes = b.infer_shapes().map_err(|e| IoError::Format(e.to_string()))?;
    let couple_of: BTreeMap<NodeId, usize> = b
        .couples()
        .iter()
        .enumerate()
        .flat_map(|(k, (h, t))| [(*h, k), (*t, k)])
        .collect();
    let s = b.input_shape();
    writeln!(out, "  subgraph cluster_b{index} {{").unwrap();
    writeln!(out, "    label=\"block {index} {s}\";").unwrap();
    writeln!(out, "    {} [label=\"input\\n{s}\", shape=ellipse];", dot_id(index, INPUT)).unwrap();
    let order = b.topo_order().map_err(|e| IoError::Format(e.to_string()))?;
    for id in order {
        let op = b.op(id).expect("live");
        let shape = shapes.nodes[&id].inputs[0];
        let mut attrs = format!("label=\"{op}\\n{shape}\"");
        if let Some(k) = couple_of.get(&id) {
            write!(attrs, ", xlabel=\"pair {k}\", group=\"pair{k}\"").unwrap();
        }
        writeln!(out, "    {} [{attrs}];", dot_id(index, id)).unwrap();
    }
    writeln!(out, "    {} [label=\"output\\n{}\", shape=ellipse];", dot_id(index, OUTPUT), shapes.output).unwrap();
    for e in b.edges() {
        writeln!(
            out,
            "    {} -> {} [taillabel=\"{}\", headlabel=\"{}\"];",
            dot_id(index, e.src),
            dot_id(index, e.dst),
            e.src_port,
            e.dst_port
        )
        .unwrap();
    }
    writeln!(out, "  }}").unwrap();
    Ok(())
}

/// DOT for a single block.
pub fn block_to_dot(b: &BlockGraph) -> Result<String, IoError> {
    let mut out = String::from("digraph block {\n  node [shape=box];\n");
    write_block_dot(&mut out, 0, b)?;
    out.push_str("}\n");
    Ok(out)
}

/// DOT for a network: one cluster per block, chained output to input.
pub fn network_to_dot(net: &NetworkSpec) -> Result<String, IoError> {
    let mut out = String::from("digraph network {\n  node [shape=box];\n");
    for (i, b) in net.blocks.iter().enumerate() {
        write_block_dot(&mut out, i, b)?;
    }
    for i in 1..net.blocks.len() {
        writeln!(out, "  {} -> {};", dot_id(i - 1, OUTPUT), dot_id(i, INPUT)).unwrap();
    }
    out.push_str("}\n");
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Detection,
    Segmentation,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "cls" => Ok(Task::Classification),
            "detection" | "det" => Ok(Task::Detection),
            "segmentation" | "seg" => Ok(Task::Segmentation),
            _ => Err(format!("unknown task `{s}` (expected classification, detection or segmentation)")),
        }
    }
}

/// A per-GPU value `mantissa x 10^exponent` multiplied by the GPU count.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PerGpu(f64, i32);

/// Learning rate: a number when the GPU count is known, `"N*…"` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaledLr {
    Value(f64),
    Symbolic(String),
}

impl PerGpu {
    fn emit(self, gpus: Option<u32>) -> ScaledLr {
        let PerGpu(m, e) = self;
        if m == 0.0 {
            return ScaledLr::Value(0.0);
        }
        match gpus {
            Some(n) => ScaledLr::Value(f64::from(n) * m / 10f64.powi(-e)),
            None => ScaledLr::Symbolic(format!("N*{m}e{e}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub task: Task,
    pub training_data: String,
    pub network_head: String,
    /// `None` leaves learning rates symbolic in `N`.
    pub gpu_count: Option<u32>,
    pub epochs: u32,
    pub warmup_epochs: u32,
    pub batch_size_per_gpu: u32,
    pub optimizer: String,
    pub weight_decay: f64,
    pub lr_schedule: String,
    pub warmup_lr: ScaledLr,
    pub min_lr: ScaledLr,
    pub learning_rate: ScaledLr,
    pub data_augmentation: Vec<String>,
    pub gradient_clip: f64,
    pub drop_path: f64,
    /// Width x height in pixels.
    pub input_resolution: [u32; 2],
}

pub fn protocol(task: Task, gpu_count: Option<u32>) -> ProtocolConfig {
    let s = |x: &str| x.to_string();
    let (data, head, epochs, batch, schedule, min_lr, lr, aug, drop, res) = match task {
        Task::Classification => (
            "ImageNet-1k",
            "FC",
            150,
            48,
            "cosine",
            PerGpu(1.0, -6),
            PerGpu(1.0, -4),
            vec![s("rand-m15-n2-mstd0.5")],
            0.2,
            [224, 224],
        ),
        Task::Detection => (
            "COCO",
            "Mask R-CNN",
            12,
            4,
            "multi-step",
            PerGpu(2.5, -6),
            PerGpu(2.5, -5),
            vec![s("RandFlip0.5")],
            0.1,
            [1280, 800],
        ),
        Task::Segmentation => (
            "ADE20K",
            "UperNet",
            125,
            4,
            "linear",
            PerGpu(0.0, 0),
            PerGpu(1.5, -5),
            vec![s("PhotoMetricDist."), s("RandFlip0.5")],
            0.3,
            [512, 512],
        ),
    };
    ProtocolConfig {
        task,
        training_data: s(data),
        network_head: s(head),
        gpu_count,
        epochs,
        warmup_epochs: 5,
        batch_size_per_gpu: batch,
        optimizer: s("AdamW"),
        weight_decay: 0.05,
        lr_schedule: s(schedule),
        warmup_lr: PerGpu(1.0, -7).emit(gpu_count),
        min_lr: min_lr.emit(gpu_count),
        learning_rate: lr.emit(gpu_count),
        data_augmentation: aug,
        gradient_clip: 1.0,
        drop_path: drop,
        input_resolution: res,
    }
}

/// Pretty JSON of [`protocol`], newline-terminated.
pub fn emit_protocol(task: Task, gpu_count: Option<u32>) -> String {
    let mut s = serde_json::to_string_pretty(&protocol(task, gpu_count)).expect("plain data");
    s.push('\n');
    s
}
