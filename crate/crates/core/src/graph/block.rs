use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::op::{OpKind, PortShapes, RuleViolation};
use crate::tensor::Shape;

/// Stable node identifier. `0` and `1` are the virtual block input and
/// output; interior nodes are numbered from `2` and ids are never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

pub const INPUT: NodeId = NodeId(0);
pub const OUTPUT: NodeId = NodeId(1);
const FIRST_INTERIOR: u32 = 2;

impl NodeId {
    pub fn is_virtual(self) -> bool {
        self.0 < FIRST_INTERIOR
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            INPUT => f.write_str("in"),
            OUTPUT => f.write_str("out"),
            NodeId(n) => write!(f, "n{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub src_port: u8,
    pub dst: NodeId,
    pub dst_port: u8,
}

impl Edge {
    pub fn new(src: NodeId, src_port: u8, dst: NodeId, dst_port: u8) -> Self {
        Edge {
            src,
            src_port,
            dst,
            dst_port,
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{} -> {}.{}", self.src, self.src_port, self.dst, self.dst_port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("shape mismatch at {node}: expected {expected}, found {found}")]
    ShapeMismatch {
        node: NodeId,
        expected: Shape,
        found: Shape,
    },
    #[error("divisibility violation at {node}: {rule}")]
    DivisibilityViolation { node: NodeId, rule: &'static str },
    #[error("{node}: spatial dims of {shape} have no integer square root")]
    NonSquareSpatial { node: NodeId, shape: Shape },
    #[error("{node}: diagonal mask undefined for non-square {shape}")]
    DiagonalUndefined { node: NodeId, shape: Shape },
    #[error("{node}: UpSample without a coupled GlobalAvg")]
    UncoupledUpSample { node: NodeId },
    #[error("{node}: input port {port} is not connected")]
    MissingInput { node: NodeId, port: u8 },
    #[error("graph contains a cycle")]
    CycleDetected,
}

impl ShapeError {
    fn from_rule(node: NodeId, v: RuleViolation) -> Self {
        match v {
            RuleViolation::Mismatch { expected, found } => ShapeError::ShapeMismatch {
                node,
                expected,
                found,
            },
            RuleViolation::Divisibility(rule) => ShapeError::DivisibilityViolation { node, rule },
            RuleViolation::NonSquareSpatial(shape) => ShapeError::NonSquareSpatial { node, shape },
            RuleViolation::DiagonalUndefined(shape) => {
                ShapeError::DiagonalUndefined { node, shape }
            }
            RuleViolation::MissingUpsampleTarget => ShapeError::UncoupledUpSample { node },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeShapes {
    pub inputs: PortShapes,
    pub outputs: PortShapes,
}

/// Result of shape inference: concrete shapes for every interior node plus
/// the shape arriving at the block output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMap {
    pub input: Shape,
    pub nodes: BTreeMap<NodeId, NodeShapes>,
    pub output: Shape,
}

impl ShapeMap {
    /// Shape carried by `edge` (its producer's output at `src_port`).
    pub fn edge_shape(&self, edge: &Edge) -> Shape {
        if edge.src == INPUT {
            self.input
        } else {
            self.nodes[&edge.src].outputs[edge.src_port as usize]
        }
    }

    pub fn input_shape_of(&self, node: NodeId) -> Shape {
        self.nodes[&node].inputs[0]
    }
}

/// Bucketed index over sorted ids: the top bits of an id pick a short run
/// of candidates.
struct IdLookup {
    shift: u32,
    start: Vec<u32>,
}

impl IdLookup {
    fn new(ids: &[NodeId]) -> Self {
        let max = ids.last().map_or(0, |n| n.0) as u64;
        let mut shift = 0;
        while (max >> shift) + 1 > ids.len().max(1) as u64 {
            shift += 1;
        }
        let buckets = (max >> shift) as usize + 1;
        let mut start = vec![0u32; buckets + 1];
        for id in ids {
            start[(id.0 as u64 >> shift) as usize + 1] += 1;
        }
        for i in 0..buckets {
            start[i + 1] += start[i];
        }
        IdLookup { shift, start }
    }

    fn get(&self, ids: &[NodeId], id: NodeId) -> Option<usize> {
        let b = (id.0 as u64 >> self.shift) as usize;
        if b + 1 >= self.start.len() {
            return None;
        }
        let (lo, hi) = (self.start[b] as usize, self.start[b + 1] as usize);
        ids[lo..hi].iter().position(|&n| n == id).map(|k| lo + k)
    }
}

/// Index-based view of a block for linear-time traversals. Indices follow
/// ascending node id, so index order breaks ties exactly like id order.
pub(super) struct Dense {
    pub(super) ids: Vec<NodeId>,
    /// `None` for the virtual nodes and for ids only named by edges.
    pub(super) ops: Vec<Option<OpKind>>,
    out_start: Vec<usize>,
    /// `(src_port, dst, dst_port)` grouped by source.
    out: Vec<(u8, usize, u8)>,
    in_start: Vec<usize>,
    /// Source index of each incoming edge, grouped by destination.
    inn: Vec<usize>,
}

impl Dense {
    pub(super) fn new(g: &BlockGraph) -> Self {
        let mut ids: Vec<NodeId> = Vec::with_capacity(g.nodes.len() + 2);
        ids.push(INPUT);
        ids.push(OUTPUT);
        ids.extend(g.nodes.keys().copied());
        let mut ops: Vec<Option<OpKind>> = Vec::with_capacity(ids.len());
        ops.extend([None, None]);
        ops.extend(g.nodes.values().map(|&op| Some(op)));
        let mut lookup = IdLookup::new(&ids);
        let mut pairs = Vec::with_capacity(g.edges.len());
        for e in &g.edges {
            match (lookup.get(&ids, e.src), lookup.get(&ids, e.dst)) {
                (Some(s), Some(d)) => pairs.push((s, e.src_port, d, e.dst_port)),
                _ => {
                    pairs.clear();
                    break;
                }
            }
        }
        if pairs.len() != g.edges.len() {
            // edges name nodes that do not exist: index them too
            let mut all: Vec<NodeId> = ids.clone();
            all.extend(g.edges.iter().flat_map(|e| [e.src, e.dst]));
            all.sort();
            all.dedup();
            ops = all.iter().map(|id| g.nodes.get(id).copied()).collect();
            ids = all;
            lookup = IdLookup::new(&ids);
            pairs = g
                .edges
                .iter()
                .map(|e| {
                    let at = |n| lookup.get(&ids, n).expect("indexed above");
                    (at(e.src), e.src_port, at(e.dst), e.dst_port)
                })
                .collect();
        }
        let n = ids.len();
        let mut out_start = vec![0; n + 1];
        let mut in_start = vec![0; n + 1];
        for &(s, _, d, _) in &pairs {
            out_start[s + 1] += 1;
            in_start[d + 1] += 1;
        }
        for i in 0..n {
            out_start[i + 1] += out_start[i];
            in_start[i + 1] += in_start[i];
        }
        let mut out = vec![(0, 0, 0); pairs.len()];
        let mut inn = vec![0; pairs.len()];
        let mut out_fill = out_start.clone();
        let mut in_fill = in_start.clone();
        for &(s, sp, d, dp) in &pairs {
            out[out_fill[s]] = (sp, d, dp);
            out_fill[s] += 1;
            inn[in_fill[d]] = s;
            in_fill[d] += 1;
        }
        Dense {
            ids,
            ops,
            out_start,
            out,
            in_start,
            inn,
        }
    }

    pub(super) fn len(&self) -> usize {
        self.ids.len()
    }

    pub(super) fn index(&self, id: NodeId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub(super) fn succ(&self, i: usize) -> &[(u8, usize, u8)] {
        &self.out[self.out_start[i]..self.out_start[i + 1]]
    }

    pub(super) fn pred(&self, i: usize) -> &[usize] {
        &self.inn[self.in_start[i]..self.in_start[i + 1]]
    }

    fn topo(&self) -> Result<Vec<usize>, ShapeError> {
        let n = self.len();
        let mut indeg: Vec<usize> = (0..n).map(|i| self.in_start[i + 1] - self.in_start[i]).collect();
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &(_, d, _) in self.succ(i) {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.push(Reverse(d));
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err(ShapeError::CycleDetected)
        }
    }

    /// Some topological order, cheaper than `topo` when ties need not
    /// follow id order.
    pub(super) fn kahn(&self) -> Result<Vec<usize>, ShapeError> {
        let n = self.len();
        let mut indeg: Vec<usize> = (0..n).map(|i| self.in_start[i + 1] - self.in_start[i]).collect();
        let mut order: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut k = 0;
        while k < order.len() {
            let i = order[k];
            k += 1;
            for &(_, d, _) in self.succ(i) {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    order.push(d);
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err(ShapeError::CycleDetected)
        }
    }

    /// Directed path from `from` to `to`, searching only nodes placed before
    /// `to` in the topological positions `pos`. `seen` holds visit stamps;
    /// entries equal to `stamp` count as visited.
    pub(super) fn reaches(&self, from: usize, to: usize, pos: &[usize], seen: &mut [u32], stamp: u32) -> bool {
        let mut stack = vec![from];
        while let Some(i) = stack.pop() {
            for &(_, j, _) in self.succ(i) {
                if j == to {
                    return true;
                }
                if seen[j] != stamp && pos[j] < pos[to] {
                    seen[j] = stamp;
                    stack.push(j);
                }
            }
        }
        false
    }

    /// Reachability marks from `from` (exclusive) along edges, or against
    /// them when `backward`.
    fn reach(&self, from: usize, backward: bool) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![from];
        while let Some(i) = stack.pop() {
            if backward {
                for &j in self.pred(i) {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            } else {
                for &(_, j, _) in self.succ(i) {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        seen
    }

    pub(super) fn enclosing_couples<'a>(
        &self,
        g: &'a BlockGraph,
        v: NodeId,
    ) -> impl Iterator<Item = (NodeId, NodeId)> + 'a {
        let marks = self.index(v).map(|i| (self.reach(i, true), self.reach(i, false)));
        let at: Vec<Option<(bool, bool)>> = g
            .couples
            .iter()
            .map(|&(h, t)| {
                let (up, down) = marks.as_ref()?;
                let h_in = h == v || self.index(h).is_some_and(|k| up[k]);
                let t_in = t == v || self.index(t).is_some_and(|k| down[k]);
                Some((h_in, t_in))
            })
            .collect();
        g.couples
            .iter()
            .zip(at)
            .filter(|(_, m)| *m == Some((true, true)))
            .map(|(c, _)| *c)
    }

    fn collect(&self, marks: &[bool]) -> BTreeSet<NodeId> {
        marks
            .iter()
            .zip(&self.ids)
            .filter(|(m, _)| **m)
            .map(|(_, id)| *id)
            .collect()
    }
}

/// A block: a DAG of elementary operations between one virtual input and one
/// virtual output. Every port carries exactly one edge; branching happens only
/// through multi-output operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockGraph {
    input_shape: Shape,
    nodes: BTreeMap<NodeId, OpKind>,
    edges: BTreeSet<Edge>,
    /// Edge entering each `(dst, dst_port)`.
    incoming: BTreeMap<(NodeId, u8), Edge>,
    couples: BTreeSet<(NodeId, NodeId)>,
    next_id: u32,
}

impl BlockGraph {
    /// The identity block: input wired straight to output.
    pub fn identity(input_shape: Shape) -> Self {
        let mut g = Self::empty(input_shape);
        g.connect(INPUT, 0, OUTPUT, 0);
        g
    }

    /// No interior nodes and no edges; callers wire everything themselves.
    pub fn empty(input_shape: Shape) -> Self {
        BlockGraph {
            input_shape,
            nodes: BTreeMap::new(),
            edges: BTreeSet::new(),
            incoming: BTreeMap::new(),
            couples: BTreeSet::new(),
            next_id: FIRST_INTERIOR,
        }
    }

    /// Reassemble from raw parts (deserialization). No validation is done.
    pub fn from_parts(
        input_shape: Shape,
        nodes: BTreeMap<NodeId, OpKind>,
        edges: impl IntoIterator<Item = Edge>,
        couples: impl IntoIterator<Item = (NodeId, NodeId)>,
        next_id: u32,
    ) -> Self {
        let edges: BTreeSet<Edge> = edges.into_iter().collect();
        BlockGraph {
            input_shape,
            nodes,
            incoming: edges.iter().map(|e| ((e.dst, e.dst_port), *e)).collect(),
            edges,
            couples: couples.into_iter().collect(),
            next_id,
        }
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, OpKind> {
        &self.nodes
    }

    pub fn op(&self, id: NodeId) -> Option<OpKind> {
        self.nodes.get(&id).copied()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.is_virtual() || self.nodes.contains_key(&id)
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn has_edge(&self, edge: &Edge) -> bool {
        self.edges.contains(edge)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn couples(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.couples
    }

    pub fn add_node(&mut self, op: OpKind) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(id, op);
        id
    }

    pub fn connect(&mut self, src: NodeId, src_port: u8, dst: NodeId, dst_port: u8) {
        let e = Edge::new(src, src_port, dst, dst_port);
        self.edges.insert(e);
        self.incoming.insert((dst, dst_port), e);
    }

    pub fn couple(&mut self, head: NodeId, tail: NodeId) {
        self.couples.insert((head, tail));
    }

    pub(crate) fn remove_edge(&mut self, edge: &Edge) -> bool {
        let removed = self.edges.remove(edge);
        if removed && self.incoming.get(&(edge.dst, edge.dst_port)) == Some(edge) {
            self.incoming.remove(&(edge.dst, edge.dst_port));
        }
        removed
    }

    /// Remove nodes together with every edge and couple touching them.
    pub(crate) fn remove_nodes(&mut self, doomed: &BTreeSet<NodeId>) {
        for id in doomed {
            self.nodes.remove(id);
        }
        self.edges
            .retain(|e| !doomed.contains(&e.src) && !doomed.contains(&e.dst));
        self.incoming
            .retain(|_, e| !doomed.contains(&e.src) && !doomed.contains(&e.dst));
        self.couples
            .retain(|(h, t)| !doomed.contains(h) && !doomed.contains(t));
    }

    /// Edges entering `id`, by port.
    pub fn in_edges(&self, id: NodeId) -> Vec<Edge> {
        self.incoming
            .range((id, 0)..=(id, u8::MAX))
            .map(|(_, e)| *e)
            .collect()
    }

    fn out_range(&self, id: NodeId) -> impl Iterator<Item = &Edge> {
        self.edges
            .range(Edge::new(id, 0, NodeId(0), 0)..=Edge::new(id, u8::MAX, NodeId(u32::MAX), u8::MAX))
    }

    /// Edges leaving `id`, by port.
    pub fn out_edges(&self, id: NodeId) -> Vec<Edge> {
        self.out_range(id).copied().collect()
    }

    /// Edge feeding `id` at `port`.
    pub fn input_edge(&self, id: NodeId, port: u8) -> Option<Edge> {
        self.incoming.get(&(id, port)).copied()
    }

    /// Edge leaving `id` at `port`.
    pub fn output_edge(&self, id: NodeId, port: u8) -> Option<Edge> {
        self.out_range(id).find(|e| e.src_port == port).copied()
    }

    /// First interior node after the virtual input, if any.
    pub fn leading_node(&self) -> Option<(NodeId, OpKind)> {
        let e = self.output_edge(INPUT, 0)?;
        self.op(e.dst).map(|op| (e.dst, op))
    }

    /// Topological order of all nodes including the virtual endpoints, ties
    /// broken by smallest id.
    pub fn full_topo_order(&self) -> Result<Vec<NodeId>, ShapeError> {
        let d = Dense::new(self);
        Ok(d.topo()?.into_iter().map(|i| d.ids[i]).collect())
    }

    /// Deterministic topological order of interior nodes.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, ShapeError> {
        Ok(self
            .full_topo_order()?
            .into_iter()
            .filter(|n| !n.is_virtual())
            .collect())
    }

    /// Concrete input and output shapes of every node. An `UpSample` takes
    /// its spatial size from the input of its coupled `GlobalAvg`.
    pub fn infer_shapes(&self) -> Result<ShapeMap, ShapeError> {
        let d = Dense::new(self);
        let order = d.kahn()?;
        self.infer_on(&d, &order)
    }

    pub(super) fn infer_on(&self, d: &Dense, order: &[usize]) -> Result<ShapeMap, ShapeError> {
        let n = d.len();
        let mut pool_of: Vec<Option<usize>> = vec![None; n];
        for &(h, t) in &self.couples {
            if self.op(h) == Some(OpKind::GlobalAvg) {
                if let (Some(h), Some(t)) = (d.index(h), d.index(t)) {
                    pool_of[t] = Some(h);
                }
            }
        }
        let mut incoming: Vec<[Option<Shape>; 3]> = vec![[None; 3]; n];
        let mut shapes: Vec<Option<NodeShapes>> = vec![None; n];
        let mut output = None;
        let push = |incoming: &mut Vec<[Option<Shape>; 3]>, i: usize, outs: &[Shape]| {
            for &(sp, j, dp) in d.succ(i) {
                if let (Some(s), Some(slot)) = (outs.get(sp as usize), incoming[j].get_mut(dp as usize)) {
                    *slot = Some(*s);
                }
            }
        };
        for &i in order {
            let id = d.ids[i];
            match id {
                INPUT => push(&mut incoming, i, &[self.input_shape]),
                OUTPUT => {
                    output = Some(incoming[i][0].ok_or(ShapeError::MissingInput { node: OUTPUT, port: 0 })?);
                }
                _ => {
                    let Some(op) = d.ops[i] else { continue };
                    let inputs = (0..op.input_arity() as u8)
                        .map(|p| incoming[i][p as usize].ok_or(ShapeError::MissingInput { node: id, port: p }))
                        .collect::<Result<PortShapes, _>>()?;
                    let target = if op == OpKind::UpSample {
                        pool_of[i]
                            .and_then(|g| shapes[g].as_ref())
                            .map(|s| (s.inputs[0].h, s.inputs[0].w))
                    } else {
                        None
                    };
                    let outputs = op
                        .output_shapes(&inputs, target)
                        .map_err(|v| ShapeError::from_rule(id, v))?;
                    push(&mut incoming, i, &outputs);
                    shapes[i] = Some(NodeShapes { inputs, outputs });
                }
            }
        }
        Ok(ShapeMap {
            input: self.input_shape,
            nodes: d
                .ids
                .iter()
                .zip(shapes)
                .filter_map(|(id, s)| s.map(|s| (*id, s)))
                .collect(),
            output: output.ok_or(ShapeError::MissingInput { node: OUTPUT, port: 0 })?,
        })
    }

    /// Nodes reachable from `from` (exclusive).
    pub fn descendants(&self, from: NodeId) -> BTreeSet<NodeId> {
        let d = Dense::new(self);
        d.index(from).map_or_else(BTreeSet::new, |i| d.collect(&d.reach(i, false)))
    }

    /// Nodes that reach `to` (exclusive).
    pub fn ancestors(&self, to: NodeId) -> BTreeSet<NodeId> {
        let d = Dense::new(self);
        d.index(to).map_or_else(BTreeSet::new, |i| d.collect(&d.reach(i, true)))
    }

    /// Whether a directed path leads from `from` to `to`.
    pub fn reaches(&self, from: NodeId, to: NodeId) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            for e in self.out_range(n) {
                if e.dst == to {
                    return true;
                }
                if seen.insert(e.dst) {
                    stack.push(e.dst);
                }
            }
        }
        false
    }

    /// Couples whose region contains `v`, in couple order.
    pub fn enclosing_couples(&self, v: NodeId) -> Vec<(NodeId, NodeId)> {
        Dense::new(self).enclosing_couples(self, v).collect()
    }

    /// `head`, `tail`, and every node on a directed path strictly between them.
    pub fn region(&self, head: NodeId, tail: NodeId) -> BTreeSet<NodeId> {
        let d = Dense::new(self);
        let mut r = match (d.index(head), d.index(tail)) {
            (Some(h), Some(t)) => {
                let down = d.reach(h, false);
                let up = d.reach(t, true);
                let both: Vec<bool> = down.iter().zip(&up).map(|(a, b)| *a && *b).collect();
                d.collect(&both)
            }
            _ => BTreeSet::new(),
        };
        r.insert(head);
        r.insert(tail);
        r
    }

    /// 64-bit digest of the structure, used to detect edits proposed
    /// against a different graph.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Digest::default();
        h.write(self.input_shape.c as u64);
        h.write(self.input_shape.h as u64);
        h.write(self.input_shape.w as u64);
        h.write(self.next_id as u64);
        for (id, op) in &self.nodes {
            h.write((id.0 as u64) << 8 | *op as u64);
        }
        for e in &self.edges {
            h.write((e.src.0 as u64) << 8 | e.src_port as u64);
            h.write((e.dst.0 as u64) << 8 | e.dst_port as u64 | 1 << 63);
        }
        for (a, b) in &self.couples {
            h.write((a.0 as u64) << 32 | b.0 as u64);
        }
        h.finish()
    }

    /// Relabel nodes by a depth-first walk from the input that follows output
    /// ports in order. Two blocks are isomorphic (as port-labelled DAGs with
    /// couples) iff their canonical forms are equal.
    pub fn canonical_form(&self) -> CanonicalBlock {
        let mut label: BTreeMap<NodeId, u32> = BTreeMap::new();
        label.insert(INPUT, 0);
        label.insert(OUTPUT, 1);
        let mut next = 2u32;
        let mut stack = vec![INPUT];
        while let Some(n) = stack.pop() {
            let outs = self.out_edges(n);
            for e in outs.iter().rev() {
                if !label.contains_key(&e.dst) {
                    label.insert(e.dst, next);
                    next += 1;
                    stack.push(e.dst);
                }
            }
        }
        // Unreachable nodes only occur in malformed graphs; keep them distinct.
        for id in self.nodes.keys() {
            label.entry(*id).or_insert_with(|| {
                let l = 1_000_000 + next;
                next += 1;
                l
            });
        }
        let nodes: BTreeMap<u32, OpKind> =
            self.nodes.iter().map(|(id, op)| (label[id], *op)).collect();
        let edges: BTreeSet<(u32, u8, u32, u8)> = self
            .edges
            .iter()
            .map(|e| (label[&e.src], e.src_port, label[&e.dst], e.dst_port))
            .collect();
        let couples: BTreeSet<(u32, u32)> = self
            .couples
            .iter()
            .filter_map(|(a, b)| Some((*label.get(a)?, *label.get(b)?)))
            .collect();
        CanonicalBlock {
            input_shape: self.input_shape,
            nodes,
            edges,
            couples,
        }
    }

    pub fn is_isomorphic(&self, other: &BlockGraph) -> bool {
        self.canonical_form() == other.canonical_form()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalBlock {
    pub input_shape: Shape,
    pub nodes: BTreeMap<u32, OpKind>,
    pub edges: BTreeSet<(u32, u8, u32, u8)>,
    pub couples: BTreeSet<(u32, u32)>,
}

#[derive(Default)]
struct Digest(u64);

impl Digest {
    fn write(&mut self, w: u64) {
        self.0 = (self.0.rotate_left(5) ^ w).wrapping_mul(0x517c_c1b7_2722_0a95);
    }
    fn finish(&self) -> u64 {
        let mut x = self.0;
        x ^= x >> 33;
        x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
        x ^ (x >> 33)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(ops: &[OpKind], shape: Shape) -> (BlockGraph, Vec<NodeId>) {
        let mut g = BlockGraph::empty(shape);
        let mut prev = INPUT;
        let mut ids = vec![];
        for op in ops {
            let id = g.add_node(*op);
            g.connect(prev, 0, id, 0);
            prev = id;
            ids.push(id);
        }
        g.connect(prev, 0, OUTPUT, 0);
        (g, ids)
    }

    #[test]
    fn chain_topo_order() {
        let (g, ids) = chain(
            &[OpKind::Gelu, OpKind::Conv1, OpKind::Sigmoid],
            Shape::new(2, 2, 2),
        );
        assert_eq!(g.topo_order().unwrap(), ids);
    }

    #[test]
    fn diamond_topo_order() {
        let mut g = BlockGraph::empty(Shape::new(2, 2, 2));
        let copy = g.add_node(OpKind::Copy);
        let add = g.add_node(OpKind::Add);
        let y = g.add_node(OpKind::Gelu);
        let x = g.add_node(OpKind::Sigmoid);
        g.connect(INPUT, 0, copy, 0);
        g.connect(copy, 0, x, 0);
        g.connect(copy, 1, y, 0);
        g.connect(x, 0, add, 0);
        g.connect(y, 0, add, 1);
        g.connect(add, 0, OUTPUT, 0);
        let order = g.topo_order().unwrap();
        assert_eq!(order.first(), Some(&copy));
        assert_eq!(order.last(), Some(&add));
    }

    #[test]
    fn cycle_detected() {
        let mut g = BlockGraph::empty(Shape::new(2, 2, 2));
        let a = g.add_node(OpKind::Gelu);
        let b = g.add_node(OpKind::Gelu);
        g.connect(a, 0, b, 0);
        g.connect(b, 0, a, 0);
        assert_eq!(g.topo_order(), Err(ShapeError::CycleDetected));
    }

    #[test]
    fn chunk3_on_four_channels_fails() {
        let mut g = BlockGraph::empty(Shape::new(4, 8, 8));
        let c = g.add_node(OpKind::Chunk3);
        let k = g.add_node(OpKind::Concat3);
        g.connect(INPUT, 0, c, 0);
        for p in 0..3 {
            g.connect(c, p, k, p);
        }
        g.connect(k, 0, OUTPUT, 0);
        assert!(matches!(
            g.infer_shapes(),
            Err(ShapeError::DivisibilityViolation { node, .. }) if node == c
        ));
    }

    #[test]
    fn upsample_restores_global_avg_input() {
        let (mut g, ids) = chain(&[OpKind::GlobalAvg, OpKind::UpSample], Shape::new(3, 5, 7));
        assert!(matches!(
            g.infer_shapes(),
            Err(ShapeError::UncoupledUpSample { .. })
        ));
        g.couple(ids[0], ids[1]);
        let s = g.infer_shapes().unwrap();
        assert_eq!(s.output, Shape::new(3, 5, 7));
        assert_eq!(s.nodes[&ids[1]].inputs[0], Shape::new(3, 1, 1));
    }

    #[test]
    fn isomorphism_ignores_ids() {
        let (a, _) = chain(&[OpKind::Gelu, OpKind::Conv1], Shape::new(2, 2, 2));
        let mut b = BlockGraph::empty(Shape::new(2, 2, 2));
        let _burn = b.add_node(OpKind::Softmax);
        b.remove_nodes(&[_burn].into_iter().collect());
        let conv = b.add_node(OpKind::Conv1);
        let gelu = b.add_node(OpKind::Gelu);
        b.connect(INPUT, 0, gelu, 0);
        b.connect(gelu, 0, conv, 0);
        b.connect(conv, 0, OUTPUT, 0);
        assert!(a.is_isomorphic(&b));
        assert_ne!(a.fingerprint(), b.fingerprint());
        let (c, _) = chain(&[OpKind::Conv1, OpKind::Gelu], Shape::new(2, 2, 2));
        assert!(!a.is_isomorphic(&c));
    }

    #[test]
    fn region_spans_branch() {
        let mut g = BlockGraph::empty(Shape::new(2, 2, 2));
        let copy = g.add_node(OpKind::Copy);
        let conv = g.add_node(OpKind::Conv1);
        let add = g.add_node(OpKind::Add);
        g.connect(INPUT, 0, copy, 0);
        g.connect(copy, 0, conv, 0);
        g.connect(conv, 0, add, 0);
        g.connect(copy, 1, add, 1);
        g.connect(add, 0, OUTPUT, 0);
        let r = g.region(copy, add);
        assert_eq!(r, [copy, conv, add].into_iter().collect());
    }
}
