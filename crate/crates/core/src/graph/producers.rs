//! Producer-edge indexing: for every Conv2d/Linear output edge, the set of
//! downstream linear consumers reachable through channel-preserving ops,
//! Add, Cat and Flatten, together with the path bookkeeping a consumer
//! rewrite needs. Also computes the residual merge groups: producer edges
//! forced by Add nodes to share one channel layout.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId, NodeKind};
use crate::transform::PathDescriptor;

/// One downstream linear consumer of a producer edge, with the slice and
/// lift information needed to rewrite its weight.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConsumerRef {
    pub node: NodeId,
    pub path: PathDescriptor,
    pub groups: usize,
}

/// Where probe activations for this edge are captured: post-BN when a
/// BatchNorm is the sole direct reader of the producer (the layout-relevant
/// semantic site under BN-compensated scaling), otherwise the raw producer
/// output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptureSite {
    PostBn(NodeId),
    ProducerOutput(NodeId),
}

impl CaptureSite {
    pub fn node(&self) -> NodeId {
        match *self {
            CaptureSite::PostBn(n) | CaptureSite::ProducerOutput(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerEdge {
    pub node: NodeId,
    /// Current output channel width.
    pub width: usize,
    /// Downstream linear consumers, one entry per distinct (consumer, slice)
    /// path. A consumer reading the same slice through two paths (e.g. both
    /// operands of an Add) appears once; distinct cat slices appear
    /// separately.
    pub consumers: Vec<ConsumerRef>,
    /// Some path reaches the graph output without crossing a linear
    /// consumer, so any layout change would alter the output contract.
    pub feeds_output: bool,
    /// Transform barrier: grouped/depthwise producer, a grouped consumer on
    /// some path, or an unsupported traversal (e.g. structure after a
    /// flatten). Barriers keep their layout.
    pub barrier: bool,
    /// BatchNorm node that is the sole direct reader of this edge, if any.
    pub bn_next: Option<NodeId>,
    pub capture: CaptureSite,
}

impl ProducerEdge {
    /// Whether attacks and recovery may change this edge's channel layout.
    pub fn rewritable(&self) -> bool {
        !self.feeds_output && !self.barrier && !self.consumers.is_empty()
    }
}

/// Compute producer edges for every Conv2d/Linear node, in topological order.
pub fn eligible_producers(g: &Graph) -> Vec<ProducerEdge> {
    let mut out = Vec::new();
    for &id in g.topo_order() {
        let kind = &g.node(id).kind;
        if !kind.is_linear_op() {
            continue;
        }
        let width = kind.out_channels().expect("linear op");
        let grouped_producer = matches!(kind, NodeKind::Conv2d { groups, .. } if *groups > 1);

        let mut consumers = Vec::new();
        let mut feeds_output = false;
        let mut barrier = grouped_producer;
        let mut visited: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
        // State: (tensor-producing node, channel offset of our slice within
        // that tensor's bus, spatial lift factor accumulated at a flatten).
        // States are deduplicated after port-dependent offset adjustment;
        // consumer records are deduplicated at the end.
        let mut stack = vec![(id, 0usize, 1usize)];
        while let Some((at, offset, lift)) = stack.pop() {
            for (dst, port) in g.consumers_of(at) {
                let push = |stack: &mut Vec<(NodeId, usize, usize)>,
                                visited: &mut BTreeSet<(usize, usize, usize)>,
                                state: (NodeId, usize, usize)| {
                    if visited.insert((state.0 .0, state.1, state.2)) {
                        stack.push(state);
                    }
                };
                // Once a flatten lifted the bus, only ReLU and a Linear
                // consumer keep channel semantics intact.
                if lift > 1
                    && !matches!(
                        g.node(dst).kind,
                        NodeKind::ReLU | NodeKind::Linear { .. } | NodeKind::Output
                    )
                {
                    barrier = true;
                    continue;
                }
                match &g.node(dst).kind {
                    NodeKind::Conv2d { groups, .. } => {
                        if *groups > 1 {
                            barrier = true;
                        }
                        consumers.push(ConsumerRef {
                            node: dst,
                            path: PathDescriptor {
                                slice_offset: offset,
                                slice_len: width,
                                lift_hw: 1,
                                bus_channels: g.shape_of(at)[0],
                            },
                            groups: *groups,
                        });
                    }
                    NodeKind::Linear { .. } => {
                        // For a lifted bus the offset stays in pre-flatten
                        // channel units; bus width is recovered from the
                        // flattened length.
                        let bus_channels = g.shape_of(at)[0] / lift;
                        consumers.push(ConsumerRef {
                            node: dst,
                            path: PathDescriptor {
                                slice_offset: offset,
                                slice_len: width,
                                lift_hw: lift,
                                bus_channels,
                            },
                            groups: 1,
                        });
                    }
                    NodeKind::ReLU
                    | NodeKind::BatchNorm { .. }
                    | NodeKind::AvgPoolGlobal
                    | NodeKind::Add => {
                        push(&mut stack, &mut visited, (dst, offset, lift));
                    }
                    NodeKind::Cat => {
                        // Offset of our slice advances by the widths of the
                        // cat operands on lower ports.
                        let ins = g.inputs_of(dst);
                        let ahead: usize = ins[..port]
                            .iter()
                            .map(|i| g.shape_of(*i)[0])
                            .sum();
                        push(&mut stack, &mut visited, (dst, offset + ahead, lift));
                    }
                    NodeKind::Flatten => {
                        let in_shape = g.shape_of(at);
                        let f = in_shape.iter().skip(1).product::<usize>().max(1);
                        push(&mut stack, &mut visited, (dst, offset, f));
                    }
                    NodeKind::Output => {
                        feeds_output = true;
                    }
                    NodeKind::Input { .. } => unreachable!("input has no inputs"),
                }
            }
        }
        consumers.sort_by_key(|c| (c.node, c.path.slice_offset));
        consumers.dedup();

        let direct = g.consumers_of(id);
        let bn_next = match direct.as_slice() {
            [(dst, _)] if matches!(g.node(*dst).kind, NodeKind::BatchNorm { .. }) => Some(*dst),
            _ => None,
        };
        let capture = match bn_next {
            Some(bn) => CaptureSite::PostBn(bn),
            None => CaptureSite::ProducerOutput(id),
        };
        out.push(ProducerEdge {
            node: id,
            width,
            consumers,
            feeds_output,
            barrier,
            bn_next,
            capture,
        });
    }

    mark_add_barriers(g, &mut out);
    out
}

/// Producer edges directly behind one Add operand, walking back through
/// channel-preserving ops and nested Adds. `None` when the operand hangs off
/// something else (Input, Cat, ...), which our alignment policy does not
/// cover.
fn add_operand_producers(g: &Graph, node: NodeId) -> Option<Vec<NodeId>> {
    match &g.node(node).kind {
        NodeKind::Conv2d { .. } | NodeKind::Linear { .. } => Some(vec![node]),
        NodeKind::ReLU | NodeKind::BatchNorm { .. } => {
            add_operand_producers(g, g.inputs_of(node)[0])
        }
        NodeKind::Add => {
            let ins = g.inputs_of(node);
            let mut a = add_operand_producers(g, ins[0])?;
            a.extend(add_operand_producers(g, ins[1])?);
            Some(a)
        }
        _ => None,
    }
}

/// Any Add whose operand chain we cannot align (e.g. an Add over a Cat)
/// turns every producer feeding it into a barrier.
fn mark_add_barriers(g: &Graph, producers: &mut [ProducerEdge]) {
    for node in g.nodes() {
        if !matches!(node.kind, NodeKind::Add) {
            continue;
        }
        let ins = g.inputs_of(node.id);
        let supported = ins
            .iter()
            .all(|&op| add_operand_producers(g, op).is_some());
        if !supported {
            // Conservatively freeze everything upstream of this Add.
            let mut reach: BTreeSet<NodeId> = BTreeSet::new();
            let mut stack = vec![node.id];
            while let Some(at) = stack.pop() {
                for &src in &g.inputs_of(at) {
                    if reach.insert(src) {
                        stack.push(src);
                    }
                }
            }
            for p in producers.iter_mut() {
                if reach.contains(&p.node) {
                    p.barrier = true;
                }
            }
        }
    }
}

/// Producer edges constrained (transitively) to share one channel layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeGroup {
    /// Member producer nodes, sorted by id.
    pub producers: Vec<NodeId>,
}

/// Minimal union-find over producer indices.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            self.parent[x] = self.find(self.parent[x]);
        }
        self.parent[x]
    }
    fn union(&mut self, x: usize, y: usize) {
        let (rx, ry) = (self.find(x), self.find(y));
        if rx != ry {
            self.parent[ry.max(rx)] = ry.min(rx);
        }
    }
}

/// Connected components of the Add-alignment relation over producer edges.
/// Producers not constrained by any Add form singleton groups. The result is
/// independent of edge enumeration order: groups are sorted by their lowest
/// member id.
pub fn merge_groups(g: &Graph, producers: &[ProducerEdge]) -> Vec<MergeGroup> {
    let index_of = |id: NodeId| producers.iter().position(|p| p.node == id);
    let mut uf = UnionFind::new(producers.len());
    for node in g.nodes() {
        if !matches!(node.kind, NodeKind::Add) {
            continue;
        }
        let ins = g.inputs_of(node.id);
        let mut members: Vec<usize> = Vec::new();
        let mut supported = true;
        for &op in &ins {
            match add_operand_producers(g, op) {
                Some(ids) => {
                    members.extend(ids.iter().filter_map(|&i| index_of(i)));
                }
                None => supported = false,
            }
        }
        if !supported {
            continue; // those producers are barriers already
        }
        for w in members.windows(2) {
            uf.union(w[0], w[1]);
        }
    }
    let mut by_root: std::collections::BTreeMap<usize, Vec<NodeId>> = Default::default();
    for (i, p) in producers.iter().enumerate() {
        by_root.entry(uf.find(i)).or_default().push(p.node);
    }
    let mut groups: Vec<MergeGroup> = by_root
        .into_values()
        .map(|mut producers| {
            producers.sort();
            MergeGroup { producers }
        })
        .collect();
    groups.sort_by_key(|gr| gr.producers[0]);
    groups
}

/// Rewritable producers partitioned into units the attack and recovery
/// process together: each unit is either a full merge group (all members
/// rewritable) or skipped entirely when any member is not.
pub fn rewritable_producers(g: &Graph) -> (Vec<ProducerEdge>, Vec<MergeGroup>) {
    let producers = eligible_producers(g);
    let groups = merge_groups(g, &producers);
    let units = groups
        .into_iter()
        .filter(|gr| {
            gr.producers.iter().all(|id| {
                producers
                    .iter()
                    .find(|p| p.node == *id)
                    .map(|p| p.rewritable())
                    .unwrap_or(false)
            })
        })
        .collect();
    (producers, units)
}
