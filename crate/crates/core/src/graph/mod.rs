//! The dataflow IR: a DAG of typed operator nodes with shape inference,
//! topological evaluation and compute-cost accounting.

mod json;
mod motifs;
mod producers;

pub use json::{graph_from_json, graph_to_json, ModelJsonError};
pub use motifs::{motif_names, MotifError};
pub use producers::{
    eligible_producers, merge_groups, rewritable_producers, CaptureSite, ConsumerRef, MergeGroup,
    ProducerEdge,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Typed operator with its parameters embedded.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input {
        shape: Vec<usize>,
    },
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        groups: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        eps: f64,
    },
    ReLU,
    Add,
    Cat,
    AvgPoolGlobal,
    Flatten,
    Output,
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Conv2d { .. } => "conv2d",
            NodeKind::Linear { .. } => "linear",
            NodeKind::BatchNorm { .. } => "batchnorm",
            NodeKind::ReLU => "relu",
            NodeKind::Add => "add",
            NodeKind::Cat => "cat",
            NodeKind::AvgPoolGlobal => "avgpool_global",
            NodeKind::Flatten => "flatten",
            NodeKind::Output => "output",
        }
    }

    pub fn is_linear_op(&self) -> bool {
        matches!(self, NodeKind::Conv2d { .. } | NodeKind::Linear { .. })
    }

    /// Output channel count of a Conv2d/Linear node.
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            NodeKind::Conv2d { weight, .. } | NodeKind::Linear { weight, .. } => {
                Some(weight.shape[0])
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub port: usize,
}

/// Unvalidated graph description; `Graph::build` validates and infers shapes.
#[derive(Debug, Clone)]
pub struct GraphSpec {
    pub nodes: Vec<NodeKind>,
    pub edges: Vec<(usize, usize, usize)>,
    pub meta: GraphMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub seed: u64,
    pub motif: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph contains a cycle")]
    Cycle,
    #[error("dangling edge: {0} -> {1} references a missing node")]
    DanglingEdge(usize, usize),
    #[error("shape conflict at {node} ({op}): {source}")]
    ShapeConflict {
        node: NodeId,
        op: &'static str,
        source: TensorError,
    },
    #[error("graph must have exactly one input node, found {0}")]
    InputCount(usize),
    #[error("graph must have exactly one output node, found {0}")]
    OutputCount(usize),
    #[error("{node} ({op}) expects {expected} inputs, got {got}")]
    BadArity {
        node: NodeId,
        op: &'static str,
        expected: String,
        got: usize,
    },
    #[error("{node} has non-contiguous input ports")]
    PortGap { node: NodeId },
    #[error("{node} ({op}): invalid parameters: {reason}")]
    BadParams {
        node: NodeId,
        op: &'static str,
        reason: String,
    },
    #[error("forward: input shape {got:?} does not match declared {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("forward error at {node}: {source}")]
    Eval { node: NodeId, source: TensorError },
}

/// Validated dataflow DAG. Immutable once built; rewrites construct a new
/// value via the surgery helpers and re-run shape inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    shapes: Vec<Vec<usize>>,
    topo: Vec<NodeId>,
    pub meta: GraphMeta,
}

impl Graph {
    pub fn build(spec: GraphSpec) -> Result<Graph, GraphError> {
        let n = spec.nodes.len();
        for &(s, d, _) in &spec.edges {
            if s >= n || d >= n {
                return Err(GraphError::DanglingEdge(s, d));
            }
        }
        let nodes: Vec<Node> = spec
            .nodes
            .into_iter()
            .enumerate()
            .map(|(i, kind)| Node {
                id: NodeId(i),
                kind,
            })
            .collect();
        let edges: Vec<Edge> = spec
            .edges
            .into_iter()
            .map(|(s, d, p)| Edge {
                src: NodeId(s),
                dst: NodeId(d),
                port: p,
            })
            .collect();

        let inputs = nodes
            .iter()
            .filter(|nd| matches!(nd.kind, NodeKind::Input { .. }))
            .count();
        if inputs != 1 {
            return Err(GraphError::InputCount(inputs));
        }
        let outputs = nodes
            .iter()
            .filter(|nd| matches!(nd.kind, NodeKind::Output))
            .count();
        if outputs != 1 {
            return Err(GraphError::OutputCount(outputs));
        }

        let mut g = Graph {
            nodes,
            edges,
            shapes: Vec::new(),
            topo: Vec::new(),
            meta: spec.meta,
        };
        g.revalidate()?;
        Ok(g)
    }

    /// Re-run arity checks, topological ordering and shape inference. Called
    /// after any parameter surgery.
    pub fn revalidate(&mut self) -> Result<(), GraphError> {
        self.topo = self.compute_topo()?;
        self.shapes = self.infer_shapes()?;
        Ok(())
    }

    fn compute_topo(&self) -> Result<Vec<NodeId>, GraphError> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        for e in &self.edges {
            indegree[e.dst.0] += 1;
        }
        // Kahn's algorithm, ties broken by smallest NodeId for a stable order.
        let mut ready: std::collections::BTreeSet<usize> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&next) = ready.iter().next() {
            ready.remove(&next);
            order.push(NodeId(next));
            for e in &self.edges {
                if e.src.0 == next {
                    indegree[e.dst.0] -= 1;
                    if indegree[e.dst.0] == 0 {
                        ready.insert(e.dst.0);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(GraphError::Cycle);
        }
        Ok(order)
    }

    /// Inputs of a node ordered by port; errors on port gaps.
    fn input_ids(&self, id: NodeId) -> Result<Vec<NodeId>, GraphError> {
        let mut ins: Vec<(usize, NodeId)> = self
            .edges
            .iter()
            .filter(|e| e.dst == id)
            .map(|e| (e.port, e.src))
            .collect();
        ins.sort_by_key(|&(p, _)| p);
        for (i, &(p, _)) in ins.iter().enumerate() {
            if p != i {
                return Err(GraphError::PortGap { node: id });
            }
        }
        Ok(ins.into_iter().map(|(_, s)| s).collect())
    }

    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>, GraphError> {
        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &id in &self.topo {
            let ins = self.input_ids(id)?;
            let node = &self.nodes[id.0];
            let arity_err = |expected: &str, got: usize| GraphError::BadArity {
                node: id,
                op: node.kind.name(),
                expected: expected.to_string(),
                got,
            };
            let conflict = |src: TensorError| GraphError::ShapeConflict {
                node: id,
                op: node.kind.name(),
                source: src,
            };
            let shape = match &node.kind {
                NodeKind::Input { shape } => {
                    if !ins.is_empty() {
                        return Err(arity_err("0", ins.len()));
                    }
                    shape.clone()
                }
                NodeKind::Conv2d {
                    weight,
                    bias,
                    groups,
                    stride,
                    padding,
                } => {
                    if ins.len() != 1 {
                        return Err(arity_err("1", ins.len()));
                    }
                    let zin = Tensor::zeros(shapes[ins[0].0].clone());
                    let out = tensor::conv2d_forward(&zin, weight, bias, *groups, *stride, *padding)
                        .map_err(conflict)?;
                    out.shape
                }
                NodeKind::Linear { weight, bias } => {
                    if ins.len() != 1 {
                        return Err(arity_err("1", ins.len()));
                    }
                    let zin = Tensor::zeros(shapes[ins[0].0].clone());
                    let out = tensor::linear_forward(&zin, weight, bias).map_err(conflict)?;
                    out.shape
                }
                NodeKind::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                } => {
                    if ins.len() != 1 {
                        return Err(arity_err("1", ins.len()));
                    }
                    if *eps <= 0.0 {
                        return Err(GraphError::BadParams {
                            node: id,
                            op: "batchnorm",
                            reason: format!("eps must be positive, got {eps}"),
                        });
                    }
                    let zin = Tensor::zeros(shapes[ins[0].0].clone());
                    let out =
                        tensor::batchnorm_forward(&zin, gamma, beta, running_mean, running_var, *eps)
                            .map_err(conflict)?;
                    out.shape
                }
                NodeKind::ReLU => {
                    if ins.len() != 1 {
                        return Err(arity_err("1", ins.len()));
                    }
                    shapes[ins[0].0].clone()
                }
                NodeKind::Add => {
                    if ins.len() != 2 {
                        return Err(arity_err("2", ins.len()));
                    }
                    if shapes[ins[0].0] != shapes[ins[1].0] {
                        return Err(conflict(TensorError::ShapeMismatch {
                            op: "add",
                            dim: "operand",
                            expected: shapes[ins[0].0].iter().product(),
                            got: shapes[ins[1].0].iter().product(),
                        }));
                    }
                    shapes[ins[0].0].clone()
                }
                NodeKind::Cat => {
                    if ins.len() < 2 {
                        return Err(arity_err(">=2", ins.len()));
                    }
                    let tail = shapes[ins[0].0][1..].to_vec();
                    let mut channels = 0;
                    for &i in &ins {
                        if shapes[i.0][1..] != tail[..] {
                            return Err(conflict(TensorError::ShapeMismatch {
                                op: "cat",
                                dim: "spatial",
                                expected: tail.iter().product(),
                                got: shapes[i.0][1..].iter().product(),
                            }));
                        }
                        channels += shapes[i.0][0];
                    }
                    let mut s = vec![channels];
                    s.extend(tail);
                    s
                }
                NodeKind::AvgPoolGlobal => {
                    if ins.len() != 1 {
                        return Err(arity_err("1", ins.len()));
                    }
                    let s = &shapes[ins[0].0];
                    if s.len() != 3 {
                        return Err(conflict(TensorError::RankMismatch {
                            op: "avgpool_global",
                            expected: 3,
                            got: s.clone(),
                        }));
                    }
                    vec![s[0]]
                }
                NodeKind::Flatten => {
                    if ins.len() != 1 {
                        return Err(arity_err("1", ins.len()));
                    }
                    vec![shapes[ins[0].0].iter().product()]
                }
                NodeKind::Output => {
                    if ins.len() != 1 {
                        return Err(arity_err("1", ins.len()));
                    }
                    shapes[ins[0].0].clone()
                }
            };
            shapes[id.0] = shape;
        }
        Ok(shapes)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub(crate) fn kind_mut(&mut self, id: NodeId) -> &mut NodeKind {
        &mut self.nodes[id.0].kind
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    /// Stable topological order (ties broken by NodeId).
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn input_node(&self) -> NodeId {
        self.nodes
            .iter()
            .find(|n| matches!(n.kind, NodeKind::Input { .. }))
            .map(|n| n.id)
            .expect("validated graph has an input")
    }

    pub fn output_node(&self) -> NodeId {
        self.nodes
            .iter()
            .find(|n| matches!(n.kind, NodeKind::Output))
            .map(|n| n.id)
            .expect("validated graph has an output")
    }

    pub fn input_shape(&self) -> &[usize] {
        match &self.node(self.input_node()).kind {
            NodeKind::Input { shape } => shape,
            _ => unreachable!(),
        }
    }

    /// Inputs of `id` ordered by port. Panics on invalid graphs (build and
    /// revalidate guarantee contiguous ports).
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.input_ids(id).expect("validated graph")
    }

    /// `(consumer, port)` pairs reading the output of `id`, in edge order.
    pub fn consumers_of(&self, id: NodeId) -> Vec<(NodeId, usize)> {
        self.edges
            .iter()
            .filter(|e| e.src == id)
            .map(|e| (e.dst, e.port))
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, GraphError> {
        Ok(self.forward_with_taps(x, &[])?.0)
    }

    /// Evaluate the graph, additionally returning the activation tensors at
    /// the requested tap nodes (in tap order).
    pub fn forward_with_taps(
        &self,
        x: &Tensor,
        taps: &[NodeId],
    ) -> Result<(Tensor, Vec<Tensor>), GraphError> {
        if x.shape != self.input_shape() {
            return Err(GraphError::InputShape {
                expected: self.input_shape().to_vec(),
                got: x.shape.clone(),
            });
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for &id in &self.topo {
            let ins = self.inputs_of(id);
            let get = |i: usize| values[ins[i].0].as_ref().expect("topo order");
            let eval_err = |source: TensorError| GraphError::Eval { node: id, source };
            let value = match &self.nodes[id.0].kind {
                NodeKind::Input { .. } => x.clone(),
                NodeKind::Conv2d {
                    weight,
                    bias,
                    groups,
                    stride,
                    padding,
                } => tensor::conv2d_forward(get(0), weight, bias, *groups, *stride, *padding)
                    .map_err(eval_err)?,
                NodeKind::Linear { weight, bias } => {
                    tensor::linear_forward(get(0), weight, bias).map_err(eval_err)?
                }
                NodeKind::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                } => tensor::batchnorm_forward(get(0), gamma, beta, running_mean, running_var, *eps)
                    .map_err(eval_err)?,
                NodeKind::ReLU => tensor::relu(get(0)),
                NodeKind::Add => tensor::add(get(0), get(1)).map_err(eval_err)?,
                NodeKind::Cat => {
                    let parts: Vec<&Tensor> = (0..ins.len()).map(get).collect();
                    tensor::cat_channels(&parts).map_err(eval_err)?
                }
                NodeKind::AvgPoolGlobal => tensor::avgpool_global(get(0)).map_err(eval_err)?,
                NodeKind::Flatten => tensor::flatten(get(0)),
                NodeKind::Output => get(0).clone(),
            };
            values[id.0] = Some(value);
        }
        let out = values[self.output_node().0].clone().expect("evaluated");
        let tapped = taps
            .iter()
            .map(|t| values[t.0].clone().expect("evaluated"))
            .collect();
        Ok((out, tapped))
    }

    /// Exact multiply-accumulate count of a forward pass, summed over Conv2d
    /// and Linear nodes.
    pub fn flop_estimate(&self) -> u64 {
        let mut macs = 0u64;
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Conv2d { weight, .. } => {
                    let out = &self.shapes[node.id.0];
                    let per_pos = weight.shape[1] * weight.shape[2] * weight.shape[3];
                    macs += (out[0] * out[1] * out[2] * per_pos) as u64;
                }
                NodeKind::Linear { weight, .. } => {
                    macs += (weight.shape[0] * weight.shape[1]) as u64;
                }
                _ => {}
            }
        }
        macs
    }

    /// Total stored parameter count (conv/linear weights and biases, plus
    /// batchnorm vectors).
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.kind {
                NodeKind::Conv2d { weight, bias, .. } | NodeKind::Linear { weight, bias } => {
                    weight.len() + bias.len()
                }
                NodeKind::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => gamma.len() + beta.len() + running_mean.len() + running_var.len(),
                _ => 0,
            })
            .sum()
    }

    /// Output widths of every Conv2d/Linear node, keyed by node id.
    pub fn layer_widths(&self) -> Vec<(NodeId, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| n.kind.out_channels().map(|c| (n.id, c)))
            .collect()
    }
}

/// Generate one of the built-in motif graphs by name with a fixed seed.
pub fn motif(name: &str, seed: u64) -> Result<Graph, MotifError> {
    motifs::generate(name, seed)
}
