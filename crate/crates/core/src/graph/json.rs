//! On-disk JSON model format.
//!
//! Canonical field order with tensors as shape-nested arrays of decimals
//! printed with 17 significant digits, which round-trips every finite f64
//! bit-exactly. The writer is hand-rolled so the byte output is a pure
//! function of the graph.

use thiserror::Error;

use crate::graph::{Graph, GraphError, GraphMeta, GraphSpec, NodeKind};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelJsonError {
    #[error("model json: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("model json: {0}")]
    Schema(String),
    #[error("model json: graph validation failed: {0}")]
    Graph(#[from] GraphError),
    #[error("model json: non-finite tensor value cannot be serialized")]
    NonFinite,
}

/// 17 significant digits: enough to reconstruct any finite f64 exactly.
fn fmt_f64(v: f64, out: &mut String) {
    use std::fmt::Write;
    write!(out, "{v:.16e}").unwrap();
}

fn write_tensor(t: &Tensor, out: &mut String) -> Result<(), ModelJsonError> {
    if !t.all_finite() {
        return Err(ModelJsonError::NonFinite);
    }
    fn rec(shape: &[usize], data: &[f64], out: &mut String) {
        if shape.len() == 1 {
            out.push('[');
            for (i, v) in data.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                fmt_f64(*v, out);
            }
            out.push(']');
            return;
        }
        let stride: usize = shape[1..].iter().product();
        out.push('[');
        for i in 0..shape[0] {
            if i > 0 {
                out.push(',');
            }
            rec(&shape[1..], &data[i * stride..(i + 1) * stride], out);
        }
        out.push(']');
    }
    rec(&t.shape, &t.data, out);
    Ok(())
}

fn json_escape(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

pub fn graph_to_json(g: &Graph) -> Result<String, ModelJsonError> {
    let mut out = String::new();
    out.push_str("{\"nodes\":[");
    for (i, node) in g.nodes().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{{\"id\":{},\"kind\":\"{}\"", node.id.0, node.kind.name()));
        match &node.kind {
            NodeKind::Input { shape } => {
                out.push_str(",\"shape\":[");
                for (j, d) in shape.iter().enumerate() {
                    if j > 0 {
                        out.push(',');
                    }
                    out.push_str(&d.to_string());
                }
                out.push(']');
            }
            NodeKind::Conv2d {
                weight,
                bias,
                groups,
                stride,
                padding,
            } => {
                out.push_str(&format!(
                    ",\"groups\":{groups},\"stride\":{stride},\"padding\":{padding},\"weight\":"
                ));
                write_tensor(weight, &mut out)?;
                out.push_str(",\"bias\":");
                write_tensor(bias, &mut out)?;
            }
            NodeKind::Linear { weight, bias } => {
                out.push_str(",\"weight\":");
                write_tensor(weight, &mut out)?;
                out.push_str(",\"bias\":");
                write_tensor(bias, &mut out)?;
            }
            NodeKind::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => {
                out.push_str(",\"eps\":");
                fmt_f64(*eps, &mut out);
                out.push_str(",\"gamma\":");
                write_tensor(gamma, &mut out)?;
                out.push_str(",\"beta\":");
                write_tensor(beta, &mut out)?;
                out.push_str(",\"running_mean\":");
                write_tensor(running_mean, &mut out)?;
                out.push_str(",\"running_var\":");
                write_tensor(running_var, &mut out)?;
            }
            _ => {}
        }
        out.push('}');
    }
    out.push_str("],\"edges\":[");
    for (i, e) in g.edges().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("[{},{},{}]", e.src.0, e.dst.0, e.port));
    }
    out.push_str("],\"meta\":{\"seed\":");
    out.push_str(&g.meta.seed.to_string());
    out.push_str(",\"motif\":");
    out.push_str(&json_escape(&g.meta.motif));
    out.push_str("}}");
    Ok(out)
}

fn as_u64(v: &serde_json::Value, what: &str) -> Result<u64, ModelJsonError> {
    v.as_u64()
        .ok_or_else(|| ModelJsonError::Schema(format!("expected unsigned integer for {what}")))
}

fn as_usize(v: &serde_json::Value, what: &str) -> Result<usize, ModelJsonError> {
    Ok(as_u64(v, what)? as usize)
}

/// Parse a shape-nested array back into a tensor, checking rectangularity.
fn parse_tensor(v: &serde_json::Value, what: &str) -> Result<Tensor, ModelJsonError> {
    fn shape_of(v: &serde_json::Value, what: &str, shape: &mut Vec<usize>) -> Result<(), ModelJsonError> {
        match v {
            serde_json::Value::Array(items) => {
                if items.is_empty() {
                    return Err(ModelJsonError::Schema(format!("{what}: empty tensor axis")));
                }
                shape.push(items.len());
                shape_of(&items[0], what, shape)
            }
            serde_json::Value::Number(_) => Ok(()),
            _ => Err(ModelJsonError::Schema(format!("{what}: expected number or array"))),
        }
    }
    fn collect(
        v: &serde_json::Value,
        shape: &[usize],
        what: &str,
        data: &mut Vec<f64>,
    ) -> Result<(), ModelJsonError> {
        match v {
            serde_json::Value::Array(items) => {
                if shape.is_empty() || items.len() != shape[0] {
                    return Err(ModelJsonError::Schema(format!("{what}: ragged tensor array")));
                }
                for it in items {
                    collect(it, &shape[1..], what, data)?;
                }
                Ok(())
            }
            serde_json::Value::Number(n) => {
                if !shape.is_empty() {
                    return Err(ModelJsonError::Schema(format!("{what}: ragged tensor array")));
                }
                let f = n
                    .as_f64()
                    .ok_or_else(|| ModelJsonError::Schema(format!("{what}: bad number")))?;
                data.push(f);
                Ok(())
            }
            _ => Err(ModelJsonError::Schema(format!("{what}: expected number"))),
        }
    }
    let mut shape = Vec::new();
    shape_of(v, what, &mut shape)?;
    let mut data = Vec::with_capacity(shape.iter().product());
    collect(v, &shape, what, &mut data)?;
    Tensor::new(shape, data).map_err(|e| ModelJsonError::Schema(format!("{what}: {e}")))
}

pub fn graph_from_json(text: &str) -> Result<Graph, ModelJsonError> {
    let root: serde_json::Value = serde_json::from_str(text)?;
    let obj = root
        .as_object()
        .ok_or_else(|| ModelJsonError::Schema("top level must be an object".into()))?;
    let nodes_v = obj
        .get("nodes")
        .and_then(|v| v.as_array())
        .ok_or_else(|| ModelJsonError::Schema("missing nodes array".into()))?;

    let mut nodes_by_id: Vec<(usize, NodeKind)> = Vec::new();
    for nv in nodes_v {
        let n = nv
            .as_object()
            .ok_or_else(|| ModelJsonError::Schema("node must be an object".into()))?;
        let id = as_usize(
            n.get("id")
                .ok_or_else(|| ModelJsonError::Schema("node missing id".into()))?,
            "node id",
        )?;
        let kind_s = n
            .get("kind")
            .and_then(|v| v.as_str())
            .ok_or_else(|| ModelJsonError::Schema("node missing kind".into()))?;
        let field = |name: &str| -> Result<&serde_json::Value, ModelJsonError> {
            n.get(name)
                .ok_or_else(|| ModelJsonError::Schema(format!("{kind_s} node missing {name}")))
        };
        let kind = match kind_s {
            "input" => {
                let shape_v = field("shape")?
                    .as_array()
                    .ok_or_else(|| ModelJsonError::Schema("input shape must be an array".into()))?;
                let shape = shape_v
                    .iter()
                    .map(|v| as_usize(v, "input shape"))
                    .collect::<Result<Vec<_>, _>>()?;
                NodeKind::Input { shape }
            }
            "conv2d" => NodeKind::Conv2d {
                weight: parse_tensor(field("weight")?, "conv2d weight")?,
                bias: parse_tensor(field("bias")?, "conv2d bias")?,
                groups: as_usize(field("groups")?, "conv2d groups")?,
                stride: as_usize(field("stride")?, "conv2d stride")?,
                padding: as_usize(field("padding")?, "conv2d padding")?,
            },
            "linear" => NodeKind::Linear {
                weight: parse_tensor(field("weight")?, "linear weight")?,
                bias: parse_tensor(field("bias")?, "linear bias")?,
            },
            "batchnorm" => NodeKind::BatchNorm {
                eps: field("eps")?
                    .as_f64()
                    .ok_or_else(|| ModelJsonError::Schema("batchnorm eps must be a number".into()))?,
                gamma: parse_tensor(field("gamma")?, "batchnorm gamma")?,
                beta: parse_tensor(field("beta")?, "batchnorm beta")?,
                running_mean: parse_tensor(field("running_mean")?, "batchnorm running_mean")?,
                running_var: parse_tensor(field("running_var")?, "batchnorm running_var")?,
            },
            "relu" => NodeKind::ReLU,
            "add" => NodeKind::Add,
            "cat" => NodeKind::Cat,
            "avgpool_global" => NodeKind::AvgPoolGlobal,
            "flatten" => NodeKind::Flatten,
            "output" => NodeKind::Output,
            other => {
                return Err(ModelJsonError::Schema(format!("unknown node kind '{other}'")));
            }
        };
        nodes_by_id.push((id, kind));
    }
    nodes_by_id.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in nodes_by_id.iter().enumerate() {
        if *id != expect {
            return Err(ModelJsonError::Schema(format!(
                "node ids must be dense and start at 0 (missing {expect})"
            )));
        }
    }
    let nodes: Vec<NodeKind> = nodes_by_id.into_iter().map(|(_, k)| k).collect();

    let edges_v = obj
        .get("edges")
        .and_then(|v| v.as_array())
        .ok_or_else(|| ModelJsonError::Schema("missing edges array".into()))?;
    let mut edges = Vec::new();
    for ev in edges_v {
        let triple = ev
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| ModelJsonError::Schema("edge must be [src, dst, port]".into()))?;
        edges.push((
            as_usize(&triple[0], "edge src")?,
            as_usize(&triple[1], "edge dst")?,
            as_usize(&triple[2], "edge port")?,
        ));
    }

    let meta_v = obj
        .get("meta")
        .and_then(|v| v.as_object())
        .ok_or_else(|| ModelJsonError::Schema("missing meta object".into()))?;
    let meta = GraphMeta {
        seed: as_u64(
            meta_v
                .get("seed")
                .ok_or_else(|| ModelJsonError::Schema("meta missing seed".into()))?,
            "meta seed",
        )?,
        motif: meta_v
            .get("motif")
            .and_then(|v| v.as_str())
            .ok_or_else(|| ModelJsonError::Schema("meta missing motif".into()))?
            .to_string(),
    };

    Ok(Graph::build(GraphSpec { nodes, edges, meta })?)
}
