//! Applying a channel layout change to a producer unit and all of its
//! downstream linear consumers.
//!
//! Both the attack and the recovery express their edits the same way: new
//! producer-side parameters (rows of the producer weight, bias and any
//! directly-following BatchNorm), plus one ChannelTransform `m` with
//! `y_old = m . y_new` that every downstream consumer absorbs via
//! `W <- W . m`. Producer edges constrained by residual adds form one unit
//! and share a single `m`; their common consumers are rewritten exactly once.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId, NodeKind, ProducerEdge};
use crate::tensor::Tensor;
use crate::transform::{rewrite_consumer, ChannelTransform, TransformError};

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("surgery at {node}: {source}")]
    Rewrite {
        node: NodeId,
        source: TransformError,
    },
    #[error("surgery: {node} is not a Conv2d/Linear node")]
    NotLinearOp { node: NodeId },
    #[error("surgery: producer {node} has no following batchnorm to edit")]
    MissingBn { node: NodeId },
    #[error("surgery: edit for {node} changes width to {got}, transform expects {expected}")]
    WidthMismatch {
        node: NodeId,
        expected: usize,
        got: usize,
    },
    #[error("surgery left the graph inconsistent: {0}")]
    Inconsistent(#[from] GraphError),
}

/// Replacement parameters for one producer in a unit.
#[derive(Debug, Clone)]
pub struct ProducerEdit {
    pub node: NodeId,
    pub weight: Tensor,
    pub bias: Tensor,
    /// New parameters for the directly-following BatchNorm, when present.
    pub bn: Option<BnEdit>,
}

#[derive(Debug, Clone)]
pub struct BnEdit {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Gather rows (leading-axis slices) of `t` in `idx` order.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let stride = t.spatial();
    let mut shape = t.shape.clone();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * stride);
    for &i in idx {
        data.extend_from_slice(&t.data[i * stride..(i + 1) * stride]);
    }
    Tensor { shape, data }
}

/// One row (leading-axis slice) of `t`.
pub fn row(t: &Tensor, i: usize) -> Vec<f64> {
    let stride = t.spatial();
    t.data[i * stride..(i + 1) * stride].to_vec()
}

/// Append rows to the leading axis.
pub fn append_rows(t: &Tensor, rows: &[Vec<f64>]) -> Tensor {
    let stride = t.spatial();
    let mut shape = t.shape.clone();
    shape[0] += rows.len();
    let mut data = t.data.clone();
    for r in rows {
        debug_assert_eq!(r.len(), stride);
        data.extend_from_slice(r);
    }
    Tensor { shape, data }
}

pub fn weight_bias(kind: &NodeKind) -> Option<(&Tensor, &Tensor)> {
    match kind {
        NodeKind::Conv2d { weight, bias, .. } | NodeKind::Linear { weight, bias } => {
            Some((weight, bias))
        }
        _ => None,
    }
}

fn set_weight_bias(kind: &mut NodeKind, w: Tensor, b: Tensor) -> Result<(), ()> {
    match kind {
        NodeKind::Conv2d { weight, bias, .. } | NodeKind::Linear { weight, bias } => {
            *weight = w;
            *bias = b;
            Ok(())
        }
        _ => Err(()),
    }
}

pub fn bn_params(kind: &NodeKind) -> Option<(&Tensor, &Tensor, &Tensor, &Tensor)> {
    match kind {
        NodeKind::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } => Some((gamma, beta, running_mean, running_var)),
        _ => None,
    }
}

/// Apply one layout change across a unit of producer edges.
///
/// `members` are the unit's current producer descriptors (computed against
/// the graph as it is right now), `edits` the per-member replacement
/// parameters, and `m` the shared transform with `c_before` equal to the
/// members' current width and `c_after` equal to the new width. Consumers
/// are deduplicated on (node, slice) across members so shared downstream
/// weights are rewritten exactly once, then shapes are re-inferred.
pub fn apply_unit_transform(
    g: &mut Graph,
    members: &[&ProducerEdge],
    edits: Vec<ProducerEdit>,
    m: &ChannelTransform,
) -> Result<(), SurgeryError> {
    debug_assert_eq!(members.len(), edits.len());
    for (member, edit) in members.iter().zip(&edits) {
        debug_assert_eq!(member.node, edit.node);
        if member.width != m.c_before {
            return Err(SurgeryError::WidthMismatch {
                node: member.node,
                expected: m.c_before,
                got: member.width,
            });
        }
        if edit.weight.shape[0] != m.c_after {
            return Err(SurgeryError::WidthMismatch {
                node: edit.node,
                expected: m.c_after,
                got: edit.weight.shape[0],
            });
        }
    }

    // Rewrite each distinct consumer slice once, even when several unit
    // members share it through an Add.
    if !m.is_identity() {
        let mut seen: BTreeSet<(NodeId, usize)> = BTreeSet::new();
        for member in members {
            for c in &member.consumers {
                if !seen.insert((c.node, c.path.slice_offset)) {
                    continue;
                }
                let (w, b) = weight_bias(&g.node(c.node).kind)
                    .ok_or(SurgeryError::NotLinearOp { node: c.node })?;
                let b = b.clone();
                let new_w = rewrite_consumer(w, m, &c.path, c.groups).map_err(|source| {
                    SurgeryError::Rewrite {
                        node: c.node,
                        source,
                    }
                })?;
                set_weight_bias(g.kind_mut(c.node), new_w, b)
                    .map_err(|_| SurgeryError::NotLinearOp { node: c.node })?;
            }
        }
    }

    for (member, edit) in members.iter().zip(edits) {
        let node = edit.node;
        set_weight_bias(g.kind_mut(node), edit.weight, edit.bias)
            .map_err(|_| SurgeryError::NotLinearOp { node })?;
        if let Some(bn_edit) = edit.bn {
            let bn_id = member.bn_next.ok_or(SurgeryError::MissingBn { node })?;
            match g.kind_mut(bn_id) {
                NodeKind::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    *gamma = bn_edit.gamma;
                    *beta = bn_edit.beta;
                    *running_mean = bn_edit.running_mean;
                    *running_var = bn_edit.running_var;
                }
                _ => return Err(SurgeryError::MissingBn { node }),
            }
        }
    }

    g.revalidate()?;
    Ok(())
}

/// Max over probes of the max-abs elementwise difference between the two
/// graphs' outputs.
pub fn max_abs_output_delta(
    a: &Graph,
    b: &Graph,
    probes: &[Tensor],
) -> Result<f64, GraphError> {
    let mut worst = 0.0f64;
    for p in probes {
        let ya = a.forward(p)?;
        let yb = b.forward(p)?;
        debug_assert_eq!(ya.shape, yb.shape);
        for (x, y) in ya.data.iter().zip(&yb.data) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{motif, rewritable_producers};
    use crate::rng::Rng;

    #[test]
    fn gather_and_append_rows() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let picked = gather_rows(&t, &[2, 0]);
        assert_eq!(picked.shape, vec![2, 2]);
        assert_eq!(picked.data, vec![5.0, 6.0, 1.0, 2.0]);
        let grown = append_rows(&t, &[vec![7.0, 8.0]]);
        assert_eq!(grown.shape, vec![4, 2]);
        assert_eq!(&grown.data[6..], &[7.0, 8.0]);
    }

    #[test]
    fn unit_transform_zero_injection_preserves_function() {
        // Hand-rolled zero injection on the mlp hidden layer through the
        // surgery path: forward outputs must be unchanged.
        let g = motif("mlp", 3).unwrap();
        let (producers, units) = rewritable_producers(&g);
        let unit = &units[0];
        assert_eq!(unit.producers.len(), 1);
        let edge = producers
            .iter()
            .find(|p| p.node == unit.producers[0])
            .unwrap();
        let (w, b) = weight_bias(&g.node(edge.node).kind).unwrap();
        let d = 2;
        let new_w = append_rows(w, &vec![vec![0.0; w.spatial()]; d]);
        let new_b = append_rows(b, &vec![vec![0.0]; d]);
        let m = ChannelTransform::new(
            edge.width,
            edge.width + d,
            (0..edge.width).map(|i| (i, i, 1.0)).collect(),
        )
        .unwrap();
        let mut attacked = g.clone();
        apply_unit_transform(
            &mut attacked,
            &[edge],
            vec![ProducerEdit {
                node: edge.node,
                weight: new_w,
                bias: new_b,
                bn: None,
            }],
            &m,
        )
        .unwrap();
        assert_eq!(attacked.shape_of(edge.node), &[edge.width + d]);

        let mut rng = Rng::new(4);
        let probes: Vec<Tensor> = (0..8)
            .map(|_| {
                Tensor::new(vec![12], (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
            })
            .collect();
        let delta = max_abs_output_delta(&g, &attacked, &probes).unwrap();
        assert_eq!(delta, 0.0);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let g = motif("mlp", 3).unwrap();
        let (producers, units) = rewritable_producers(&g);
        let edge = producers
            .iter()
            .find(|p| p.node == units[0].producers[0])
            .unwrap();
        let (w, b) = weight_bias(&g.node(edge.node).kind).unwrap();
        let (w, b) = (w.clone(), b.clone());
        let m = ChannelTransform::identity(edge.width + 1);
        let mut g2 = g.clone();
        let err = apply_unit_transform(
            &mut g2,
            &[edge],
            vec![ProducerEdit {
                node: edge.node,
                weight: w,
                bias: b,
                bn: None,
            }],
            &m,
        )
        .unwrap_err();
        assert!(matches!(err, SurgeryError::WidthMismatch { .. }));
    }
}
