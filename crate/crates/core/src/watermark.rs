//! Reference index-ordered white-box watermark.
//!
//! The scheme reads the target layer's weight tensor in a fixed flatten
//! order, projects it with a seeded Gaussian matrix and thresholds the signs
//! against a random message. Extraction is deliberately index-bound: any
//! channel permutation, rescaling or width change scrambles the projection,
//! which is exactly the verification interface structural obfuscation
//! breaks and recovery restores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId, NodeKind};
use crate::rng::Rng;
use crate::surgery::weight_bias;

#[derive(Debug, Error)]
pub enum WatermarkError {
    #[error("watermark: {0} is not a Conv2d/Linear layer")]
    NotLinearLayer(NodeId),
    #[error("watermark: layer {0} missing from graph")]
    LayerMissing(NodeId),
    #[error("watermark: embedding did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("watermark: message length must be at least 1")]
    EmptyMessage,
}

/// Watermark key. The projection matrix is regenerated from the seed and
/// never serialized; flatten order is fixed to
/// (out_channel, in_channel, kh, kw), i.e. the row-major layout of the
/// stored weight tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub target_layer: NodeId,
    /// Message bits b.
    pub message: Vec<bool>,
    /// Flattened weight length the key was generated for.
    pub weight_len: usize,
    pub seed: u64,
}

/// Sign margin enforced by embedding; keeps extraction bits stable under
/// the tiny floating-point drift equivalence-preserving rewrites introduce.
pub const EMBED_MARGIN: f64 = 0.01;

fn projection_row(key: &WatermarkKey, i: usize) -> Vec<f64> {
    // Row i of the n x m Gaussian projection, regenerated on demand.
    let mut rng = Rng::new(key.seed).split(0x5150_0000 + i as u64);
    (0..key.weight_len).map(|_| rng.normal()).collect()
}

fn message_bits(seed: u64, n: usize) -> Vec<bool> {
    let mut rng = Rng::new(seed).split(u64::from_le_bytes(*b"message\0"));
    (0..n).map(|_| rng.bit()).collect()
}

/// Generate a key for the layer: i.i.d. standard-normal projection rows and
/// fair message bits, all derived from the seed.
pub fn keygen(g: &Graph, layer: NodeId, n: usize, seed: u64) -> Result<WatermarkKey, WatermarkError> {
    if n == 0 {
        return Err(WatermarkError::EmptyMessage);
    }
    let kind = &g
        .nodes()
        .get(layer.0)
        .ok_or(WatermarkError::LayerMissing(layer))?
        .kind;
    let (w, _) = weight_bias(kind).ok_or(WatermarkError::NotLinearLayer(layer))?;
    Ok(WatermarkKey {
        target_layer: layer,
        message: message_bits(seed, n),
        weight_len: w.len(),
        seed,
    })
}

/// Outcome of similarity extraction. Extraction on a model whose target
/// layer changed shape cannot silently report a healthy score: the read is
/// zero-padded or truncated to the key's length and flagged as degraded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "similarity")]
pub enum SimilarityOutcome {
    Ok(f64),
    IncompatibleShape(f64),
}

impl SimilarityOutcome {
    pub fn value(&self) -> f64 {
        match *self {
            SimilarityOutcome::Ok(v) | SimilarityOutcome::IncompatibleShape(v) => v,
        }
    }

    pub fn degraded(&self) -> bool {
        matches!(self, SimilarityOutcome::IncompatibleShape(_))
    }
}

/// Clean/attacked/recovered similarity triplet for the Tier-2 predicate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimilarityTriplet {
    pub clean: f64,
    pub attacked: f64,
    pub recovered: f64,
}

fn flatten_weight(g: &Graph, layer: NodeId) -> Result<Vec<f64>, WatermarkError> {
    let kind = &g
        .nodes()
        .get(layer.0)
        .ok_or(WatermarkError::LayerMissing(layer))?
        .kind;
    let (w, _) = weight_bias(kind).ok_or(WatermarkError::NotLinearLayer(layer))?;
    Ok(w.data.clone())
}

/// Fraction of message bits reproduced by `step(X . v)` with `step(x) = 1`
/// iff `x > 0`, on the target layer's flattened weight.
pub fn extract_similarity(g: &Graph, key: &WatermarkKey) -> Result<SimilarityOutcome, WatermarkError> {
    let mut v = flatten_weight(g, key.target_layer)?;
    let compatible = v.len() == key.weight_len;
    v.resize(key.weight_len, 0.0);
    let mut matches = 0usize;
    for (i, &bit) in key.message.iter().enumerate() {
        let x = projection_row(key, i);
        let dot: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
        if (dot > 0.0) == bit {
            matches += 1;
        }
    }
    let sim = matches as f64 / key.message.len() as f64;
    Ok(if compatible {
        SimilarityOutcome::Ok(sim)
    } else {
        SimilarityOutcome::IncompatibleShape(sim)
    })
}

/// Embed the message by projection descent: repeatedly push the flattened
/// weight along the sign-corrective direction `X^T . e` until every bit
/// matches with margin at least [`EMBED_MARGIN`]. The embedded model is the
/// clean reference from then on.
pub fn embed(
    g: &Graph,
    key: &WatermarkKey,
    max_iters: usize,
    step_size: f64,
) -> Result<Graph, WatermarkError> {
    let kind = &g
        .nodes()
        .get(key.target_layer.0)
        .ok_or(WatermarkError::LayerMissing(key.target_layer))?
        .kind;
    let (w, _) = weight_bias(kind).ok_or(WatermarkError::NotLinearLayer(key.target_layer))?;
    if w.len() != key.weight_len {
        return Err(WatermarkError::LayerMissing(key.target_layer));
    }
    let mut v = w.data.clone();
    let rows: Vec<Vec<f64>> = (0..key.message.len())
        .map(|i| projection_row(key, i))
        .collect();

    let mut converged = false;
    for _ in 0..max_iters {
        let mut any_violation = false;
        let mut grad = vec![0.0; v.len()];
        for (row, &bit) in rows.iter().zip(&key.message) {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            let sign = if bit { 1.0 } else { -1.0 };
            if sign * dot < EMBED_MARGIN {
                any_violation = true;
                for (gv, rv) in grad.iter_mut().zip(row) {
                    *gv += sign * rv;
                }
            }
        }
        if !any_violation {
            converged = true;
            break;
        }
        for (vv, gv) in v.iter_mut().zip(&grad) {
            *vv += step_size * gv;
        }
    }
    if !converged {
        // The loop may have fixed the last violation on its final update.
        let ok = rows.iter().zip(&key.message).all(|(row, &bit)| {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            let sign = if bit { 1.0 } else { -1.0 };
            sign * dot >= EMBED_MARGIN
        });
        if !ok {
            return Err(WatermarkError::NonConvergence(max_iters));
        }
    }

    let mut out = g.clone();
    match out.kind_mut(key.target_layer) {
        NodeKind::Conv2d { weight, .. } | NodeKind::Linear { weight, .. } => {
            weight.data = v;
        }
        _ => return Err(WatermarkError::NotLinearLayer(key.target_layer)),
    }
    out.revalidate().expect("weight values do not affect shapes");
    Ok(out)
}

/// Post-embed margin: the smallest absolute projection value across message
/// rows (0 when the layer is missing the key's length).
pub fn embed_margin(g: &Graph, key: &WatermarkKey) -> Result<f64, WatermarkError> {
    let v = flatten_weight(g, key.target_layer)?;
    if v.len() != key.weight_len {
        return Ok(0.0);
    }
    let mut min_abs = f64::INFINITY;
    for i in 0..key.message.len() {
        let row = projection_row(key, i);
        let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        min_abs = min_abs.min(dot.abs());
    }
    Ok(min_abs)
}
