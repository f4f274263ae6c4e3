//! Two-tier ownership verification.
//!
//! Tier 1 certifies reference equivalence: recovered output channels are
//! matched one-to-one against the clean reference by greedily taking the
//! smallest remaining relative l2 residual, optionally up to a positive
//! per-channel scale. The certificate passes when every channel is matched
//! and the worst matched residual stays within tolerance, i.e. the
//! recovered tensors lie in the reference's symmetry-equivalence class.
//!
//! Tier 2 is the attack-aware fallback on raw extractor scores: with
//! clean/attacked/recovered similarities (c, a, r) and the attack-induced
//! drop `D = max(0, c - a)`, recovery passes iff `r - a >= lambda.D - delta`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::surgery::weight_bias;
use crate::tensor::Tensor;
use crate::watermark::{extract_similarity, SimilarityTriplet, WatermarkError, WatermarkKey};

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("verifier: layer {0} missing or not Conv2d/Linear")]
    LayerMissing(NodeId),
    #[error("verifier: layer {0} has no output channels")]
    EmptyLayer(NodeId),
    #[error("verifier: {0}")]
    Watermark(#[from] WatermarkError),
    #[error("verifier config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateConfig {
    /// Pass threshold on the worst matched relative residual.
    pub perm_tol: f64,
    /// Stabilizer added to reference norms in denominators.
    pub eta: f64,
    /// Allow a positive per-channel scale in the residual.
    pub allow_scaling: bool,
    /// Append the bias to each flattened channel vector.
    pub include_bias: bool,
    /// Diagnostics only: replace the greedy matching with an optimal
    /// (Hungarian) assignment.
    pub use_hungarian: bool,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        CertificateConfig {
            perm_tol: 1e-3,
            eta: 1e-12,
            allow_scaling: true,
            include_bias: false,
            use_hungarian: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCertificate {
    pub node: usize,
    /// Matched permutation: recovered channel `i` maps to reference channel
    /// `pi[i]`. Empty when the widths already disagree.
    pub pi: Vec<usize>,
    /// Worst matched relative residual; `None` when no matching ran.
    pub max_rel_err: Option<f64>,
    pub match_frac: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    pub layers: Vec<LayerCertificate>,
    pub verified: usize,
    pub total: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tier2Config {
    /// Required fraction of the attack-induced similarity drop to recover.
    pub lambda: f64,
    /// Slack absorbing extractor noise.
    pub delta: f64,
}

impl Default for Tier2Config {
    fn default() -> Self {
        Tier2Config {
            lambda: 0.9,
            delta: 0.02,
        }
    }
}

fn channel_rows(w: &Tensor, bias: Option<&Tensor>, include_bias: bool) -> Vec<Vec<f64>> {
    let stride = w.spatial();
    (0..w.shape[0])
        .map(|i| {
            let mut row = w.data[i * stride..(i + 1) * stride].to_vec();
            if include_bias {
                if let Some(b) = bias {
                    row.push(b.data[i]);
                }
            }
            row
        })
        .collect()
}

fn residual(rec: &[f64], reference: &[f64], cfg: &CertificateConfig) -> f64 {
    let ref_norm: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff_norm = if cfg.allow_scaling {
        // Best nonnegative scale; negative optima clamp to zero so only
        // positive per-channel scaling counts as a symmetry.
        let dot: f64 = rec.iter().zip(reference).map(|(a, b)| a * b).sum();
        let s = (dot / (ref_norm * ref_norm + cfg.eta)).max(0.0);
        rec.iter()
            .zip(reference)
            .map(|(a, b)| (a - s * b) * (a - s * b))
            .sum::<f64>()
            .sqrt()
    } else {
        rec.iter()
            .zip(reference)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    diff_norm / (ref_norm + cfg.eta)
}

/// Greedy one-to-one matching: repeatedly take the globally smallest
/// remaining residual, ties broken on the lowest (i, j).
fn greedy_match(r: &[Vec<f64>]) -> Vec<usize> {
    let n = r.len();
    let mut pi = vec![usize::MAX; n];
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; n];
    for _ in 0..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, row) in r.iter().enumerate() {
            if row_used[i] {
                continue;
            }
            for (j, &v) in row.iter().enumerate() {
                if col_used[j] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bv, bi, bj)) => v < bv || (v == bv && (i, j) < (bi, bj)),
                };
                if better {
                    best = Some((v, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("square matrix has a free cell");
        pi[i] = j;
        row_used[i] = true;
        col_used[j] = true;
    }
    pi
}

/// Hungarian assignment (Kuhn's algorithm with potentials), minimizing the
/// total residual. Diagnostics only; the certificate's contract is greedy.
fn hungarian_match(r: &[Vec<f64>]) -> Vec<usize> {
    let n = r.len();
    // 1-indexed potentials formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = r[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pi = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            pi[p[j] - 1] = j - 1;
        }
    }
    pi
}

/// Tier-1 certificate for one layer pair.
pub fn certify_layer(
    w_rec: &Tensor,
    bias_rec: Option<&Tensor>,
    w_ref: &Tensor,
    bias_ref: Option<&Tensor>,
    node: NodeId,
    cfg: &CertificateConfig,
) -> Result<LayerCertificate, VerifierError> {
    if w_rec.shape.is_empty() || w_rec.shape[0] == 0 || w_ref.shape[0] == 0 {
        return Err(VerifierError::EmptyLayer(node));
    }
    let rec_rows = channel_rows(w_rec, bias_rec, cfg.include_bias);
    let ref_rows = channel_rows(w_ref, bias_ref, cfg.include_bias);
    if rec_rows.len() != ref_rows.len() || rec_rows[0].len() != ref_rows[0].len() {
        // Widths disagree: nothing can be matched.
        return Ok(LayerCertificate {
            node: node.0,
            pi: Vec::new(),
            max_rel_err: None,
            match_frac: 0.0,
            pass: false,
        });
    }
    let r: Vec<Vec<f64>> = rec_rows
        .iter()
        .map(|rec| ref_rows.iter().map(|rf| residual(rec, rf, cfg)).collect())
        .collect();
    let pi = if cfg.use_hungarian {
        hungarian_match(&r)
    } else {
        greedy_match(&r)
    };
    let max_rel_err = pi
        .iter()
        .enumerate()
        .map(|(i, &j)| r[i][j])
        .fold(0.0f64, f64::max);
    let pass = max_rel_err <= cfg.perm_tol;
    Ok(LayerCertificate {
        node: node.0,
        pi,
        max_rel_err: Some(max_rel_err),
        match_frac: 1.0,
        pass,
    })
}

fn layer_tensors<'g>(
    g: &'g Graph,
    node: NodeId,
) -> Result<(&'g Tensor, &'g Tensor), VerifierError> {
    let kind = &g
        .nodes()
        .get(node.0)
        .ok_or(VerifierError::LayerMissing(node))?
        .kind;
    weight_bias(kind).ok_or(VerifierError::LayerMissing(node))
}

/// Run the Tier-1 certificate on every watermarked layer; the aggregate
/// passes only if all layers pass.
pub fn certify_model(
    g_rec: &Graph,
    g_ref: &Graph,
    watermarked_layers: &[NodeId],
    cfg: &CertificateConfig,
) -> Result<CertificateReport, VerifierError> {
    let mut layers = Vec::new();
    for &id in watermarked_layers {
        let (w_rec, b_rec) = layer_tensors(g_rec, id)?;
        let (w_ref, b_ref) = layer_tensors(g_ref, id)?;
        layers.push(certify_layer(
            w_rec,
            Some(b_rec),
            w_ref,
            Some(b_ref),
            id,
            cfg,
        )?);
    }
    let verified = layers.iter().filter(|l| l.pass).count();
    let total = layers.len();
    Ok(CertificateReport {
        pass: verified == total && total > 0,
        verified,
        total,
        layers,
    })
}

/// Tier-2 PASS predicate: `r - a >= lambda . max(0, c - a) - delta`.
pub fn tier2_pass(trip: &SimilarityTriplet, cfg: &Tier2Config) -> bool {
    let drop = (trip.clean - trip.attacked).max(0.0);
    trip.recovered - trip.attacked >= cfg.lambda * drop - cfg.delta
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictReport {
    pub sim_clean: f64,
    pub sim_attacked: f64,
    pub attacked_degraded: bool,
    pub sim_recovered_raw: f64,
    pub recovered_degraded: bool,
    /// When Tier-1 certifies reference equivalence the similarity is treated
    /// as recorded on the clean reference; otherwise the raw extraction.
    pub sim_recovered_effective: f64,
    pub tier1: CertificateReport,
    pub tier2_evaluated: bool,
    pub tier2_pass: Option<bool>,
    pub verdict: String,
    pub pass: bool,
}

/// Full two-tier verdict over the clean/attacked/recovered triplet.
pub fn verify(
    g_clean: &Graph,
    g_attacked: &Graph,
    g_recovered: &Graph,
    key: &WatermarkKey,
    ccfg: &CertificateConfig,
    t2cfg: &Tier2Config,
) -> Result<VerdictReport, VerifierError> {
    if !(t2cfg.lambda > 0.0 && t2cfg.lambda <= 1.0) {
        return Err(VerifierError::BadConfig(format!(
            "lambda must be in (0, 1], got {}",
            t2cfg.lambda
        )));
    }
    if t2cfg.delta < 0.0 {
        return Err(VerifierError::BadConfig(format!(
            "delta must be nonnegative, got {}",
            t2cfg.delta
        )));
    }
    let c = extract_similarity(g_clean, key)?;
    let a = extract_similarity(g_attacked, key)?;
    let r = extract_similarity(g_recovered, key)?;
    let tier1 = certify_model(g_recovered, g_clean, &[key.target_layer], ccfg)?;

    let (verdict, pass, tier2_evaluated, tier2_result, effective) = if tier1.pass {
        ("tier1-pass".to_string(), true, false, None, c.value())
    } else {
        let trip = SimilarityTriplet {
            clean: c.value(),
            attacked: a.value(),
            recovered: r.value(),
        };
        let t2 = tier2_pass(&trip, t2cfg);
        (
            if t2 {
                "tier2-pass".to_string()
            } else {
                "fail".to_string()
            },
            t2,
            true,
            Some(t2),
            r.value(),
        )
    };
    Ok(VerdictReport {
        sim_clean: c.value(),
        sim_attacked: a.value(),
        attacked_degraded: a.degraded(),
        sim_recovered_raw: r.value(),
        recovered_degraded: r.degraded(),
        sim_recovered_effective: effective,
        tier1,
        tier2_evaluated,
        tier2_pass: tier2_result,
        verdict,
        pass,
    })
}

#[cfg(test)]
mod tests;
