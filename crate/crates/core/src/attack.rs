//! Graph-consistent NSO attack engine.
//!
//! The attacker widens producer edges with function-preserving dummy
//! channels (zero channels, mutually canceling cliques, proportional splits),
//! optionally composes primitives over several steps with per-step
//! reinjection, interleaves dummies into interior positions, and camouflages
//! the result with channel permutations and positive per-channel scaling
//! (BatchNorm-compensated where a BN follows the producer).
//!
//! Every edit is planned globally first: producer edges constrained by a
//! residual Add share one expanded layout, and each step immediately
//! rewrites all downstream linear consumers with the step's composed
//! ChannelTransform, so the attacked graph stays shape-consistent and
//! functionally equivalent by construction.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{merge_groups, rewritable_producers, Graph, GraphError, NodeId, ProducerEdge};
use crate::recovery::{make_probes, ProbeConfig};
use crate::rng::Rng;
use crate::surgery::{
    append_rows, apply_unit_transform, bn_params, gather_rows, max_abs_output_delta, weight_bias,
    BnEdit, ProducerEdit, SurgeryError,
};
use crate::tensor::Tensor;
use crate::transform::{ChannelTransform, PermScale};

/// Probe seed for the fixed 16-probe functional-drift measurement; shared by
/// attack reports and negative controls so drift numbers are comparable.
pub const DRIFT_PROBE_SEED: u64 = 0x5EED_D81F;
pub const DRIFT_PROBE_COUNT: usize = 16;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack config: {0}")]
    BadConfig(String),
    #[error("attack: {0} is not a rewritable producer edge")]
    NotRewritable(NodeId),
    #[error("attack: {0}")]
    Surgery(#[from] SurgeryError),
    #[error("attack: {0}")]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Zero,
    Clique,
    Split,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Zero => "zero",
            Primitive::Clique => "clique",
            Primitive::Split => "split",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackVariant {
    Zero,
    Clique,
    Split,
    MixOpseq,
    MixOpseqPerMergeGroup,
}

impl AttackVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AttackVariant::Zero => "zero",
            AttackVariant::Clique => "clique",
            AttackVariant::Split => "split",
            AttackVariant::MixOpseq => "mix_opseq",
            AttackVariant::MixOpseqPerMergeGroup => "mix_opseq_per_merge_group",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "zero" => AttackVariant::Zero,
            "clique" => AttackVariant::Clique,
            "split" => AttackVariant::Split,
            "mix_opseq" => AttackVariant::MixOpseq,
            "mix_opseq_per_merge_group" => AttackVariant::MixOpseqPerMergeGroup,
            _ => return None,
        })
    }

    pub fn all() -> &'static [AttackVariant] {
        &[
            AttackVariant::Zero,
            AttackVariant::Clique,
            AttackVariant::Split,
            AttackVariant::MixOpseq,
            AttackVariant::MixOpseqPerMergeGroup,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Camouflage {
    None,
    Perm,
    Scale,
    PermAndScale,
}

impl Camouflage {
    pub fn name(&self) -> &'static str {
        match self {
            Camouflage::None => "none",
            Camouflage::Perm => "perm",
            Camouflage::Scale => "scale",
            Camouflage::PermAndScale => "perm_and_scale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Camouflage::None,
            "perm" => Camouflage::Perm,
            "scale" => Camouflage::Scale,
            "perm_and_scale" => Camouflage::PermAndScale,
            _ => return None,
        })
    }

    pub fn permutes(&self) -> bool {
        matches!(self, Camouflage::Perm | Camouflage::PermAndScale)
    }

    pub fn scales(&self) -> bool {
        matches!(self, Camouflage::Scale | Camouflage::PermAndScale)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub ratio: f64,
    pub variant: AttackVariant,
    /// Number of sequential primitive applications for the mix variants.
    pub opseq_len: usize,
    /// Relative position of the split baseline channel in `[0, 1]`.
    pub split_baseline: f64,
    pub camouflage: Camouflage,
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            ratio: 0.2,
            variant: AttackVariant::Zero,
            opseq_len: 3,
            split_baseline: 1.0,
            camouflage: Camouflage::None,
            scale_range: (0.6, 1.4),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(AttackError::BadConfig(format!(
                "ratio must be in [0, 1], got {}",
                self.ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.split_baseline) {
            return Err(AttackError::BadConfig(format!(
                "split baseline must be in [0, 1], got {}",
                self.split_baseline
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(AttackError::BadConfig(format!(
                "scale range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        if self.opseq_len == 0 {
            return Err(AttackError::BadConfig("opseq length must be positive".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        match self.variant {
            AttackVariant::MixOpseq | AttackVariant::MixOpseqPerMergeGroup => self.opseq_len,
            _ => 1,
        }
    }
}

/// One attackable unit: a merge group whose members expand in lockstep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanUnit {
    pub producers: Vec<NodeId>,
    pub seq: Vec<Primitive>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub units: Vec<PlanUnit>,
    pub ratio: f64,
    /// First-step injection count per rewritable edge.
    pub initial_d: Vec<(NodeId, usize)>,
    /// Set when the graph has no rewritable producer edge.
    pub no_eligible_producers: bool,
}

fn d_for(ratio: f64, width: usize) -> usize {
    (ratio * width as f64).ceil() as usize
}

fn sample_seq(rng: &mut Rng, len: usize) -> Vec<Primitive> {
    (0..len)
        .map(|_| match rng.below(3) {
            0 => Primitive::Zero,
            1 => Primitive::Clique,
            _ => Primitive::Split,
        })
        .collect()
}

/// Build the global injection plan: every rewritable producer edge receives
/// `d = ceil(ratio * C)` channels per step, all edges of one merge group get
/// identical expanded layouts, and the primitive sequence is resolved per
/// variant (fixed, one global sample, or one sample per merge group).
pub fn plan_injection(g: &Graph, cfg: &AttackConfig) -> Result<InjectionPlan, AttackError> {
    cfg.validate()?;
    let (producers, units) = rewritable_producers(g);
    let no_eligible = units.is_empty();
    let steps = cfg.steps();
    let mut rng = Rng::new(cfg.seed).split(u64::from_le_bytes(*b"opseq\0\0\0"));
    let global_seq = match cfg.variant {
        AttackVariant::Zero => vec![Primitive::Zero],
        AttackVariant::Clique => vec![Primitive::Clique],
        AttackVariant::Split => vec![Primitive::Split],
        AttackVariant::MixOpseq => sample_seq(&mut rng, steps),
        AttackVariant::MixOpseqPerMergeGroup => Vec::new(),
    };
    let plan_units = if cfg.ratio == 0.0 {
        Vec::new()
    } else {
        units
            .iter()
            .enumerate()
            .map(|(i, u)| PlanUnit {
                producers: u.producers.clone(),
                seq: match cfg.variant {
                    AttackVariant::MixOpseqPerMergeGroup => {
                        sample_seq(&mut rng.split(i as u64), steps)
                    }
                    _ => global_seq.clone(),
                },
            })
            .collect()
    };
    let initial_d = producers
        .iter()
        .filter(|p| p.rewritable())
        .map(|p| (p.node, d_for(cfg.ratio, p.width)))
        .collect();
    Ok(InjectionPlan {
        units: plan_units,
        ratio: cfg.ratio,
        initial_d,
        no_eligible_producers: no_eligible,
    })
}

/// Interior placement: an order-preserving interleave that scatters the
/// `fresh` tail channels among the `old` ones. Real channels keep their
/// relative order, so compaction alone restores the original index layout.
fn interleave_src_of(old: usize, fresh: usize, rng: &mut Rng) -> Vec<usize> {
    let total = old + fresh;
    let mut slots: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut slots);
    let mut fresh_slots: Vec<usize> = slots[..fresh].to_vec();
    fresh_slots.sort_unstable();
    let mut src_of = vec![usize::MAX; total];
    for (j, &s) in fresh_slots.iter().enumerate() {
        src_of[s] = old + j;
    }
    let mut next_old = 0;
    for s in src_of.iter_mut() {
        if *s == usize::MAX {
            *s = next_old;
            next_old += 1;
        }
    }
    src_of
}

/// Tail-layout producer edit for one primitive application on one member.
struct TailInjection {
    weight: Tensor,
    bias: Tensor,
    bn: Option<BnEdit>,
}

fn neutral_bn_extension(g: &Graph, edge: &ProducerEdge, d: usize) -> Option<BnEdit> {
    edge.bn_next.map(|bn| {
        let (gamma, beta, mean, var) = bn_params(&g.node(bn).kind).expect("bn node");
        BnEdit {
            gamma: append_rows(gamma, &vec![vec![1.0]; d]),
            beta: append_rows(beta, &vec![vec![0.0]; d]),
            running_mean: append_rows(mean, &vec![vec![0.0]; d]),
            running_var: append_rows(var, &vec![vec![1.0]; d]),
        }
    })
}

fn bn_rows_like(g: &Graph, edge: &ProducerEdge, idx: &[usize]) -> Option<BnEdit> {
    edge.bn_next.map(|bn| {
        let (gamma, beta, mean, var) = bn_params(&g.node(bn).kind).expect("bn node");
        BnEdit {
            gamma: gather_rows(gamma, idx),
            beta: gather_rows(beta, idx),
            running_mean: gather_rows(mean, idx),
            running_var: gather_rows(var, idx),
        }
    })
}

/// Empirical mean/std of a weight tensor, for clique filter sampling.
fn weight_stats(w: &Tensor) -> (f64, f64) {
    let n = w.len() as f64;
    let mean = w.data.iter().sum::<f64>() / n;
    let var = w.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct StepOutcome {
    d: usize,
    effective_d: usize,
    promoted: bool,
    primitive: Primitive,
}

/// Apply one primitive to one unit: build tail-layout producer edits and the
/// shared `M = M_primitive . M_placement`, then push everything through the
/// surgery path. Returns `None` when `d` resolves to zero.
fn unit_step(
    g: &mut Graph,
    unit: &[NodeId],
    primitive: Primitive,
    ratio: f64,
    split_p: f64,
    interior_placement: bool,
    rng: &mut Rng,
) -> Result<Option<StepOutcome>, AttackError> {
    let producers = crate::graph::eligible_producers(g);
    let members: Vec<&ProducerEdge> = unit
        .iter()
        .map(|id| {
            producers
                .iter()
                .find(|p| p.node == *id)
                .ok_or(AttackError::NotRewritable(*id))
        })
        .collect::<Result<_, _>>()?;
    let width = members[0].width;
    debug_assert!(members.iter().all(|m| m.width == width));
    let d = d_for(ratio, width);
    if d == 0 {
        return Ok(None);
    }
    // A clique needs at least two members to cancel.
    let (effective_d, promoted) = match primitive {
        Primitive::Clique if d == 1 => (2, true),
        _ => (d, false),
    };

    let (m_prim, injections): (ChannelTransform, Vec<TailInjection>) = match primitive {
        Primitive::Zero => {
            let m = ChannelTransform::new(
                width,
                width + effective_d,
                (0..width).map(|i| (i, i, 1.0)).collect(),
            )
            .expect("valid transform");
            let injections = members
                .iter()
                .map(|edge| {
                    let (w, b) = weight_bias(&g.node(edge.node).kind).expect("linear op");
                    TailInjection {
                        weight: append_rows(w, &vec![vec![0.0; w.spatial()]; effective_d]),
                        bias: append_rows(b, &vec![vec![0.0]; effective_d]),
                        bn: neutral_bn_extension(g, edge, effective_d),
                    }
                })
                .collect();
            (m, injections)
        }
        Primitive::Clique => {
            // Shared cancellation coefficients for the whole unit: one random
            // vector per dummy, mean-centered so they sum to zero.
            let mut mu: Vec<Vec<f64>> = (0..effective_d)
                .map(|_| (0..width).map(|_| rng.normal()).collect())
                .collect();
            for r in 0..width {
                let mean: f64 = mu.iter().map(|col| col[r]).sum::<f64>() / effective_d as f64;
                for col in mu.iter_mut() {
                    col[r] -= mean;
                }
            }
            let mut entries: Vec<(usize, usize, f64)> =
                (0..width).map(|i| (i, i, 1.0)).collect();
            for (j, col) in mu.iter().enumerate() {
                for (r, &v) in col.iter().enumerate() {
                    if v != 0.0 {
                        entries.push((r, width + j, v));
                    }
                }
            }
            let m = ChannelTransform::new(width, width + effective_d, entries)
                .expect("valid transform");
            let injections = members
                .iter()
                .map(|edge| {
                    let (w, b) = weight_bias(&g.node(edge.node).kind).expect("linear op");
                    // All clique members share one filter drawn from the
                    // producer's empirical weight distribution.
                    let (mean, std) = weight_stats(w);
                    let base: Vec<f64> = (0..w.spatial())
                        .map(|_| mean + std * rng.normal())
                        .collect();
                    TailInjection {
                        weight: append_rows(w, &vec![base.clone(); effective_d]),
                        bias: append_rows(b, &vec![vec![0.0]; effective_d]),
                        bn: neutral_bn_extension(g, edge, effective_d),
                    }
                })
                .collect();
            (m, injections)
        }
        Primitive::Split => {
            let baseline = (((split_p * (width - 1) as f64) + 0.5).floor() as usize).min(width - 1);
            let k = effective_d + 1;
            // Mid layout: all channels except the baseline in order, then k
            // duplicates of the baseline at the tail.
            let mut entries = Vec::new();
            for i in 0..width {
                use std::cmp::Ordering;
                match i.cmp(&baseline) {
                    Ordering::Less => entries.push((i, i, 1.0)),
                    Ordering::Greater => entries.push((i, i - 1, 1.0)),
                    Ordering::Equal => {
                        for j in 0..k {
                            entries.push((i, width - 1 + j, 1.0 / k as f64));
                        }
                    }
                }
            }
            let m = ChannelTransform::new(width, width + effective_d, entries)
                .expect("valid transform");
            let keep: Vec<usize> = (0..width).filter(|&i| i != baseline).collect();
            let mut layout = keep;
            layout.extend(std::iter::repeat(baseline).take(k));
            let injections = members
                .iter()
                .map(|edge| {
                    let (w, b) = weight_bias(&g.node(edge.node).kind).expect("linear op");
                    TailInjection {
                        weight: gather_rows(w, &layout),
                        bias: gather_rows(b, &layout),
                        bn: bn_rows_like(g, edge, &layout),
                    }
                })
                .collect();
            (m, injections)
        }
    };

    // Interior placement: scatter the fresh tail channels, identically for
    // every unit member so Add operands stay aligned.
    let new_width = width + effective_d;
    let fresh = match primitive {
        Primitive::Split => effective_d + 1,
        _ => effective_d,
    };
    let (m_final, edits) = if interior_placement {
        let src_of = interleave_src_of(new_width - fresh, fresh, rng);
        let m_place = ChannelTransform::permutation(&src_of);
        let m = m_prim.compose(&m_place).expect("conformable");
        let edits = members
            .iter()
            .zip(injections)
            .map(|(edge, inj)| ProducerEdit {
                node: edge.node,
                weight: gather_rows(&inj.weight, &src_of),
                bias: gather_rows(&inj.bias, &src_of),
                bn: inj.bn.map(|bn| BnEdit {
                    gamma: gather_rows(&bn.gamma, &src_of),
                    beta: gather_rows(&bn.beta, &src_of),
                    running_mean: gather_rows(&bn.running_mean, &src_of),
                    running_var: gather_rows(&bn.running_var, &src_of),
                }),
            })
            .collect();
        (m, edits)
    } else {
        let edits = members
            .iter()
            .zip(injections)
            .map(|(edge, inj)| ProducerEdit {
                node: edge.node,
                weight: inj.weight,
                bias: inj.bias,
                bn: inj.bn,
            })
            .collect();
        (m_prim, edits)
    };

    apply_unit_transform(g, &members, edits, &m_final)?;
    Ok(Some(StepOutcome {
        d,
        effective_d,
        promoted,
        primitive,
    }))
}

/// Camouflage outcome recorded per unit.
struct CamouflageOutcome {
    perm: Option<Vec<usize>>,
    scales: Option<Vec<f64>>,
    scale_skipped: bool,
}

/// Permutation and/or scaling camouflage on one unit. The permutation and
/// scales are drawn once per unit so Add operands stay aligned. Scaling is
/// compensated in the following BatchNorm when every member has one
/// (post-BN activations unchanged), through the consumers as `D^-1`
/// otherwise; with mixed BN presence the scaling anchor is skipped.
fn camouflage_unit(
    g: &mut Graph,
    unit: &[NodeId],
    camo: Camouflage,
    scale_range: (f64, f64),
    rng: &mut Rng,
) -> Result<CamouflageOutcome, AttackError> {
    let producers = crate::graph::eligible_producers(g);
    let members: Vec<&ProducerEdge> = unit
        .iter()
        .map(|id| {
            producers
                .iter()
                .find(|p| p.node == *id)
                .ok_or(AttackError::NotRewritable(*id))
        })
        .collect::<Result<_, _>>()?;
    let width = members[0].width;

    let src_of: Vec<usize> = if camo.permutes() {
        let mut p: Vec<usize> = (0..width).collect();
        rng.shuffle(&mut p);
        p
    } else {
        (0..width).collect()
    };

    let all_bn = members.iter().all(|m| m.bn_next.is_some());
    let none_bn = members.iter().all(|m| m.bn_next.is_none());
    let scale_mode_ok = all_bn || none_bn;
    let want_scale = camo.scales();
    let scales: Vec<f64> = if want_scale && scale_mode_ok {
        (0..width)
            .map(|_| rng.uniform(scale_range.0, scale_range.1))
            .collect()
    } else {
        vec![1.0; width]
    };
    let scale_skipped = want_scale && !scale_mode_ok;

    // Consumer-side transform: the permutation always propagates; the scale
    // factor joins it only when no following BatchNorm absorbs it.
    let consumer_scales = if all_bn {
        vec![1.0; width]
    } else {
        scales.clone()
    };
    let m = PermScale {
        perm: src_of.clone(),
        scales: consumer_scales,
    }
    .transform();

    let mut edits = Vec::new();
    for edge in &members {
        let (w, b) = weight_bias(&g.node(edge.node).kind).expect("linear op");
        let mut new_w = gather_rows(w, &src_of);
        let mut new_b = gather_rows(b, &src_of);
        let stride = new_w.spatial();
        for (i, &s) in scales.iter().enumerate() {
            for t in 0..stride {
                new_w.data[i * stride + t] *= s;
            }
            new_b.data[i] *= s;
        }
        let bn = edge.bn_next.map(|bn_id| {
            let (gamma, beta, mean, var) = bn_params(&g.node(bn_id).kind).expect("bn node");
            let mut e = BnEdit {
                gamma: gather_rows(gamma, &src_of),
                beta: gather_rows(beta, &src_of),
                running_mean: gather_rows(mean, &src_of),
                running_var: gather_rows(var, &src_of),
            };
            // Running stats track the scaled pre-BN activation, keeping the
            // post-BN output invariant.
            for (i, &s) in scales.iter().enumerate() {
                e.running_mean.data[i] *= s;
                e.running_var.data[i] *= s * s;
            }
            e
        });
        edits.push(ProducerEdit {
            node: edge.node,
            weight: new_w,
            bias: new_b,
            bn,
        });
    }
    apply_unit_transform(g, &members, edits, &m)?;
    Ok(CamouflageOutcome {
        perm: camo.permutes().then_some(src_of),
        scales: (want_scale && scale_mode_ok).then_some(scales),
        scale_skipped,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub primitive: String,
    pub d: usize,
    pub effective_d: usize,
    pub promoted: bool,
    pub width_after: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeAttackReport {
    pub node: usize,
    pub width_before: usize,
    pub width_after: usize,
    pub injected_total: usize,
    pub width_trajectory: Vec<usize>,
    pub steps: Vec<StepReport>,
    pub camouflage_perm: Option<Vec<usize>>,
    pub camouflage_scales: Option<Vec<f64>>,
    pub scale_skipped: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AttackTimings {
    pub plan_ns: u64,
    pub inject_ns: u64,
    pub camouflage_ns: u64,
    pub drift_ns: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub motif: String,
    pub variant: String,
    pub ratio: f64,
    pub opseq_len: usize,
    pub camouflage: String,
    pub seed: u64,
    pub no_eligible_producers: bool,
    /// Primitive sequence per unit, logged verbatim for replay.
    pub opseq: Vec<Vec<String>>,
    pub merge_groups: Vec<Vec<usize>>,
    pub edges: Vec<EdgeAttackReport>,
    pub drift_probes: usize,
    pub functional_drift: f64,
    pub timings_ns: AttackTimings,
}

impl AttackReport {
    /// Drop wall-clock fields for byte-stable report comparison.
    pub fn strip_timings(&mut self) {
        self.timings_ns = AttackTimings::default();
    }
}

/// Single-edge zero injection. Applies to the full merge group containing
/// `edge` (a layout change on one Add operand is never valid in isolation),
/// without interior placement.
pub fn inject_zero(g: &Graph, edge: NodeId, d: usize, rng: &mut Rng) -> Result<Graph, AttackError> {
    single_edge(g, edge, Primitive::Zero, d, 1.0, rng)
}

/// Single-edge clique injection (promotes d=1 to 2 members).
pub fn inject_clique(
    g: &Graph,
    edge: NodeId,
    d: usize,
    rng: &mut Rng,
) -> Result<Graph, AttackError> {
    single_edge(g, edge, Primitive::Clique, d, 1.0, rng)
}

/// Single-edge split: replaces the baseline channel at relative position `p`
/// with `d + 1` scaled duplicates.
pub fn inject_split(
    g: &Graph,
    edge: NodeId,
    d: usize,
    p: f64,
    rng: &mut Rng,
) -> Result<Graph, AttackError> {
    single_edge(g, edge, Primitive::Split, d, p, rng)
}

fn single_edge(
    g: &Graph,
    edge: NodeId,
    primitive: Primitive,
    d: usize,
    p: f64,
    rng: &mut Rng,
) -> Result<Graph, AttackError> {
    if d == 0 {
        return Ok(g.clone());
    }
    let (_, units) = rewritable_producers(g);
    let unit = units
        .iter()
        .find(|u| u.producers.contains(&edge))
        .ok_or(AttackError::NotRewritable(edge))?;
    let width = g
        .node(edge)
        .kind
        .out_channels()
        .ok_or(AttackError::NotRewritable(edge))?;
    // Express the explicit count as a ratio that ceils back to d.
    let ratio = d as f64 / width as f64;
    let mut out = g.clone();
    unit_step(&mut out, &unit.producers, primitive, ratio, p, false, rng)?;
    Ok(out)
}

/// Permutation/scaling camouflage on the merge group containing `edge`.
pub fn apply_camouflage(
    g: &Graph,
    edge: NodeId,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<Graph, AttackError> {
    cfg.validate()?;
    if cfg.camouflage == Camouflage::None {
        return Ok(g.clone());
    }
    let (_, units) = rewritable_producers(g);
    let unit = units
        .iter()
        .find(|u| u.producers.contains(&edge))
        .ok_or(AttackError::NotRewritable(edge))?;
    let mut out = g.clone();
    camouflage_unit(&mut out, &unit.producers, cfg.camouflage, cfg.scale_range, rng)?;
    Ok(out)
}

/// Execute the full graph-consistent attack: plan, inject step by step in
/// topological order with immediate consumer rewrites, camouflage, and
/// measure functional drift on the fixed probe set.
pub fn attack(g: &Graph, cfg: &AttackConfig) -> Result<(Graph, AttackReport), AttackError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let plan = plan_injection(g, cfg)?;
    let plan_ns = t0.elapsed().as_nanos() as u64;

    let mut out = g.clone();
    let widths_before: Vec<(NodeId, usize)> = g.layer_widths();
    let mut edge_steps: std::collections::BTreeMap<usize, Vec<StepReport>> = Default::default();
    let mut edge_traj: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for unit in &plan.units {
        for id in &unit.producers {
            let w = g.node(*id).kind.out_channels().expect("producer");
            edge_traj.insert(id.0, vec![w]);
            edge_steps.insert(id.0, Vec::new());
        }
    }

    let t1 = Instant::now();
    let steps = cfg.steps();
    for step in 0..steps {
        for (ui, unit) in plan.units.iter().enumerate() {
            let primitive = unit.seq[step.min(unit.seq.len() - 1)];
            let mut rng = Rng::new(cfg.seed)
                .split(0x1213_0000 + ui as u64)
                .split(step as u64);
            let outcome = unit_step(
                &mut out,
                &unit.producers,
                primitive,
                cfg.ratio,
                cfg.split_baseline,
                true,
                &mut rng,
            )?;
            if let Some(oc) = outcome {
                for id in &unit.producers {
                    let w = out.node(*id).kind.out_channels().expect("producer");
                    edge_traj.get_mut(&id.0).expect("planned").push(w);
                    edge_steps.get_mut(&id.0).expect("planned").push(StepReport {
                        primitive: oc.primitive.name().to_string(),
                        d: oc.d,
                        effective_d: oc.effective_d,
                        promoted: oc.promoted,
                        width_after: w,
                    });
                }
            }
        }
    }
    let inject_ns = t1.elapsed().as_nanos() as u64;

    let t2 = Instant::now();
    let mut camo_by_edge: std::collections::BTreeMap<usize, CamouflageOutcome> = Default::default();
    if cfg.camouflage != Camouflage::None {
        let (_, units) = rewritable_producers(&out);
        for (ui, unit) in units.iter().enumerate() {
            let mut rng = Rng::new(cfg.seed).split(0xCA40_0000 + ui as u64);
            let oc = camouflage_unit(
                &mut out,
                &unit.producers,
                cfg.camouflage,
                cfg.scale_range,
                &mut rng,
            )?;
            for id in &unit.producers {
                camo_by_edge.insert(
                    id.0,
                    CamouflageOutcome {
                        perm: oc.perm.clone(),
                        scales: oc.scales.clone(),
                        scale_skipped: oc.scale_skipped,
                    },
                );
            }
        }
    }
    let camouflage_ns = t2.elapsed().as_nanos() as u64;

    let t3 = Instant::now();
    let probes = make_probes(
        &ProbeConfig {
            count: DRIFT_PROBE_COUNT,
            seed: DRIFT_PROBE_SEED,
            ..ProbeConfig::default()
        },
        g.input_shape(),
    );
    let drift = max_abs_output_delta(g, &out, &probes)?;
    let drift_ns = t3.elapsed().as_nanos() as u64;

    let producers_after = crate::graph::eligible_producers(&out);
    let groups = merge_groups(&out, &producers_after);
    let edges = widths_before
        .iter()
        .filter_map(|(id, before)| {
            let after = out.node(*id).kind.out_channels()?;
            let steps = edge_steps.get(&id.0).cloned().unwrap_or_default();
            let traj = edge_traj
                .get(&id.0)
                .cloned()
                .unwrap_or_else(|| vec![*before]);
            let camo = camo_by_edge.get(&id.0);
            if steps.is_empty() && camo.is_none() && *before == after {
                return None;
            }
            Some(EdgeAttackReport {
                node: id.0,
                width_before: *before,
                width_after: after,
                injected_total: after - before,
                width_trajectory: traj,
                steps,
                camouflage_perm: camo.and_then(|c| c.perm.clone()),
                camouflage_scales: camo.and_then(|c| c.scales.clone()),
                scale_skipped: camo.map(|c| c.scale_skipped).unwrap_or(false),
            })
        })
        .collect();

    let report = AttackReport {
        motif: g.meta.motif.clone(),
        variant: cfg.variant.name().to_string(),
        ratio: cfg.ratio,
        opseq_len: cfg.steps(),
        camouflage: cfg.camouflage.name().to_string(),
        seed: cfg.seed,
        no_eligible_producers: plan.no_eligible_producers,
        opseq: plan
            .units
            .iter()
            .map(|u| u.seq.iter().map(|p| p.name().to_string()).collect())
            .collect(),
        merge_groups: groups
            .iter()
            .map(|gr| gr.producers.iter().map(|n| n.0).collect())
            .collect(),
        edges,
        drift_probes: DRIFT_PROBE_COUNT,
        functional_drift: drift,
        timings_ns: AttackTimings {
            plan_ns,
            inject_ns,
            camouflage_ns,
            drift_ns,
        },
    };
    Ok((out, report))
}
