//! Probe-driven redundancy discovery and graph-consistent recovery.
//!
//! The recovery never sees the attacker's construction: it runs a
//! deterministic probe set through the model in eval mode, summarizes each
//! producer channel per probe (spatial mean of the rectified activation,
//! captured post-BN when a BatchNorm follows the producer), buckets channels
//! by hashed activity signatures, refines buckets into proportionality
//! clusters with a robust median-ratio test, and decides per cluster whether
//! its merged outgoing effect is null for every downstream consumer (drop)
//! or reconstructs a real signal (merge into a representative). The
//! resulting sparse transform `y_attacked = M_e . y_compact` compacts the
//! producer and rewrites all consumers, with one shared layout per residual
//! merge group and block-diagonal composition through concatenations.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    rewritable_producers, CaptureSite, Graph, GraphError, NodeId, ProducerEdge,
};
use crate::rng::Rng;
use crate::surgery::{
    apply_unit_transform, bn_params, gather_rows, max_abs_output_delta, weight_bias, BnEdit,
    ProducerEdit, SurgeryError,
};
use crate::tensor::Tensor;
use crate::transform::{ChannelTransform, PathDescriptor};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("recovery config: {0}")]
    BadConfig(String),
    #[error("recovery: {0}")]
    Graph(#[from] GraphError),
    #[error("recovery: {0}")]
    Surgery(#[from] SurgeryError),
    #[error(
        "recovery sanity check failed: max-abs output delta {delta:e} exceeds tolerance {tol:e}"
    )]
    SanityCheckFailed { delta: f64, tol: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Number of probes T.
    pub count: usize,
    pub value_range: (f64, f64),
    pub seed: u64,
    /// Instrumentation hint only; probes are always evaluated one at a time.
    pub batch_hint: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            count: 32,
            value_range: (-1.0, 1.0),
            seed: 0x9E37_79B9,
            batch_hint: 1,
        }
    }
}

/// Deterministic probe set: `count` tensors of i.i.d. uniforms in
/// `value_range`, entirely determined by the seed.
pub fn make_probes(cfg: &ProbeConfig, input_shape: &[usize]) -> Vec<Tensor> {
    let mut rng = Rng::new(cfg.seed);
    let n: usize = input_shape.iter().product();
    (0..cfg.count)
        .map(|_| {
            let data = (0..n)
                .map(|_| rng.uniform(cfg.value_range.0, cfg.value_range.1))
                .collect();
            Tensor::new(input_shape.to_vec(), data).expect("length matches shape")
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryConfig {
    /// Magnitude threshold for stable ratio estimation.
    pub epsilon: f64,
    /// Proportionality tolerance (symmetric relative error).
    pub tau: f64,
    /// Minimum valid probes for a ratio estimate.
    pub t_min: usize,
    /// Relative norm below which a cluster's merged outgoing effect counts
    /// as null for a consumer.
    pub gamma_drop: f64,
    /// Merged norm at or above which a cluster is confidently merged;
    /// between the two thresholds the cluster is flagged ambiguous and left
    /// untouched.
    pub gamma_keep: f64,
    /// Optional (lo, hi) bounds on the fraction of active probes; channels
    /// outside the band are excluded from clustering unless fully inactive.
    pub active_ratio_gate: Option<(f64, f64)>,
    /// Run the probe set through the recovered graph and reject the result
    /// if the output moved more than `sanity_tol`.
    pub sanity_check: bool,
    pub sanity_tol: f64,
    /// Re-run the synchronization sweep once after recovery; on a correct
    /// recovery it re-touches nothing.
    pub second_sync_pass: bool,
    /// Negative-control hook: deliberately skip the consumer rewrite on this
    /// node so tests can prove the sanity check / certificate catches an
    /// inconsistent recovery. Never set in normal operation.
    pub fault_skip_consumer: Option<NodeId>,
    /// Negative-control hook: corrupt merge coefficients (shape-preserving)
    /// so the numeric sanity check has something to catch.
    pub fault_corrupt_alphas: bool,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            epsilon: 1e-6,
            tau: 1e-3,
            t_min: 3,
            gamma_drop: 1e-6,
            gamma_keep: 1e-3,
            active_ratio_gate: None,
            sanity_check: true,
            sanity_tol: 1e-7,
            second_sync_pass: false,
            fault_skip_consumer: None,
            fault_corrupt_alphas: false,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<(), RecoveryError> {
        if self.epsilon <= 0.0 {
            return Err(RecoveryError::BadConfig("epsilon must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(RecoveryError::BadConfig("tau must be positive".into()));
        }
        if self.t_min == 0 {
            return Err(RecoveryError::BadConfig("t_min must be at least 1".into()));
        }
        if !(self.gamma_drop >= 0.0 && self.gamma_drop <= self.gamma_keep) {
            return Err(RecoveryError::BadConfig(
                "thresholds must satisfy 0 <= gamma_drop <= gamma_keep".into(),
            ));
        }
        if self.sanity_tol <= 0.0 {
            return Err(RecoveryError::BadConfig("sanity_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Per-edge, per-channel probe summaries and activity bits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeProbes {
    pub node: NodeId,
    pub capture: CaptureSite,
    pub width: usize,
    /// `summaries[channel][probe]`: spatial mean of the rectified channel.
    pub summaries: Vec<Vec<f64>>,
    /// `bits[channel][probe] == (summaries > 0)`.
    pub bits: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub probe_count: usize,
    pub edges: Vec<EdgeProbes>,
}

impl ProbeRecord {
    pub fn edge(&self, node: NodeId) -> Option<&EdgeProbes> {
        self.edges.iter().find(|e| e.node == node)
    }
}

/// Run every probe once and record per-channel summaries at each edge's
/// capture site (post-BN when a BatchNorm immediately follows, else the raw
/// producer output).
pub fn capture(
    g: &Graph,
    probes: &[Tensor],
    edges: &[ProducerEdge],
) -> Result<ProbeRecord, GraphError> {
    let taps: Vec<NodeId> = edges.iter().map(|e| e.capture.node()).collect();
    let mut per_edge: Vec<EdgeProbes> = edges
        .iter()
        .map(|e| EdgeProbes {
            node: e.node,
            capture: e.capture,
            width: e.width,
            summaries: vec![Vec::with_capacity(probes.len()); e.width],
            bits: vec![Vec::with_capacity(probes.len()); e.width],
        })
        .collect();
    for probe in probes {
        let (_, tapped) = g.forward_with_taps(probe, &taps)?;
        for (e, t) in per_edge.iter_mut().zip(&tapped) {
            let spatial = t.spatial().max(1);
            for ch in 0..e.width {
                let mut acc = 0.0;
                for &v in t.channel(ch) {
                    if v > 0.0 {
                        acc += v;
                    }
                }
                let u = acc / spatial as f64;
                e.summaries[ch].push(u);
                e.bits[ch].push(u > 0.0);
            }
        }
    }
    Ok(ProbeRecord {
        probe_count: probes.len(),
        edges: per_edge,
    })
}

/// Pack activity bits 8 per byte, probe `t` at bit `t % 8` of byte `t / 8`,
/// zero-padded.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (t, &b) in bits.iter().enumerate() {
        if b {
            out[t / 8] |= 1 << (t % 8);
        }
    }
    out
}

/// 64-bit FNV-1a over the packed signature bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A signature bucket: channels sharing one exact activity bit pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub signature: u64,
    pub channels: Vec<usize>,
    /// Every bit false: the channels never activated on the probe set.
    pub all_zero: bool,
}

fn buckets_with_hash(bits: &[Vec<bool>], hash: impl Fn(&[u8]) -> u64) -> Vec<Bucket> {
    let mut by_hash: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (ch, b) in bits.iter().enumerate() {
        by_hash.entry(hash(&pack_bits(b))).or_default().push(ch);
    }
    let mut out = Vec::new();
    for (sig, channels) in by_hash {
        // Hash collisions split: exact bit-vector equality decides bucket
        // membership, the hash is only the grouping key.
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for ch in channels {
            match groups
                .iter_mut()
                .find(|grp| bits[grp[0]] == bits[ch])
            {
                Some(grp) => grp.push(ch),
                None => groups.push(vec![ch]),
            }
        }
        for grp in groups {
            let all_zero = bits[grp[0]].iter().all(|&b| !b);
            out.push(Bucket {
                signature: sig,
                channels: grp,
                all_zero,
            });
        }
    }
    out.sort_by_key(|b| b.channels[0]);
    out
}

/// Coarse candidate grouping by hashed activity signature.
pub fn bucket_by_signature(edge: &EdgeProbes) -> Vec<Bucket> {
    buckets_with_hash(&edge.bits, fnv1a64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterDecision {
    Drop,
    Merge,
    /// Merged norm fell between the drop and keep thresholds; the cluster is
    /// reported but left untouched.
    Ambiguous,
}

impl ClusterDecision {
    pub fn name(&self) -> &'static str {
        match self {
            ClusterDecision::Drop => "drop",
            ClusterDecision::Merge => "merge",
            ClusterDecision::Ambiguous => "ambiguous",
        }
    }
}

/// A refined redundancy cluster on one producer edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyCluster {
    /// Sorted member channel indices.
    pub members: Vec<usize>,
    /// Representative: the lowest member index.
    pub rep: usize,
    /// Scale of each member relative to the representative (1 for the rep).
    pub alphas: Vec<f64>,
    pub zero_cluster: bool,
    pub decision: ClusterDecision,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Robust proportionality test between two channels: median ratio over
/// probes where the pivot is significant, accepted when the symmetric
/// relative error stays within `tau`.
fn proportional(
    u_i: &[f64],
    u_j: &[f64],
    cfg: &RecoveryConfig,
) -> Option<f64> {
    let valid: Vec<usize> = (0..u_i.len())
        .filter(|&t| u_i[t].abs() > cfg.epsilon)
        .collect();
    if valid.len() < cfg.t_min {
        return None;
    }
    let alpha = median(valid.iter().map(|&t| u_j[t] / u_i[t]).collect());
    if !alpha.is_finite() {
        return None;
    }
    for &t in &valid {
        let err = (u_j[t] - alpha * u_i[t]).abs()
            / u_j[t].abs().max((alpha * u_i[t]).abs()).max(cfg.epsilon);
        if err > cfg.tau {
            return None;
        }
    }
    Some(alpha)
}

/// Refine one signature bucket into proportionality clusters: connected
/// components of the accepted-pair graph with at least two members, plus the
/// zero-cluster of fully inactive channels. Channels outside the
/// active-ratio gate are excluded unless fully inactive. Decisions are
/// resolved later by [`decide_drop_or_merge`].
pub fn refine_proportional(
    edge: &EdgeProbes,
    bucket: &Bucket,
    cfg: &RecoveryConfig,
) -> Vec<RedundancyCluster> {
    if bucket.all_zero {
        return vec![RedundancyCluster {
            members: bucket.channels.clone(),
            rep: bucket.channels[0],
            alphas: vec![1.0; bucket.channels.len()],
            zero_cluster: true,
            decision: ClusterDecision::Ambiguous,
        }];
    }
    let gated: Vec<usize> = match cfg.active_ratio_gate {
        None => bucket.channels.clone(),
        Some((lo, hi)) => bucket
            .channels
            .iter()
            .copied()
            .filter(|&ch| {
                let active = edge.bits[ch].iter().filter(|&&b| b).count() as f64
                    / edge.bits[ch].len() as f64;
                active >= lo && active <= hi
            })
            .collect(),
    };
    if gated.len() < 2 {
        return Vec::new();
    }
    // Union-find over positions in `gated`.
    let mut parent: Vec<usize> = (0..gated.len()).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            parent[x] = find(parent, parent[x]);
        }
        parent[x]
    }
    for a in 0..gated.len() {
        for b in a + 1..gated.len() {
            if proportional(&edge.summaries[gated[a]], &edge.summaries[gated[b]], cfg).is_some() {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..gated.len() {
        let r = find(&mut parent, i);
        components.entry(r).or_default().push(gated[i]);
    }
    components
        .into_values()
        .filter(|members| members.len() >= 2)
        .filter_map(|members| {
            let rep = members[0];
            let mut alphas = Vec::with_capacity(members.len());
            for &j in &members {
                if j == rep {
                    alphas.push(1.0);
                } else {
                    // Scale is estimated directly against the representative;
                    // members that cannot be related to it are dropped from
                    // the cluster rather than guessed.
                    match proportional(&edge.summaries[rep], &edge.summaries[j], cfg) {
                        Some(a) => alphas.push(a),
                        None => return None,
                    }
                }
            }
            Some(RedundancyCluster {
                rep,
                alphas,
                members,
                zero_cluster: false,
                decision: ClusterDecision::Ambiguous,
            })
        })
        .collect()
}

/// Flattened consumer weight columns reading producer channel
/// `channel` (an index on the producer edge) through `path`.
fn consumer_column(w: &Tensor, path: &PathDescriptor, channel: usize) -> Vec<f64> {
    match w.rank() {
        4 => {
            let (c_out, c_in, ksz) = (w.shape[0], w.shape[1], w.shape[2] * w.shape[3]);
            let ch = path.slice_offset + channel;
            let mut col = Vec::with_capacity(c_out * ksz);
            for oc in 0..c_out {
                let base = (oc * c_in + ch) * ksz;
                col.extend_from_slice(&w.data[base..base + ksz]);
            }
            col
        }
        2 => {
            let (rows, n_in) = (w.shape[0], w.shape[1]);
            let l = path.lift_hw;
            let ch = path.slice_offset + channel;
            let mut col = Vec::with_capacity(rows * l);
            for r in 0..rows {
                let base = r * n_in + ch * l;
                col.extend_from_slice(&w.data[base..base + l]);
            }
            col
        }
        _ => unreachable!("consumers are conv or linear"),
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fan-out-aware drop/merge decision.
///
/// For every downstream consumer the cluster's merged column
/// `w* = sum_j alpha_j . W[:, j]` is formed; the cluster is dropped only if
/// the relative norm `||w*|| / ||W||_F` is at most `gamma_drop` for every
/// consumer, merged when it reaches `gamma_keep` somewhere, and flagged
/// ambiguous in between. Zero-clusters drop exactly those members whose own
/// producer weights or consumer columns are null.
pub fn decide_drop_or_merge(
    g: &Graph,
    edge: &ProducerEdge,
    mut cluster: RedundancyCluster,
    cfg: &RecoveryConfig,
) -> RedundancyCluster {
    if cluster.zero_cluster {
        let (pw, pb) = weight_bias(&g.node(edge.node).kind).expect("producer");
        let w_scale = norm2(&pw.data).max(1.0);
        let b_scale = norm2(&pb.data).max(1.0);
        let stride = pw.spatial();
        let droppable: Vec<usize> = cluster
            .members
            .iter()
            .copied()
            .filter(|&ch| {
                let row_norm = norm2(&pw.data[ch * stride..(ch + 1) * stride]);
                let weights_null =
                    row_norm <= cfg.gamma_drop * w_scale && pb.data[ch].abs() <= cfg.gamma_drop * b_scale;
                let columns_null = !edge.consumers.is_empty()
                    && edge.consumers.iter().all(|c| {
                        let (w, _) = weight_bias(&g.node(c.node).kind).expect("consumer");
                        let col = consumer_column(w, &c.path, ch);
                        norm2(&col) <= cfg.gamma_drop * norm2(&w.data).max(1.0)
                    });
                weights_null || columns_null
            })
            .collect();
        cluster.alphas = vec![1.0; droppable.len()];
        cluster.members = droppable;
        cluster.rep = cluster.members.first().copied().unwrap_or(0);
        cluster.decision = ClusterDecision::Drop;
        return cluster;
    }

    let mut worst_rel = 0.0f64;
    for c in &edge.consumers {
        let (w, _) = weight_bias(&g.node(c.node).kind).expect("consumer");
        let mut merged = vec![0.0; consumer_column(w, &c.path, cluster.members[0]).len()];
        for (&ch, &alpha) in cluster.members.iter().zip(&cluster.alphas) {
            for (m, v) in merged.iter_mut().zip(consumer_column(w, &c.path, ch)) {
                *m += alpha * v;
            }
        }
        let rel = norm2(&merged) / norm2(&w.data).max(1e-300);
        worst_rel = worst_rel.max(rel);
    }
    cluster.decision = if worst_rel <= cfg.gamma_drop {
        ClusterDecision::Drop
    } else if worst_rel >= cfg.gamma_keep {
        ClusterDecision::Merge
    } else {
        ClusterDecision::Ambiguous
    };
    cluster
}

/// Synthesize the edge transform `y_attacked = M_e . y_compact` from the
/// decided clusters, together with the kept channel list in index order.
/// Kept channels map to themselves with coefficient 1, merged members map
/// onto their representative's column with their alpha, dropped channels
/// have empty rows.
pub fn synthesize_transform(
    width: usize,
    clusters: &[RedundancyCluster],
) -> (ChannelTransform, Vec<usize>) {
    let mut removed = vec![false; width];
    for cl in clusters {
        match cl.decision {
            ClusterDecision::Drop => {
                for &m in &cl.members {
                    removed[m] = true;
                }
            }
            ClusterDecision::Merge => {
                for &m in &cl.members {
                    if m != cl.rep {
                        removed[m] = true;
                    }
                }
            }
            ClusterDecision::Ambiguous => {}
        }
    }
    let kept: Vec<usize> = (0..width).filter(|&i| !removed[i]).collect();
    let col_of: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(c, &i)| (i, c)).collect();
    let mut entries: Vec<(usize, usize, f64)> = kept
        .iter()
        .enumerate()
        .map(|(c, &i)| (i, c, 1.0))
        .collect();
    for cl in clusters {
        if cl.decision == ClusterDecision::Merge {
            let rep_col = col_of[&cl.rep];
            for (&m, &alpha) in cl.members.iter().zip(&cl.alphas) {
                if m != cl.rep {
                    entries.push((m, rep_col, alpha));
                }
            }
        }
    }
    let m = ChannelTransform::new(width, kept.len(), entries).expect("disjoint clusters");
    (m, kept)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Sweep in which this cluster was applied; member indices refer to the
    /// edge's channel layout at the start of that sweep.
    pub sweep: usize,
    pub members: Vec<usize>,
    pub rep: usize,
    pub alphas: Vec<f64>,
    pub zero_cluster: bool,
    pub decision: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeRecoveryReport {
    pub node: usize,
    pub width_before: usize,
    pub width_after: usize,
    pub capture_site: String,
    pub clusters: Vec<ClusterReport>,
    /// Clusters the merge-group intersection discarded on this edge.
    pub intersection_shrunk: bool,
    pub transform: ChannelTransform,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RecoveryTimings {
    pub probe_ns: u64,
    pub cluster_ns: u64,
    pub rewrite_ns: u64,
    pub total_ns: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub probes: usize,
    pub probe_seed: u64,
    pub edges: Vec<EdgeRecoveryReport>,
    pub params_before: usize,
    pub params_after: usize,
    pub pruned_params: usize,
    pub layers_changed: usize,
    pub layers_total: usize,
    pub sanity_checked: bool,
    pub sanity_delta: f64,
    pub second_sync_retouched: usize,
    pub timings_ns: RecoveryTimings,
}

impl RecoveryReport {
    pub fn strip_timings(&mut self) {
        self.timings_ns = RecoveryTimings::default();
    }
}

/// Clusters for one unit: per-member cluster lists intersected so the whole
/// merge group shares one compaction decision. A cluster survives only if
/// every member produced the same member set with the same decision; alphas
/// are taken from the first member.
fn intersect_unit_clusters(
    per_member: &[Vec<RedundancyCluster>],
) -> (Vec<RedundancyCluster>, bool) {
    if per_member.len() == 1 {
        return (per_member[0].clone(), false);
    }
    let mut kept = Vec::new();
    let mut shrunk = false;
    for cl in &per_member[0] {
        let everywhere = per_member[1..].iter().all(|others| {
            others
                .iter()
                .any(|o| o.members == cl.members && o.decision == cl.decision)
        });
        if everywhere {
            kept.push(cl.clone());
        } else {
            shrunk = true;
        }
    }
    let total: usize = per_member.iter().map(|v| v.len()).sum();
    if total != kept.len() * per_member.len() {
        shrunk = true;
    }
    (kept, shrunk)
}

/// Hard cap on compaction sweeps; each acting sweep strictly shrinks some
/// edge, so this is never reached in practice.
const MAX_SWEEPS: usize = 64;

#[derive(Clone, Copy, PartialEq)]
enum SweepMode {
    /// Apply only Drop decisions.
    DropOnly,
    /// Apply Merge decisions (drops are exhausted by then).
    MergeToo,
}

struct SweepState {
    edge_clusters: BTreeMap<usize, Vec<ClusterReport>>,
    edge_transform: BTreeMap<usize, ChannelTransform>,
    edge_shrunk: BTreeMap<usize, bool>,
    cluster_ns: u64,
    rewrite_ns: u64,
    probe_ns: u64,
}

/// One compaction sweep over all units in reverse topological order.
///
/// Composed attacks nest redundancy: a clique row freshly sampled at a later
/// attack step reads earlier dummy channels with arbitrary weights and
/// masks their cancellation. Drop-only sweeps peel this nesting from the
/// outside in (only clique rows can mask, and an unmasked clique always
/// drops), so iterating to a fixpoint before any merge removes every
/// droppable structure; merges (always sound on proportional activations)
/// run once at the end. Returns the number of units that acted.
fn sweep_once(
    out: &mut Graph,
    original: &Graph,
    probes: &[Tensor],
    rcfg: &RecoveryConfig,
    mode: SweepMode,
    sweep_idx: usize,
    state: &mut SweepState,
) -> Result<usize, RecoveryError> {
    let tp = Instant::now();
    let (producers, units) = rewritable_producers(out);
    let record = capture(out, probes, &producers)?;
    state.probe_ns += tp.elapsed().as_nanos() as u64;

    let topo_pos: BTreeMap<NodeId, usize> = out
        .topo_order()
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, i))
        .collect();
    let mut unit_order: Vec<&crate::graph::MergeGroup> = units.iter().collect();
    unit_order.sort_by_key(|u| std::cmp::Reverse(topo_pos[&u.producers[0]]));

    let mut acted_units = 0usize;
    for unit in &unit_order {
        let tc = Instant::now();
        let mut per_member: Vec<Vec<RedundancyCluster>> = Vec::new();
        for id in &unit.producers {
            let probes_for_edge = record.edge(*id).expect("captured");
            // Decisions read the *current* consumer weights; this unit's
            // own slices are still untouched within the sweep.
            let current = crate::graph::eligible_producers(out);
            let cur_edge = current.iter().find(|p| p.node == *id).expect("member");
            let mut clusters = Vec::new();
            for bucket in bucket_by_signature(probes_for_edge) {
                for cl in refine_proportional(probes_for_edge, &bucket, rcfg) {
                    let decided = decide_drop_or_merge(out, cur_edge, cl, rcfg);
                    if !decided.members.is_empty() {
                        clusters.push(decided);
                    }
                }
            }
            per_member.push(clusters);
        }
        let (mut clusters, shrunk) = intersect_unit_clusters(&per_member);
        if rcfg.fault_corrupt_alphas && mode == SweepMode::MergeToo {
            for cl in clusters.iter_mut() {
                if cl.decision == ClusterDecision::Merge {
                    for (m, a) in cl.members.clone().iter().zip(cl.alphas.iter_mut()) {
                        if *m != cl.rep {
                            *a *= 0.5;
                        }
                    }
                }
            }
        }
        state.cluster_ns += tc.elapsed().as_nanos() as u64;
        if shrunk {
            for id in &unit.producers {
                state.edge_shrunk.insert(id.0, true);
            }
        }

        let acting: Vec<RedundancyCluster> = clusters
            .iter()
            .filter(|c| match mode {
                SweepMode::DropOnly => c.decision == ClusterDecision::Drop,
                SweepMode::MergeToo => c.decision != ClusterDecision::Ambiguous,
            })
            .cloned()
            .collect();
        // Ambiguous clusters (and merge candidates during drop sweeps) are
        // recorded once, in the final sweep, to keep the report free of
        // per-sweep duplicates.
        let recordable: Vec<&RedundancyCluster> = clusters
            .iter()
            .filter(|c| match mode {
                SweepMode::DropOnly => c.decision == ClusterDecision::Drop,
                SweepMode::MergeToo => true,
            })
            .collect();
        for id in &unit.producers {
            let entry = state.edge_clusters.entry(id.0).or_default();
            for c in &recordable {
                entry.push(ClusterReport {
                    sweep: sweep_idx,
                    members: c.members.clone(),
                    rep: c.rep,
                    alphas: c.alphas.clone(),
                    zero_cluster: c.zero_cluster,
                    decision: c.decision.name().to_string(),
                });
            }
        }
        if acting.is_empty() {
            continue;
        }

        let tr = Instant::now();
        let current = crate::graph::eligible_producers(out);
        let members: Vec<&ProducerEdge> = unit
            .producers
            .iter()
            .map(|id| current.iter().find(|p| p.node == *id).expect("member"))
            .collect();
        let width = members[0].width;
        let (m_e, kept) = synthesize_transform(width, &acting);
        if m_e.is_identity() {
            continue;
        }
        acted_units += 1;
        let edits: Vec<ProducerEdit> = members
            .iter()
            .map(|edge| {
                let (w, b) = weight_bias(&out.node(edge.node).kind).expect("producer");
                ProducerEdit {
                    node: edge.node,
                    weight: gather_rows(w, &kept),
                    bias: gather_rows(b, &kept),
                    bn: edge.bn_next.map(|bn| {
                        let (gamma, beta, mean, var) = bn_params(&out.node(bn).kind).expect("bn");
                        BnEdit {
                            gamma: gather_rows(gamma, &kept),
                            beta: gather_rows(beta, &kept),
                            running_mean: gather_rows(mean, &kept),
                            running_var: gather_rows(var, &kept),
                        }
                    }),
                }
            })
            .collect();
        // The fault hook drops one consumer from the rewrite list; only
        // negative-control tests set it.
        let faulted: Vec<ProducerEdge> = members
            .iter()
            .map(|e| {
                let mut e2 = (*e).clone();
                if let Some(skip) = rcfg.fault_skip_consumer {
                    e2.consumers.retain(|c| c.node != skip);
                }
                e2
            })
            .collect();
        let faulted_refs: Vec<&ProducerEdge> = faulted.iter().collect();
        apply_unit_transform(out, &faulted_refs, edits, &m_e)?;

        for id in &unit.producers {
            let composed = match state.edge_transform.get(&id.0) {
                Some(prev) => prev.compose(&m_e).expect("conformable sweep transforms"),
                None => m_e.clone(),
            };
            state.edge_transform.insert(id.0, composed);
        }
        state.rewrite_ns += tr.elapsed().as_nanos() as u64;
    }
    let _ = original;
    Ok(acted_units)
}

/// End-to-end recovery. Returns the recovered graph and a report; the input
/// graph is left untouched so callers keep the original alongside any error.
pub fn recover(
    g_attacked: &Graph,
    rcfg: &RecoveryConfig,
    pcfg: &ProbeConfig,
) -> Result<(Graph, RecoveryReport), RecoveryError> {
    rcfg.validate()?;
    if pcfg.count == 0 {
        return Err(RecoveryError::BadConfig("probe count must be at least 1".into()));
    }
    let total_t = Instant::now();
    let probes = make_probes(pcfg, g_attacked.input_shape());

    let mut out = g_attacked.clone();
    let mut state = SweepState {
        edge_clusters: BTreeMap::new(),
        edge_transform: BTreeMap::new(),
        edge_shrunk: BTreeMap::new(),
        cluster_ns: 0,
        rewrite_ns: 0,
        probe_ns: 0,
    };

    let mut sweep_idx = 0usize;
    loop {
        sweep_idx += 1;
        let acted = sweep_once(
            &mut out,
            g_attacked,
            &probes,
            rcfg,
            SweepMode::DropOnly,
            sweep_idx,
            &mut state,
        )?;
        if acted == 0 || sweep_idx >= MAX_SWEEPS {
            break;
        }
    }
    sweep_idx += 1;
    sweep_once(
        &mut out,
        g_attacked,
        &probes,
        rcfg,
        SweepMode::MergeToo,
        sweep_idx,
        &mut state,
    )?;

    // Optional second synchronization pass: a full extra sweep that should
    // re-touch nothing on a complete recovery.
    let mut second_sync_retouched = 0usize;
    if rcfg.second_sync_pass {
        sweep_idx += 1;
        second_sync_retouched = sweep_once(
            &mut out,
            g_attacked,
            &probes,
            rcfg,
            SweepMode::MergeToo,
            sweep_idx,
            &mut state,
        )?;
    }

    let mut sanity_delta = 0.0;
    if rcfg.sanity_check {
        sanity_delta = max_abs_output_delta(g_attacked, &out, &probes)?;
        if sanity_delta > rcfg.sanity_tol {
            return Err(RecoveryError::SanityCheckFailed {
                delta: sanity_delta,
                tol: rcfg.sanity_tol,
            });
        }
    }

    let params_before = g_attacked.param_count();
    let params_after = out.param_count();
    let widths_before = g_attacked.layer_widths();
    let widths_after = out.layer_widths();
    let layers_changed = widths_before
        .iter()
        .zip(&widths_after)
        .filter(|((_, a), (_, b))| a != b)
        .count();

    let (producers0, units0) = rewritable_producers(g_attacked);
    let mut edge_reports: Vec<EdgeRecoveryReport> = units0
        .iter()
        .flat_map(|u| u.producers.iter())
        .map(|id| {
            let p0 = producers0.iter().find(|p| p.node == *id).expect("member");
            let before = g_attacked.node(*id).kind.out_channels().expect("producer");
            let after = out.node(*id).kind.out_channels().expect("producer");
            EdgeRecoveryReport {
                node: id.0,
                width_before: before,
                width_after: after,
                capture_site: match p0.capture {
                    CaptureSite::PostBn(_) => "post_bn".into(),
                    CaptureSite::ProducerOutput(_) => "producer_output".into(),
                },
                clusters: state.edge_clusters.get(&id.0).cloned().unwrap_or_default(),
                intersection_shrunk: state.edge_shrunk.get(&id.0).copied().unwrap_or(false),
                transform: state
                    .edge_transform
                    .get(&id.0)
                    .cloned()
                    .unwrap_or_else(|| ChannelTransform::identity(before)),
            }
        })
        .collect();

    edge_reports.sort_by_key(|e| e.node);
    let report = RecoveryReport {
        probes: pcfg.count,
        probe_seed: pcfg.seed,
        edges: edge_reports,
        params_before,
        params_after,
        pruned_params: params_before.saturating_sub(params_after),
        layers_changed,
        layers_total: widths_before.len(),
        sanity_checked: rcfg.sanity_check,
        sanity_delta,
        second_sync_retouched,
        timings_ns: RecoveryTimings {
            probe_ns: state.probe_ns,
            cluster_ns: state.cluster_ns,
            rewrite_ns: state.rewrite_ns,
            total_ns: total_t.elapsed().as_nanos() as u64,
        },
    };
    Ok((out, report))
}
