//! The channel-transform algebra.
//!
//! A [`ChannelTransform`] is a sparse `c_before x c_after` matrix `M` with the
//! "before-from-after" convention `y_before = M . y_after`: the transformed
//! producer emits `y_after`, and `M` reconstructs the activation every
//! downstream consumer expects. Rewriting each linear consumer as
//! `W <- W . M` therefore preserves the network function, with `M` lifted by
//! `M (x) I_HW` across a channel-major flatten and applied as one block of a
//! block-diagonal through channel concatenation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("transform: dimension mismatch: {context} (expected {expected}, got {got})")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("transform: duplicate entry at ({row}, {col})")]
    DuplicateEntry { row: usize, col: usize },
    #[error("transform: entry ({row}, {col}) out of bounds for {c_before}x{c_after}")]
    EntryOutOfBounds {
        row: usize,
        col: usize,
        c_before: usize,
        c_after: usize,
    },
    #[error("transform: non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("transform: {dropped} entries cross group boundaries ({groups} groups)")]
    CrossGroupMixing { dropped: usize, groups: usize },
    #[error("transform: consumer slice mismatch: {context} (expected {expected}, got {got})")]
    SliceMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("transform: grouped consumer only accepts a square diagonal transform")]
    GroupedNonDiagonal,
}

/// Sparse channel-basis rewrite `y_before = M . y_after`.
///
/// Entries are kept sorted by `(row, col)` with no duplicates, so structural
/// equality after canonicalization is plain `==` and identity detection is
/// cheap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTransform {
    pub c_before: usize,
    pub c_after: usize,
    /// Sorted `(row, col, value)` triplets, `row < c_before`, `col < c_after`.
    pub entries: Vec<(usize, usize, f64)>,
}

impl ChannelTransform {
    pub fn new(
        c_before: usize,
        c_after: usize,
        mut entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self, TransformError> {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(TransformError::DuplicateEntry {
                    row: w[0].0,
                    col: w[0].1,
                });
            }
        }
        for &(r, c, v) in &entries {
            if r >= c_before || c >= c_after {
                return Err(TransformError::EntryOutOfBounds {
                    row: r,
                    col: c,
                    c_before,
                    c_after,
                });
            }
            if !v.is_finite() {
                return Err(TransformError::NonFinite { row: r, col: c });
            }
        }
        Ok(ChannelTransform {
            c_before,
            c_after,
            entries,
        })
    }

    pub fn identity(c: usize) -> Self {
        ChannelTransform {
            c_before: c,
            c_after: c,
            entries: (0..c).map(|i| (i, i, 1.0)).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.c_before == self.c_after
            && self.entries.len() == self.c_before
            && self
                .entries
                .iter()
                .enumerate()
                .all(|(i, &(r, c, v))| r == i && c == i && v == 1.0)
    }

    /// Permutation transform: after-channel `i` carries before-channel
    /// `src_of[i]`.
    pub fn permutation(src_of: &[usize]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = src_of
            .iter()
            .enumerate()
            .map(|(col, &row)| (row, col, 1.0))
            .collect();
        entries.sort_by_key(|&(r, c, _)| (r, c));
        ChannelTransform {
            c_before: src_of.len(),
            c_after: src_of.len(),
            entries,
        }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        ChannelTransform {
            c_before: values.len(),
            c_after: values.len(),
            entries: values.iter().enumerate().map(|(i, &v)| (i, i, v)).collect(),
        }
    }

    /// `y_before[i] = sum_j M[i,j] . y_after[j]`, applied identically at each
    /// spatial position.
    pub fn apply_to_activation(&self, y_after: &Tensor) -> Result<Tensor, TransformError> {
        if y_after.channels() != self.c_after {
            return Err(TransformError::DimMismatch {
                context: "activation channels",
                expected: self.c_after,
                got: y_after.channels(),
            });
        }
        let spatial = y_after.spatial();
        let mut shape = y_after.shape.clone();
        shape[0] = self.c_before;
        let mut out = Tensor::zeros(shape);
        for &(r, c, v) in &self.entries {
            for s in 0..spatial {
                out.data[r * spatial + s] += v * y_after.data[c * spatial + s];
            }
        }
        Ok(out)
    }

    /// Sparse product: `(M1 . M2)` with `y_before = M1 . M2 . y_after`.
    pub fn compose(&self, other: &ChannelTransform) -> Result<ChannelTransform, TransformError> {
        if self.c_after != other.c_before {
            return Err(TransformError::DimMismatch {
                context: "compose inner dim",
                expected: self.c_after,
                got: other.c_before,
            });
        }
        use std::collections::BTreeMap;
        // Group the right factor's entries by row for the sparse product.
        let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); other.c_before];
        for &(r, c, v) in &other.entries {
            by_row[r].push((c, v));
        }
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(r, k, v1) in &self.entries {
            for &(c, v2) in &by_row[k] {
                *acc.entry((r, c)).or_insert(0.0) += v1 * v2;
            }
        }
        let entries = acc.into_iter().map(|((r, c), v)| (r, c, v)).collect();
        ChannelTransform::new(self.c_before, other.c_after, entries)
    }

    /// Direct sum of blocks, offsets in argument order (matching cat order).
    pub fn block_diag(blocks: &[ChannelTransform]) -> ChannelTransform {
        assert!(!blocks.is_empty(), "block_diag requires at least one block");
        let c_before = blocks.iter().map(|b| b.c_before).sum();
        let c_after = blocks.iter().map(|b| b.c_after).sum();
        let mut entries = Vec::new();
        let (mut ro, mut co) = (0, 0);
        for b in blocks {
            for &(r, c, v) in &b.entries {
                entries.push((ro + r, co + c, v));
            }
            ro += b.c_before;
            co += b.c_after;
        }
        ChannelTransform {
            c_before,
            c_after,
            entries,
        }
    }

    /// Kronecker lift `M (x) I_lift` for channel-major flattened buses.
    pub fn kron_lift(&self, lift: usize) -> ChannelTransform {
        let mut entries = Vec::with_capacity(self.entries.len() * lift);
        for &(r, c, v) in &self.entries {
            for l in 0..lift {
                entries.push((r * lift + l, c * lift + l, v));
            }
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        ChannelTransform {
            c_before: self.c_before * lift,
            c_after: self.c_after * lift,
            entries,
        }
    }

    /// Restrict to the block-diagonal structure of a grouped consumer.
    ///
    /// Rejects (rather than silently zeroing) any transform whose nonzeros
    /// cross group boundaries; the producer must then be treated as a barrier
    /// for this consumer.
    pub fn group_restrict(&self, groups: usize) -> Result<ChannelTransform, TransformError> {
        if groups == 0 || self.c_before % groups != 0 || self.c_after % groups != 0 {
            return Err(TransformError::DimMismatch {
                context: "group_restrict divisibility",
                expected: groups,
                got: self.c_before,
            });
        }
        let (br, bc) = (self.c_before / groups, self.c_after / groups);
        let dropped = self
            .entries
            .iter()
            .filter(|&&(r, c, v)| v != 0.0 && r / br != c / bc)
            .count();
        if dropped > 0 {
            return Err(TransformError::CrossGroupMixing { dropped, groups });
        }
        Ok(self.clone())
    }

    pub fn is_square_diagonal(&self) -> bool {
        self.c_before == self.c_after && self.entries.iter().all(|&(r, c, _)| r == c)
    }
}

/// Camouflage parameters: a channel permutation and strictly positive
/// per-channel scales. After-channel `i` carries before-channel
/// `perm[i]` scaled by `scales[i]`, so the induced consumer-side rewrite is
/// `M = P^T . D^-1` with entries `(perm[i], i, 1/scales[i])`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermScale {
    pub perm: Vec<usize>,
    pub scales: Vec<f64>,
}

impl PermScale {
    pub fn identity(c: usize) -> Self {
        PermScale {
            perm: (0..c).collect(),
            scales: vec![1.0; c],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
            && self.scales.iter().all(|&s| s == 1.0)
    }

    pub fn transform(&self) -> ChannelTransform {
        let mut entries: Vec<(usize, usize, f64)> = self
            .perm
            .iter()
            .zip(&self.scales)
            .enumerate()
            .map(|(col, (&row, &s))| (row, col, 1.0 / s))
            .collect();
        entries.sort_by_key(|&(r, c, _)| (r, c));
        ChannelTransform {
            c_before: self.perm.len(),
            c_after: self.perm.len(),
            entries,
        }
    }
}

/// How a consumer's weight tensor reads the producer's channel block.
///
/// `slice_offset`/`slice_len` locate the producer within the consumer's input
/// channel bus (nonzero offsets arise from cat), `lift_hw` is the spatial
/// factor captured at graph build time when a flatten sits on the path, and
/// `bus_channels` is the full input bus width the consumer currently reads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathDescriptor {
    pub slice_offset: usize,
    pub slice_len: usize,
    pub lift_hw: usize,
    pub bus_channels: usize,
}

impl PathDescriptor {
    pub fn direct(channels: usize) -> Self {
        PathDescriptor {
            slice_offset: 0,
            slice_len: channels,
            lift_hw: 1,
            bus_channels: channels,
        }
    }
}

/// Rewrite a consumer weight for a producer-side channel rewrite `M`.
///
/// * Conv2d weights (`[C_out, C_in/groups, kh, kw]`): the kernel is reshaped
///   over the input-channel axis and right-multiplied by `M` restricted to
///   the path's slice. Grouped/depthwise consumers accept only square
///   diagonal transforms.
/// * Linear weights (`[M_out, N_in]`): right-multiplied by the Kronecker lift
///   `M (x) I_HW` on the slice columns.
///
/// Output channels, bias and the columns of other slices are untouched.
pub fn rewrite_consumer(
    weight: &Tensor,
    m: &ChannelTransform,
    path: &PathDescriptor,
    consumer_groups: usize,
) -> Result<Tensor, TransformError> {
    if path.slice_len != m.c_before {
        return Err(TransformError::SliceMismatch {
            context: "slice length vs transform rows",
            expected: path.slice_len,
            got: m.c_before,
        });
    }
    if path.slice_offset + path.slice_len > path.bus_channels {
        return Err(TransformError::SliceMismatch {
            context: "slice extent vs bus",
            expected: path.bus_channels,
            got: path.slice_offset + path.slice_len,
        });
    }
    match weight.rank() {
        4 => rewrite_conv(weight, m, path, consumer_groups),
        2 => rewrite_linear(weight, m, path),
        _ => Err(TransformError::DimMismatch {
            context: "consumer weight rank",
            expected: 2,
            got: weight.rank(),
        }),
    }
}

fn rewrite_conv(
    weight: &Tensor,
    m: &ChannelTransform,
    path: &PathDescriptor,
    groups: usize,
) -> Result<Tensor, TransformError> {
    let (c_out, c_in_g, kh, kw) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    if groups > 1 {
        // Grouped and depthwise kernels do not linearly mix channels across
        // groups; only square per-channel scaling may pass through here.
        // Permutations are handled upstream by explicit reindexing.
        let restricted = m.group_restrict(groups).map_err(|e| match e {
            TransformError::CrossGroupMixing { .. } => TransformError::GroupedNonDiagonal,
            other => other,
        })?;
        if !restricted.is_square_diagonal() {
            return Err(TransformError::GroupedNonDiagonal);
        }
        if path.slice_offset != 0 || path.slice_len != groups * c_in_g {
            return Err(TransformError::SliceMismatch {
                context: "grouped consumer slice must span the bus",
                expected: groups * c_in_g,
                got: path.slice_len,
            });
        }
        let mut diag = vec![0.0; m.c_before];
        for &(r, _, v) in &m.entries {
            diag[r] = v;
        }
        let mut out = weight.clone();
        for oc in 0..c_out {
            for ic in 0..c_in_g {
                // Depthwise (groups == c_in) reads channel oc; general grouped
                // reads channel (group base + ic).
                let bus_ch = (oc / (c_out / groups)) * c_in_g + ic;
                let scale = diag[bus_ch];
                for t in 0..kh * kw {
                    out.data[(oc * c_in_g + ic) * kh * kw + t] *= scale;
                }
            }
        }
        return Ok(out);
    }

    let c_in = c_in_g;
    if path.bus_channels != c_in {
        return Err(TransformError::SliceMismatch {
            context: "conv bus width",
            expected: c_in,
            got: path.bus_channels,
        });
    }
    let new_c_in = c_in - m.c_before + m.c_after;
    let mut out = Tensor::zeros(vec![c_out, new_c_in, kh, kw]);
    let ksz = kh * kw;
    let (off, len) = (path.slice_offset, path.slice_len);
    for oc in 0..c_out {
        // Columns before the slice keep their positions; columns after it
        // shift by the width delta.
        for ic in 0..off {
            let src = (oc * c_in + ic) * ksz;
            let dst = (oc * new_c_in + ic) * ksz;
            out.data[dst..dst + ksz].copy_from_slice(&weight.data[src..src + ksz]);
        }
        for ic in off + len..c_in {
            let src = (oc * c_in + ic) * ksz;
            let dst = (oc * new_c_in + (ic - len + m.c_after)) * ksz;
            out.data[dst..dst + ksz].copy_from_slice(&weight.data[src..src + ksz]);
        }
        for &(r, c, v) in &m.entries {
            let src = (oc * c_in + off + r) * ksz;
            let dst = (oc * new_c_in + off + c) * ksz;
            for t in 0..ksz {
                out.data[dst + t] += v * weight.data[src + t];
            }
        }
    }
    Ok(out)
}

fn rewrite_linear(
    weight: &Tensor,
    m: &ChannelTransform,
    path: &PathDescriptor,
) -> Result<Tensor, TransformError> {
    let (rows, n_in) = (weight.shape[0], weight.shape[1]);
    let lift = path.lift_hw;
    if path.bus_channels * lift != n_in {
        return Err(TransformError::SliceMismatch {
            context: "linear bus width (lifted)",
            expected: n_in,
            got: path.bus_channels * lift,
        });
    }
    let new_bus = path.bus_channels - m.c_before + m.c_after;
    let new_n = new_bus * lift;
    let mut out = Tensor::zeros(vec![rows, new_n]);
    let (off, len) = (path.slice_offset, path.slice_len);
    for row in 0..rows {
        for ch in 0..off {
            for l in 0..lift {
                out.data[row * new_n + ch * lift + l] = weight.data[row * n_in + ch * lift + l];
            }
        }
        for ch in off + len..path.bus_channels {
            let new_ch = ch - len + m.c_after;
            for l in 0..lift {
                out.data[row * new_n + new_ch * lift + l] =
                    weight.data[row * n_in + ch * lift + l];
            }
        }
        for &(r, c, v) in &m.entries {
            for l in 0..lift {
                out.data[row * new_n + (off + c) * lift + l] +=
                    v * weight.data[row * n_in + (off + r) * lift + l];
            }
        }
    }
    Ok(out)
}
