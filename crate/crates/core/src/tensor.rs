//! Dense tensors and the forward semantics of every operator in the IR.
//!
//! All arithmetic is 64-bit floating point. Accumulations run in natural
//! loop order (innermost index fastest, documented per operator below), so
//! repeated calls with identical inputs produce bit-identical outputs.
//! There is no batch dimension; a forward pass consumes one sample.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank-{expected} input, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("batchnorm: running variance must be nonnegative (channel {channel}: {value})")]
    NegativeVariance { channel: usize, value: f64 },
    #[error("{op}: kernel {kernel}x{kernel2} does not fit padded input {h}x{w}")]
    KernelTooLarge {
        op: &'static str,
        kernel: usize,
        kernel2: usize,
        h: usize,
        w: usize,
    },
    #[error("{op}: channel count {channels} not divisible by groups {groups}")]
    BadGrouping {
        op: &'static str,
        channels: usize,
        groups: usize,
    },
    #[error("tensor: shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

/// Dense N-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of channels: first dimension for rank >= 1 tensors.
    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Spatial element count per channel (product of the trailing dims).
    pub fn spatial(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Immutable view of channel `c` as a flat slice of spatial values.
    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.spatial();
        &self.data[c * s..(c + 1) * s]
    }
}

fn expect_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<(), TensorError> {
    if t.rank() != rank {
        return Err(TensorError::RankMismatch {
            op,
            expected: rank,
            got: t.shape.clone(),
        });
    }
    Ok(())
}

/// 2-D cross-correlation with groups, stride and zero padding.
///
/// `input` is `[C_in, H, W]`, `weight` is `[C_out, C_in/groups, kh, kw]`,
/// `bias` is `[C_out]`. Accumulation order per output element: input channel
/// (within the group), then kernel row, then kernel column.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    groups: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    expect_rank(input, 3, "conv2d")?;
    expect_rank(weight, 4, "conv2d")?;
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, c_in_g, kh, kw) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    if groups == 0 || c_in % groups != 0 {
        return Err(TensorError::BadGrouping {
            op: "conv2d",
            channels: c_in,
            groups,
        });
    }
    if c_out % groups != 0 {
        return Err(TensorError::BadGrouping {
            op: "conv2d",
            channels: c_out,
            groups,
        });
    }
    if c_in_g != c_in / groups {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            dim: "weight in-channels",
            expected: c_in / groups,
            got: c_in_g,
        });
    }
    if bias.len() != c_out {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            dim: "bias",
            expected: c_out,
            got: bias.len(),
        });
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(TensorError::KernelTooLarge {
            op: "conv2d",
            kernel: kh,
            kernel2: kw,
            h: h + 2 * padding,
            w: w + 2 * padding,
        });
    }
    debug_assert!(stride > 0);
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;

    let mut out = Tensor::zeros(vec![c_out, h_out, w_out]);
    let out_per_group = c_out / groups;
    for oc in 0..c_out {
        let g = oc / out_per_group;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias.data[oc];
                for ic in 0..c_in_g {
                    let in_c = g * c_in_g + ic;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let iv = input.data[(in_c * h + iy as usize) * w + ix as usize];
                            let wv = weight.data[((oc * c_in_g + ic) * kh + ky) * kw + kx];
                            acc += iv * wv;
                        }
                    }
                }
                out.data[(oc * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// `z = W.y + bias` with `weight` as `[M, N]` and `input` as `[N]`.
/// Accumulation runs over the input index in increasing order.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank(input, 1, "linear")?;
    expect_rank(weight, 2, "linear")?;
    let (m, n) = (weight.shape[0], weight.shape[1]);
    if input.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            dim: "input",
            expected: n,
            got: input.len(),
        });
    }
    if bias.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            dim: "bias",
            expected: m,
            got: bias.len(),
        });
    }
    let mut out = Tensor::zeros(vec![m]);
    for i in 0..m {
        let mut acc = bias.data[i];
        let row = &weight.data[i * n..(i + 1) * n];
        for (j, wv) in row.iter().enumerate() {
            acc += wv * input.data[j];
        }
        out.data[i] = acc;
    }
    Ok(out)
}

/// Eval-mode batch normalization over the channel axis using running stats:
/// `(x - mean_c) / sqrt(var_c + eps) * gamma_c + beta_c`.
pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Tensor, TensorError> {
    let c = input.channels();
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                dim: match name {
                    "gamma" => "gamma",
                    "beta" => "beta",
                    "running_mean" => "running_mean",
                    _ => "running_var",
                },
                expected: c,
                got: t.len(),
            });
        }
    }
    debug_assert!(eps > 0.0);
    for (i, &v) in running_var.data.iter().enumerate() {
        if v < 0.0 {
            return Err(TensorError::NegativeVariance {
                channel: i,
                value: v,
            });
        }
    }
    let spatial = input.spatial();
    let mut out = input.clone();
    for ch in 0..c {
        let inv = 1.0 / (running_var.data[ch] + eps).sqrt();
        let (g, b, m) = (gamma.data[ch], beta.data[ch], running_mean.data[ch]);
        for s in 0..spatial {
            let idx = ch * spatial + s;
            out.data[idx] = (input.data[idx] - m) * inv * g + b;
        }
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            dim: "operand",
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(&b.data) {
        *o += v;
    }
    Ok(out)
}

/// Concatenate along the channel axis in argument order. All operands must
/// share their trailing (spatial) dims.
pub fn cat_channels(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    assert!(!parts.is_empty(), "cat requires at least one operand");
    let tail = &parts[0].shape[1..];
    for p in parts {
        if &p.shape[1..] != tail {
            return Err(TensorError::ShapeMismatch {
                op: "cat",
                dim: "spatial",
                expected: parts[0].spatial(),
                got: p.spatial(),
            });
        }
    }
    let channels: usize = parts.iter().map(|p| p.channels()).sum();
    let mut shape = vec![channels];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(channels * parts[0].spatial());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor { shape, data })
}

/// Mean over the spatial dims per channel: `[C, H, W] -> [C]`.
/// Summation runs row-major over the spatial positions.
pub fn avgpool_global(input: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank(input, 3, "avgpool_global")?;
    let c = input.channels();
    let spatial = input.spatial();
    let mut out = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let mut acc = 0.0;
        for &v in input.channel(ch) {
            acc += v;
        }
        out.data[ch] = acc / spatial as f64;
    }
    Ok(out)
}

/// Channel-major flattening: `[C, H, W] -> [C*H*W]` with the channel index
/// varying slowest. Rank-1 inputs pass through unchanged.
pub fn flatten(input: &Tensor) -> Tensor {
    Tensor {
        shape: vec![input.len()],
        data: input.data.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Independent cross-correlation oracle: quadruple loop with explicit
    /// bounds checks, shared with nothing in the implementation path.
    fn conv_oracle(
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
        let (c_out, _, kh, kw) = (
            weight.shape[0],
            weight.shape[1],
            weight.shape[2],
            weight.shape[3],
        );
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        let mut out = Tensor::zeros(vec![c_out, h_out, w_out]);
        for oc in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                if iy < padding || ix < padding {
                                    continue;
                                }
                                let (iy, ix) = (iy - padding, ix - padding);
                                if iy >= h || ix >= w {
                                    continue;
                                }
                                acc += input.data[(ic * h + iy) * w + ix]
                                    * weight.data[((oc * c_in + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data[(oc * h_out + oy) * w_out + ox] = acc + bias.data[oc];
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let input = t(&[1, 2, 2], &[1.0; 4]);
        let weight = t(&[1, 1, 1, 1], &[1.0]);
        let bias = t(&[1], &[0.0]);
        let out = conv2d_forward(&input, &weight, &bias, 1, 1, 0).unwrap();
        assert_eq!(out.shape, vec![1, 2, 2]);
        assert_eq!(out.data, vec![1.0; 4]);
    }

    #[test]
    fn conv_zero_kernel_is_bias() {
        let input = t(&[2, 3, 3], &(0..18).map(|v| v as f64).collect::<Vec<_>>());
        let weight = Tensor::zeros(vec![1, 2, 3, 3]);
        let bias = t(&[1], &[4.5]);
        let out = conv2d_forward(&input, &weight, &bias, 1, 1, 1).unwrap();
        assert!(out.data.iter().all(|&v| v == 4.5));
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut rng = crate::rng::Rng::new(11);
        let input = t(
            &[3, 4, 4],
            &(0..48).map(|_| rng.uniform(-10.0, 10.0)).collect::<Vec<_>>(),
        );
        let weight = t(
            &[2, 3, 3, 3],
            &(0..54).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>(),
        );
        let bias = t(&[2], &[rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]);
        let got = conv2d_forward(&input, &weight, &bias, 1, 1, 1).unwrap();
        let want = conv_oracle(&input, &weight, &bias, 1, 1);
        assert_eq!(got.shape, want.shape);
        for (g, w) in got.data.iter().zip(&want.data) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let input = t(&[3, 4, 4], &[0.0; 48]);
        let weight = Tensor::zeros(vec![2, 2, 3, 3]);
        let bias = Tensor::zeros(vec![2]);
        let err = conv2d_forward(&input, &weight, &bias, 1, 1, 1).unwrap_err();
        assert!(matches!(
            err,
            TensorError::ShapeMismatch {
                dim: "weight in-channels",
                ..
            }
        ));
        let err = conv2d_forward(&input, &Tensor::zeros(vec![2, 3, 3, 3]), &bias, 2, 1, 1)
            .unwrap_err();
        assert!(matches!(err, TensorError::BadGrouping { .. }));
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = t(&[3], &[1.0, -2.0, 3.0]);
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zero_b = Tensor::zeros(vec![3]);
        assert_eq!(linear_forward(&x, &eye, &zero_b).unwrap().data, x.data);

        let w0 = Tensor::zeros(vec![2, 3]);
        let b = t(&[2], &[5.0, -1.0]);
        assert_eq!(linear_forward(&x, &w0, &b).unwrap().data, b.data);
    }

    #[test]
    fn linear_matches_hand_rolled_dots() {
        let x = t(&[2], &[0.5, -1.5]);
        let w = t(&[3, 2], &[1.0, 2.0, -0.5, 0.25, 3.0, -3.0]);
        let b = t(&[3], &[0.1, 0.2, 0.3]);
        let out = linear_forward(&x, &w, &b).unwrap();
        let expect = [
            0.1 + 1.0 * 0.5 + 2.0 * -1.5,
            0.2 + -0.5 * 0.5 + 0.25 * -1.5,
            0.3 + 3.0 * 0.5 + -3.0 * -1.5,
        ];
        for (g, e) in out.data.iter().zip(expect) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn linear_rejects_dim_mismatch() {
        let x = t(&[2], &[1.0, 2.0]);
        let w = t(&[2, 3], &[0.0; 6]);
        assert!(linear_forward(&x, &w, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn batchnorm_near_identity_for_neutral_stats() {
        let x = t(&[2, 2, 1], &[0.3, -0.7, 1.1, 0.0]);
        let ones = t(&[2], &[1.0, 1.0]);
        let zeros = Tensor::zeros(vec![2]);
        let out = batchnorm_forward(&x, &ones, &zeros, &zeros, &ones, 1e-12).unwrap();
        for (g, e) in out.data.iter().zip(&x.data) {
            assert!((g - e).abs() <= 1e-9);
        }
    }

    #[test]
    fn batchnorm_constant_input_at_mean_is_beta() {
        let c = 2.5;
        let x = t(&[1, 2, 2], &[c; 4]);
        let out = batchnorm_forward(
            &x,
            &t(&[1], &[1.7]),
            &Tensor::zeros(vec![1]),
            &t(&[1], &[c]),
            &t(&[1], &[0.42]),
            1e-5,
        )
        .unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_matches_scalar_formula() {
        let mut rng = crate::rng::Rng::new(3);
        let x = t(&[3, 2, 2], &(0..12).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<_>>());
        let gamma = t(&[3], &(0..3).map(|_| rng.uniform(0.5, 1.5)).collect::<Vec<_>>());
        let beta = t(&[3], &(0..3).map(|_| rng.uniform(-0.5, 0.5)).collect::<Vec<_>>());
        let mean = t(&[3], &(0..3).map(|_| rng.uniform(-0.5, 0.5)).collect::<Vec<_>>());
        let var = t(&[3], &(0..3).map(|_| rng.uniform(0.2, 2.0)).collect::<Vec<_>>());
        let eps = 1e-5;
        let out = batchnorm_forward(&x, &gamma, &beta, &mean, &var, eps).unwrap();
        for ch in 0..3 {
            for s in 0..4 {
                let idx = ch * 4 + s;
                let e = (x.data[idx] - mean.data[ch]) / (var.data[ch] + eps).sqrt()
                    * gamma.data[ch]
                    + beta.data[ch];
                assert!((out.data[idx] - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_rejects_negative_variance() {
        let x = t(&[1, 1, 1], &[1.0]);
        let one = t(&[1], &[1.0]);
        let zero = Tensor::zeros(vec![1]);
        let var = t(&[1], &[-0.1]);
        assert!(matches!(
            batchnorm_forward(&x, &one, &zero, &zero, &var, 1e-5),
            Err(TensorError::NegativeVariance { .. })
        ));
    }

    #[test]
    fn relu_clamps_negatives() {
        let out = relu(&t(&[2], &[-1.0, 2.0]));
        assert_eq!(out.data, vec![0.0, 2.0]);
    }

    #[test]
    fn add_requires_identical_shapes() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(add(&a, &b).is_err());
        assert_eq!(add(&a, &a).unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn cat_keeps_argument_order() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[3, 1, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let out = cat_channels(&[&a, &b]).unwrap();
        assert_eq!(out.shape, vec![5, 1, 2]);
        assert_eq!(&out.data[..4], &a.data[..]);
    }

    #[test]
    fn flatten_round_trips_bit_exactly() {
        let mut rng = crate::rng::Rng::new(17);
        let x = t(&[2, 3, 2], &(0..12).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let flat = flatten(&x);
        assert_eq!(flat.shape, vec![12]);
        let back = Tensor::new(x.shape.clone(), flat.data.clone()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn avgpool_spatial_mean_per_channel() {
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, -1.0, -1.0, -1.0, -1.0]);
        let out = avgpool_global(&x).unwrap();
        assert_eq!(out.data, vec![2.5, -1.0]);
    }

    #[test]
    fn forward_ops_are_deterministic() {
        let mut rng = crate::rng::Rng::new(23);
        let input = t(&[3, 4, 4], &(0..48).map(|_| rng.uniform(-10.0, 10.0)).collect::<Vec<_>>());
        let weight = t(&[4, 3, 3, 3], &(0..108).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let bias = t(&[4], &(0..4).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let a = conv2d_forward(&input, &weight, &bias, 1, 1, 1).unwrap();
        let b = conv2d_forward(&input, &weight, &bias, 1, 1, 1).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// ReLU positive homogeneity, used by the scaling camouflage.
            #[test]
            fn relu_positive_homogeneity(
                values in proptest::collection::vec(-100.0f64..100.0, 1..32),
                scale in 0.01f64..50.0,
            ) {
                let x = Tensor::new(vec![values.len()], values.clone()).unwrap();
                let scaled = Tensor::new(
                    vec![values.len()],
                    values.iter().map(|v| scale * v).collect(),
                ).unwrap();
                let lhs = relu(&scaled);
                let rhs: Vec<f64> = relu(&x).data.iter().map(|v| scale * v).collect();
                prop_assert_eq!(lhs.data, rhs);
            }

            #[test]
            fn conv_groups1_matches_oracle(
                seed in 0u64..500,
            ) {
                let mut rng = crate::rng::Rng::new(seed);
                let c_in = 1 + rng.below(3);
                let c_out = 1 + rng.below(3);
                let hw = 2 + rng.below(3);
                let k = 1 + 2 * rng.below(2); // 1 or 3
                let pad = rng.below(2);
                if k > hw + 2 * pad { return Ok(()); }
                let input = Tensor::new(
                    vec![c_in, hw, hw],
                    (0..c_in * hw * hw).map(|_| rng.uniform(-10.0, 10.0)).collect(),
                ).unwrap();
                let weight = Tensor::new(
                    vec![c_out, c_in, k, k],
                    (0..c_out * c_in * k * k).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                ).unwrap();
                let bias = Tensor::new(vec![c_out], (0..c_out).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
                let got = conv2d_forward(&input, &weight, &bias, 1, 1, pad).unwrap();
                let want = conv_oracle(&input, &weight, &bias, 1, pad);
                prop_assert_eq!(got.shape, want.shape);
                for (g, w) in got.data.iter().zip(&want.data) {
                    prop_assert!((g - w).abs() <= 1e-12);
                }
            }
        }
    }
}
