//! Dense `f32` tensors and the layer operations the detector graph is built from.
//!
//! Activations are laid out as `(channels, height, width)` and convolution
//! weights as `(out_channels, in_channels, kernel_h, kernel_w)`, both row-major.
//! Every operation is a pure function of its inputs.

use std::fmt;

use thiserror::Error;

/// Default batch-norm epsilon.
pub const BN_EPSILON: f32 = 1e-5;

/// Default negative-side slope of the leaky activation.
pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("tensor shape must have at least one axis")]
    EmptyShape,
    #[error("axis {axis} of shape {shape:?} has zero extent")]
    ZeroExtent { axis: usize, shape: Vec<usize> },
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("{op}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Geometry { op: &'static str, detail: String },
    #[error("invalid conv parameters: {0}")]
    Params(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &format_args!("{head:?}{}", if self.data.len() > PREVIEW { "..." } else { "" }))
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = checked_volume(&shape)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = checked_volume(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    /// Builds a `(c, h, w)` tensor by evaluating `f(channel, y, x)` at every position.
    pub fn from_fn3(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        checked_volume(&[c, h, w])?;
        let mut data = Vec::with_capacity(c * h * w);
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(k, y, x));
                }
            }
        }
        Ok(Self {
            shape: vec![c, h, w],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as an activation map and returns `(c, h, w)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        self.dims3_for("dims3")
    }

    fn dims3_for(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::Rank {
                op,
                expected: 3,
                actual: self.shape.clone(),
            }),
        }
    }

    /// Value at `(channel, y, x)` of a rank-3 tensor. Panics when out of bounds.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (cc, h, w) = self.dims3().expect("at3 on a non rank-3 tensor");
        assert!(c < cc && y < h && x < w, "index ({c},{y},{x}) outside {:?}", self.shape);
        self.data[(c * h + y) * w + x]
    }

    /// Copies channels `start..start + len` out of a rank-3 tensor.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3_for("channel_slice")?;
        if len == 0 || start + len > c {
            return Err(TensorError::Geometry {
                op: "channel_slice",
                detail: format!("channels {start}..{} outside 0..{c}", start + len),
            });
        }
        let plane = h * w;
        Tensor::new(vec![len, h, w], self.data[start * plane..(start + len) * plane].to_vec())
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn checked_volume(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(TensorError::ZeroExtent {
            axis,
            shape: shape.to_vec(),
        });
    }
    shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).ok_or_else(|| TensorError::Geometry {
        op: "volume",
        detail: format!("shape {shape:?} overflows usize"),
    })
}

/// Inference-mode batch normalization statistics for one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub rolling_mean: Vec<f32>,
    pub rolling_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNorm {
    /// Identity statistics: gamma 1, beta 0, mean 0, variance 1.
    pub fn identity(n: usize) -> Self {
        Self {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            rolling_mean: vec![0.0; n],
            rolling_var: vec![1.0; n],
            epsilon: BN_EPSILON,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` such that `scale * x + shift` equals the normalization.
    fn affine(&self, j: usize) -> (f32, f32) {
        let scale = self.gamma[j] / (self.rolling_var[j] + self.epsilon).sqrt();
        (scale, self.beta[j] - scale * self.rolling_mean[j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    weights: Tensor,
    bias: Vec<f32>,
    batchnorm: Option<BatchNorm>,
    stride: usize,
    pad: usize,
}

impl ConvParams {
    /// Validates and assembles convolution parameters. When `batchnorm` is present
    /// the separate `bias` is ignored during evaluation and `beta` acts as the shift.
    pub fn new(weights: Tensor, bias: Vec<f32>, batchnorm: Option<BatchNorm>, stride: usize, pad: usize) -> Result<Self> {
        let out = match weights.shape() {
            [o, _, _, _] => *o,
            other => {
                return Err(TensorError::Rank {
                    op: "conv weights",
                    expected: 4,
                    actual: other.to_vec(),
                })
            }
        };
        if bias.len() != out {
            return Err(TensorError::Params(format!("bias has {} entries for {out} filters", bias.len())));
        }
        if stride == 0 {
            return Err(TensorError::Params("stride must be positive".into()));
        }
        if let Some(bn) = &batchnorm {
            let lens = [bn.gamma.len(), bn.beta.len(), bn.rolling_mean.len(), bn.rolling_var.len()];
            if lens.iter().any(|&l| l != out) {
                return Err(TensorError::Params(format!(
                    "batchnorm vectors have lengths {lens:?}, expected {out}"
                )));
            }
            if bn.rolling_var.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(TensorError::Params("rolling variance must be non-negative".into()));
            }
            if bn.epsilon.is_nan() || bn.epsilon <= 0.0 {
                return Err(TensorError::Params("batchnorm epsilon must be positive".into()));
            }
        }
        Ok(Self {
            weights,
            bias,
            batchnorm,
            stride,
            pad,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn batchnorm(&self) -> Option<&BatchNorm> {
        self.batchnorm.as_ref()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// `(out_channels, in_channels, kernel_h, kernel_w)`.
    pub fn kernel_dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weights.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Number of scalars the layer owns, counting either the four batchnorm
    /// vectors or the bias.
    pub fn param_count(&self) -> usize {
        let n = self.out_channels();
        let shift = if self.batchnorm.is_some() { 4 * n } else { n };
        shift + self.weights.len()
    }

    /// Output spatial extent along one axis, or `None` when the geometry is invalid.
    pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Returns an equivalent batchnorm-free parameter set with the normalization
    /// merged into the kernel and bias.
    pub fn fold_batchnorm(&self) -> ConvParams {
        let Some(bn) = &self.batchnorm else {
            return self.clone();
        };
        let (o, i, kh, kw) = self.kernel_dims();
        let per_filter = i * kh * kw;
        let mut weights = self.weights.data().to_vec();
        let mut bias = vec![0.0; o];
        for j in 0..bn.channels() {
            let (scale, shift) = bn.affine(j);
            weights[j * per_filter..(j + 1) * per_filter].iter_mut().for_each(|w| *w *= scale);
            bias[j] = shift;
        }
        ConvParams {
            weights: Tensor {
                shape: self.weights.shape.clone(),
                data: weights,
            },
            bias,
            batchnorm: None,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Activation applied after a conv layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    Leaky(f32),
    Relu,
    Logistic,
}

impl Activation {
    pub fn apply(self, t: &Tensor) -> Tensor {
        match self {
            Activation::Linear => t.clone(),
            Activation::Leaky(slope) => leaky_relu(t, slope),
            Activation::Relu => t.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Logistic => t.map(|v| 1.0 / (1.0 + (-v).exp())),
        }
    }

    fn apply_in_place(self, data: &mut [f32]) {
        match self {
            Activation::Linear => {}
            Activation::Leaky(slope) => data.iter_mut().for_each(|v| {
                if *v <= 0.0 {
                    *v *= slope
                }
            }),
            Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Logistic => data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        }
    }
}

const K_BLOCK: usize = 128;
const N_BLOCK: usize = 512;

/// 2-D cross-correlation over a `(c, h, w)` input, followed by batchnorm or bias.
///
/// Lowered to a matrix product over an im2col buffer. Each output element is
/// accumulated in `f32` in ascending (in_channel, ky, kx) order, so results do
/// not depend on the blocking.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv2d_activated(input, params, Activation::Linear)
}

/// [`conv2d`] with an activation fused into the output pass.
pub fn conv2d_activated(input: &Tensor, params: &ConvParams, activation: Activation) -> Result<Tensor> {
    let (c, h, w) = input.dims3_for("conv2d")?;
    let (o, ci, kh, kw) = params.kernel_dims();
    if ci != c {
        return Err(TensorError::Shape {
            op: "conv2d",
            expected: vec![ci, h, w],
            actual: input.shape.clone(),
        });
    }
    let (stride, pad) = (params.stride, params.pad);
    let (oh, ow) = match (
        ConvParams::output_extent(h, kh, stride, pad),
        ConvParams::output_extent(w, kw, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(TensorError::Geometry {
                op: "conv2d",
                detail: format!("{kh}x{kw} kernel with pad {pad} does not fit a {h}x{w} input"),
            })
        }
    };

    let k_total = c * kh * kw;
    let n_total = oh * ow;
    let direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let lowered;
    let cols: &[f32] = if direct {
        input.data()
    } else {
        lowered = im2col(input.data(), (c, h, w), (kh, kw), stride, pad, (oh, ow));
        &lowered
    };

    let weights = params.weights.data();
    let mut out = vec![0.0f32; o * n_total];
    for n0 in (0..n_total).step_by(N_BLOCK) {
        let n1 = (n0 + N_BLOCK).min(n_total);
        for k0 in (0..k_total).step_by(K_BLOCK) {
            let k1 = (k0 + K_BLOCK).min(k_total);
            for j in 0..o {
                let out_row = &mut out[j * n_total + n0..j * n_total + n1];
                let w_row = &weights[j * k_total..(j + 1) * k_total];
                for k in k0..k1 {
                    let wv = w_row[k];
                    let col_row = &cols[k * n_total + n0..k * n_total + n1];
                    for (acc, &x) in out_row.iter_mut().zip(col_row) {
                        *acc += wv * x;
                    }
                }
            }
        }
    }

    for (j, plane) in out.chunks_exact_mut(n_total).enumerate() {
        match &params.batchnorm {
            Some(bn) => {
                let (gamma, beta, mean) = (bn.gamma[j], bn.beta[j], bn.rolling_mean[j]);
                let denom = (bn.rolling_var[j] + bn.epsilon).sqrt();
                plane.iter_mut().for_each(|v| *v = gamma * ((*v - mean) / denom) + beta);
            }
            None => {
                let b = params.bias[j];
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        activation.apply_in_place(plane);
    }
    Ok(Tensor {
        shape: vec![o, oh, ow],
        data: out,
    })
}

fn im2col(
    src: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f32> {
    let n_total = oh * ow;
    let mut cols = vec![0.0f32; c * kh * kw * n_total];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * n_total..(row + 1) * n_total];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Elementwise `x` for positive `x`, `slope * x` otherwise.
pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { slope * v })
}

/// Nearest-neighbour 2x spatial upsampling of a `(c, h, w)` tensor.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3_for("upsample2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut data = Vec::with_capacity(c * h2 * w2);
    for plane in input.data.chunks_exact(h * w) {
        for y in 0..h2 {
            let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for x in 0..w2 {
                data.push(src[x / 2]);
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, h2, w2],
        data,
    })
}

/// Elementwise sum of two tensors with identical shapes (residual connection).
pub fn shortcut_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(TensorError::Shape {
            op: "shortcut_add",
            expected: a.shape.clone(),
            actual: b.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Channel-axis concatenation of `(c_i, h, w)` tensors, in argument order.
pub fn route_concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = inputs.first() else {
        return Err(TensorError::Geometry {
            op: "route_concat",
            detail: "no inputs".into(),
        });
    };
    let (_, h, w) = first.dims3_for("route_concat")?;
    let mut channels = 0;
    for t in inputs {
        let (c, th, tw) = t.dims3_for("route_concat")?;
        if (th, tw) != (h, w) {
            return Err(TensorError::Shape {
                op: "route_concat",
                expected: vec![c, h, w],
                actual: t.shape.clone(),
            });
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in inputs {
        data.extend_from_slice(&t.data);
    }
    Ok(Tensor {
        shape: vec![channels, h, w],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn t3(c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop convolution, accumulated in f64.
    fn naive_conv(input: &Tensor, weights: &Tensor, bias: &[f32], stride: usize, pad: usize) -> Tensor {
        let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
        let (o, kh, kw) = (weights.shape[0], weights.shape[2], weights.shape[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f32; o * oh * ow];
        for j in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[j] as f64;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let x = input.data[(ch * h + iy as usize) * w + ix as usize] as f64;
                                let wt = weights.data[((j * c + ch) * kh + ky) * kw + kx] as f64;
                                acc += x * wt;
                            }
                        }
                    }
                    out[(j * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        t3(o, oh, ow, out)
    }

    #[test]
    fn rejects_bad_shapes() {
        assert_eq!(Tensor::new(vec![], vec![]), Err(TensorError::EmptyShape));
        assert!(matches!(Tensor::new(vec![2, 0], vec![]), Err(TensorError::ZeroExtent { axis: 1, .. })));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { expected: 4, actual: 3, .. })
        ));
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let input = Tensor::filled(vec![1, 3, 3], 1.0).unwrap();
        let params = ConvParams::new(Tensor::filled(vec![1, 1, 1, 1], 2.0).unwrap(), vec![0.0], None, 1, 0).unwrap();
        let out = conv2d(&input, &params).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn full_window_sums_input() {
        let input = t3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let params = ConvParams::new(Tensor::filled(vec![1, 1, 2, 2], 1.0).unwrap(), vec![0.0], None, 1, 0).unwrap();
        let out = conv2d(&input, &params).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let input = random_tensor(&mut rng, vec![4, 8, 8]);
        let weights = random_tensor(&mut rng, vec![6, 4, 3, 3]);
        let bias: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = naive_conv(&input, &weights, &bias, 1, 1);
        let params = ConvParams::new(weights, bias, None, 1, 1).unwrap();
        let got = conv2d(&input, &params).unwrap();
        assert_eq!(got.shape(), expected.shape());
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(vec![3, 4, 4]).unwrap();
        let params = ConvParams::new(Tensor::zeros(vec![2, 4, 3, 3]).unwrap(), vec![0.0; 2], None, 1, 1).unwrap();
        let err = conv2d(&input, &params).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let input = Tensor::zeros(vec![1, 2, 2]).unwrap();
        let params = ConvParams::new(Tensor::zeros(vec![1, 1, 3, 3]).unwrap(), vec![0.0], None, 1, 0).unwrap();
        assert!(matches!(conv2d(&input, &params), Err(TensorError::Geometry { .. })));
    }

    #[test]
    fn batchnorm_ignores_bias_and_uses_beta() {
        let input = Tensor::filled(vec![1, 2, 2], 3.0).unwrap();
        let bn = BatchNorm {
            gamma: vec![2.0],
            beta: vec![0.5],
            rolling_mean: vec![1.0],
            rolling_var: vec![4.0 - BN_EPSILON],
            epsilon: BN_EPSILON,
        };
        let params = ConvParams::new(Tensor::filled(vec![1, 1, 1, 1], 1.0).unwrap(), vec![100.0], Some(bn), 1, 0).unwrap();
        let out = conv2d(&input, &params).unwrap();
        // 2 * (3 - 1) / 2 + 0.5
        assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-6), "{out:?}");
    }

    #[test]
    fn identity_batchnorm_is_within_epsilon() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let input = random_tensor(&mut rng, vec![3, 6, 6]);
        let weights = random_tensor(&mut rng, vec![4, 3, 3, 3]);
        let plain = ConvParams::new(weights.clone(), vec![0.0; 4], None, 1, 1).unwrap();
        let normed = ConvParams::new(weights, vec![0.0; 4], Some(BatchNorm::identity(4)), 1, 1).unwrap();
        let a = conv2d(&input, &plain).unwrap();
        let b = conv2d(&input, &normed).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            // x / sqrt(1 + eps) differs from x by at most eps * |x| / 2, plus one rounding.
            let bound = BN_EPSILON * x.abs() + f32::EPSILON * x.abs();
            assert!((x - y).abs() <= bound, "{x} vs {y}");
        }
    }

    #[test]
    fn folded_batchnorm_matches_unfolded() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for stride in [1, 2] {
            let input = random_tensor(&mut rng, vec![5, 9, 7]);
            let weights = random_tensor(&mut rng, vec![4, 5, 3, 3]);
            let bn = BatchNorm {
                gamma: (0..4).map(|_| rng.gen_range(0.5..1.5)).collect(),
                beta: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                rolling_mean: (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                rolling_var: (0..4).map(|_| rng.gen_range(0.2..2.0)).collect(),
                epsilon: BN_EPSILON,
            };
            let params = ConvParams::new(weights, vec![9.0; 4], Some(bn), stride, 1).unwrap();
            let folded = params.fold_batchnorm();
            assert!(folded.batchnorm().is_none());
            let a = conv2d(&input, &params).unwrap();
            let b = conv2d(&input, &folded).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn conv_params_validation() {
        let w = Tensor::zeros(vec![2, 1, 1, 1]).unwrap();
        assert!(ConvParams::new(w.clone(), vec![0.0], None, 1, 0).is_err());
        assert!(ConvParams::new(w.clone(), vec![0.0; 2], None, 0, 0).is_err());
        let mut bn = BatchNorm::identity(2);
        bn.rolling_var[1] = -1.0;
        assert!(ConvParams::new(w.clone(), vec![0.0; 2], Some(bn), 1, 0).is_err());
        let mut bn = BatchNorm::identity(2);
        bn.beta.pop();
        assert!(ConvParams::new(w, vec![0.0; 2], Some(bn), 1, 0).is_err());
    }

    #[test]
    fn leaky_relu_cases() {
        let t = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        assert_eq!(leaky_relu(&t, 0.1).data(), &[1.0, -0.1]);
        let z = Tensor::zeros(vec![3, 2, 2]).unwrap();
        assert_eq!(leaky_relu(&z, 0.1), z);
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let r = random_tensor(&mut rng, vec![2, 3, 4]);
        assert_eq!(leaky_relu(&r, 1.0), r);
    }

    #[test]
    fn upsample_cases() {
        let one = t3(1, 1, 1, vec![5.0]);
        assert_eq!(upsample2x(&one).unwrap(), Tensor::filled(vec![1, 2, 2], 5.0).unwrap());
        let t = t3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let up = upsample2x(&t).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up, t3(1, 4, 4, expected));
    }

    #[test]
    fn shortcut_cases() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let t = random_tensor(&mut rng, vec![2, 3, 3]);
        let zero = Tensor::zeros(vec![2, 3, 3]).unwrap();
        assert_eq!(shortcut_add(&t, &zero).unwrap(), t);
        let neg = t.map(|v| -v);
        assert_eq!(shortcut_add(&t, &neg).unwrap(), zero);
        assert!(shortcut_add(&t, &Tensor::zeros(vec![2, 3, 4]).unwrap()).is_err());
    }

    #[test]
    fn route_cases() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        let a = random_tensor(&mut rng, vec![2, 4, 4]);
        let b = random_tensor(&mut rng, vec![3, 4, 4]);
        assert_eq!(route_concat(&[&a]).unwrap(), a);
        let cat = route_concat(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[5, 4, 4]);
        assert_eq!(cat.channel_slice(0, 2).unwrap(), a);
        assert_eq!(cat.channel_slice(2, 3).unwrap(), b);
        let c = Tensor::zeros(vec![1, 4, 5]).unwrap();
        assert!(route_concat(&[&a, &c]).is_err());
        assert!(route_concat(&[]).is_err());
    }

    fn tensor3() -> impl Strategy<Value = Tensor> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            prop::collection::vec(-10.0f32..10.0, c * h * w).prop_map(move |d| t3(c, h, w, d))
        })
    }

    proptest! {
        #[test]
        fn upsample_then_even_sampling_round_trips(t in tensor3()) {
            let up = upsample2x(&t).unwrap();
            let (c, h, w) = t.dims3().unwrap();
            for k in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        prop_assert_eq!(up.at3(k, 2 * y, 2 * x), t.at3(k, y, x));
                    }
                }
            }
        }

        #[test]
        fn shortcut_commutes(a in tensor3(), seed in any::<u64>()) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let b = random_tensor(&mut rng, a.shape().to_vec());
            prop_assert_eq!(shortcut_add(&a, &b).unwrap(), shortcut_add(&b, &a).unwrap());
        }

        #[test]
        fn conv_shape_formula_and_purity(
            h in 1usize..10, w in 1usize..10, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()
        ) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let input = random_tensor(&mut rng, vec![2, h, w]);
            let params = ConvParams::new(random_tensor(&mut rng, vec![3, 2, k, k]), vec![0.1; 3], None, stride, pad).unwrap();
            match (ConvParams::output_extent(h, k, stride, pad), ConvParams::output_extent(w, k, stride, pad)) {
                (Some(oh), Some(ow)) => {
                    let a = conv2d(&input, &params).unwrap();
                    prop_assert_eq!(a.shape(), &[3, oh, ow][..]);
                    prop_assert_eq!(oh, (h + 2 * pad - k) / stride + 1);
                    let b = conv2d(&input, &params).unwrap();
                    prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
                _ => prop_assert!(conv2d(&input, &params).is_err()),
            }
        }
    }
}
