use std::fmt;

use crate::error::ModelError;

/// The operation a layer performs. Shapes are `[channels, height, width]` for
/// spatial layers and `[features]` for dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => write!(
                f,
                "conv2d({out_channels}, {kernel_h}x{kernel_w}, stride {stride}, pad {padding})"
            ),
            LayerKind::Dense { out_features } => write!(f, "dense({out_features})"),
            LayerKind::MaxPool { window, stride } => write!(f, "maxpool({window}, stride {stride})"),
            LayerKind::AvgPool { window, stride } => write!(f, "avgpool({window}, stride {stride})"),
            other => f.write_str(other.name()),
        }
    }
}

/// One layer with its resolved shapes and parameters.
///
/// Convolution weights are laid out `[out_c][in_c][kh][kw]`, dense weights
/// `[out][in]`; biases follow in a separate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    kind: LayerKind,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

fn invalid(layer: usize, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidLayer {
        layer,
        reason: reason.into(),
    }
}

fn spatial(layer: usize, shape: &[usize]) -> Result<(usize, usize, usize), ModelError> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(invalid(layer, format!("expected [c, h, w] input, got {shape:?}"))),
    }
}

fn window_out(extent: usize, pad: usize, window: usize, stride: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (padded >= window).then(|| (padded - window) / stride + 1)
}

impl Layer {
    /// Builds a layer for the given input shape. `params` holds weights then
    /// biases; it must be empty for layers without parameters. `index` is only
    /// used in error messages.
    pub fn new(
        index: usize,
        kind: LayerKind,
        input_shape: Vec<usize>,
        params: Vec<f32>,
    ) -> Result<Self, ModelError> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(invalid(index, format!("invalid input shape {input_shape:?}")));
        }
        let (output_shape, weight_len, bias_len) = match kind {
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                    return Err(invalid(index, "conv2d sizes must be positive"));
                }
                let (c, h, w) = spatial(index, &input_shape)?;
                let oh = window_out(h, padding, kernel_h, stride);
                let ow = window_out(w, padding, kernel_w, stride);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => (
                        vec![out_channels, oh, ow],
                        out_channels * c * kernel_h * kernel_w,
                        out_channels,
                    ),
                    _ => return Err(invalid(index, "kernel larger than padded input")),
                }
            }
            LayerKind::Dense { out_features } => {
                if out_features == 0 {
                    return Err(invalid(index, "dense needs at least one output"));
                }
                let [n] = input_shape[..] else {
                    return Err(invalid(index, format!("dense expects a flat input, got {input_shape:?}")));
                };
                (vec![out_features], out_features * n, out_features)
            }
            LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(invalid(index, "pool window and stride must be positive"));
                }
                let (c, h, w) = spatial(index, &input_shape)?;
                match (window_out(h, 0, window, stride), window_out(w, 0, window, stride)) {
                    (Some(oh), Some(ow)) => (vec![c, oh, ow], 0, 0),
                    _ => return Err(invalid(index, "pool window larger than input")),
                }
            }
            LayerKind::Relu => (input_shape.clone(), 0, 0),
            LayerKind::Flatten => (vec![input_shape.iter().product()], 0, 0),
            LayerKind::Softmax => {
                if input_shape.len() != 1 {
                    return Err(invalid(index, "softmax expects a flat input"));
                }
                (input_shape.clone(), 0, 0)
            }
        };
        if params.len() != weight_len + bias_len {
            return Err(ModelError::ParameterCount {
                layer: index,
                expected: weight_len + bias_len,
                found: params.len(),
            });
        }
        let mut weights = params;
        let bias = weights.split_off(weight_len);
        Ok(Self {
            kind,
            input_shape,
            output_shape,
            weights,
            bias,
        })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Weights followed by biases, the on-disk parameter order.
    pub fn params(&self) -> Vec<f32> {
        let mut out = self.weights.clone();
        out.extend_from_slice(&self.bias);
        out
    }

    /// Arithmetic operations needed to produce one output element: multiply-
    /// accumulates for conv/dense, window reads for pooling, one per element
    /// for ReLU/Flatten and one per class for Softmax.
    pub fn ops_per_element(&self) -> u64 {
        let ops = match self.kind {
            LayerKind::Conv2d {
                kernel_h, kernel_w, ..
            } => self.input_shape[0] * kernel_h * kernel_w,
            LayerKind::Dense { .. } => self.input_shape[0],
            LayerKind::MaxPool { window, .. } | LayerKind::AvgPool { window, .. } => window * window,
            LayerKind::Relu | LayerKind::Flatten => 1,
            LayerKind::Softmax => self.input_shape[0],
        };
        ops as u64
    }

    /// True when a change to any input element may change every output.
    pub(crate) fn is_dense_dependency(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Softmax)
    }

    /// Computes output element `idx` from `input`. Both the full forward pass
    /// and the incremental propagator go through here, which keeps their
    /// results bit-identical.
    #[inline]
    pub(crate) fn compute(&self, input: &[f32], idx: usize) -> f32 {
        match self.kind {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                let (in_c, in_h, in_w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let (oh, ow) = (self.output_shape[1], self.output_shape[2]);
                let oc = idx / (oh * ow);
                let oy = (idx / ow) % oh;
                let ox = idx % ow;
                let mut acc = self.bias[oc];
                let wbase = oc * in_c * kernel_h * kernel_w;
                for ic in 0..in_c {
                    for ky in 0..kernel_h {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let row = (ic * in_h + iy as usize) * in_w;
                        let wrow = wbase + (ic * kernel_h + ky) * kernel_w;
                        for kx in 0..kernel_w {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            acc += self.weights[wrow + kx] * input[row + ix as usize];
                        }
                    }
                }
                acc
            }
            LayerKind::Dense { .. } => {
                let n = self.input_shape[0];
                let row = &self.weights[idx * n..(idx + 1) * n];
                let mut acc = self.bias[idx];
                for (w, x) in row.iter().zip(input) {
                    acc += w * x;
                }
                acc
            }
            // maxNum semantics: NaN inputs lose against numbers.
            LayerKind::Relu => {
                let x = input[idx];
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            LayerKind::MaxPool { window, stride } => {
                let mut best = f32::NAN;
                self.for_window(idx, window, stride, |v| {
                    if v > best || best.is_nan() {
                        best = v;
                    }
                }, input);
                best
            }
            LayerKind::AvgPool { window, stride } => {
                let mut acc = 0.0f32;
                self.for_window(idx, window, stride, |v| acc += v, input);
                acc / (window * window) as f32
            }
            LayerKind::Flatten => input[idx],
            LayerKind::Softmax => {
                let mut max = f32::NAN;
                for &v in input {
                    if v > max || max.is_nan() {
                        max = v;
                    }
                }
                let mut sum = 0.0f32;
                for &v in input {
                    sum += (v - max).exp();
                }
                (input[idx] - max).exp() / sum
            }
        }
    }

    #[inline]
    fn for_window(&self, idx: usize, window: usize, stride: usize, mut f: impl FnMut(f32), input: &[f32]) {
        let (in_h, in_w) = (self.input_shape[1], self.input_shape[2]);
        let (oh, ow) = (self.output_shape[1], self.output_shape[2]);
        let c = idx / (oh * ow);
        let oy = (idx / ow) % oh;
        let ox = idx % ow;
        for ky in 0..window {
            let row = (c * in_h + oy * stride + ky) * in_w + ox * stride;
            for kx in 0..window {
                f(input[row + kx]);
            }
        }
    }

    /// Calls `f` for every output element whose value depends on input
    /// element `input_idx`. Not used for dense dependencies.
    pub(crate) fn for_each_dependent(&self, input_idx: usize, mut f: impl FnMut(usize)) {
        match self.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let (in_h, in_w) = (self.input_shape[1], self.input_shape[2]);
                let (oh, ow) = (self.output_shape[1], self.output_shape[2]);
                let y = (input_idx / in_w) % in_h;
                let x = input_idx % in_w;
                let ys = dependent_range(y, padding, kernel_h, stride, oh);
                let xs = dependent_range(x, padding, kernel_w, stride, ow);
                for oc in 0..out_channels {
                    for oy in ys.clone() {
                        for ox in xs.clone() {
                            f((oc * oh + oy) * ow + ox);
                        }
                    }
                }
            }
            LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
                let (in_h, in_w) = (self.input_shape[1], self.input_shape[2]);
                let (oh, ow) = (self.output_shape[1], self.output_shape[2]);
                let c = input_idx / (in_h * in_w);
                let y = (input_idx / in_w) % in_h;
                let x = input_idx % in_w;
                for oy in dependent_range(y, 0, window, stride, oh) {
                    for ox in dependent_range(x, 0, window, stride, ow) {
                        f((c * oh + oy) * ow + ox);
                    }
                }
            }
            LayerKind::Relu | LayerKind::Flatten => f(input_idx),
            LayerKind::Dense { .. } | LayerKind::Softmax => {
                for o in 0..self.output_len() {
                    f(o);
                }
            }
        }
    }
}

/// Output positions `o` in `0..out_len` with `o*stride - pad <= pos < o*stride - pad + window`.
fn dependent_range(pos: usize, pad: usize, window: usize, stride: usize, out_len: usize) -> std::ops::Range<usize> {
    let p = (pos + pad) as isize;
    let lo = (p - window as isize + 1).max(0);
    let lo = (lo as usize).div_ceil(stride);
    let hi = (p as usize / stride + 1).min(out_len);
    lo..hi.max(lo)
}
