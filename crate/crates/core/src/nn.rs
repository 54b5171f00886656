//! Deterministic neural-numeric primitives: convolution, MLP, softmax,
//! bilinear sampling and seeded initialization.
//!
//! Reductions use a fixed loop nesting and never reassociate, so repeated
//! calls (from any thread) give bit-identical results.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl ConvSpec {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (out_c, in_c, k) = match *weight.dims() {
            [o, i, k, k2] if k == k2 => (o, i, k),
            [_, _, kh, kw] => return Err(Error::shape("kernel width", kh, kw)),
            _ => return Err(Error::shape("conv weight rank", 4, weight.rank())),
        };
        if k != 1 && k != 3 {
            return Err(Error::Invalid(format!("kernel size must be 1 or 3, got {k}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Invalid(format!("stride must be 1 or 2, got {stride}")));
        }
        bias.expect_dims(&[out_c])
            .map_err(|_| Error::shape("bias length", out_c, bias.numel()))?;
        Ok(Self {
            in_channels: in_c,
            out_channels: out_c,
            kernel_size: k,
            stride,
            padding,
            weight,
            bias,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Self {
        Self::new(
            Tensor::zeros(&[out_channels, in_channels, kernel_size, kernel_size]),
            Tensor::zeros(&[out_channels]),
            stride,
            padding,
        )
        .expect("valid conv shape")
    }

    /// 1×1 convolution whose weight is the identity over channels.
    pub fn identity(channels: usize) -> Self {
        let mut spec = Self::zeros(channels, channels, 1, 1, 0);
        for c in 0..channels {
            spec.weight.set(&[c, c, 0, 0], 1.0);
        }
        spec
    }

    /// Uniform fan-in initialization; see [`init_uniform`].
    pub fn random(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel_size * kernel_size;
        let weight = init_uniform(&[out_channels, in_channels, kernel_size, kernel_size], fan_in, rng);
        let bias = init_uniform(&[out_channels], fan_in, rng);
        Self::new(weight, bias, stride, padding).expect("valid conv shape")
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k {
            return Err(Error::shape("padded height", k, ph));
        }
        if pw < k {
            return Err(Error::shape("padded width", k, pw));
        }
        Ok(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }
}

/// 2-D convolution over an NCHW tensor (a CHW tensor is treated as N = 1 and
/// a CHW tensor is returned).
///
/// Accumulation order per output element is fixed: bias first, then input
/// channels, kernel rows, kernel columns.
pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n, c, h, w, batched) = match *input.dims() {
        [n, c, h, w] => (n, c, h, w, true),
        [c, h, w] => (1, c, h, w, false),
        _ => return Err(Error::shape("conv input rank", 4, input.rank())),
    };
    if c != spec.in_channels {
        return Err(Error::shape("input channels", spec.in_channels, c));
    }
    let (oh, ow) = spec.output_size(h, w)?;
    let k = spec.kernel_size;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let oc_n = spec.out_channels;
    let wdata = spec.weight.data();
    let x = input.data();
    let mut out = vec![0.0f32; n * oc_n * oh * ow];

    for b in 0..n {
        let x_b = &x[b * c * h * w..(b + 1) * c * h * w];
        for oc in 0..oc_n {
            let plane = &mut out[(b * oc_n + oc) * oh * ow..(b * oc_n + oc + 1) * oh * ow];
            let w_oc = &wdata[oc * c * k * k..(oc + 1) * c * k * k];
            let bias = spec.bias.data()[oc];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ic in 0..c {
                        let x_c = &x_b[ic * h * w..(ic + 1) * h * w];
                        let w_c = &w_oc[ic * k * k..(ic + 1) * k * k];
                        for ky in 0..k {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                            for kx in 0..k {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += w_c[ky * k + kx] * row[ix as usize];
                            }
                        }
                    }
                    plane[oy * ow + ox] = acc;
                }
            }
        }
    }

    let dims = if batched {
        vec![n, oc_n, oh, ow]
    } else {
        vec![oc_n, oh, ow]
    };
    Tensor::new(dims, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// Fully connected layer, `weight` is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let out = match *weight.dims() {
            [o, _] => o,
            _ => return Err(Error::shape("dense weight rank", 2, weight.rank())),
        };
        bias.expect_dims(&[out])
            .map_err(|_| Error::shape("bias length", out, bias.numel()))?;
        Ok(Self { weight, bias, activation })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self::new(Tensor::zeros(&[outputs, inputs]), Tensor::zeros(&[outputs]), activation)
            .expect("valid dense shape")
    }

    pub fn random(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let weight = init_uniform(&[outputs, inputs], inputs, rng);
        let bias = init_uniform(&[outputs], inputs, rng);
        Self::new(weight, bias, activation).expect("valid dense shape")
    }

    pub fn inputs(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the layer to one input row, writing `outputs()` values.
    pub fn forward_row(&self, x: &[f32], out: &mut [f32]) {
        let n_in = self.inputs();
        debug_assert_eq!(x.len(), n_in);
        let w = self.weight.data();
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = self.bias.data()[o];
            for (wi, xi) in w[o * n_in..(o + 1) * n_in].iter().zip(x) {
                acc += wi * xi;
            }
            *slot = self.activation.apply(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layers: Vec<Dense>,
}

impl MlpSpec {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("mlp needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    format!("mlp layer {} input width", i + 1),
                    pair[0].outputs(),
                    pair[1].inputs(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Runs one input row through every layer.
    pub fn forward_row(&self, x: &[f32]) -> Vec<f32> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.outputs()];
            layer.forward_row(&cur, &mut next);
            cur = next;
        }
        cur
    }
}

/// Applies the MLP along the last axis of `input`.
pub fn mlp_forward(input: &Tensor, spec: &MlpSpec) -> Result<Tensor> {
    let dims = input.dims();
    let width = dims[dims.len() - 1];
    if width != spec.input_width() {
        return Err(Error::shape("mlp input width", spec.input_width(), width));
    }
    let out_w = spec.output_width();
    let mut out = Vec::with_capacity(input.numel() / width * out_w);
    for row in input.data().chunks_exact(width) {
        out.extend(spec.forward_row(row));
    }
    let mut out_dims = dims.to_vec();
    *out_dims.last_mut().unwrap() = out_w;
    Tensor::new(out_dims, out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let dims = input.dims();
    if axis >= dims.len() {
        return Err(Error::Invalid(format!("softmax axis {axis} out of range for rank {}", dims.len())));
    }
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(dims.to_vec(), out)
}

/// In-place stable softmax of a contiguous `f64` slice.
pub fn softmax_f64_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Result of sampling a feature map at a continuous position.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub value: Vec<f32>,
    pub valid: bool,
}

/// Bilinear interpolation of a CHW map at continuous pixel coordinates
/// `(x, y)`, with `x` along columns. Integer coordinates hit grid values
/// exactly. Positions outside `[0, W-1] × [0, H-1]` yield zeros and
/// `valid == false`.
pub fn bilinear_sample(map: &Tensor, points: &[(f32, f32)]) -> Result<Vec<Sample>> {
    let (c, h, w) = map.chw()?;
    Ok(points
        .iter()
        .map(|&(x, y)| {
            let mut value = vec![0.0; c];
            let valid = bilinear_into(map.data(), h, w, x, y, &mut value);
            Sample { value, valid }
        })
        .collect())
}

/// Allocation-free core of [`bilinear_sample`]; overwrites `out` (length C).
pub(crate) fn bilinear_into(data: &[f32], h: usize, w: usize, x: f32, y: f32, out: &mut [f32]) -> bool {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f32 && y <= (h - 1) as f32) {
        out.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let (w00, w01, w10, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
    for (ch, slot) in out.iter_mut().enumerate() {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        *slot = w00 * plane[y0 * w + x0]
            + w01 * plane[y0 * w + x1]
            + w10 * plane[y1 * w + x0]
            + w11 * plane[y1 * w + x1];
    }
    true
}

/// Tensor drawn uniform in `[-b, b]` with `b = sqrt(1 / fan_in)`.
pub fn init_uniform(dims: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.uniform(-bound, bound) as f32)
}
