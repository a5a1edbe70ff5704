//! A small neural-network substrate with hand-written gradients.
//!
//! A [`Network`] is an ordered list of layers whose parameters live in one
//! flat `Vec<f64>`. `forward` returns a [`Cache`] that `backward` consumes;
//! `backward` accumulates into a caller-owned gradient buffer so batches can
//! be summed without per-sample allocation. `jvp` pushes an input tangent
//! through the same cache (forward-mode), which is how generator Jacobians
//! are formed analytically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnetError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("incompatible layer {index}: {reason}")]
    Incompatible { index: usize, reason: String },
    #[error("stale cache: network changed since forward")]
    StaleCache,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("prediction {0} outside (0, 1)")]
    PredictionRange(f64),
    #[error("class index {index} out of range for {classes} logits")]
    ClassIndex { index: usize, classes: usize },
    #[error("invalid soft scale {0}")]
    SoftScale(f64),
    #[error("total variation needs more than one element")]
    DegenerateImage,
}

pub type Result<T> = std::result::Result<T, NnetError>;

/// Row-major buffer with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(NnetError::Shape { expected: shape, got: vec![values.len()] });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NnetError::NonFinite("tensor"));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], values }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(NnetError::Shape { expected: shape, got: self.shape });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stacks `[C1,H,W]` and `[C2,H,W]` into `[C1+C2,H,W]`.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 3 || other.shape.len() != 3 || self.shape[1..] != other.shape[1..] {
            return Err(NnetError::Shape { expected: self.shape.clone(), got: other.shape.clone() });
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(Tensor::from_parts(vec![self.shape[0] + other.shape[0], self.shape[1], self.shape[2]], values))
    }

    /// Splits channel-wise at `c`; inverse of `concat_channels`.
    pub fn split_channels(&self, c: usize) -> (Tensor, Tensor) {
        let plane = self.shape[1] * self.shape[2];
        let (a, b) = self.values.split_at(c * plane);
        (
            Tensor::from_parts(vec![c, self.shape[1], self.shape[2]], a.to_vec()),
            Tensor::from_parts(vec![self.shape[0] - c, self.shape[1], self.shape[2]], b.to_vec()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Architecture vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Activation(Activation),
    PixelShuffle(usize),
    Reshape(Vec<usize>),
    /// Keeps the top-left `[C, h, w]` window of a `[C, H, W]` input.
    Crop { height: usize, width: usize },
    /// `x + body(x)`.
    Residual(Vec<LayerSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Layer {
    Dense { inputs: usize, outputs: usize, w: usize, b: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, w: usize, b: usize },
    Activation(Activation),
    PixelShuffle(usize),
    Reshape(Vec<usize>),
    Crop { height: usize, width: usize },
    Residual(Vec<Layer>),
}

/// A named parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    blocks: Vec<ParamBlock>,
    params: Vec<f64>,
    #[serde(skip)]
    version: u64,
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

struct Builder {
    blocks: Vec<ParamBlock>,
    n_params: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize, is_bias: bool) -> usize {
        let offset = self.n_params;
        let len: usize = shape.iter().product();
        self.blocks.push(ParamBlock { name, shape, offset, fan_in, fan_out, is_bias });
        self.n_params += len;
        offset
    }

    fn build(&mut self, specs: &[LayerSpec], mut shape: Vec<usize>, prefix: &str) -> Result<(Vec<Layer>, Vec<usize>)> {
        let mut layers = Vec::with_capacity(specs.len());
        for (index, spec) in specs.iter().enumerate() {
            let bad = |reason: String| NnetError::Incompatible { index, reason };
            let name = format!("{prefix}{index}");
            let (layer, next) = match spec {
                &LayerSpec::Dense { inputs, outputs } => {
                    let n: usize = shape.iter().product();
                    if n != inputs {
                        return Err(bad(format!("dense expects {inputs} inputs, got shape {shape:?}")));
                    }
                    let w = self.alloc(format!("{name}.weight"), vec![outputs, inputs], inputs, outputs, false);
                    let b = self.alloc(format!("{name}.bias"), vec![outputs], inputs, outputs, true);
                    (Layer::Dense { inputs, outputs, w, b }, vec![outputs])
                }
                &LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, pad } => {
                    if shape.len() != 3 || shape[0] != in_ch {
                        return Err(bad(format!("conv expects [{in_ch},H,W], got {shape:?}")));
                    }
                    if stride == 0 || kernel == 0 {
                        return Err(bad("zero stride or kernel".into()));
                    }
                    let (Some(h), Some(wd)) =
                        (conv_out(shape[1], kernel, stride, pad), conv_out(shape[2], kernel, stride, pad))
                    else {
                        return Err(bad(format!("kernel {kernel} larger than padded input {shape:?}")));
                    };
                    let fan_in = in_ch * kernel * kernel;
                    let fan_out = out_ch * kernel * kernel;
                    let w = self.alloc(format!("{name}.weight"), vec![out_ch, in_ch, kernel, kernel], fan_in, fan_out, false);
                    let b = self.alloc(format!("{name}.bias"), vec![out_ch], fan_in, fan_out, true);
                    (Layer::Conv2d { in_ch, out_ch, kernel, stride, pad, w, b }, vec![out_ch, h, wd])
                }
                LayerSpec::Activation(a) => (Layer::Activation(*a), shape.clone()),
                &LayerSpec::PixelShuffle(r) => {
                    if shape.len() != 3 || r == 0 || shape[0] % (r * r) != 0 {
                        return Err(bad(format!("pixel shuffle {r} on {shape:?}")));
                    }
                    (Layer::PixelShuffle(r), vec![shape[0] / (r * r), shape[1] * r, shape[2] * r])
                }
                LayerSpec::Reshape(target) => {
                    if target.iter().product::<usize>() != shape.iter().product::<usize>() {
                        return Err(bad(format!("reshape {shape:?} to {target:?}")));
                    }
                    (Layer::Reshape(target.clone()), target.clone())
                }
                &LayerSpec::Crop { height, width } => {
                    if shape.len() != 3 || height > shape[1] || width > shape[2] {
                        return Err(bad(format!("crop {height}x{width} of {shape:?}")));
                    }
                    (Layer::Crop { height, width }, vec![shape[0], height, width])
                }
                LayerSpec::Residual(body) => {
                    let (inner, out) = self.build(body, shape.clone(), &format!("{name}."))?;
                    if out != shape {
                        return Err(bad(format!("residual body maps {shape:?} to {out:?}")));
                    }
                    (Layer::Residual(inner), shape.clone())
                }
            };
            layers.push(layer);
            shape = next;
        }
        Ok((layers, shape))
    }
}

/// Per-layer activations recorded by `forward`.
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    inputs: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Input(Tensor),
    Residual(Vec<LayerCache>),
    Shape(Vec<usize>),
}

impl Network {
    pub fn new(input_shape: Vec<usize>, specs: Vec<LayerSpec>) -> Result<Self> {
        let mut builder = Builder { blocks: Vec::new(), n_params: 0 };
        let (layers, output_shape) = builder.build(&specs, input_shape.clone(), "")?;
        Ok(Self {
            specs,
            layers,
            input_shape,
            output_shape,
            blocks: builder.blocks,
            params: vec![0.0; builder.n_params],
            version: 0,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&mut self, rng: &mut impl Rng) {
        for block in &self.blocks {
            let slot = &mut self.params[block.offset..block.offset + block.len()];
            if block.is_bias {
                slot.fill(0.0);
            } else {
                let a = (6.0 / (block.fan_in + block.fan_out) as f64).sqrt();
                for p in slot.iter_mut() {
                    *p = rng.random_range(-a..a);
                }
            }
        }
        self.version += 1;
    }

    pub fn seeded(input_shape: Vec<usize>, specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::new(input_shape, specs)?;
        net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(net)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn param_blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NnetError::Shape { expected: vec![self.params.len()], got: vec![params.len()] });
        }
        self.params = params;
        self.version += 1;
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        if input.shape != self.input_shape {
            return Err(NnetError::Shape { expected: self.input_shape.clone(), got: input.shape.clone() });
        }
        let (out, inputs) = run_forward(&self.layers, &self.params, input.clone(), true);
        Ok((out, Cache { version: self.version, inputs }))
    }

    /// Forward pass without retaining activations.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape != self.input_shape {
            return Err(NnetError::Shape { expected: self.input_shape.clone(), got: input.shape.clone() });
        }
        Ok(run_forward(&self.layers, &self.params, input.clone(), false).0)
    }

    /// Accumulates parameter gradients into `param_grads` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, cache: &Cache, output_grad: &Tensor, param_grads: &mut [f64]) -> Result<Tensor> {
        if cache.version != self.version {
            return Err(NnetError::StaleCache);
        }
        if output_grad.shape != self.output_shape {
            return Err(NnetError::Shape { expected: self.output_shape.clone(), got: output_grad.shape.clone() });
        }
        if param_grads.len() != self.params.len() {
            return Err(NnetError::Shape { expected: vec![self.params.len()], got: vec![param_grads.len()] });
        }
        Ok(run_backward(&self.layers, &self.params, &cache.inputs, output_grad.clone(), param_grads))
    }

    /// Directional derivative of the output along an input tangent.
    pub fn jvp(&self, cache: &Cache, tangent: &Tensor) -> Result<Tensor> {
        if cache.version != self.version {
            return Err(NnetError::StaleCache);
        }
        if tangent.shape != self.input_shape {
            return Err(NnetError::Shape { expected: self.input_shape.clone(), got: tangent.shape.clone() });
        }
        Ok(run_jvp(&self.layers, &self.params, &cache.inputs, tangent.clone()))
    }
}

fn run_forward(layers: &[Layer], params: &[f64], mut x: Tensor, keep: bool) -> (Tensor, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(if keep { layers.len() } else { 0 });
    for layer in layers {
        let y = match layer {
            Layer::Dense { inputs, outputs, w, b } => dense_forward(&x, params, *inputs, *outputs, *w, *b),
            &Layer::Conv2d { in_ch, out_ch, kernel, stride, pad, w, b } => {
                conv_forward(&x, &params[w..], Some(&params[b..b + out_ch]), in_ch, out_ch, kernel, stride, pad)
            }
            Layer::Activation(a) => {
                Tensor::from_parts(x.shape.clone(), x.values.iter().map(|&v| a.apply(v)).collect())
            }
            &Layer::PixelShuffle(r) => pixel_shuffle(&x, r),
            Layer::Reshape(shape) => {
                if keep {
                    caches.push(LayerCache::Shape(x.shape.clone()));
                }
                x.shape = shape.clone();
                continue;
            }
            &Layer::Crop { height, width } => crop(&x, height, width),
            Layer::Residual(body) => {
                let (inner_out, inner) = run_forward(body, params, x.clone(), keep);
                let values = x.values.iter().zip(&inner_out.values).map(|(a, b)| a + b).collect();
                if keep {
                    caches.push(LayerCache::Residual(inner));
                }
                x = Tensor::from_parts(x.shape, values);
                continue;
            }
        };
        if keep {
            let uses_input = !matches!(layer, Layer::PixelShuffle(_) | Layer::Crop { .. });
            caches.push(if uses_input { LayerCache::Input(x) } else { LayerCache::Shape(x.shape) });
        }
        x = y;
    }
    (x, caches)
}

fn run_backward(layers: &[Layer], params: &[f64], caches: &[LayerCache], mut g: Tensor, grads: &mut [f64]) -> Tensor {
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = match (layer, cache) {
            (&Layer::Dense { inputs, outputs, w, b }, LayerCache::Input(x)) => {
                let wm = &params[w..w + inputs * outputs];
                let mut gx = vec![0.0; inputs];
                for o in 0..outputs {
                    let go = g.values[o];
                    if go == 0.0 {
                        continue;
                    }
                    grads[b + o] += go;
                    let row = &wm[o * inputs..(o + 1) * inputs];
                    let grow = &mut grads[w + o * inputs..w + (o + 1) * inputs];
                    for i in 0..inputs {
                        grow[i] += go * x.values[i];
                        gx[i] += go * row[i];
                    }
                }
                Tensor::from_parts(x.shape.clone(), gx)
            }
            (&Layer::Conv2d { in_ch, out_ch, kernel, stride, pad, w, b }, LayerCache::Input(x)) => {
                conv_backward(x, &g, params, grads, in_ch, out_ch, kernel, stride, pad, w, b)
            }
            (Layer::Activation(a), LayerCache::Input(x)) => Tensor::from_parts(
                x.shape.clone(),
                x.values.iter().zip(&g.values).map(|(&v, &gv)| gv * a.derivative(v)).collect(),
            ),
            (&Layer::PixelShuffle(r), LayerCache::Shape(shape)) => pixel_unshuffle(&g, r, shape),
            (Layer::Reshape(_), LayerCache::Shape(shape)) => Tensor::from_parts(shape.clone(), g.values),
            (Layer::Crop { .. }, LayerCache::Shape(shape)) => uncrop(&g, shape),
            (Layer::Residual(body), LayerCache::Residual(inner)) => {
                let gb = run_backward(body, params, inner, g.clone(), grads);
                let values = g.values.iter().zip(&gb.values).map(|(a, b)| a + b).collect();
                Tensor::from_parts(g.shape, values)
            }
            _ => unreachable!("cache layout mismatch"),
        };
    }
    g
}

fn run_jvp(layers: &[Layer], params: &[f64], caches: &[LayerCache], mut t: Tensor) -> Tensor {
    for (layer, cache) in layers.iter().zip(caches) {
        t = match (layer, cache) {
            (&Layer::Dense { inputs, outputs, w, .. }, LayerCache::Input(_)) => {
                let wm = &params[w..w + inputs * outputs];
                let values = (0..outputs)
                    .map(|o| wm[o * inputs..(o + 1) * inputs].iter().zip(&t.values).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::from_parts(vec![outputs], values)
            }
            (&Layer::Conv2d { in_ch, out_ch, kernel, stride, pad, w, .. }, LayerCache::Input(_)) => {
                conv_forward(&t, &params[w..], None, in_ch, out_ch, kernel, stride, pad)
            }
            (Layer::Activation(a), LayerCache::Input(x)) => Tensor::from_parts(
                x.shape.clone(),
                x.values.iter().zip(&t.values).map(|(&v, &tv)| tv * a.derivative(v)).collect(),
            ),
            (&Layer::PixelShuffle(r), _) => pixel_shuffle(&t, r),
            (Layer::Reshape(shape), _) => Tensor::from_parts(shape.clone(), t.values),
            (&Layer::Crop { height, width }, _) => crop(&t, height, width),
            (Layer::Residual(body), LayerCache::Residual(inner)) => {
                let tb = run_jvp(body, params, inner, t.clone());
                let values = t.values.iter().zip(&tb.values).map(|(a, b)| a + b).collect();
                Tensor::from_parts(t.shape, values)
            }
            _ => unreachable!("cache layout mismatch"),
        };
    }
    t
}

fn dense_forward(x: &Tensor, params: &[f64], inputs: usize, outputs: usize, w: usize, b: usize) -> Tensor {
    let wm = &params[w..w + inputs * outputs];
    let values = (0..outputs)
        .map(|o| {
            params[b + o] + wm[o * inputs..(o + 1) * inputs].iter().zip(&x.values).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::from_parts(vec![outputs], values)
}

/// Valid output range `[lo, hi)` of `o` such that `o*stride + k - pad` lies in `[0, size)`.
fn valid_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out && (lo * stride + k) < pad {
        lo += 1;
    }
    let mut hi = out;
    while hi > lo && ((hi - 1) * stride + k) >= size + pad {
        hi -= 1;
    }
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &Tensor,
    weights: &[f64],
    bias: Option<&[f64]>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (h, w) = (x.shape[1], x.shape[2]);
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let mut out = vec![0.0; out_ch * oh * ow];
    for oc in 0..out_ch {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = bias {
            plane.fill(b[oc]);
        }
        for ic in 0..in_ch {
            let xin = &x.values[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kernel {
                let (oy0, oy1) = valid_range(h, oh, ky, stride, pad);
                for kx in 0..kernel {
                    let wv = weights[((oc * in_ch + ic) * kernel + ky) * kernel + kx];
                    let (ox0, ox1) = valid_range(w, ow, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            for (o, xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..ix0 + (ox1 - ox0)]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![out_ch, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    g: &Tensor,
    params: &[f64],
    grads: &mut [f64],
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    w_off: usize,
    b_off: usize,
) -> Tensor {
    let (h, w) = (x.shape[1], x.shape[2]);
    let (oh, ow) = (g.shape[1], g.shape[2]);
    let mut gx = vec![0.0; in_ch * h * w];
    for oc in 0..out_ch {
        let gplane = &g.values[oc * oh * ow..(oc + 1) * oh * ow];
        grads[b_off + oc] += gplane.iter().sum::<f64>();
        for ic in 0..in_ch {
            let xin = &x.values[ic * h * w..(ic + 1) * h * w];
            let gxin = &mut gx[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kernel {
                let (oy0, oy1) = valid_range(h, oh, ky, stride, pad);
                for kx in 0..kernel {
                    let widx = ((oc * in_ch + ic) * kernel + ky) * kernel + kx;
                    let wv = params[w_off + widx];
                    let (ox0, ox1) = valid_range(w, ow, kx, stride, pad);
                    let mut gw = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            let n = ox1 - ox0;
                            let xrow = &xin[iy * w + ix0..iy * w + ix0 + n];
                            let gxrow = &mut gxin[iy * w + ix0..iy * w + ix0 + n];
                            for ((gv, xv), gxv) in grow[ox0..ox1].iter().zip(xrow).zip(gxrow) {
                                gw += gv * xv;
                                *gxv += gv * wv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = iy * w + ox * stride + kx - pad;
                                gw += grow[ox] * xin[ix];
                                gxin[ix] += grow[ox] * wv;
                            }
                        }
                    }
                    grads[w_off + widx] += gw;
                }
            }
        }
    }
    Tensor::from_parts(x.shape.clone(), gx)
}

/// `[C*r*r, H, W] -> [C, H*r, W*r]` with
/// `out[c, y*r + i, x*r + j] = in[c*r*r + i*r + j, y, x]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; cin * h * w];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let src = &x.values[(ch * r * r + i * r + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        out[ch * oh * ow + (y * r + i) * ow + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

fn pixel_unshuffle(g: &Tensor, r: usize, in_shape: &[usize]) -> Tensor {
    let (cin, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; cin * h * w];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let dst = &mut out[(ch * r * r + i * r + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = g.values[ch * oh * ow + (y * r + i) * ow + xx * r + j];
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

fn crop(x: &Tensor, height: usize, width: usize) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&x.values[row..row + width]);
        }
    }
    Tensor::from_parts(vec![c, height, width], out)
}

fn uncrop(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (height, width) = (g.shape[1], g.shape[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..height {
            let src = ch * height * width + y * width;
            out[ch * h * w + y * w..][..width].copy_from_slice(&g.values[src..src + width]);
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnetError::Shape { expected: vec![params.len()], got: vec![grads.len(), state.m.len()] });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

impl Network {
    pub fn adam_step(&mut self, grads: &[f64], state: &mut AdamState) -> Result<()> {
        self.version += 1;
        adam_step(&mut self.params, grads, state)
    }
}

// ---------------------------------------------------------------------------
// Losses. Each returns the loss and its gradient with respect to the prediction.

/// Target for one-sided smoothed BCE: uniform in `[1-s, 1]` for real, `[0, s]` for fake.
pub fn smoothed_target(is_real: bool, soft_scale: f64, rng: &mut impl Rng) -> f64 {
    let u = if soft_scale > 0.0 { rng.random_range(0.0..=soft_scale) } else { 0.0 };
    if is_real {
        1.0 - u
    } else {
        u
    }
}

pub fn loss_bce(pred_prob: f64, target: f64) -> Result<(f64, f64)> {
    if !(pred_prob > 0.0 && pred_prob < 1.0) {
        return Err(NnetError::PredictionRange(pred_prob));
    }
    let loss = -(target * pred_prob.ln() + (1.0 - target) * (1.0 - pred_prob).ln());
    let grad = -target / pred_prob + (1.0 - target) / (1.0 - pred_prob);
    Ok((loss, grad))
}

/// Binary cross-entropy against a smoothed target drawn from `rng`.
pub fn loss_bce_smoothed(pred_prob: f64, is_real: bool, soft_scale: f64, rng: &mut impl Rng) -> Result<(f64, f64)> {
    if !(0.0..0.5).contains(&soft_scale) {
        return Err(NnetError::SoftScale(soft_scale));
    }
    if !(pred_prob > 0.0 && pred_prob < 1.0) {
        return Err(NnetError::PredictionRange(pred_prob));
    }
    loss_bce(pred_prob, smoothed_target(is_real, soft_scale, rng))
}

pub fn loss_cross_entropy(logits: &[f64], class_index: usize) -> Result<(f64, Vec<f64>)> {
    if class_index >= logits.len() {
        return Err(NnetError::ClassIndex { index: class_index, classes: logits.len() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, l)| (l - lse).exp() - if i == class_index { 1.0 } else { 0.0 })
        .collect();
    Ok((lse - logits[class_index], grad))
}

/// Anisotropic total variation over the last two axes, divided by the element count.
pub fn loss_total_variation(image: &Tensor) -> Result<(f64, Tensor)> {
    let (planes, h, w) = match image.shape.as_slice() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => return Err(NnetError::Shape { expected: vec![0, 0, 0], got: image.shape.clone() }),
    };
    if h * w <= 1 {
        return Err(NnetError::DegenerateImage);
    }
    let n = image.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; image.len()];
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = base + y * w + x;
                if x + 1 < w {
                    let d = image.values[i + 1] - image.values[i];
                    loss += d.abs();
                    grad[i + 1] += sign(d) / n;
                    grad[i] -= sign(d) / n;
                }
                if y + 1 < h {
                    let d = image.values[i + w] - image.values[i];
                    loss += d.abs();
                    grad[i + w] += sign(d) / n;
                    grad[i] -= sign(d) / n;
                }
            }
        }
    }
    Ok((loss / n, Tensor::from_parts(image.shape.clone(), grad)))
}

pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape != target.shape {
        return Err(NnetError::Shape { expected: target.shape.clone(), got: pred.shape.clone() });
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::from_parts(pred.shape.clone(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_hand_computation() {
        let mut net = Network::new(vec![1], vec![LayerSpec::Dense { inputs: 1, outputs: 1 }]).unwrap();
        net.set_params(vec![2.0, 1.0]).unwrap();
        let (y, cache) = net.forward(&Tensor::vector(vec![3.0])).unwrap();
        assert_eq!(y.values(), &[7.0]);
        let mut g = net.zero_grads();
        net.backward(&cache, &Tensor::vector(vec![1.0]), &mut g).unwrap();
        assert_eq!(g, vec![3.0, 1.0]);
        let mut g = net.zero_grads();
        let gx = net.backward(&cache, &Tensor::vector(vec![0.0]), &mut g).unwrap();
        assert!(g.iter().chain(gx.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn tanh_is_bounded() {
        let net = Network::seeded(vec![4], vec![LayerSpec::Activation(Activation::Tanh)], 0).unwrap();
        let y = net.infer(&Tensor::vector(vec![-50.0, -0.3, 0.3, 50.0])).unwrap();
        assert!(y.values().iter().all(|v| v.abs() <= 1.0));
        assert!(y.values()[1] > -1.0 && y.values()[1] < 1.0);
    }

    #[test]
    fn pixel_shuffle_index_map() {
        let x = Tensor::new(vec![4, 2, 3], (0..24).map(|v| v as f64).collect()).unwrap();
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), &[1, 4, 6]);
        for c in 0..4 {
            let (i, j) = (c / 2, c % 2);
            for yy in 0..2 {
                for xx in 0..3 {
                    assert_eq!(y.values()[(yy * 2 + i) * 6 + xx * 2 + j], x.values()[c * 6 + yy * 3 + xx]);
                }
            }
        }
    }

    #[test]
    fn shape_errors_and_stale_cache() {
        let mut net = Network::seeded(vec![3], vec![LayerSpec::Dense { inputs: 3, outputs: 2 }], 1).unwrap();
        assert!(matches!(net.forward(&Tensor::vector(vec![1.0])), Err(NnetError::Shape { .. })));
        let (_, cache) = net.forward(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let zero = net.zero_grads();
        let mut state = AdamState::new(net.n_params(), 0.1);
        net.adam_step(&zero, &mut state).unwrap();
        let mut g = net.zero_grads();
        assert_eq!(net.backward(&cache, &Tensor::vector(vec![1.0, 1.0]), &mut g), Err(NnetError::StaleCache));
        assert!(Network::new(vec![3], vec![LayerSpec::Dense { inputs: 4, outputs: 2 }]).is_err());
        assert!(Network::new(vec![1, 4, 4], vec![LayerSpec::PixelShuffle(2)]).is_err());
    }

    #[test]
    fn adam_closed_forms() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 0.001);
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-9);

        let mut p = vec![0.5, -0.5];
        let mut s = AdamState::new(2, 0.01);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        }
        assert_eq!(p, vec![0.5, -0.5]);

        let mut p = vec![0.5];
        let mut s = AdamState::new(1, 0.0);
        adam_step(&mut p, &[3.0], &mut s).unwrap();
        assert_eq!(p, vec![0.5]);
        assert!(adam_step(&mut p, &[1.0, 2.0], &mut s).is_err());
    }

    #[test]
    fn bce_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, _) = loss_bce_smoothed(0.5, true, 0.0, &mut rng).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        for _ in 0..1000 {
            let t = smoothed_target(true, 0.3, &mut rng);
            assert!((0.7..=1.0).contains(&t));
            let t = smoothed_target(false, 0.3, &mut rng);
            assert!((0.0..=0.3).contains(&t));
        }
        assert!(loss_bce_smoothed(1.0, true, 0.0, &mut rng).is_err());
        assert!(loss_bce_smoothed(0.5, true, 0.6, &mut rng).is_err());
        let (p, t, h) = (0.3, 0.8, 1e-6);
        let (_, g) = loss_bce(p, t).unwrap();
        let fd = (loss_bce(p + h, t).unwrap().0 - loss_bce(p - h, t).unwrap().0) / (2.0 * h);
        assert!((g - fd).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(loss_cross_entropy(&[10.0, -10.0], 0).unwrap().0 < 1e-4);
        let (l, _) = loss_cross_entropy(&[0.7; 5], 2).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(loss_cross_entropy(&[0.0, 1.0], 2).is_err());
        let logits = [0.3, -1.2, 2.0, 0.5];
        let (_, g) = loss_cross_entropy(&logits, 1).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut a = logits;
            let mut b = logits;
            a[i] += h;
            b[i] -= h;
            let fd = (loss_cross_entropy(&a, 1).unwrap().0 - loss_cross_entropy(&b, 1).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn tv_and_mse_cases() {
        let c = Tensor::new(vec![3, 3], vec![0.4; 9]).unwrap();
        assert_eq!(loss_total_variation(&c).unwrap().0, 0.0);
        let t = Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap();
        assert_eq!(loss_total_variation(&t).unwrap().0, 1.5);
        assert_eq!(loss_total_variation(&Tensor::new(vec![1, 1], vec![1.0]).unwrap()), Err(NnetError::DegenerateImage));

        let img = Tensor::new(vec![1, 3, 4], vec![0.1, 0.5, -0.3, 0.9, 0.2, -0.7, 0.35, 0.0, 0.8, 0.45, -0.1, 0.6]).unwrap();
        let (_, g) = loss_total_variation(&img).unwrap();
        let h = 1e-7;
        for i in 0..img.len() {
            let mut a = img.clone();
            let mut b = img.clone();
            a.values_mut()[i] += h;
            b.values_mut()[i] -= h;
            let fd = (loss_total_variation(&a).unwrap().0 - loss_total_variation(&b).unwrap().0) / (2.0 * h);
            assert!((fd - g.values()[i]).abs() < 1e-5, "{i}: {fd} vs {}", g.values()[i]);
        }

        let p = Tensor::vector(vec![0.0, 0.0]);
        let (l, g) = loss_mse(&p, &Tensor::vector(vec![2.0, 0.0])).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g.values(), &[-2.0, 0.0]);
        assert_eq!(loss_mse(&p, &p).unwrap().0, 0.0);
        assert!(loss_mse(&p, &Tensor::vector(vec![1.0])).is_err());
    }
}
