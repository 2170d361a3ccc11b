//! The fixed layer vocabulary and a sequential container with hand-written
//! backward passes.
//!
//! All tensors are single samples: convolution, pooling and upsampling take
//! `[C, H, W]`, fully-connected layers flatten whatever they receive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Sigmoid,
    /// Nearest-neighbour 2x spatial upsampling.
    Upsample2x,
}

impl LayerKind {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerKind::Conv2d { in_channels, out_channels, kernel_h: kernel, kernel_w: kernel, stride, padding }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerKind::Linear { in_features, out_features }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Upsample2x => "upsample2x",
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                Some((vec![out_channels, in_channels, kernel_h, kernel_w], vec![out_channels]))
            }
            LayerKind::Linear { in_features, out_features } => {
                Some((vec![out_features, in_features], vec![out_features]))
            }
            _ => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerKind::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                (in_channels * kernel_h * kernel_w, out_channels * kernel_h * kernel_w)
            }
            LayerKind::Linear { in_features, out_features } => (in_features, out_features),
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer state kept by a traced forward pass.
#[derive(Debug, Clone)]
enum Cache {
    Conv { cols: Vec<f64>, in_shape: [usize; 3], out_hw: (usize, usize) },
    Linear { input: Vec<f64>, in_shape: Vec<usize> },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<usize>, in_shape: [usize; 3] },
    Sigmoid { output: Vec<f64> },
    Upsample { in_shape: [usize; 3] },
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
}

impl Trace {
    /// Appends the piecewise-linear activation pattern (ReLU signs, max-pool
    /// winners). Two forward passes with equal patterns lie on the same smooth
    /// piece of the network function.
    pub fn activation_pattern(&self, out: &mut Vec<u8>) {
        for cache in &self.caches {
            match cache {
                Cache::Relu { mask } => out.extend(mask.iter().map(|&m| m as u8)),
                Cache::MaxPool { argmax, .. } => {
                    for &a in argmax {
                        out.extend_from_slice(&(a as u32).to_le_bytes());
                    }
                }
                _ => {}
            }
        }
    }
}

impl Layer {
    /// Creates a layer with weights drawn uniformly from
    /// `±sqrt(6 / (fan_in + fan_out))` and zero bias.
    pub fn new<R: Rng>(kind: LayerKind, rng: &mut R) -> Self {
        match kind.param_shapes() {
            Some((wshape, bshape)) => {
                let (fan_in, fan_out) = kind.fans();
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = wshape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                Layer {
                    kind,
                    weight: Tensor::new(wshape, data).expect("consistent weight shape"),
                    bias: Tensor::zeros(bshape),
                }
            }
            None => Layer { kind, weight: Tensor::empty(), bias: Tensor::empty() },
        }
    }

    /// Layer with all parameters set to zero.
    pub fn zeroed(kind: LayerKind) -> Self {
        match kind.param_shapes() {
            Some((wshape, bshape)) => Layer { kind, weight: Tensor::zeros(wshape), bias: Tensor::zeros(bshape) },
            None => Layer { kind, weight: Tensor::empty(), bias: Tensor::empty() },
        }
    }

    pub fn has_params(&self) -> bool {
        !self.weight.is_empty()
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self.kind {
            LayerKind::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                let [c, h, w] = chw(input)?;
                if c != in_channels {
                    return Err(format!("conv2d expects {in_channels} input channels, got {c}"));
                }
                if h + 2 * padding < kernel_h || w + 2 * padding < kernel_w {
                    return Err(format!("input {h}x{w} smaller than kernel {kernel_h}x{kernel_w}"));
                }
                let ho = (h + 2 * padding - kernel_h) / stride + 1;
                let wo = (w + 2 * padding - kernel_w) / stride + 1;
                Ok(vec![out_channels, ho, wo])
            }
            LayerKind::Linear { in_features, out_features } => {
                let n: usize = input.iter().product();
                if n != in_features {
                    return Err(format!("linear expects {in_features} inputs, got {n} ({input:?})"));
                }
                Ok(vec![out_features])
            }
            LayerKind::Relu | LayerKind::Sigmoid => Ok(input.to_vec()),
            LayerKind::MaxPool { kernel, stride } => {
                let [c, h, w] = chw(input)?;
                if h < kernel || w < kernel {
                    return Err(format!("input {h}x{w} smaller than pool window {kernel}"));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerKind::Upsample2x => {
                let [c, h, w] = chw(input)?;
                Ok(vec![c, 2 * h, 2 * w])
            }
        }
    }

    fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>), String> {
        let out_shape = self.output_shape(x.shape())?;
        let input = x.data();
        match self.kind {
            LayerKind::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                let [_, h, w] = chw(x.shape())?;
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let k = in_channels * kernel_h * kernel_w;
                let n = ho * wo;
                let cols = im2col(input, [in_channels, h, w], kernel_h, kernel_w, stride, padding, ho, wo);
                let mut out = vec![0.0; out_channels * n];
                for (o, row) in out.chunks_mut(n).enumerate() {
                    row.iter_mut().for_each(|v| *v = self.bias.data()[o]);
                }
                gemm::matmul(out_channels, k, n, self.weight.data(), false, &cols, false, &mut out, 1.0);
                let cache = keep.then_some(Cache::Conv { cols, in_shape: [in_channels, h, w], out_hw: (ho, wo) });
                Ok((Tensor::new(out_shape, out).map_err(|e| e.to_string())?, cache))
            }
            LayerKind::Linear { in_features, out_features } => {
                let wdata = self.weight.data();
                let out: Vec<f64> = (0..out_features)
                    .map(|o| {
                        let row = &wdata[o * in_features..(o + 1) * in_features];
                        let mut acc = self.bias.data()[o];
                        for (wi, xi) in row.iter().zip(input) {
                            acc += wi * xi;
                        }
                        acc
                    })
                    .collect();
                let cache = keep.then(|| Cache::Linear { input: input.to_vec(), in_shape: x.shape().to_vec() });
                Ok((Tensor::new(out_shape, out).map_err(|e| e.to_string())?, cache))
            }
            LayerKind::Relu => {
                let out: Vec<f64> = input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                let cache = keep.then(|| Cache::Relu { mask: input.iter().map(|&v| v > 0.0).collect() });
                Ok((Tensor::new(out_shape, out).map_err(|e| e.to_string())?, cache))
            }
            LayerKind::Sigmoid => {
                let out: Vec<f64> = input.iter().map(|&v| sigmoid(v)).collect();
                let cache = keep.then(|| Cache::Sigmoid { output: out.clone() });
                Ok((Tensor::new(out_shape, out).map_err(|e| e.to_string())?, cache))
            }
            LayerKind::MaxPool { kernel, stride } => {
                let [c, h, w] = chw(x.shape())?;
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let mut out = Vec::with_capacity(c * ho * wo);
                let mut argmax = Vec::with_capacity(c * ho * wo);
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                                    if input[idx] > best {
                                        best = input[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(best_idx);
                        }
                    }
                }
                let cache = keep.then_some(Cache::MaxPool { argmax, in_shape: [c, h, w] });
                Ok((Tensor::new(out_shape, out).map_err(|e| e.to_string())?, cache))
            }
            LayerKind::Upsample2x => {
                let [c, h, w] = chw(x.shape())?;
                let mut out = vec![0.0; c * 4 * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            out[(ch * 2 * h + y) * 2 * w + xx] = input[(ch * h + y / 2) * w + xx / 2];
                        }
                    }
                }
                let cache = keep.then_some(Cache::Upsample { in_shape: [c, h, w] });
                Ok((Tensor::new(out_shape, out).map_err(|e| e.to_string())?, cache))
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient when asked.
    fn backward(&mut self, cache: &Cache, grad_out: &[f64], need_input: bool) -> Option<Vec<f64>> {
        match (self.kind, cache) {
            (
                LayerKind::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding },
                Cache::Conv { cols, in_shape, out_hw },
            ) => {
                let k = in_channels * kernel_h * kernel_w;
                let n = out_hw.0 * out_hw.1;
                {
                    let bgrad = self.bias.grad_mut();
                    for (o, row) in grad_out.chunks(n).enumerate() {
                        let mut acc = 0.0;
                        for v in row {
                            acc += v;
                        }
                        bgrad[o] += acc;
                    }
                }
                gemm::matmul(out_channels, n, k, grad_out, false, cols, true, self.weight.grad_mut(), 1.0);
                need_input.then(|| {
                    let mut dcols = vec![0.0; k * n];
                    gemm::matmul(k, out_channels, n, self.weight.data(), true, grad_out, false, &mut dcols, 0.0);
                    col2im(&dcols, *in_shape, kernel_h, kernel_w, stride, padding, out_hw.0, out_hw.1)
                })
            }
            (LayerKind::Linear { in_features, out_features }, Cache::Linear { input, .. }) => {
                {
                    let bgrad = self.bias.grad_mut();
                    for (b, g) in bgrad.iter_mut().zip(grad_out) {
                        *b += g;
                    }
                }
                {
                    let wgrad = self.weight.grad_mut();
                    for o in 0..out_features {
                        let g = grad_out[o];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &mut wgrad[o * in_features..(o + 1) * in_features];
                        for (wg, xi) in row.iter_mut().zip(input) {
                            *wg += g * xi;
                        }
                    }
                }
                need_input.then(|| {
                    let wdata = self.weight.data();
                    let mut dx = vec![0.0; in_features];
                    for o in 0..out_features {
                        let g = grad_out[o];
                        let row = &wdata[o * in_features..(o + 1) * in_features];
                        for (d, wi) in dx.iter_mut().zip(row) {
                            *d += g * wi;
                        }
                    }
                    dx
                })
            }
            (LayerKind::Relu, Cache::Relu { mask }) => {
                need_input.then(|| grad_out.iter().zip(mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect())
            }
            (LayerKind::Sigmoid, Cache::Sigmoid { output }) => {
                need_input.then(|| grad_out.iter().zip(output).map(|(&g, &y)| g * y * (1.0 - y)).collect())
            }
            (LayerKind::MaxPool { .. }, Cache::MaxPool { argmax, in_shape }) => need_input.then(|| {
                let mut dx = vec![0.0; in_shape.iter().product()];
                for (&idx, &g) in argmax.iter().zip(grad_out) {
                    dx[idx] += g;
                }
                dx
            }),
            (LayerKind::Upsample2x, Cache::Upsample { in_shape }) => need_input.then(|| {
                let [c, h, w] = *in_shape;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dx[(ch * h + y / 2) * w + x / 2] += grad_out[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                dx
            }),
            _ => unreachable!("cache kind always matches the layer that produced it"),
        }
    }
}

/// A chain of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Builds and initializes a network from a list of kinds.
    pub fn from_kinds<R: Rng>(kinds: &[LayerKind], rng: &mut R) -> Self {
        Self { layers: kinds.iter().map(|&k| Layer::new(k, rng)).collect() }
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    /// Forward pass without recording anything for backward.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur, false).map_err(|message| NnError::LayerShape { index, message })?.0;
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Trace), NnError> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer.forward(&cur, true).map_err(|message| NnError::LayerShape { index, message })?;
            caches.push(cache.expect("traced forward keeps cache"));
            cur = out;
        }
        Ok((cur, Trace { caches }))
    }

    /// Accumulates parameter gradients for the traced forward pass. Returns
    /// the gradient with respect to the network input when `need_input` is set.
    pub fn backward(&mut self, trace: &Trace, grad_out: &Tensor, need_input: bool) -> Result<Option<Tensor>, NnError> {
        if trace.caches.len() != self.layers.len() {
            return Err(NnError::State(format!(
                "trace has {} layers, network has {}",
                trace.caches.len(),
                self.layers.len()
            )));
        }
        let mut grad = grad_out.data().to_vec();
        let first_needed = if need_input { 0 } else { self.first_param_layer().unwrap_or(self.layers.len()) };
        for (index, (layer, cache)) in self.layers.iter_mut().zip(&trace.caches).enumerate().rev() {
            if index < first_needed {
                break;
            }
            let want = index > first_needed || (index == first_needed && need_input);
            match layer.backward(cache, &grad, want) {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        if need_input {
            let shape = trace_input_shape(&trace.caches[0]).unwrap_or_else(|| vec![grad.len()]);
            Ok(Some(Tensor::new(shape, grad)?))
        } else {
            Ok(None)
        }
    }

    fn first_param_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.has_params())
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.weight.zero_grad();
            l.bias.zero_grad();
        }
    }

    /// Parameter blocks in layer order, weight before bias.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.has_params() {
                out.push((format!("{i}.weight"), &l.weight));
                out.push((format!("{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if l.has_params() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

fn trace_input_shape(cache: &Cache) -> Option<Vec<usize>> {
    match cache {
        Cache::Conv { in_shape, .. } | Cache::MaxPool { in_shape, .. } | Cache::Upsample { in_shape } => {
            Some(in_shape.to_vec())
        }
        Cache::Linear { in_shape, .. } => Some(in_shape.clone()),
        _ => None,
    }
}

/// Stateful wrapper around [`Sequential`] for the common single-pass case.
#[derive(Debug, Clone)]
pub struct Recorder {
    pub net: Sequential,
    last: Option<(Trace, Vec<usize>)>,
}

impl Recorder {
    pub fn new(net: Sequential) -> Self {
        Self { net, last: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let (out, trace) = self.net.forward(x)?;
        self.last = Some((trace, x.shape().to_vec()));
        Ok(out)
    }

    /// Consumes the recorded pass; a second call without a new forward fails.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let (trace, in_shape) =
            self.last.take().ok_or_else(|| NnError::State("backward called before forward".into()))?;
        let g = self.net.backward(&trace, grad_out, true)?.expect("input gradient requested");
        g.reshape(in_shape)
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

fn chw(shape: &[usize]) -> Result<[usize; 3], String> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("expected [C, H, W] input, got {shape:?}")),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    [c, h, w]: [usize; 3],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut cols = vec![0.0; c * kh * kw * n];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    [c, h, w]: [usize; 3],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_identity_1x1(channels: usize) -> Layer {
        let kind = LayerKind::conv(channels, channels, 1, 1, 0);
        let mut layer = Layer::zeroed(kind);
        for c in 0..channels {
            layer.weight.data_mut()[c * channels + c] = 1.0;
        }
        layer
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = Sequential::new(vec![Layer::zeroed(LayerKind::Relu)]);
        let out = net.infer(&Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn identity_1x1_conv_passes_input_through() {
        let net = Sequential::new(vec![conv_identity_1x1(3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(vec![3, 4, 5], (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let mut layer = Layer::zeroed(LayerKind::conv(1, 1, 3, 1, 1));
        layer.weight.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let out = Sequential::new(vec![layer]).infer(&Tensor::filled(vec![1, 5, 5], 1.0)).unwrap();
        assert_eq!(out.shape(), &[1, 5, 5]);
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(out.at3(0, y, x), 9.0);
            }
        }
        assert_eq!(out.at3(0, 0, 0), 4.0);
        assert_eq!(out.at3(0, 0, 2), 6.0);
    }

    #[test]
    fn shape_error_names_layer_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net =
            Sequential::from_kinds(&[LayerKind::linear(4, 3), LayerKind::Relu, LayerKind::linear(5, 1)], &mut rng);
        match net.infer(&Tensor::zeros(vec![4])) {
            Err(NnError::LayerShape { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_gradient_is_input() {
        // loss = w * x with x = 3
        let mut layer = Layer::zeroed(LayerKind::linear(1, 1));
        layer.weight.data_mut()[0] = 0.7;
        let mut rec = Recorder::new(Sequential::new(vec![layer]));
        rec.forward(&Tensor::scalar(3.0)).unwrap();
        rec.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(rec.net.layers[0].weight.grad().unwrap(), &[3.0]);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut rec = Recorder::new(Sequential::new(vec![Layer::zeroed(LayerKind::Relu)]));
        assert!(matches!(rec.backward(&Tensor::scalar(1.0)), Err(NnError::State(_))));
        rec.forward(&Tensor::scalar(1.0)).unwrap();
        rec.backward(&Tensor::scalar(1.0)).unwrap();
        assert!(matches!(rec.backward(&Tensor::scalar(1.0)), Err(NnError::State(_))));
    }

    #[test]
    fn max_pool_and_upsample_shapes() {
        let net = Sequential::new(vec![
            Layer::zeroed(LayerKind::MaxPool { kernel: 2, stride: 2 }),
            Layer::zeroed(LayerKind::Upsample2x),
        ]);
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let out = net.infer(&x).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        assert_eq!(out.at3(0, 0, 0), 5.0);
        assert_eq!(out.at3(0, 3, 3), 15.0);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let kinds = [LayerKind::conv(2, 4, 3, 2, 1), LayerKind::Relu, LayerKind::linear(4 * 4 * 4, 3)];
        let na = Sequential::from_kinds(&kinds, &mut a);
        let nb = Sequential::from_kinds(&kinds, &mut b);
        assert_eq!(na, nb);
        let x = Tensor::filled(vec![2, 8, 8], 0.25);
        assert_eq!(na.infer(&x).unwrap().data(), nb.infer(&x).unwrap().data());
    }
}
