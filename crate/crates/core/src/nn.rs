//! A small layered CNN with explicit forward and backward passes.
//!
//! Activations use NHWC layout. Convolution weights are stored as `(F, F, I, O)`
//! row-major tensors, so the `(F, F, I)` slice feeding output channel `o` is the
//! strided column `o` of an `(F·F·I) × O` matrix.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{gemm, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output has the input's spatial size (odd kernels only).
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape3 {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub name: String,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
    /// `(F, F, I, O)` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn dims(&self) -> [usize; 4] {
        [
            self.kernel,
            self.kernel,
            self.in_channels,
            self.out_channels,
        ]
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => (self.kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }

    fn output_shape(&self, input: Shape3) -> Shape3 {
        let p = 2 * self.pad();
        Shape3::new(
            input.height + p + 1 - self.kernel,
            input.width + p + 1 - self.kernel,
            self.out_channels,
        )
    }

    /// Unfolds every receptive field into a row of `(ky, kx, c)` values.
    fn im2col(&self, x: &[T], batch: usize, input: Shape3, out: Shape3) -> Vec<T> {
        let k = self.patch_len();
        let (f, c, pad) = (self.kernel, input.channels, self.pad() as isize);
        let mut cols = vec![T::zero(); batch * out.height * out.width * k];
        let mut row = 0;
        for b in 0..batch {
            let img = &x[b * input.len()..(b + 1) * input.len()];
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let dst = &mut cols[row * k..(row + 1) * k];
                    for ky in 0..f {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= input.height as isize {
                            continue;
                        }
                        for kx in 0..f {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= input.width as isize {
                                continue;
                            }
                            let src = (iy as usize * input.width + ix as usize) * c;
                            let d = (ky * f + kx) * c;
                            dst[d..d + c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], batch: usize, input: Shape3, out: Shape3) -> Vec<T> {
        let k = self.patch_len();
        let (f, c, pad) = (self.kernel, input.channels, self.pad() as isize);
        let mut dx = vec![T::zero(); batch * input.len()];
        let mut row = 0;
        for b in 0..batch {
            let img = &mut dx[b * input.len()..(b + 1) * input.len()];
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let src = &dcols[row * k..(row + 1) * k];
                    for ky in 0..f {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= input.height as isize {
                            continue;
                        }
                        for kx in 0..f {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= input.width as isize {
                                continue;
                            }
                            let dst = (iy as usize * input.width + ix as usize) * c;
                            let s = (ky * f + kx) * c;
                            for ch in 0..c {
                                img[dst + ch] += src[s + ch];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    /// `inputs × outputs` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Dense(Dense<T>),
    Relu,
    /// 2×2 max pooling with stride 2.
    MaxPool,
}

impl<T> Layer<T> {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv(c) => Some(&c.name),
            Layer::Dense(d) => Some(&d.name),
            _ => None,
        }
    }
}

/// A feed-forward classifier mapping images to `classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input: Shape3,
    classes: usize,
    layers: Vec<Layer<T>>,
}

/// The model type used everywhere outside gradient checks.
pub type Classifier = Network<f32>;

/// Per-parameter-layer gradients, in the order of [`Network::param_layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn scale(&mut self, s: T) {
        for g in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

enum Cache<T> {
    Conv { cols: Vec<T>, input: Shape3 },
    Dense { input: Vec<T> },
    Relu { mask: Vec<bool> },
    Pool { argmax: Vec<u32>, input_len: usize },
}

/// Intermediate values retained by [`Network::forward_trace`] for backprop.
pub struct Trace<T> {
    batch: usize,
    caches: Vec<Cache<T>>,
    shapes: Vec<Shape3>,
    pub logits: Vec<T>,
}

impl<T: Real> Network<T> {
    /// Builds a network and checks that layer shapes chain up to `classes`
    /// logits.
    pub fn new(input: Shape3, classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let net = Self {
            input,
            classes,
            layers,
        };
        let mut shape = input;
        for layer in &net.layers {
            shape = net.layer_output(layer, shape)?;
        }
        if shape.len() != classes {
            return Err(Error::Precondition(format!(
                "network emits {} values for {classes} classes",
                shape.len()
            )));
        }
        let mut names: Vec<&str> = net.layers.iter().filter_map(Layer::name).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Precondition("duplicate layer names".into()));
        }
        Ok(net)
    }

    fn layer_output(&self, layer: &Layer<T>, shape: Shape3) -> Result<Shape3> {
        let mismatch = |name: &str, expected: Vec<usize>| Error::ShapeMismatch {
            layer: name.to_string(),
            expected,
            actual: vec![shape.height, shape.width, shape.channels],
        };
        Ok(match layer {
            Layer::Conv(c) => {
                if c.in_channels != shape.channels
                    || c.weight.len() != c.patch_len() * c.out_channels
                    || c.bias.len() != c.out_channels
                {
                    return Err(mismatch(&c.name, vec![c.in_channels]));
                }
                if c.padding == Padding::Same && c.kernel % 2 == 0 {
                    return Err(Error::Precondition(
                        "same padding needs an odd kernel".into(),
                    ));
                }
                if c.padding == Padding::Valid
                    && (shape.height < c.kernel || shape.width < c.kernel)
                {
                    return Err(mismatch(&c.name, vec![c.kernel, c.kernel]));
                }
                c.output_shape(shape)
            }
            Layer::Dense(d) => {
                if d.inputs != shape.len()
                    || d.weight.len() != d.inputs * d.outputs
                    || d.bias.len() != d.outputs
                {
                    return Err(mismatch(&d.name, vec![d.inputs]));
                }
                Shape3::new(1, 1, d.outputs)
            }
            Layer::Relu => shape,
            Layer::MaxPool => Shape3::new(shape.height / 2, shape.width / 2, shape.channels),
        })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Names of the convolutional layers, in order.
    pub fn conv_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn conv(&self, name: &str) -> Result<&Conv2d<T>> {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Conv(c) if c.name == name => Some(c),
                _ => None,
            })
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn conv_mut(&mut self, name: &str) -> Result<&mut Conv2d<T>> {
        self.layers
            .iter_mut()
            .find_map(|l| match l {
                Layer::Conv(c) if c.name == name => Some(c),
                _ => None,
            })
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Replaces a convolution's `(F, F, I, O)` weights; the length must not
    /// change.
    pub fn set_conv_weights(&mut self, name: &str, weights: &[T]) -> Result<()> {
        let conv = self.conv_mut(name)?;
        if conv.weight.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                layer: name.to_string(),
                expected: conv.dims().to_vec(),
                actual: vec![weights.len()],
            });
        }
        conv.weight.copy_from_slice(weights);
        Ok(())
    }

    /// Indices into `layers()` of every layer that owns parameters.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(_) | Layer::Dense(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Position of the named layer among the parameter layers.
    pub fn param_slot(&self, name: &str) -> Result<usize> {
        self.param_layers()
            .iter()
            .position(|&i| self.layers[i].name() == Some(name))
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// `(weight, bias)` slices in parameter-layer order.
    pub fn params_mut(&mut self) -> Vec<(&mut [T], &mut [T])> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some((&mut c.weight[..], &mut c.bias[..])),
                Layer::Dense(d) => Some((&mut d.weight[..], &mut d.bias[..])),
                _ => None,
            })
            .collect()
    }

    pub fn params(&self) -> Vec<(&[T], &[T])> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some((&c.weight[..], &c.bias[..])),
                Layer::Dense(d) => Some((&d.weight[..], &d.bias[..])),
                _ => None,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        let params = self.params();
        Gradients {
            weights: params
                .iter()
                .map(|(w, _)| vec![T::zero(); w.len()])
                .collect(),
            biases: params
                .iter()
                .map(|(_, b)| vec![T::zero(); b.len()])
                .collect(),
        }
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    name: c.name.clone(),
                    kernel: c.kernel,
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    padding: c.padding,
                    weight: conv(&c.weight),
                    bias: conv(&c.bias),
                }),
                Layer::Dense(d) => Layer::Dense(Dense {
                    name: d.name.clone(),
                    inputs: d.inputs,
                    outputs: d.outputs,
                    weight: conv(&d.weight),
                    bias: conv(&d.bias),
                }),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool => Layer::MaxPool,
            })
            .collect();
        Network {
            input: self.input,
            classes: self.classes,
            layers,
        }
    }

    fn check_input(&self, x: &[T], batch: usize) {
        assert_eq!(
            x.len(),
            batch * self.input.len(),
            "input length does not match batch × image size"
        );
    }

    /// Logits `Z(x)` for a batch, `batch × classes` row-major.
    pub fn logits(&self, x: &[T], batch: usize) -> Vec<T> {
        self.check_input(x, batch);
        let mut act = x.to_vec();
        let mut shape = self.input;
        for layer in &self.layers {
            let out = self
                .layer_output(layer, shape)
                .expect("validated at construction");
            act = match layer {
                Layer::Conv(c) => {
                    let cols = c.im2col(&act, batch, shape, out);
                    conv_affine(c, &cols, batch * out.height * out.width)
                }
                Layer::Dense(d) => dense_affine(d, &act, batch),
                Layer::Relu => {
                    act.iter_mut().for_each(|v| *v = v.max(T::zero()));
                    act
                }
                Layer::MaxPool => max_pool(&act, batch, shape).0,
            };
            shape = out;
        }
        act
    }

    /// Softmax confidences `P(x)`, `batch × classes` row-major.
    pub fn probabilities(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut z = self.logits(x, batch);
        softmax_rows(&mut z, self.classes);
        z
    }

    /// Top-1 class per item.
    pub fn predict(&self, x: &[T], batch: usize) -> Vec<usize> {
        self.logits(x, batch)
            .chunks(self.classes)
            .map(argmax)
            .collect()
    }

    pub fn forward_trace(&self, x: &[T], batch: usize) -> Trace<T> {
        self.check_input(x, batch);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut act = x.to_vec();
        let mut shape = self.input;
        shapes.push(shape);
        for layer in &self.layers {
            let out = self
                .layer_output(layer, shape)
                .expect("validated at construction");
            act = match layer {
                Layer::Conv(c) => {
                    let cols = c.im2col(&act, batch, shape, out);
                    let y = conv_affine(c, &cols, batch * out.height * out.width);
                    caches.push(Cache::Conv { cols, input: shape });
                    y
                }
                Layer::Dense(d) => {
                    let y = dense_affine(d, &act, batch);
                    caches.push(Cache::Dense { input: act });
                    y
                }
                Layer::Relu => {
                    let mask: Vec<bool> = act.iter().map(|v| *v > T::zero()).collect();
                    act.iter_mut().for_each(|v| *v = v.max(T::zero()));
                    caches.push(Cache::Relu { mask });
                    act
                }
                Layer::MaxPool => {
                    let (y, argmax) = max_pool(&act, batch, shape);
                    caches.push(Cache::Pool {
                        argmax,
                        input_len: act.len(),
                    });
                    y
                }
            };
            shape = out;
            shapes.push(shape);
        }
        Trace {
            batch,
            caches,
            shapes,
            logits: act,
        }
    }

    /// Backpropagates `dlogits` (∂loss/∂Z, `batch × classes`).
    ///
    /// Parameter gradients are accumulated into `grads` when given; the
    /// gradient with respect to the input is returned when `want_input`.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        dlogits: &[T],
        mut grads: Option<&mut Gradients<T>>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        assert_eq!(dlogits.len(), trace.logits.len());
        let batch = trace.batch;
        let mut slot = self.param_layers().len();
        let mut delta = dlogits.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let first = li == 0;
            let need_dx = want_input || !first;
            let out = trace.shapes[li + 1];
            delta = match (layer, &trace.caches[li]) {
                (Layer::Conv(c), Cache::Conv { cols, input }) => {
                    slot -= 1;
                    let rows = batch * out.height * out.width;
                    let k = c.patch_len();
                    let o = c.out_channels;
                    if let Some(g) = grads.as_deref_mut() {
                        gemm(
                            k,
                            rows,
                            o,
                            cols,
                            true,
                            &delta,
                            false,
                            &mut g.weights[slot],
                            true,
                        );
                        let gb = &mut g.biases[slot];
                        for r in delta.chunks(o) {
                            for (b, d) in gb.iter_mut().zip(r) {
                                *b += *d;
                            }
                        }
                    }
                    if need_dx {
                        let mut dcols = vec![T::zero(); rows * k];
                        gemm(
                            rows, o, k, &delta, false, &c.weight, true, &mut dcols, false,
                        );
                        c.col2im(&dcols, batch, *input, out)
                    } else {
                        Vec::new()
                    }
                }
                (Layer::Dense(d), Cache::Dense { input }) => {
                    slot -= 1;
                    if let Some(g) = grads.as_deref_mut() {
                        gemm(
                            d.inputs,
                            batch,
                            d.outputs,
                            input,
                            true,
                            &delta,
                            false,
                            &mut g.weights[slot],
                            true,
                        );
                        let gb = &mut g.biases[slot];
                        for r in delta.chunks(d.outputs) {
                            for (b, v) in gb.iter_mut().zip(r) {
                                *b += *v;
                            }
                        }
                    }
                    if need_dx {
                        let mut dx = vec![T::zero(); batch * d.inputs];
                        gemm(
                            batch, d.outputs, d.inputs, &delta, false, &d.weight, true, &mut dx,
                            false,
                        );
                        dx
                    } else {
                        Vec::new()
                    }
                }
                (Layer::Relu, Cache::Relu { mask }) => {
                    for (v, &m) in delta.iter_mut().zip(mask) {
                        if !m {
                            *v = T::zero();
                        }
                    }
                    delta
                }
                (Layer::MaxPool, Cache::Pool { argmax, input_len }) => {
                    let mut dx = vec![T::zero(); *input_len];
                    for (&src, &g) in argmax.iter().zip(&delta) {
                        dx[src as usize] += g;
                    }
                    dx
                }
                _ => unreachable!("trace does not belong to this network"),
            };
            if first && !want_input {
                return None;
            }
        }
        Some(delta)
    }
}

fn conv_affine<T: Real>(c: &Conv2d<T>, cols: &[T], rows: usize) -> Vec<T> {
    let o = c.out_channels;
    let mut y = Vec::with_capacity(rows * o);
    for _ in 0..rows {
        y.extend_from_slice(&c.bias);
    }
    gemm(
        rows,
        c.patch_len(),
        o,
        cols,
        false,
        &c.weight,
        false,
        &mut y,
        true,
    );
    y
}

fn dense_affine<T: Real>(d: &Dense<T>, x: &[T], batch: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * d.outputs);
    for _ in 0..batch {
        y.extend_from_slice(&d.bias);
    }
    gemm(
        batch, d.inputs, d.outputs, x, false, &d.weight, false, &mut y, true,
    );
    y
}

fn max_pool<T: Real>(x: &[T], batch: usize, s: Shape3) -> (Vec<T>, Vec<u32>) {
    let (oh, ow, c) = (s.height / 2, s.width / 2, s.channels);
    let mut y = Vec::with_capacity(batch * oh * ow * c);
    let mut idx = Vec::with_capacity(batch * oh * ow * c);
    for b in 0..batch {
        let base = b * s.len();
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = base + ((2 * oy) * s.width + 2 * ox) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + ((2 * oy + dy) * s.width + 2 * ox + dx) * c + ch;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    y.push(x[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (y, idx)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// In-place, numerically stable softmax over consecutive rows of `classes`.
pub fn softmax_rows<T: Real>(z: &mut [T], classes: usize) {
    for row in z.chunks_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Mean categorical cross-entropy and its gradient with respect to logits.
pub fn cross_entropy<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let batch = labels.len();
    let mut p = logits.to_vec();
    softmax_rows(&mut p, classes);
    let inv = T::one() / T::of(batch as f64);
    let mut loss = 0.0;
    for (row, &y) in p.chunks_mut(classes).zip(labels) {
        loss -= row[y].as_f64().max(f64::MIN_POSITIVE).ln();
        row[y] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    (loss / batch as f64, p)
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

fn conv_layer<R: Rng>(
    rng: &mut R,
    name: &str,
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    padding: Padding,
) -> Layer<f32> {
    let k = kernel * kernel;
    Layer::Conv(Conv2d {
        name: name.to_string(),
        kernel,
        in_channels,
        out_channels,
        padding,
        weight: glorot(
            rng,
            k * in_channels,
            k * out_channels,
            k * in_channels * out_channels,
        ),
        bias: vec![0.0; out_channels],
    })
}

fn dense_layer<R: Rng>(rng: &mut R, name: &str, inputs: usize, outputs: usize) -> Layer<f32> {
    Layer::Dense(Dense {
        name: name.to_string(),
        inputs,
        outputs,
        weight: glorot(rng, inputs, outputs, inputs * outputs),
        bias: vec![0.0; outputs],
    })
}

/// LeNet-5 for 28×28 grayscale input.
///
/// `conv 1` is `(5,5,1,6)` with same padding and `conv 2` is `(5,5,6,16)`,
/// each followed by ReLU and 2×2 max pooling, then dense layers
/// 400 → 120 → 84 → K. Weights are Glorot-uniform under `seed`.
pub fn build_lenet5(classes: usize, seed: u64) -> Result<Classifier> {
    if classes < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv_layer(&mut rng, "conv 1", 5, 1, 6, Padding::Same),
        Layer::Relu,
        Layer::MaxPool,
        conv_layer(&mut rng, "conv 2", 5, 6, 16, Padding::Valid),
        Layer::Relu,
        Layer::MaxPool,
        dense_layer(&mut rng, "dense 1", 5 * 5 * 16, 120),
        Layer::Relu,
        dense_layer(&mut rng, "dense 2", 120, 84),
        Layer::Relu,
        dense_layer(&mut rng, "dense 3", 84, classes),
    ];
    Network::new(Shape3::new(28, 28, 1), classes, layers)
}

/// Small CNN for 32×32 RGB input, a desk-scale stand-in for a wide residual
/// network.
///
/// | layer   | shape          |
/// |---------|----------------|
/// | conv 1  | (3, 3, 3, 16)  |
/// | conv 2  | (3, 3, 16, 32) |
/// | conv 3  | (3, 3, 32, 64) |
/// | dense 1 | 1024 → 128     |
/// | dense 2 | 128 → K        |
///
/// `conv 2` is the default watermark layer.
pub fn build_small_cifar_cnn(classes: usize, seed: u64) -> Result<Classifier> {
    if classes < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv_layer(&mut rng, "conv 1", 3, 3, 16, Padding::Same),
        Layer::Relu,
        conv_layer(&mut rng, "conv 2", 3, 16, 32, Padding::Same),
        Layer::Relu,
        Layer::MaxPool,
        conv_layer(&mut rng, "conv 3", 3, 32, 64, Padding::Same),
        Layer::Relu,
        Layer::MaxPool,
        Layer::MaxPool,
        dense_layer(&mut rng, "dense 1", 4 * 4 * 64, 128),
        Layer::Relu,
        dense_layer(&mut rng, "dense 2", 128, classes),
    ];
    Network::new(Shape3::new(32, 32, 3), classes, layers)
}

/// Default watermark target layer for both built-in architectures.
pub const DEFAULT_WATERMARK_LAYER: &str = "conv 2";
