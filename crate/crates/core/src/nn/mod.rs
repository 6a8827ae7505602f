//! Feed-forward engine: dense, conv2d (stride 1, "same" padding), 2x2 max
//! pooling, ReLU and a softmax cross-entropy head, with exact analytic
//! backpropagation.

pub mod ops;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a layer computes. Parameter-free kinds carry empty weight tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense { in_dim: usize, out_dim: usize },
    /// Stride-1 convolution with "same" zero padding; `kernel` must be odd.
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize },
    /// 2x2 max pooling with stride 2.
    MaxPool,
    Relu,
    /// Marker for the loss head. Identity in `forward`; `loss_and_grad`
    /// applies softmax cross-entropy on the logits it produces.
    SoftmaxCe,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::SoftmaxCe => "softmax-ce",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }
}

/// One layer: weights, optional bias, and gradient buffers of the same
/// shapes. `fan_in`/`fan_out` drive initialization scale.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub grad_weights: Tensor,
    pub grad_bias: Option<Tensor>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerParams {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerParams {
            kind: LayerKind::Dense { in_dim, out_dim },
            weights: Tensor::zeros(vec![in_dim, out_dim]),
            bias: Some(Tensor::zeros(vec![out_dim])),
            grad_weights: Tensor::zeros(vec![in_dim, out_dim]),
            grad_bias: Some(Tensor::zeros(vec![out_dim])),
            fan_in: in_dim,
            fan_out: out_dim,
        }
    }

    pub fn conv2d(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "conv kernel must be odd for same padding");
        LayerParams {
            kind: LayerKind::Conv2d { in_ch, out_ch, kernel },
            weights: Tensor::zeros(vec![out_ch, in_ch, kernel, kernel]),
            bias: Some(Tensor::zeros(vec![out_ch])),
            grad_weights: Tensor::zeros(vec![out_ch, in_ch, kernel, kernel]),
            grad_bias: Some(Tensor::zeros(vec![out_ch])),
            // fan_in counts the full receptive field; fan_out the filters.
            fan_in: in_ch * kernel * kernel,
            fan_out: out_ch,
        }
    }

    pub fn max_pool() -> Self {
        Self::parameter_free(LayerKind::MaxPool)
    }

    pub fn relu() -> Self {
        Self::parameter_free(LayerKind::Relu)
    }

    pub fn softmax_ce() -> Self {
        Self::parameter_free(LayerKind::SoftmaxCe)
    }

    fn parameter_free(kind: LayerKind) -> Self {
        LayerParams {
            kind,
            weights: Tensor::empty(),
            bias: None,
            grad_weights: Tensor::empty(),
            grad_bias: None,
            fan_in: 0,
            fan_out: 0,
        }
    }
}

/// An ordered stack of layers.
#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<LayerParams>,
}

impl Model {
    pub fn new(layers: Vec<LayerParams>) -> Self {
        Model { layers }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Indices of layers that carry weights.
    pub fn parameterized_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    /// Class count of the final dense layer, if any.
    pub fn output_classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l.kind {
            LayerKind::Dense { out_dim, .. } => Some(out_dim),
            _ => None,
        })
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.grad_weights.fill(0.0);
            if let Some(gb) = &mut layer.grad_bias {
                gb.fill(0.0);
            }
        }
    }
}

/// Declarative architecture description; `build` validates that adjacent
/// layer shapes compose and initializes weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Input as (channels, height, width). Use (1, 1, d) for flat inputs.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { out_ch: usize, kernel: usize },
    MaxPool,
    Relu,
    Dense { out_dim: usize },
    SoftmaxCe,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    fn flat_len(self) -> usize {
        match self {
            Shape::Spatial(c, h, w) => c * h * w,
            Shape::Flat(d) => d,
        }
    }
}

impl ArchSpec {
    /// The 2-conv-block CNN used by the desk-scale experiments
    /// (~0.27M parameters on 3x32x32 inputs).
    pub fn small_cnn() -> Self {
        ArchSpec {
            input: (3, 32, 32),
            layers: vec![
                LayerSpec::Conv2d { out_ch: 16, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Conv2d { out_ch: 32, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Dense { out_dim: 128 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_dim: 10 },
                LayerSpec::SoftmaxCe,
            ],
        }
    }

    /// Validates shape composition and builds the model with seeded
    /// scaled-uniform initialization: U(-r, r), r = sqrt(6 / (fan_in + fan_out)).
    pub fn build(&self, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cur = Shape::Spatial(self.input.0, self.input.1, self.input.2);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv2d { out_ch, kernel } => {
                    let (c, h, w) = match cur {
                        Shape::Spatial(c, h, w) => (c, h, w),
                        Shape::Flat(_) => {
                            return Err(Error::Config(format!(
                                "layer {i}: conv2d requires a spatial input"
                            )))
                        }
                    };
                    if kernel % 2 == 0 || kernel > h.min(w) {
                        return Err(Error::Config(format!(
                            "layer {i}: kernel {kernel} invalid for {h}x{w} input"
                        )));
                    }
                    cur = Shape::Spatial(out_ch, h, w);
                    LayerParams::conv2d(c, out_ch, kernel)
                }
                LayerSpec::MaxPool => {
                    match cur {
                        Shape::Spatial(c, h, w) if h >= 2 && w >= 2 => {
                            cur = Shape::Spatial(c, h / 2, w / 2);
                        }
                        _ => {
                            return Err(Error::Config(format!(
                                "layer {i}: maxpool requires a spatial input of at least 2x2"
                            )))
                        }
                    }
                    LayerParams::max_pool()
                }
                LayerSpec::Relu => LayerParams::relu(),
                LayerSpec::Dense { out_dim } => {
                    let in_dim = cur.flat_len();
                    if in_dim == 0 || out_dim == 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: dense dimensions must be positive"
                        )));
                    }
                    cur = Shape::Flat(out_dim);
                    LayerParams::dense(in_dim, out_dim)
                }
                LayerSpec::SoftmaxCe => {
                    if i + 1 != self.layers.len() {
                        return Err(Error::Config(format!(
                            "layer {i}: softmax-ce must be the final layer"
                        )));
                    }
                    LayerParams::softmax_ce()
                }
            };
            layers.push(layer);
        }
        let mut model = Model::new(layers);
        for layer in &mut model.layers {
            if !layer.kind.is_parameterized() {
                continue;
            }
            let r = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in layer.weights.data_mut() {
                *w = rng.gen_range(-r..r);
            }
        }
        Ok(model)
    }
}

/// Per-layer data saved on the forward pass and reused by backward.
enum LayerCache {
    /// The layer's input activation; enough for dense, relu and identity.
    Plain { input: Tensor },
    /// im2col patch rows plus the input spatial dims.
    Conv { input_shape: Vec<usize>, cols: Vec<f64> },
    Pool { input_len: usize, argmax: Vec<u32> },
}

struct ForwardPass {
    caches: Vec<LayerCache>,
    logits: Tensor,
}

fn dim_error(layer: usize, kind: &LayerKind, msg: String) -> Error {
    Error::Dimension {
        layer,
        kind: kind.name().to_string(),
        msg,
    }
}

fn run_forward(model: &Model, batch: &Tensor, keep_caches: bool) -> Result<ForwardPass> {
    let n = batch.batch();
    if n == 0 || batch.len() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut caches = Vec::with_capacity(model.layers.len());
    let mut cur = batch.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Dense { in_dim, out_dim } => {
                let flat = cur.len() / n;
                if flat != in_dim {
                    return Err(dim_error(
                        i,
                        &layer.kind,
                        format!("expected {in_dim} features per example, got {flat} (input shape {:?})", cur.shape()),
                    ));
                }
                let mut out = Tensor::zeros(vec![n, out_dim]);
                ops::dense_forward(
                    cur.data(),
                    n,
                    in_dim,
                    out_dim,
                    layer.weights.data(),
                    layer.bias.as_ref().expect("dense bias").data(),
                    out.data_mut(),
                );
                if keep_caches {
                    caches.push(LayerCache::Plain { input: cur });
                }
                cur = out;
            }
            LayerKind::Conv2d { in_ch, out_ch, kernel } => {
                let shape = cur.shape().to_vec();
                if shape.len() != 4 || shape[1] != in_ch {
                    return Err(dim_error(
                        i,
                        &layer.kind,
                        format!("expected [batch, {in_ch}, h, w], got {:?}", shape),
                    ));
                }
                let (h, w) = (shape[2], shape[3]);
                if kernel > h.min(w) {
                    return Err(dim_error(
                        i,
                        &layer.kind,
                        format!("kernel {kernel} larger than {h}x{w} input"),
                    ));
                }
                let patch = in_ch * kernel * kernel;
                let rows = n * h * w;
                let mut cols = vec![0.0; rows * patch];
                ops::im2col(cur.data(), n, in_ch, h, w, kernel, &mut cols);
                let mut out = Tensor::zeros(vec![n, out_ch, h, w]);
                let mut out_rows = vec![0.0; rows * out_ch];
                ops::conv_forward_from_cols(
                    &cols,
                    n,
                    out_ch,
                    h,
                    w,
                    patch,
                    layer.weights.data(),
                    layer.bias.as_ref().expect("conv bias").data(),
                    out.data_mut(),
                    &mut out_rows,
                );
                if keep_caches {
                    caches.push(LayerCache::Conv { input_shape: shape, cols });
                }
                cur = out;
            }
            LayerKind::MaxPool => {
                let shape = cur.shape().to_vec();
                if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
                    return Err(dim_error(
                        i,
                        &layer.kind,
                        format!("expected [batch, c, h>=2, w>=2], got {:?}", shape),
                    ));
                }
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Tensor::zeros(vec![n, c, oh, ow]);
                let mut argmax = vec![0u32; n * c * oh * ow];
                ops::maxpool_forward(cur.data(), n, c, h, w, out.data_mut(), &mut argmax);
                if keep_caches {
                    caches.push(LayerCache::Pool { input_len: cur.len(), argmax });
                }
                cur = out;
            }
            LayerKind::Relu => {
                let mut out = Tensor::zeros(cur.shape().to_vec());
                ops::relu_forward(cur.data(), out.data_mut());
                if keep_caches {
                    caches.push(LayerCache::Plain { input: cur });
                }
                cur = out;
            }
            LayerKind::SoftmaxCe => {
                // identity here; the loss head is applied by loss_and_grad
                if keep_caches {
                    caches.push(LayerCache::Plain { input: Tensor::empty() });
                }
            }
        }
    }
    let flat = cur.len() / n;
    let logits = cur.reshaped(vec![n, flat]);
    Ok(ForwardPass { caches, logits })
}

/// Runs the model on a batch and returns per-example class scores
/// (pre-softmax logits) of shape `[batch, classes]`. Pure in the model.
pub fn forward(model: &Model, batch: &Tensor) -> Result<Tensor> {
    run_forward(model, batch, false).map(|p| p.logits)
}

fn run_backward(model: &mut Model, caches: Vec<LayerCache>, dlogits: Tensor) {
    let mut grad = dlogits;
    for (layer, cache) in model.layers.iter_mut().zip(caches).rev() {
        match (&layer.kind, cache) {
            (LayerKind::SoftmaxCe, _) => {}
            (&LayerKind::Dense { in_dim, out_dim }, LayerCache::Plain { input }) => {
                let n = input.batch();
                let mut dx = Tensor::zeros(input.shape().to_vec());
                ops::dense_backward(
                    input.data(),
                    layer.weights.data(),
                    grad.data(),
                    n,
                    in_dim,
                    out_dim,
                    layer.grad_weights.data_mut(),
                    layer.grad_bias.as_mut().expect("dense bias").data_mut(),
                    dx.data_mut(),
                );
                grad = dx;
            }
            (&LayerKind::Conv2d { in_ch, out_ch, kernel }, LayerCache::Conv { input_shape, cols }) => {
                let (n, h, w) = (input_shape[0], input_shape[2], input_shape[3]);
                let patch = in_ch * kernel * kernel;
                let rows = n * h * w;
                let mut dcols = vec![0.0; rows * patch];
                let mut dy_rows = vec![0.0; rows * out_ch];
                ops::conv_backward(
                    &cols,
                    layer.weights.data(),
                    grad.data(),
                    n,
                    out_ch,
                    h,
                    w,
                    patch,
                    layer.grad_weights.data_mut(),
                    layer.grad_bias.as_mut().expect("conv bias").data_mut(),
                    &mut dcols,
                    &mut dy_rows,
                );
                let mut dx = Tensor::zeros(input_shape.clone());
                ops::col2im_add(&dcols, n, in_ch, h, w, kernel, dx.data_mut());
                grad = dx;
            }
            (LayerKind::MaxPool, LayerCache::Pool { input_len, argmax }) => {
                let mut dx = vec![0.0; input_len];
                ops::maxpool_backward(grad.data(), &argmax, &mut dx);
                grad = Tensor::new(vec![input_len], dx);
            }
            (LayerKind::Relu, LayerCache::Plain { input }) => {
                let mut dx = Tensor::zeros(input.shape().to_vec());
                ops::relu_backward(input.data(), grad.data(), dx.data_mut());
                grad = dx;
            }
            _ => unreachable!("cache kind mismatch"),
        }
    }
}

fn check_labels(labels: &Tensor, n: usize, classes: usize) -> Result<Vec<usize>> {
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    labels
        .data()
        .iter()
        .map(|&l| {
            if l.fract() != 0.0 || l < 0.0 || l >= classes as f64 {
                Err(Error::InvalidInput(format!(
                    "label {l} outside [0, {classes})"
                )))
            } else {
                Ok(l as usize)
            }
        })
        .collect()
}

/// Mean softmax cross-entropy over the batch; fills every parameterized
/// layer's gradient buffers (overwriting previous contents). Also returns
/// the logits so callers can track batch accuracy without a second pass.
pub fn loss_and_grad_with_logits(
    model: &mut Model,
    batch: &Tensor,
    labels: &Tensor,
) -> Result<(f64, Tensor)> {
    let pass = run_forward(model, batch, true)?;
    let n = pass.logits.batch();
    let classes = pass.logits.len() / n;
    let label_idx = check_labels(labels, n, classes)?;
    let mut dlogits = Tensor::zeros(vec![n, classes]);
    let loss = ops::softmax_ce(pass.logits.data(), &label_idx, n, classes, dlogits.data_mut());
    run_backward(model, pass.caches, dlogits);
    Ok((loss, pass.logits))
}

/// See [`loss_and_grad_with_logits`]; returns only the loss.
pub fn loss_and_grad(model: &mut Model, batch: &Tensor, labels: &Tensor) -> Result<f64> {
    loss_and_grad_with_logits(model, batch, labels).map(|(l, _)| l)
}
