//! A small convolutional-autoencoder core for compressing GAF matrices.
//!
//! The network is a stack of 3×3 stride-2 convolution layers: an encoder of
//! strided convolutions that halve the spatial size while widening channels,
//! mirrored by a decoder of transposed convolutions that double it back.
//! A 288×288 input contracts through 144→72→36→18 to a 9×9×128 bottleneck;
//! averaging that bottleneck over channels and flattening yields the length-81
//! feature vector used for clustering. Training minimizes the summed squared
//! reconstruction error with momentum SGD, deterministically for a fixed seed.

mod conv;
pub mod tensor;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::gaf::GafMatrix;
use conv::{col2im, im2col, matmul, matmul_abt, matmul_atb, out_len, pad_begin};
pub use tensor::Tensor;

pub const KERNEL_SIZE: usize = 3;
pub const STRIDE: usize = 2;
/// Spatial side of the encoder output; 288-inputs reach it after 5 halvings.
pub const BOTTLENECK_SPATIAL: usize = 9;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralNetError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("input size {size} is not {BOTTLENECK_SPATIAL}·2^depth for any depth ≥ 1")]
    UnsupportedInputSize { size: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("bad checkpoint: {reason}")]
    BadCheckpoint { reason: String },
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn shape_mismatch(expected: String, found: &[usize]) -> NeuralNetError {
    NeuralNetError::ShapeMismatch {
        expected,
        found: shape_string(found),
    }
}

/// Pointwise nonlinearity applied after bias. Derivatives are recoverable
/// from the activation output alone, which is all backprop stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// max(z, 0.01·z); keeps gradients alive on the negative side.
    LeakyRelu,
    /// Hyperbolic tangent; used on the decoder output whose targets live in [−1, 1].
    Tanh,
    /// No-op, for tests and diagnostics.
    Identity,
}

impl Activation {
    fn apply(self, values: &mut [f64]) {
        match self {
            Activation::LeakyRelu => {
                for v in values {
                    if *v < 0.0 {
                        *v *= 0.01;
                    }
                }
            }
            Activation::Tanh => {
                for v in values {
                    *v = v.tanh();
                }
            }
            Activation::Identity => {}
        }
    }

    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.01
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Whether a layer contracts (strided convolution) or expands (transposed
/// convolution) the spatial grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDirection {
    /// Output spatial size = ⌈input/2⌉.
    Forward,
    /// Output spatial size = 2·input.
    Transposed,
}

/// One 3×3 stride-2 convolution layer with bias and activation.
///
/// Kernels are stored row-major as out_channels × in_channels × 3 × 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    direction: LayerDirection,
    activation: Activation,
    kernels: Vec<f64>,
    bias: Vec<f64>,
}

/// Gradients produced by one layer's backward pass.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub input: Tensor,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    /// Fresh layer with uniform init in ±√(6/(fan_in+fan_out)) and zero bias.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        direction: LayerDirection,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let taps = KERNEL_SIZE * KERNEL_SIZE;
        let fan_in = in_channels * taps;
        let fan_out = out_channels * taps;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let kernels = (0..out_channels * in_channels * taps)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        ConvLayer {
            in_channels,
            out_channels,
            direction,
            activation,
            kernels,
            bias: vec![0.0; out_channels],
        }
    }

    /// Layer from explicit weights; kernel length must be
    /// out_channels × in_channels × 9 and bias length out_channels.
    pub fn from_parts(
        in_channels: usize,
        out_channels: usize,
        direction: LayerDirection,
        activation: Activation,
        kernels: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, NeuralNetError> {
        let expected = out_channels * in_channels * KERNEL_SIZE * KERNEL_SIZE;
        if kernels.len() != expected {
            return Err(shape_mismatch(
                format!("{expected} kernel weights"),
                &[kernels.len()],
            ));
        }
        if bias.len() != out_channels {
            return Err(shape_mismatch(
                format!("{out_channels} biases"),
                &[bias.len()],
            ));
        }
        Ok(ConvLayer {
            in_channels,
            out_channels,
            direction,
            activation,
            kernels,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn direction(&self) -> LayerDirection {
        self.direction
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn kernels(&self) -> &[f64] {
        &self.kernels
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn kernels_mut(&mut self) -> &mut [f64] {
        &mut self.kernels
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    fn spatial_out(&self, h: usize, w: usize) -> (usize, usize) {
        match self.direction {
            LayerDirection::Forward => (out_len(h), out_len(w)),
            LayerDirection::Transposed => (h * STRIDE, w * STRIDE),
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize), NeuralNetError> {
        let shape = input.shape();
        if shape.len() != 3 || shape[0] != self.in_channels || shape[1] == 0 || shape[2] == 0 {
            return Err(shape_mismatch(
                format!("{}xHxW with H,W ≥ 1", self.in_channels),
                shape,
            ));
        }
        Ok((shape[1], shape[2]))
    }

    /// Kernels rearranged for the scatter paths: (out_ch·9) × in_ch.
    fn scatter_layout(&self) -> Vec<f64> {
        let taps = KERNEL_SIZE * KERNEL_SIZE;
        let (ic, oc) = (self.in_channels, self.out_channels);
        let mut w = vec![0.0; oc * taps * ic];
        for o in 0..oc {
            for c in 0..ic {
                for t in 0..taps {
                    w[(o * taps + t) * ic + c] = self.kernels[(o * ic + c) * taps + t];
                }
            }
        }
        w
    }

    fn scatter_layout_to_kernels(&self, wsc: &[f64]) -> Vec<f64> {
        let taps = KERNEL_SIZE * KERNEL_SIZE;
        let (ic, oc) = (self.in_channels, self.out_channels);
        let mut k = vec![0.0; oc * ic * taps];
        for o in 0..oc {
            for c in 0..ic {
                for t in 0..taps {
                    k[(o * ic + c) * taps + t] = wsc[(o * taps + t) * ic + c];
                }
            }
        }
        k
    }

    /// Applies the layer: (transposed) convolution, bias, activation.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NeuralNetError> {
        let (h, w) = self.check_input(input)?;
        let (oh, ow) = self.spatial_out(h, w);
        let positions = oh * ow;
        let taps = KERNEL_SIZE * KERNEL_SIZE;
        let mut z = match self.direction {
            LayerDirection::Forward => {
                let cols = im2col(
                    input.data(),
                    self.in_channels,
                    h,
                    w,
                    oh,
                    ow,
                    pad_begin(h),
                    pad_begin(w),
                );
                matmul(
                    &self.kernels,
                    &cols,
                    self.out_channels,
                    self.in_channels * taps,
                    positions,
                )
            }
            LayerDirection::Transposed => {
                // Scatter each input cell's kernel onto the doubled grid; the
                // geometry mirrors the strided gather that maps 2n back to n.
                let wsc = self.scatter_layout();
                let cols = matmul(
                    &wsc,
                    input.data(),
                    self.out_channels * taps,
                    self.in_channels,
                    h * w,
                );
                col2im(&cols, self.out_channels, oh, ow, h, w, 0, 0)
            }
        };
        for (oc, chunk) in z.chunks_exact_mut(positions).enumerate() {
            let b = self.bias[oc];
            for v in chunk {
                *v += b;
            }
        }
        self.activation.apply(&mut z);
        Ok(Tensor::new(vec![self.out_channels, oh, ow], z))
    }

    /// Exact gradients of the forward map. `output` must be the tensor the
    /// layer produced for `input`; `upstream` is dLoss/dOutput.
    pub fn backward(
        &self,
        input: &Tensor,
        output: &Tensor,
        upstream: &Tensor,
    ) -> Result<LayerGradients, NeuralNetError> {
        let (h, w) = self.check_input(input)?;
        let (oh, ow) = self.spatial_out(h, w);
        let expected = [self.out_channels, oh, ow];
        if output.shape() != expected {
            return Err(shape_mismatch(shape_string(&expected), output.shape()));
        }
        if upstream.shape() != expected {
            return Err(shape_mismatch(shape_string(&expected), upstream.shape()));
        }

        // Undo the activation: dz = upstream ⊙ act′(z), with act′ read back
        // from the stored outputs.
        let dz: Vec<f64> = upstream
            .data()
            .iter()
            .zip(output.data())
            .map(|(&u, &y)| u * self.activation.derivative_from_output(y))
            .collect();

        let positions = oh * ow;
        let taps = KERNEL_SIZE * KERNEL_SIZE;
        let d_bias: Vec<f64> = dz
            .chunks_exact(positions)
            .map(|chunk| chunk.iter().sum())
            .collect();

        let (d_kernels, d_input) = match self.direction {
            LayerDirection::Forward => {
                let cols = im2col(
                    input.data(),
                    self.in_channels,
                    h,
                    w,
                    oh,
                    ow,
                    pad_begin(h),
                    pad_begin(w),
                );
                let dk = matmul_abt(
                    &dz,
                    &cols,
                    self.out_channels,
                    self.in_channels * taps,
                    positions,
                );
                let dcols = matmul_atb(
                    &self.kernels,
                    &dz,
                    self.out_channels,
                    self.in_channels * taps,
                    positions,
                );
                let dx = col2im(
                    &dcols,
                    self.in_channels,
                    h,
                    w,
                    oh,
                    ow,
                    pad_begin(h),
                    pad_begin(w),
                );
                (dk, dx)
            }
            LayerDirection::Transposed => {
                // The adjoint of a scatter is a gather with the same geometry.
                let dz_cols = im2col(&dz, self.out_channels, oh, ow, h, w, 0, 0);
                let dwsc = matmul_abt(
                    &dz_cols,
                    input.data(),
                    self.out_channels * taps,
                    self.in_channels,
                    h * w,
                );
                let dk = self.scatter_layout_to_kernels(&dwsc);
                let wsc = self.scatter_layout();
                let dx = matmul_atb(
                    &wsc,
                    &dz_cols,
                    self.out_channels * taps,
                    self.in_channels,
                    h * w,
                );
                (dk, dx)
            }
        };

        Ok(LayerGradients {
            input: Tensor::new(vec![self.in_channels, h, w], d_input),
            kernels: d_kernels,
            bias: d_bias,
        })
    }
}

/// Per-layer parameter gradients for one loss evaluation.
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The full autoencoder: encoder layers followed by their mirrored decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    input_size: usize,
    encoder_len: usize,
    layers: Vec<ConvLayer>,
}

fn encoder_depth_for(input_size: usize) -> Option<usize> {
    let mut size = input_size;
    let mut depth = 0;
    while size > BOTTLENECK_SPATIAL && size % 2 == 0 {
        size /= 2;
        depth += 1;
    }
    (size == BOTTLENECK_SPATIAL && depth >= 1).then_some(depth)
}

/// Encoder channel widths: 16 doubling per layer, capped at 128.
fn channel_ramp(depth: usize) -> Vec<usize> {
    (0..depth).map(|i| (16usize << i).min(128)).collect()
}

impl AutoencoderModel {
    /// Builds the architecture for square inputs of side `input_size`, which
    /// must halve down to exactly 9 (288, 144, 72, 36, or 18). Encoder depth
    /// follows from the input size; channels ramp 16→32→… capped at 128, so
    /// 288-inputs get the five-layer 16→32→64→128→128 stack and a 9×9×128
    /// bottleneck. Hidden layers use the leaky rectifier; the final decoder
    /// layer uses tanh to match the [−1, 1] range of GAF entries.
    pub fn new(input_size: usize, seed: u64) -> Result<Self, NeuralNetError> {
        let depth = encoder_depth_for(input_size)
            .ok_or(NeuralNetError::UnsupportedInputSize { size: input_size })?;
        let channels = channel_ramp(depth);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(depth * 2);
        let mut in_ch = 1;
        for &oc in &channels {
            layers.push(ConvLayer::init(
                in_ch,
                oc,
                LayerDirection::Forward,
                Activation::LeakyRelu,
                &mut rng,
            ));
            in_ch = oc;
        }
        for j in 0..depth {
            let last = j + 1 == depth;
            let oc = if last { 1 } else { channels[depth - 2 - j] };
            let act = if last {
                Activation::Tanh
            } else {
                Activation::LeakyRelu
            };
            layers.push(ConvLayer::init(
                in_ch,
                oc,
                LayerDirection::Transposed,
                act,
                &mut rng,
            ));
            in_ch = oc;
        }
        Ok(AutoencoderModel {
            input_size,
            encoder_len: depth,
            layers,
        })
    }

    /// Assembles a model from explicit layers: forward layers first, then an
    /// equal number of transposed layers, single-channel in and out, with a
    /// consistent channel chain and a decoder that restores the input size.
    pub fn from_layers(
        input_size: usize,
        layers: Vec<ConvLayer>,
    ) -> Result<Self, NeuralNetError> {
        let encoder_len = layers
            .iter()
            .take_while(|l| l.direction == LayerDirection::Forward)
            .count();
        if encoder_len == 0 || layers.len() != encoder_len * 2 {
            return Err(NeuralNetError::BadCheckpoint {
                reason: format!(
                    "{} forward layers cannot mirror into {} total",
                    encoder_len,
                    layers.len()
                ),
            });
        }
        if layers[encoder_len..]
            .iter()
            .any(|l| l.direction != LayerDirection::Transposed)
        {
            return Err(NeuralNetError::BadCheckpoint {
                reason: "forward layer after the first transposed layer".to_string(),
            });
        }
        if layers[0].in_channels != 1 || layers[layers.len() - 1].out_channels != 1 {
            return Err(NeuralNetError::BadCheckpoint {
                reason: "model must map a single channel to a single channel".to_string(),
            });
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(NeuralNetError::BadCheckpoint {
                    reason: format!(
                        "channel chain broken: {} feeds {}",
                        pair[0].out_channels, pair[1].in_channels
                    ),
                });
            }
        }
        let mut size = input_size;
        for _ in 0..encoder_len {
            if size == 0 {
                break;
            }
            size = out_len(size);
        }
        let restored = size << encoder_len;
        if input_size == 0 || restored != input_size {
            return Err(NeuralNetError::BadCheckpoint {
                reason: format!(
                    "decoder restores {restored} from input size {input_size}"
                ),
            });
        }
        Ok(AutoencoderModel {
            input_size,
            encoder_len,
            layers,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Mutable kernel and bias slices of layer `i`, for optimizers and tests.
    pub fn layer_params_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let layer = &mut self.layers[i];
        (&mut layer.kernels, &mut layer.bias)
    }

    /// Spatial side of the encoder output.
    pub fn bottleneck_spatial(&self) -> usize {
        let mut size = self.input_size;
        for _ in 0..self.encoder_len {
            size = out_len(size);
        }
        size
    }

    /// Length of the feature vector: bottleneck spatial side squared.
    pub fn feature_len(&self) -> usize {
        let s = self.bottleneck_spatial();
        s * s
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::parameter_count).sum()
    }

    fn check_model_input(&self, input: &Tensor) -> Result<(), NeuralNetError> {
        let expected = [1, self.input_size, self.input_size];
        if input.shape() != expected {
            return Err(shape_mismatch(shape_string(&expected), input.shape()));
        }
        Ok(())
    }

    /// Runs the encoder half only; output is channels × 9 × 9 for supported
    /// input sizes.
    pub fn encode(&self, input: &Tensor) -> Result<Tensor, NeuralNetError> {
        self.check_model_input(input)?;
        let mut cur = input.clone();
        for layer in &self.layers[..self.encoder_len] {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Runs encoder and decoder; output shape equals input shape.
    pub fn reconstruct(&self, input: &Tensor) -> Result<Tensor, NeuralNetError> {
        self.check_model_input(input)?;
        let mut cur = input.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Squared reconstruction error of one example and the exact gradients of
    /// that loss for every layer parameter.
    pub fn loss_gradients(
        &self,
        input: &Tensor,
    ) -> Result<(f64, Vec<ParamGradients>), NeuralNetError> {
        self.check_model_input(input)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            outputs.push(layer.forward(x)?);
        }
        let reconstruction = outputs.last().expect("at least one layer");
        let loss = sum_squared_error(input.data(), reconstruction.data());

        // d/dŷ of Σ(x−ŷ)² is 2(ŷ−x).
        let seed: Vec<f64> = reconstruction
            .data()
            .iter()
            .zip(input.data())
            .map(|(&y, &x)| 2.0 * (y - x))
            .collect();
        let mut upstream = Tensor::new(reconstruction.shape().to_vec(), seed);

        let mut grads: Vec<Option<ParamGradients>> = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let layer_grads = self.layers[i].backward(x, &outputs[i], &upstream)?;
            grads[i] = Some(ParamGradients {
                kernels: layer_grads.kernels,
                bias: layer_grads.bias,
            });
            upstream = layer_grads.input;
        }
        Ok((loss, grads.into_iter().map(Option::unwrap).collect()))
    }
}

fn sum_squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Summed squared reconstruction error over a batch:
/// Σₙ ‖x⁽ⁿ⁾ − g(f(x⁽ⁿ⁾))‖². Empty batches sum to zero.
pub fn reconstruction_loss(
    model: &AutoencoderModel,
    batch: &[Tensor],
) -> Result<f64, NeuralNetError> {
    let mut total = 0.0;
    for x in batch {
        let y = model.reconstruct(x)?;
        total += sum_squared_error(x.data(), y.data());
    }
    Ok(total)
}

/// Training hyperparameters. The paper's pipeline fixes none of these, so the
/// defaults are chosen to train the desk-scale models in this repo reliably.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size applied to the batch-mean per-pixel gradient (the raw
    /// summed-loss gradient divided by batch size × pixel count), which keeps
    /// one value usable across input sizes.
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 1,
        }
    }
}

/// Trains the model in place with mini-batch momentum SGD and returns the
/// per-epoch loss trace (the summed reconstruction error of each example as
/// it was visited, before that batch's update).
///
/// Deterministic for fixed (seed, data, config): the shuffle order is drawn
/// from a seeded generator and per-example gradients are reduced in batch
/// index order even when computed in parallel.
pub fn train(
    model: &mut AutoencoderModel,
    dataset: &[Tensor],
    config: &TrainConfig,
) -> Result<Vec<f64>, NeuralNetError> {
    if dataset.is_empty() {
        return Err(NeuralNetError::EmptyDataset);
    }
    for x in dataset {
        model.check_model_input(x)?;
    }
    let pixels = (model.input_size * model.input_size) as f64;
    let mut velocity: Vec<ParamGradients> = model
        .layers
        .iter()
        .map(|l| ParamGradients {
            kernels: vec![0.0; l.kernels.len()],
            bias: vec![0.0; l.bias.len()],
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    // Per-example losses are written into dataset slots and summed in index
    // order at epoch end, so the recorded trace does not depend on the
    // shuffle's summation order.
    let mut example_losses = vec![0.0; dataset.len()];

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let results: Vec<(f64, Vec<ParamGradients>)> = batch
                .par_iter()
                .map(|&i| model.loss_gradients(&dataset[i]))
                .collect::<Result<_, _>>()?;

            let mut total: Vec<ParamGradients> = model
                .layers
                .iter()
                .map(|l| ParamGradients {
                    kernels: vec![0.0; l.kernels.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect();
            for (&i, (loss, grads)) in batch.iter().zip(results) {
                example_losses[i] = loss;
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, v) in acc.kernels.iter_mut().zip(&g.kernels) {
                        *a += v;
                    }
                    for (a, v) in acc.bias.iter_mut().zip(&g.bias) {
                        *a += v;
                    }
                }
            }

            let scale = config.learning_rate / (batch.len() as f64 * pixels);
            for (i, g) in total.iter().enumerate() {
                let vel = &mut velocity[i];
                let (kernels, bias) = model.layer_params_mut(i);
                for ((w, v), &grad) in kernels.iter_mut().zip(&mut vel.kernels).zip(&g.kernels) {
                    *v = config.momentum * *v - scale * grad;
                    *w += *v;
                }
                for ((w, v), &grad) in bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
                    *v = config.momentum * *v - scale * grad;
                    *w += *v;
                }
            }
        }
        let epoch_loss: f64 = example_losses.iter().sum();
        if !epoch_loss.is_finite() {
            return Err(NeuralNetError::NonFiniteLoss { epoch });
        }
        trace.push(epoch_loss);
    }
    Ok(trace)
}

/// Encoder output collapsed for clustering: mean across the channel axis,
/// then the spatial grid flattened row-major.
pub fn channel_mean_flatten(t: &Tensor) -> Vec<f64> {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "expected channels × H × W");
    let (ch, positions) = (shape[0], shape[1] * shape[2]);
    let mut out = vec![0.0; positions];
    for c in 0..ch {
        let plane = &t.data()[c * positions..][..positions];
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= ch as f64;
    }
    out
}

/// Runs the encoder on one GAF matrix and pools the bottleneck into the flat
/// feature vector (length 81 for supported input sizes). Decoder parameters
/// never influence the result.
pub fn extract_features(
    model: &AutoencoderModel,
    gaf: &GafMatrix,
) -> Result<Vec<f64>, NeuralNetError> {
    if gaf.size() != model.input_size {
        return Err(shape_mismatch(
            shape_string(&[1, model.input_size, model.input_size]),
            &[1, gaf.size(), gaf.size()],
        ));
    }
    let bottleneck = model.encode(&Tensor::from_gaf(gaf))?;
    Ok(channel_mean_flatten(&bottleneck))
}

/// One road-day's extracted features, tagged with provenance for serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub road_id: String,
    pub date: NaiveDate,
    pub values: Vec<f64>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NPAE";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model: header {magic "NPAE", u32 version, u32 input_size,
/// u32 layer_count}, then per layer {u32 in_ch, u32 out_ch, u8 direction}
/// followed by the kernel weights and biases as little-endian f64.
pub fn save_model(model: &AutoencoderModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.input_size as u32).to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        out.extend_from_slice(&(layer.in_channels as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_channels as u32).to_le_bytes());
        out.push(match layer.direction {
            LayerDirection::Forward => 0,
            LayerDirection::Transposed => 1,
        });
        for v in &layer.kernels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &layer.bias {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralNetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NeuralNetError::BadCheckpoint {
                reason: format!("truncated at byte {}", self.bytes.len()),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, NeuralNetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, NeuralNetError> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NeuralNetError> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Loads a model saved by [`save_model`]. Activations are reassigned by rule
/// (leaky rectifier everywhere, tanh on the final decoder layer), so the file
/// stores only shapes and weights.
pub fn load_model(bytes: &[u8]) -> Result<AutoencoderModel, NeuralNetError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NeuralNetError::BadCheckpoint {
            reason: "bad magic; expected NPAE".to_string(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NeuralNetError::BadCheckpoint {
            reason: format!("unsupported version {version}"),
        });
    }
    let input_size = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    if layer_count == 0 || layer_count > 64 {
        return Err(NeuralNetError::BadCheckpoint {
            reason: format!("implausible layer count {layer_count}"),
        });
    }
    let taps = KERNEL_SIZE * KERNEL_SIZE;
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let in_ch = r.u32()? as usize;
        let out_ch = r.u32()? as usize;
        let direction = match r.u8()? {
            0 => LayerDirection::Forward,
            1 => LayerDirection::Transposed,
            d => {
                return Err(NeuralNetError::BadCheckpoint {
                    reason: format!("unknown layer direction {d}"),
                })
            }
        };
        if in_ch == 0 || out_ch == 0 || in_ch > 4096 || out_ch > 4096 {
            return Err(NeuralNetError::BadCheckpoint {
                reason: format!("implausible channel counts {in_ch}→{out_ch}"),
            });
        }
        let kernels = r.f64s(out_ch * in_ch * taps)?;
        let bias = r.f64s(out_ch)?;
        let activation = if i + 1 == layer_count {
            Activation::Tanh
        } else {
            Activation::LeakyRelu
        };
        layers.push(
            ConvLayer::from_parts(in_ch, out_ch, direction, activation, kernels, bias)
                .expect("lengths enforced by reader"),
        );
    }
    if r.pos != bytes.len() {
        return Err(NeuralNetError::BadCheckpoint {
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    AutoencoderModel::from_layers(input_size, layers)
}
