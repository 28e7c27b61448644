//! From-scratch CNN regressor for dual-plane defocus prediction.
//!
//! The architecture is fixed: three 3x3 same-padding convolutions of widths
//! 16/32/64, each followed by ReLU, batch normalization, and 2x2 average
//! pooling; then flatten, a hidden fully connected layer with ReLU, batch
//! norm, and dropout 0.5, and a linear single-output head. Input is a pair
//! of crops stacked as two channels. Training minimizes mean squared error
//! with Adam.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod tensor;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::child_seed;
use crate::error::{Error, Result};
use crate::pairs::PairDataset;

use layers::{AvgPool2, BatchNorm, Conv2d, Dense, Dropout, Flatten, Layer, Relu};
use tensor::{Scalar, Tensor};

/// Forward-pass mode: train uses batch statistics and live dropout masks,
/// eval uses running statistics and identity dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture and preprocessing constants of a trained model; everything a
/// checkpoint needs to reproduce inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub crop_px: u32,
    pub in_channels: u32,
    pub conv_channels: [u32; 3],
    pub fc_hidden: u32,
    pub dropout_rate: f64,
    /// Labels are trained as `dz / label_scale_nm`.
    pub label_scale_nm: f64,
    /// Input pixel normalization, from train-split statistics only.
    pub input_mean: f32,
    pub input_std: f32,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop_px % 8 != 0 || self.crop_px == 0 {
            return Err(Error::InvalidConfig(format!(
                "crop_px {} must be a positive multiple of 8 for three 2x2 pools",
                self.crop_px
            )));
        }
        if self.in_channels == 0 || self.fc_hidden == 0 {
            return Err(Error::InvalidConfig("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig("dropout_rate must lie in [0, 1)".into()));
        }
        if !(self.label_scale_nm > 0.0) {
            return Err(Error::InvalidConfig("label_scale_nm must be > 0".into()));
        }
        if !(self.input_std > 0.0) {
            return Err(Error::InvalidConfig("input_std must be > 0".into()));
        }
        Ok(())
    }

    /// Spatial side after the three pooling stages.
    pub fn pooled_px(&self) -> usize {
        (self.crop_px / 8) as usize
    }

    /// Width of the flattened feature vector feeding the first dense layer.
    pub fn flatten_len(&self) -> usize {
        self.pooled_px() * self.pooled_px() * self.conv_channels[2] as usize
    }
}

/// The layer stack plus its spec. Generic over the element type: `f32` for
/// training, `f64` for the finite-difference reference path.
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    names: Vec<String>,
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Model<T> {
    /// Build and initialize from a seed. Weight draws happen in a fixed
    /// layer order, so identical seeds give identical parameters.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = spec.conv_channels.map(|c| c as usize);
        let in_ch = spec.in_channels as usize;
        let hidden = spec.fc_hidden as usize;

        let mut names: Vec<String> = Vec::new();
        let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
        let push = |name: &str, layer: Box<dyn Layer<T>>, names: &mut Vec<String>, layers: &mut Vec<Box<dyn Layer<T>>>| {
            names.push(name.to_string());
            layers.push(layer);
        };

        push("conv1", Box::new(Conv2d::new(in_ch, c1, &mut rng)), &mut names, &mut layers);
        push("relu1", Box::new(Relu::new()), &mut names, &mut layers);
        push("bn1", Box::new(BatchNorm::new(c1)), &mut names, &mut layers);
        push("pool1", Box::new(AvgPool2::new()), &mut names, &mut layers);
        push("conv2", Box::new(Conv2d::new(c1, c2, &mut rng)), &mut names, &mut layers);
        push("relu2", Box::new(Relu::new()), &mut names, &mut layers);
        push("bn2", Box::new(BatchNorm::new(c2)), &mut names, &mut layers);
        push("pool2", Box::new(AvgPool2::new()), &mut names, &mut layers);
        push("conv3", Box::new(Conv2d::new(c2, c3, &mut rng)), &mut names, &mut layers);
        push("relu3", Box::new(Relu::new()), &mut names, &mut layers);
        push("bn3", Box::new(BatchNorm::new(c3)), &mut names, &mut layers);
        push("pool3", Box::new(AvgPool2::new()), &mut names, &mut layers);
        push("flatten", Box::new(Flatten::new()), &mut names, &mut layers);
        push("fc1", Box::new(Dense::new(spec.flatten_len(), hidden, &mut rng)), &mut names, &mut layers);
        push("relu_fc", Box::new(Relu::new()), &mut names, &mut layers);
        push("bn_fc", Box::new(BatchNorm::new(hidden)), &mut names, &mut layers);
        push("dropout", Box::new(Dropout::new(spec.dropout_rate)), &mut names, &mut layers);
        push("fc2", Box::new(Dense::new(hidden, 1, &mut rng)), &mut names, &mut layers);

        Ok(Model { spec, names, layers })
    }

    /// Run the stack. `batch` is `[B, in_channels, crop, crop]`, the output
    /// is `[B, 1]` in scaled label units.
    pub fn forward(&mut self, batch: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let b = batch.shape().first().copied().unwrap_or(0);
        let crop = self.spec.crop_px as usize;
        batch.expect_shape(&[b, self.spec.in_channels as usize, crop, crop], "model input")?;
        let mut x = batch;
        for layer in &mut self.layers {
            x = layer.forward(x, mode, rng)?;
        }
        Ok(x)
    }

    /// Forward pass that reports the first layer producing a non-finite
    /// activation, for loss-blowup diagnostics.
    pub fn forward_diagnose(
        &mut self,
        batch: Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, Option<String>)> {
        let mut x = batch;
        let mut first_bad = None;
        for (layer, name) in self.layers.iter_mut().zip(&self.names) {
            x = layer.forward(x, mode, rng)?;
            if first_bad.is_none() && x.first_non_finite().is_some() {
                first_bad = Some(name.clone());
            }
        }
        Ok((x, first_bad))
    }

    /// Reverse-mode pass; `dy` is the loss gradient w.r.t. the output.
    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dy;
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(g)?;
        }
        Ok(g)
    }

    pub fn params(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Batch-norm running statistics in layer order.
    pub fn state(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.state()).collect()
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    /// Dismantle into the bare layer stack (finite-difference harness).
    pub fn into_layers(self) -> Vec<Box<dyn Layer<T>>> {
        self.layers
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Box<dyn Layer<T>>> {
        self.layers.iter_mut()
    }

    /// Predictions in nanometers for normalized input batches (eval mode).
    pub fn predict_nm(&mut self, batch: Tensor<T>) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(batch, Mode::Eval, &mut rng)?;
        let scale = self.spec.label_scale_nm;
        Ok(out.data().iter().map(|v| v.as_f64() * scale).collect())
    }
}

/// Mean squared error `(1/n) sum (z - zhat)^2` and its gradient
/// `2 (zhat - z) / n` with respect to the predictions.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &[T]) -> Result<(f64, Tensor<T>)> {
    if pred.numel() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "mse: {} predictions vs {} targets",
            pred.numel(),
            target.len()
        )));
    }
    let n = target.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![T::zero(); target.len()];
    for ((g, &p), &t) in grad.iter_mut().zip(pred.data()).zip(target) {
        let d = p.as_f64() - t.as_f64();
        loss += d * d;
        *g = T::from_f64(2.0 * d / n);
    }
    Ok((loss / n, Tensor::from_vec(&[target.len(), 1], grad)))
}

/// Assemble a normalized `[B, 2, crop, crop]` input tensor from dataset
/// samples: channel 0 the bottom frame, channel 1 the top frame.
pub fn batch_input<T: Scalar>(
    ds: &PairDataset,
    indices: &[usize],
    mean: f32,
    std: f32,
) -> Tensor<T> {
    let crop = ds.crop_px as usize;
    let frame = crop * crop;
    let mut data = vec![T::zero(); indices.len() * 2 * frame];
    let inv = 1.0 / f64::from(std);
    let mean = f64::from(mean);
    for (slot, &idx) in indices.iter().enumerate() {
        let s = &ds.samples[idx];
        let base = slot * 2 * frame;
        for (o, &p) in data[base..base + frame].iter_mut().zip(&s.bottom_px) {
            *o = T::from_f64((f64::from(p) - mean) * inv);
        }
        for (o, &p) in data[base + frame..base + 2 * frame].iter_mut().zip(&s.top_px) {
            *o = T::from_f64((f64::from(p) - mean) * inv);
        }
    }
    Tensor::from_vec(&[indices.len(), 2, crop, crop], data)
}

/// Scaled training targets for the given sample indices.
pub fn batch_targets<T: Scalar>(ds: &PairDataset, indices: &[usize], label_scale_nm: f64) -> Vec<T> {
    indices
        .iter()
        .map(|&i| T::from_f64(f64::from(ds.samples[i].dz_label_nm) / label_scale_nm))
        .collect()
}

/// Seeds for the independent random streams inside one training run.
pub(crate) fn train_streams(seed: u64) -> (u64, u64, u64) {
    (
        child_seed(seed, 0x1717), // weight init
        child_seed(seed, 0x2323), // epoch shuffling
        child_seed(seed, 0x3131), // dropout masks
    )
}
