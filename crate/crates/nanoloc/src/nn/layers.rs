//! Differentiable layers.
//!
//! Convolutions are 3x3, stride 1, same padding, lowered to matrix products
//! via im2col. Batch statistics and gradient reductions accumulate in f64
//! regardless of the element type. Every layer caches what its backward pass
//! needs during a train-mode forward and refuses to run backward without a
//! cached forward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::{gemm_nn, gemm_nt, gemm_tn_accumulate, Scalar, Tensor};
use super::Mode;

pub trait Layer<T: Scalar>: Send {
    fn kind(&self) -> &'static str;
    fn forward(&mut self, x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<T>>;
    fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>>;
    /// Trainable parameter tensors, gradients attached.
    fn params(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }
    /// Non-trainable state persisted in checkpoints (batch-norm running stats).
    fn state(&mut self) -> Vec<&mut Vec<T>> {
        Vec::new()
    }
}

/// He-style uniform initialization scaled by fan-in.
fn init_uniform<T: Scalar>(n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64(rng.random_range(-limit..limit)))
        .collect()
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 3x3 same-padding convolution. Weights are stored `[in_ch * 9, out_ch]`
/// so the lowered input multiplies them directly.
pub struct Conv2d<T> {
    in_ch: usize,
    out_ch: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    cache: Option<ConvCache<T>>,
}

struct ConvCache<T> {
    col: Vec<T>,
    batch: usize,
    height: usize,
    width: usize,
}

const KSIZE: usize = 3;
const KK: usize = KSIZE * KSIZE;

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * KK;
        let mut weight = Tensor::from_vec(
            &[fan_in, out_ch],
            init_uniform(fan_in * out_ch, fan_in, rng),
        );
        weight.ensure_grad();
        let mut bias = Tensor::zeros(&[out_ch]);
        bias.ensure_grad();
        Conv2d {
            in_ch,
            out_ch,
            weight,
            bias,
            cache: None,
        }
    }

    /// Lower `x[b, c, :, :]` into rows of 3x3 patches, zero padded.
    fn im2col(&self, x: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
        let k = self.in_ch * KK;
        let mut col = vec![T::zero(); batch * h * w * k];
        let sample_in = self.in_ch * h * w;
        let sample_out = h * w * k;
        rayon::scope(|scope| {
            for (xb, cb) in x.chunks(sample_in).zip(col.chunks_mut(sample_out)) {
                scope.spawn(move |_| {
                    for y in 0..h {
                        for xx in 0..w {
                            let row = (y * w + xx) * k;
                            for c in 0..self.in_ch {
                                let plane = c * h * w;
                                let base = row + c * KK;
                                for ky in 0..KSIZE {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..KSIZE {
                                        let ix = xx as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        cb[base + ky * KSIZE + kx] =
                                            xb[plane + iy as usize * w + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        });
        col
    }

    /// Scatter patch-gradient rows back onto the padded input grid.
    fn col2im(&self, dcol: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
        let k = self.in_ch * KK;
        let mut dx = vec![T::zero(); batch * self.in_ch * h * w];
        let sample_in = self.in_ch * h * w;
        let sample_col = h * w * k;
        rayon::scope(|scope| {
            for (dxb, cb) in dx.chunks_mut(sample_in).zip(dcol.chunks(sample_col)) {
                scope.spawn(move |_| {
                    for y in 0..h {
                        for xx in 0..w {
                            let row = (y * w + xx) * k;
                            for c in 0..self.in_ch {
                                let plane = c * h * w;
                                let base = row + c * KK;
                                for ky in 0..KSIZE {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..KSIZE {
                                        let ix = xx as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let i = plane + iy as usize * w + ix as usize;
                                        dxb[i] = dxb[i] + cb[base + ky * KSIZE + kx];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        });
        dx
    }
}

/// `[rows, ch] -> [b, ch, h, w]` rearrangement (and its inverse) between the
/// lowered matrix orientation and NCHW.
fn rows_to_nchw<T: Scalar>(mat: &[T], batch: usize, ch: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * ch * h * w];
    let hw = h * w;
    rayon::scope(|scope| {
        for (b, ob) in out.chunks_mut(ch * hw).enumerate() {
            let mat = &mat[b * hw * ch..(b + 1) * hw * ch];
            scope.spawn(move |_| {
                for p in 0..hw {
                    let row = p * ch;
                    for c in 0..ch {
                        ob[c * hw + p] = mat[row + c];
                    }
                }
            });
        }
    });
    out
}

fn nchw_to_rows<T: Scalar>(x: &[T], batch: usize, ch: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * ch * h * w];
    let hw = h * w;
    rayon::scope(|scope| {
        for (b, ob) in out.chunks_mut(hw * ch).enumerate() {
            let x = &x[b * ch * hw..(b + 1) * ch * hw];
            scope.spawn(move |_| {
                for p in 0..hw {
                    let row = p * ch;
                    for c in 0..ch {
                        ob[row + c] = x[c * hw + p];
                    }
                }
            });
        }
    });
    out
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn kind(&self) -> &'static str {
        "conv"
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode, _rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "conv expects [B, {}, H, W], got {shape:?}",
                self.in_ch
            )));
        }
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let k = self.in_ch * KK;
        let rows = batch * h * w;

        let col = self.im2col(x.data(), batch, h, w);
        let mut out_mat = vec![T::zero(); rows * self.out_ch];
        gemm_nn(&col, self.weight.data(), &mut out_mat, rows, k, self.out_ch);
        let bias = self.bias.data();
        for row in out_mat.chunks_mut(self.out_ch) {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o = *o + b;
            }
        }
        let out = rows_to_nchw(&out_mat, batch, self.out_ch, h, w);

        self.cache = match mode {
            Mode::Train => Some(ConvCache {
                col,
                batch,
                height: h,
                width: w,
            }),
            Mode::Eval => None,
        };
        Ok(Tensor::from_vec(&[batch, self.out_ch, h, w], out))
    }

    fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::NoCachedForward)?;
        let (batch, h, w) = (cache.batch, cache.height, cache.width);
        let rows = batch * h * w;
        let k = self.in_ch * KK;
        dy.expect_shape(&[batch, self.out_ch, h, w], "conv backward")?;

        let dy_mat = nchw_to_rows(dy.data(), batch, self.out_ch, h, w);

        gemm_tn_accumulate(
            &cache.col,
            &dy_mat,
            self.weight.grad_mut(),
            rows,
            k,
            self.out_ch,
        );
        {
            // Bias gradient: per-channel sums in fixed row order.
            let mut sums = vec![0.0f64; self.out_ch];
            for row in dy_mat.chunks(self.out_ch) {
                for (s, &v) in sums.iter_mut().zip(row) {
                    *s += v.as_f64();
                }
            }
            for (g, s) in self.bias.grad_mut().iter_mut().zip(&sums) {
                *g = *g + T::from_f64(*s);
            }
        }

        let mut dcol = vec![T::zero(); rows * k];
        gemm_nt(&dy_mat, self.weight.data(), &mut dcol, rows, self.out_ch, k);
        let dx = self.col2im(&dcol, batch, h, w);
        Ok(Tensor::from_vec(&[batch, self.in_ch, h, w], dx))
    }

    fn params(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct Relu<T> {
    mask: Option<Vec<bool>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu {
            mask: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, mut x: Tensor<T>, mode: Mode, _rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let mask: Vec<bool> = x.data().iter().map(|v| *v > T::zero()).collect();
        for (v, &keep) in x.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *v = T::zero();
            }
        }
        self.mask = match mode {
            Mode::Train => Some(mask),
            Mode::Eval => None,
        };
        Ok(x)
    }

    fn backward(&mut self, mut dy: Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or(Error::NoCachedForward)?;
        if mask.len() != dy.numel() {
            return Err(Error::ShapeMismatch("relu backward".into()));
        }
        for (v, keep) in dy.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = T::zero();
            }
        }
        Ok(dy)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization. 4D inputs normalize over `(B, H, W)`
/// per channel, 2D inputs over the batch per feature. Running statistics
/// are an exponential moving average used in eval mode.
pub struct BatchNorm<T> {
    channels: usize,
    eps: f64,
    momentum: f64,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Tensor::from_vec(&[channels], vec![T::one(); channels]);
        gamma.ensure_grad();
        let mut beta = Tensor::zeros(&[channels]);
        beta.ensure_grad();
        BatchNorm {
            channels,
            eps: 1e-5,
            momentum: 0.9,
            gamma,
            beta,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    /// `(batch, spatial)` interpretation of a supported input shape.
    fn dims(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match shape {
            [b, c, h, w] if *c == self.channels => Ok((*b, h * w)),
            [b, f] if *f == self.channels => Ok((*b, 1)),
            other => Err(Error::ShapeMismatch(format!(
                "batchnorm over {} channels got {other:?}",
                self.channels
            ))),
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode, _rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let (batch, spatial) = self.dims(&shape)?;
        let n = batch * spatial;
        let stride = self.channels * spatial;
        let data = x.data();

        let mut out = vec![T::zero(); data.len()];
        let mut xhat = vec![T::zero(); data.len()];
        let mut inv_std = vec![0.0f64; self.channels];

        for c in 0..self.channels {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0f64;
                    let mut sumsq = 0.0f64;
                    for b in 0..batch {
                        let base = b * stride + c * spatial;
                        for v in &data[base..base + spatial] {
                            let f = v.as_f64();
                            sum += f;
                            sumsq += f * f;
                        }
                    }
                    let mean = sum / n as f64;
                    let var = (sumsq / n as f64 - mean * mean).max(0.0);
                    let m = self.momentum;
                    self.running_mean[c] =
                        T::from_f64(m * self.running_mean[c].as_f64() + (1.0 - m) * mean);
                    self.running_var[c] =
                        T::from_f64(m * self.running_var[c].as_f64() + (1.0 - m) * var);
                    (mean, var)
                }
                Mode::Eval => (
                    self.running_mean[c].as_f64(),
                    self.running_var[c].as_f64(),
                ),
            };
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = inv;
            let g = self.gamma.data()[c];
            let be = self.beta.data()[c];
            let mean_t = T::from_f64(mean);
            let inv_t = T::from_f64(inv);
            for b in 0..batch {
                let base = b * stride + c * spatial;
                for i in base..base + spatial {
                    let h = (data[i] - mean_t) * inv_t;
                    xhat[i] = h;
                    out[i] = g * h + be;
                }
            }
        }

        self.cache = match mode {
            Mode::Train => Some(BnCache {
                xhat,
                inv_std,
                shape: shape.clone(),
            }),
            Mode::Eval => None,
        };
        Ok(Tensor::from_vec(&shape, out))
    }

    fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::NoCachedForward)?;
        dy.expect_shape(&cache.shape, "batchnorm backward")?;
        let (batch, spatial) = self.dims(&cache.shape)?;
        let n = (batch * spatial) as f64;
        let stride = self.channels * spatial;
        let dyd = dy.data();

        let mut dx = vec![T::zero(); dyd.len()];
        for c in 0..self.channels {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for b in 0..batch {
                let base = b * stride + c * spatial;
                for i in base..base + spatial {
                    let d = dyd[i].as_f64();
                    sum_dy += d;
                    sum_dy_xhat += d * cache.xhat[i].as_f64();
                }
            }
            self.gamma.grad_mut()[c] = self.gamma.grad_mut()[c] + T::from_f64(sum_dy_xhat);
            self.beta.grad_mut()[c] = self.beta.grad_mut()[c] + T::from_f64(sum_dy);

            let g = self.gamma.data()[c].as_f64();
            let scale = g * cache.inv_std[c];
            let mean_dy = sum_dy / n;
            let mean_dy_xhat = sum_dy_xhat / n;
            for b in 0..batch {
                let base = b * stride + c * spatial;
                for i in base..base + spatial {
                    let d = dyd[i].as_f64();
                    let h = cache.xhat[i].as_f64();
                    dx[i] = T::from_f64(scale * (d - mean_dy - h * mean_dy_xhat));
                }
            }
        }
        Ok(Tensor::from_vec(&cache.shape, dx))
    }

    fn params(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn state(&mut self) -> Vec<&mut Vec<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

// ---------------------------------------------------------------------------
// Average pooling
// ---------------------------------------------------------------------------

/// 2x2 average pooling with stride 2; spatial dimensions must be even.
#[derive(Default)]
pub struct AvgPool2<T> {
    cache: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> AvgPool2<T> {
    pub fn new() -> Self {
        AvgPool2 {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for AvgPool2<T> {
    fn kind(&self) -> &'static str {
        "avgpool"
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode, _rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::ShapeMismatch(format!("avgpool got {shape:?}")));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "avgpool needs even spatial dims, got {h}x{w}"
            )));
        }
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let data = x.data();
        let mut out = vec![T::zero(); b * c * h2 * w2];
        let in_plane = h * w;
        let out_plane = h2 * w2;
        rayon::scope(|scope| {
            for (ob, xb) in out
                .chunks_mut(c * out_plane)
                .zip(data.chunks(c * in_plane))
            {
                scope.spawn(move |_| {
                    for ch in 0..c {
                        let xp = &xb[ch * in_plane..(ch + 1) * in_plane];
                        let op = &mut ob[ch * out_plane..(ch + 1) * out_plane];
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let i = 2 * y * w + 2 * xx;
                                op[y * w2 + xx] = (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1])
                                    * quarter;
                            }
                        }
                    }
                });
            }
        });
        self.cache = match mode {
            Mode::Train => Some(shape),
            Mode::Eval => None,
        };
        Ok(Tensor::from_vec(&[b, c, h2, w2], out))
    }

    fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.cache.take().ok_or(Error::NoCachedForward)?;
        let [b, c, h, w] = shape[..] else {
            return Err(Error::ShapeMismatch("avgpool backward".into()));
        };
        let (h2, w2) = (h / 2, w / 2);
        dy.expect_shape(&[b, c, h2, w2], "avgpool backward")?;
        let quarter = T::from_f64(0.25);
        let dyd = dy.data();
        let mut dx = vec![T::zero(); b * c * h * w];
        let in_plane = h * w;
        let out_plane = h2 * w2;
        for bi in 0..b {
            for ch in 0..c {
                let dp = &dyd[(bi * c + ch) * out_plane..(bi * c + ch + 1) * out_plane];
                let xp = &mut dx[(bi * c + ch) * in_plane..(bi * c + ch + 1) * in_plane];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let g = dp[y * w2 + xx] * quarter;
                        let i = 2 * y * w + 2 * xx;
                        xp[i] = g;
                        xp[i + 1] = g;
                        xp[i + w] = g;
                        xp[i + w + 1] = g;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(&shape, dx))
    }
}

// ---------------------------------------------------------------------------
// Flatten
// ---------------------------------------------------------------------------

/// `[B, C, H, W] -> [B, C*H*W]`; NCHW data is already contiguous per sample.
#[derive(Default)]
pub struct Flatten<T> {
    cache: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Flatten<T> {
    pub fn new() -> Self {
        Flatten {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for Flatten<T> {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode, _rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch(format!("flatten got {shape:?}")));
        }
        let b = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.cache = match mode {
            Mode::Train => Some(shape),
            Mode::Eval => None,
        };
        Ok(x.reshaped(&[b, rest]))
    }

    fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.cache.take().ok_or(Error::NoCachedForward)?;
        Ok(dy.reshaped(&shape))
    }
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

pub struct Dense<T> {
    in_dim: usize,
    out_dim: usize,
    pub weight: Tensor<T>, // [in, out]
    pub bias: Tensor<T>,   // [out]
    cache: Option<Vec<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut weight = Tensor::from_vec(
            &[in_dim, out_dim],
            init_uniform(in_dim * out_dim, in_dim, rng),
        );
        weight.ensure_grad();
        let mut bias = Tensor::zeros(&[out_dim]);
        bias.ensure_grad();
        Dense {
            in_dim,
            out_dim,
            weight,
            bias,
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode, _rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let [b, f] = shape[..] else {
            return Err(Error::ShapeMismatch(format!("dense got {shape:?}")));
        };
        if f != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "dense expects width {}, got {f}",
                self.in_dim
            )));
        }
        let mut out = vec![T::zero(); b * self.out_dim];
        gemm_nn(x.data(), self.weight.data(), &mut out, b, f, self.out_dim);
        let bias = self.bias.data();
        for row in out.chunks_mut(self.out_dim) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        self.cache = match mode {
            Mode::Train => Some(x.into_data()),
            Mode::Eval => None,
        };
        Ok(Tensor::from_vec(&[b, self.out_dim], out))
    }

    fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or(Error::NoCachedForward)?;
        let b = x.len() / self.in_dim;
        dy.expect_shape(&[b, self.out_dim], "dense backward")?;

        gemm_tn_accumulate(&x, dy.data(), self.weight.grad_mut(), b, self.in_dim, self.out_dim);
        let mut sums = vec![0.0f64; self.out_dim];
        for row in dy.data().chunks(self.out_dim) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v.as_f64();
            }
        }
        for (g, s) in self.bias.grad_mut().iter_mut().zip(&sums) {
            *g = *g + T::from_f64(*s);
        }

        let mut dx = vec![T::zero(); b * self.in_dim];
        gemm_nt(dy.data(), self.weight.data(), &mut dx, b, self.out_dim, self.in_dim);
        Ok(Tensor::from_vec(&[b, self.in_dim], dx))
    }

    fn params(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: kept activations are scaled by `1/(1-rate)` in train
/// mode so eval mode is an exact identity.
pub struct Dropout<T> {
    rate: f64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate));
        Dropout { rate, mask: None }
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, mut x: Tensor<T>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.mask = None;
                Ok(x)
            }
            Mode::Train => {
                let keep_scale = T::from_f64(1.0 / (1.0 - self.rate));
                let mask: Vec<T> = (0..x.numel())
                    .map(|_| {
                        if rng.random::<f64>() >= self.rate {
                            keep_scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
                    *v = *v * m;
                }
                self.mask = Some(mask);
                Ok(x)
            }
        }
    }

    fn backward(&mut self, mut dy: Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or(Error::NoCachedForward)?;
        if mask.len() != dy.numel() {
            return Err(Error::ShapeMismatch("dropout backward".into()));
        }
        for (v, m) in dy.data_mut().iter_mut().zip(mask) {
            *v = *v * m;
        }
        Ok(dy)
    }
}
