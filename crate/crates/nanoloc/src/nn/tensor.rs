//! Dense tensors and the deterministic matrix-multiply kernels the layers
//! are built on.
//!
//! Work is split across a fixed number of row chunks regardless of how many
//! worker threads exist, and cross-chunk reductions are summed in chunk
//! order, so results are bit-identical from run to run and independent of
//! the thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// Floating-point element type of the network: `f32` for training,
/// `f64` for the finite-difference reference path.
pub trait Scalar:
    ndarray::LinalgScalar + num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// N-dimensional array, row-major, with an optional gradient buffer of the
/// same length (allocated for trainable parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret the shape; element count must be preserved.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(self.numel(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocating it on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        self.ensure_grad();
        self.grad.as_deref_mut().expect("grad allocated")
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )))
        }
    }
}

/// Fixed chunk count for deterministic parallelism.
const CHUNKS: usize = 8;

fn chunk_rows(m: usize) -> usize {
    m.div_ceil(CHUNKS).max(1)
}

/// `out[m, n] = a[m, k] . b[k, n]`, parallel over fixed row chunks of `a`.
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let rows = chunk_rows(m);
    let b_view = ArrayView2::from_shape((k, n), b).expect("b shape");
    rayon::scope(|scope| {
        for (a_chunk, out_chunk) in a.chunks(rows * k).zip(out.chunks_mut(rows * n)) {
            let mc = a_chunk.len() / k;
            scope.spawn(move |_| {
                let a_view = ArrayView2::from_shape((mc, k), a_chunk).expect("a chunk");
                let mut c_view = ArrayViewMut2::from_shape((mc, n), out_chunk).expect("c chunk");
                general_mat_mul(T::one(), &a_view, &b_view, T::zero(), &mut c_view);
            });
        }
    });
}

/// `out[m, n] = a[m, k] . b[n, k]^T`, parallel over fixed row chunks of `a`.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let rows = chunk_rows(m);
    let b_view = ArrayView2::from_shape((n, k), b).expect("b shape");
    let bt = b_view.t();
    rayon::scope(|scope| {
        for (a_chunk, out_chunk) in a.chunks(rows * k).zip(out.chunks_mut(rows * n)) {
            let mc = a_chunk.len() / k;
            let bt = bt.view();
            scope.spawn(move |_| {
                let a_view = ArrayView2::from_shape((mc, k), a_chunk).expect("a chunk");
                let mut c_view = ArrayViewMut2::from_shape((mc, n), out_chunk).expect("c chunk");
                general_mat_mul(T::one(), &a_view, &bt, T::zero(), &mut c_view);
            });
        }
    });
}

/// `out[k, n] += a[m, k]^T . b[m, n]`: the shared-row reduction used for
/// weight gradients. Partial products over fixed row chunks are computed in
/// parallel, then summed sequentially in chunk order.
pub fn gemm_tn_accumulate<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let rows = chunk_rows(m);
    let n_chunks = m.div_ceil(rows);
    let mut partials: Vec<Vec<T>> = vec![vec![T::zero(); k * n]; n_chunks];
    rayon::scope(|scope| {
        for ((a_chunk, b_chunk), partial) in a
            .chunks(rows * k)
            .zip(b.chunks(rows * n))
            .zip(partials.iter_mut())
        {
            let mc = a_chunk.len() / k;
            scope.spawn(move |_| {
                let a_view = ArrayView2::from_shape((mc, k), a_chunk).expect("a chunk");
                let b_view = ArrayView2::from_shape((mc, n), b_chunk).expect("b chunk");
                let mut c_view = ArrayViewMut2::from_shape((k, n), &mut partial[..]).expect("c");
                general_mat_mul(T::one(), &a_view.t(), &b_view, T::zero(), &mut c_view);
            });
        }
    });
    for partial in &partials {
        for (o, &p) in out.iter_mut().zip(partial) {
            *o = *o + p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_variants_match_naive_reference() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 2), (17, 9, 4), (40, 18, 16)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expected = naive_nn(&a, &b, m, k, n);

            let mut out = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut out, m, k, n);
            for (o, e) in out.iter().zip(&expected) {
                assert!((o - e).abs() < 1e-12);
            }

            // a . b^T with b stored transposed.
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut out2 = vec![0.0; m * n];
            gemm_nt(&a, &bt, &mut out2, m, k, n);
            for (o, e) in out2.iter().zip(&expected) {
                assert!((o - e).abs() < 1e-12);
            }

            // a^T . c accumulation.
            let c: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut acc = vec![1.0; k * n];
            gemm_tn_accumulate(&a, &c, &mut acc, m, k, n);
            let mut expected_acc = vec![1.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    for i in 0..m {
                        expected_acc[p * n + j] += a[i * k + p] * c[i * n + j];
                    }
                }
            }
            for (o, e) in acc.iter().zip(&expected_acc) {
                assert!((o - e).abs() < 1e-9, "{o} vs {e}");
            }
        }
    }

    #[test]
    fn gemm_is_deterministic_across_calls() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (129, 37, 23);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out1 = vec![0.0f32; m * n];
        let mut out2 = vec![0.0f32; m * n];
        gemm_nn(&a, &b, &mut out1, m, k, n);
        gemm_nn(&a, &b, &mut out2, m, k, n);
        assert_eq!(out1, out2);
    }

    #[test]
    fn tensor_grad_lifecycle() {
        let mut t: Tensor<f32> = Tensor::zeros(&[2, 3]);
        assert!(t.grad().is_none());
        t.grad_mut()[0] = 5.0;
        assert_eq!(t.grad().unwrap()[0], 5.0);
        t.zero_grad();
        assert_eq!(t.grad().unwrap()[0], 0.0);
        assert_eq!(t.numel(), 6);
    }
}
