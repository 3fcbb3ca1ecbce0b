//! Dense NCHW tensor kernels with analytic backward passes.
//!
//! Every kernel is a pure function of its inputs. Work is split across the
//! batch dimension with rayon; reductions across the batch are always summed
//! in sample order so results do not depend on the thread count.

use std::fmt::Debug;

use thiserror::Error;

mod activation;
mod conv;
mod dropout;
mod linear;
mod norm;
mod pool;
mod shuffle;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use conv::{conv2d, conv2d_backward, conv_output_size, depthwise_conv2d, depthwise_conv2d_backward};
pub use dropout::{dropout, dropout_backward, DropoutKey};
pub use linear::{linear, linear_backward};
pub use norm::{batchnorm2d_backward, batchnorm2d_eval, batchnorm2d_train, BnCache, BN_EPS, BN_MOMENTUM};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward};
pub use shuffle::{channel_shuffle, channel_shuffle_backward, concat_channels, split_channels};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{channels} channels are not divisible into {groups} groups")]
    Divisibility { channels: usize, groups: usize },
    #[error("batch statistics need a non-empty batch")]
    EmptyBatch,
}

pub(crate) fn shape_err(msg: impl Into<String>) -> KernelError {
    KernelError::Shape(msg.into())
}

/// Floating-point element type of a [`Tensor`]; `f32` for training and
/// inference, `f64` for gradient checking.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// `C = alpha * A * B + beta * C` on strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C too short");
                // SAFETY: the asserts above bound every strided access inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor, `(N, C, H, W)` or `(N, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, KernelError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), KernelError> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(format!("expected 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize), KernelError> {
        match self.shape[..] {
            [n, f] => Ok((n, f)),
            _ => Err(shape_err(format!("expected 2-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, KernelError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(Scalar::to_f64(v))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), KernelError> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }
}

/// Gradients of one kernel invocation: the input gradient plus one tensor
/// per parameter, in the order the kernel takes its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad<T> {
    pub grad_input: Tensor<T>,
    pub grad_params: Vec<Tensor<T>>,
}

#[inline]
pub(crate) fn check_finite<T: Scalar>(t: &Tensor<T>, kernel: &str) {
    debug_assert!(t.all_finite(), "{kernel} produced a non-finite value");
    let _ = kernel;
}

/// Sums per-sample partial gradients in sample order.
pub(crate) fn sum_ordered<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Relative error with the `max(1, |a| + |n|)` denominator.
    pub fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / (a.abs() + n.abs()).max(1.0)
    }

    /// Central finite differences of `f` with respect to every element of `x`.
    pub fn numeric_grad(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
        let mut probe = x.clone();
        (0..x.len())
            .map(|i| {
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + h;
                let up = f(&probe);
                probe.data_mut()[i] = orig - h;
                let down = f(&probe);
                probe.data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// `sum(out * weights)`, the scalar probe used by gradient checks.
    pub fn probe(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    }

    pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max)
    }
}
