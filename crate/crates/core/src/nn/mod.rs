//! Low-level neural-network primitives: 3D convolutions, pooling,
//! normalisation, activations, and dropout, each with an explicit
//! backward pass. Everything is generic over [`El`] so the same kernels
//! run in f32 for training and f64 for finite-difference verification.

pub mod act;
pub mod conv;
pub mod dropout;
pub mod norm;
pub mod pool;
pub mod upconv;

use ndarray::{Array1, Array5};
use rand::Rng;

/// Batched feature map laid out as (batch, channels, depth, height, width).
pub type Feat<T> = Array5<T>;

/// Scalar element type the kernels operate on.
///
/// The GEMM hook dispatches to `matrixmultiply`'s sgemm/dgemm, which are
/// deterministic for fixed shapes regardless of thread count.
pub trait El: ndarray::NdFloat + num_traits::FromPrimitive + rand::distributions::uniform::SampleUniform {
    /// c = alpha * a(m,k) * b(k,n) + beta * c(m,n), with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn elem(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Tag written into checkpoint headers.
    fn dtype_tag() -> &'static str;
}

impl El for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }

    fn elem(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn dtype_tag() -> &'static str {
        "f32"
    }
}

impl El for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }

    fn elem(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn dtype_tag() -> &'static str {
        "f64"
    }
}

/// Concatenate two feature maps along the channel axis into a freshly
/// allocated standard-layout array (the GEMM kernels need contiguity).
pub fn concat_channels<T: El>(a: &Feat<T>, b: &Feat<T>) -> Feat<T> {
    let (n, ca, d, h, w) = a.dim();
    let (n2, cb, d2, h2, w2) = b.dim();
    assert_eq!((n, d, h, w), (n2, d2, h2, w2), "concat spatial shapes");
    let mut out = Feat::zeros((n, ca + cb, d, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., .., ..]).assign(b);
    out
}

/// Convolution parameters; kernel size is implied by the weight shape
/// (c_out, c_in, k, k, k). Supported kernels are 1 and 3 (padding k/2).
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub weight: Array5<T>,
    pub bias: Array1<T>,
}

/// Transposed-convolution parameters, weight shape (c_in, c_out, 2, 2, 2),
/// stride 2 (the only variant the network uses).
#[derive(Debug, Clone)]
pub struct UpConvParams<T> {
    pub weight: Array5<T>,
    pub bias: Array1<T>,
}

/// Instance-norm affine parameters (per channel).
#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: El> ConvParams<T> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            weight: Array5::zeros((c_out, c_in, k, k, k)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

impl<T: El> UpConvParams<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Array5::zeros((c_in, c_out, 2, 2, 2)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

impl<T: El> NormParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}
