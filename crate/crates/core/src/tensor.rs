//! Dense row-major tensors.
//!
//! This is the only numeric container in the crate. It has no autodiff and
//! no broadcasting beyond scalar-tensor operations; the network module
//! carries its own hand-derived backward pass.

use std::fmt;
use std::iter::Sum;

use thiserror::Error;

/// Floating point element type. Implemented for `f32` (network parameters
/// and activations) and `f64` (analysis and gradient checking).
pub trait Scalar:
    num_like::Float + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = beta * c + a * b` where `c` is a contiguous row-major `m x n`
    /// matrix and `a` (`m x k`), `b` (`k x n`) are addressed by explicit
    /// row and column strides, so transposed operands need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
    );
}

fn check_gemm_bounds(m: usize, k: usize, n: usize, a: (usize, (usize, usize)), b: (usize, (usize, usize)), c: usize) {
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    assert!(m > 0 && k > 0 && n > 0, "gemm with an empty dimension");
    assert!(last(m, k, a.1) < a.0, "gemm: lhs slice too short");
    assert!(last(k, n, b.1) < b.0, "gemm: rhs slice too short");
    assert!(m * n <= c, "gemm: output slice too short");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
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
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_bounds(m, k, n, (a.len(), a_strides), (b.len(), b_strides), c.len());
                // SAFETY: every addressed element was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Float operations used by the network and neuron code.
pub mod num_like {
    use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

    pub trait Float:
        Copy
        + PartialOrd
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
    {
        const ZERO: Self;
        const ONE: Self;
        fn abs(self) -> Self;
        fn sqrt(self) -> Self;
        fn exp(self) -> Self;
        fn atan(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn min(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
    }

    macro_rules! impl_float {
        ($t:ty) => {
            impl Float for $t {
                const ZERO: Self = 0.0;
                const ONE: Self = 1.0;
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn atan(self) -> Self {
                    <$t>::atan(self)
                }
                #[inline]
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                #[inline]
                fn min(self, other: Self) -> Self {
                    <$t>::min(self, other)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
            }
        };
    }

    impl_float!(f32);
    impl_float!(f64);
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(TensorError::Invalid(format!(
            "shape {shape:?} has a zero dimension"
        )));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::ZERO)
    }

    /// Panics on a zero dimension; use [`Tensor::new`] for fallible input.
    pub fn full(shape: &[usize], value: S) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::ONE } else { S::ZERO })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_to<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_scalar(&self, k: S) -> Self {
        self.map(|v| v + k)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max(&self) -> S {
        self.data
            .iter()
            .copied()
            .fold(self.data[0], |acc, v| if v > acc { v } else { acc })
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(TensorError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    };
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::ZERO; m * n];
    S::gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), S::ZERO, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Output spatial size of a valid (unpadded) convolution.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input < kernel {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// Valid 2-D cross-correlation of `input` `[C_in, H, W]` with `kernels`
/// `[C_out, C_in, k, k]`. Bias is the caller's business.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, kernels: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let mismatch = || TensorError::Shape {
        op: "conv2d",
        left: input.shape().to_vec(),
        right: kernels.shape().to_vec(),
    };
    let (&[c_in, h, w], &[c_out, kc_in, kh, kw]) = (input.shape(), kernels.shape()) else {
        return Err(mismatch());
    };
    if kc_in != c_in || kh != kw {
        return Err(mismatch());
    }
    if stride == 0 {
        return Err(TensorError::Invalid("conv2d: stride must be >= 1".into()));
    }
    let k = kh;
    let (Some(oh), Some(ow)) = (conv_output_size(h, k, stride), conv_output_size(w, k, stride))
    else {
        return Err(mismatch());
    };

    let x = input.data();
    let wt = kernels.data();
    let mut out = vec![S::ZERO; c_out * oh * ow];
    for co in 0..c_out {
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * k * k;
            let ibase = ci * h * w;
            for oy in 0..oh {
                let orow = &mut out[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                for ky in 0..k {
                    let irow = ibase + (oy * stride + ky) * w;
                    for kx in 0..k {
                        let wv = wt[kbase + ky * k + kx];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            *o += wv * x[irow + ox * stride + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_conv(input: &Tensor<f64>, kernels: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let [c_in, h, w] = input.shape()[..] else { unreachable!() };
        let [c_out, _, k, _] = kernels.shape()[..] else { unreachable!() };
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        Tensor::from_fn(&[c_out, oh, ow], |idx| {
            let co = idx / (oh * ow);
            let oy = (idx / ow) % oh;
            let ox = idx % ow;
            let mut acc = 0.0;
            for ci in 0..c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        acc += kernels.data()[((co * c_in + ci) * k + ky) * k + kx]
                            * input.data()[(ci * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_geometry_of_first_atari_layer() {
        let input = Tensor::<f32>::zeros(&[4, 84, 84]);
        let kernels = Tensor::<f32>::zeros(&[32, 4, 8, 8]);
        let out = conv2d(&input, &kernels, 4).unwrap();
        assert_eq!(out.shape(), &[32, 20, 20]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_sliding_sum_of_ones() {
        let input = Tensor::<f32>::full(&[1, 3, 3], 1.0);
        let kernels = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let out = conv2d(&input, &kernels, 1).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let input = Tensor::<f32>::zeros(&[3, 8, 8]);
        let kernels = Tensor::<f32>::zeros(&[2, 4, 3, 3]);
        let err = conv2d(&input, &kernels, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 8, 8]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
        let small = Tensor::<f32>::zeros(&[4, 2, 2]);
        assert!(conv2d(&small, &kernels, 1).is_err());
    }

    #[test]
    fn conv_matches_naive_reference_on_random_inputs() {
        let mut rng = Rng::new(11);
        for &(c_in, hw, c_out, k, stride) in
            &[(8, 32, 4, 5, 1), (4, 17, 6, 3, 2), (2, 20, 3, 8, 4), (8, 32, 2, 4, 3)]
        {
            let input = Tensor::from_fn(&[c_in, hw, hw], |_| rng.uniform_range(-1.0, 1.0));
            let kernels = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.uniform_range(-1.0, 1.0));
            let fast = conv2d(&input, &kernels, stride).unwrap();
            let slow = naive_conv(&input, &kernels, stride);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);

        let x = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32 * 0.5 - 1.0);
        assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
        let z = Tensor::<f32>::zeros(&[2, 3]).matmul(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let err = a.matmul(&x).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
    }

    #[test]
    fn elementwise_requires_exact_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[3, 2]);
        assert!(a.add(&b).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let t = Tensor::<f32>::new(vec![3], vec![5.0, 5.0, 1.0]).unwrap();
        assert_eq!(t.argmax(), 0);
    }
}
