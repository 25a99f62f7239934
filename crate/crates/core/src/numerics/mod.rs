//! Dense tensors, reverse-mode differentiation and the kernels the model is
//! built from.
//!
//! Storage is a single row-major buffer per tensor. There are no strided
//! views: reshapes copy, permutes copy. The [`Tape`] records one forward pass
//! and is dropped after [`Tape::backward`].

mod gradcheck;
mod kernels;
mod tape;
pub mod umvt;

use std::fmt::Debug;
use std::iter::Sum;

use crate::error::{shape_err, Error, Result};

pub use gradcheck::{grad_check, grad_check_coords, GradReport};
pub use kernels::{gelu, layer_norm_rows, matmul, softmax, RopeTable};
pub use tape::{Gradients, Tape, Var};

/// Floating point element type. Implemented for `f32` (single) and `f64`
/// (wide) precision.
pub trait Real:
    num_traits::Float + Default + Debug + Sum + Send + Sync + 'static + std::ops::AddAssign
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a * b + beta * c` for row-major `m×k` by `k×n`, with explicit
    /// strides so transposed operands need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        n_stride: isize,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
        rsc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices whose extents cover the strided ranges.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                1,
            );
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
        rsc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices whose extents cover the strided ranges.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                1,
            );
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero extent in dims {dims:?}"));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "dims {dims:?} hold {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { dims: dims.to_vec(), data, requires_grad: false })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let numel = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Self { dims: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = dims.iter().product();
        Self { dims: dims.to_vec(), data: (0..numel).map(&mut f).collect(), requires_grad: false }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other, "zip_map")?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
        })
    }

    pub fn expect_same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    /// Converts element type through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// Surfaces NaN/Inf as an error naming the producing kernel.
    pub fn check_finite(&self, producer: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(producer.to_string()))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// General axis permutation; copies.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.rank() {
            return Err(shape_err!("permutation {perm:?} for rank {}", self.rank()));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(shape_err!("invalid permutation {perm:?}"));
            }
            seen[p] = true;
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let in_strides = strides(&self.dims);
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; perm.len()];
        for _ in 0..self.numel() {
            let src: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
            out.push(self.data[src]);
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out_dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor::new(&out_dims, out)
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Splits `dims` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(shape_err!("axis {axis} out of range for {dims:?}"));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}
