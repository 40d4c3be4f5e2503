//! Dense row-major tensors over `f32` or `f64`.
//!
//! Training runs in single precision; gradient checks instantiate the same
//! code paths in double precision through the [`Real`] trait.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type with a matching GEMM kernel.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Sum + Send + Sync + 'static
{
    /// Dtype code written into checkpoint headers.
    const DTYPE_CODE: u8;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {
    const DTYPE_CODE: u8 = 1;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const DTYPE_CODE: u8 = 2;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored row-major as `m x k`, or `k x m` when `trans_a`; likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k <= SMALL_K && !trans_a {
        small_gemm(m, k, n, a, b, trans_b, c, accumulate);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above pin every slice to the extent the strides address.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this inner extent, packing overhead dominates the blocked kernel.
const SMALL_K: usize = 16;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(T::zero());
    }
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        if trans_b {
            for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
                let dot = a_row
                    .iter()
                    .zip(b_row)
                    .fold(T::zero(), |s, (&x, &y)| s + x * y);
                *cv = *cv + dot;
            }
        } else {
            for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = *cv + av * bv;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Construction without validation for internal callers that derive the
    /// shape from existing tensors.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..numel).map(&mut f).collect())
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (untracked) matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        match (self.shape.as_slice(), rhs.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![T::zero(); m * n];
                gemm(m, k, n, &self.data, false, &rhs.data, false, &mut out, false);
                Ok(Tensor::from_parts(vec![m, n], out))
            }
            _ => Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            }),
        }
    }

    /// Row-wise softmax over the last axis, untracked.
    pub fn softmax_last(&self) -> Tensor<T> {
        let d = *self.shape.last().expect("non-empty shape");
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        Tensor::from_parts(self.shape.clone(), out)
    }
}

/// Numerically stable softmax of one contiguous slice.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
