//! Dense row-major tensors and the scalar abstraction shared by the
//! autodiff graph, the model and the codec.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs at `f32`; gradient checks
/// instantiate everything at `f64`.
pub trait Scalar:
    Float + FromPrimitive + AddAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` for row-major strided matrices, where
    /// `a` is `m x k`, `b` is `k x n` and `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }
}

fn check_gemm_bounds(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_bounds(a.len(), m, k, a_strides);
                check_gemm_bounds(b.len(), k, n, b_strides);
                assert!(c.len() >= m * n, "gemm output too small");
                // SAFETY: every operand was bounds-checked against its strides above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense N-dimensional array stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                reason: format!("shape {shape:?} holds {numel} elements, buffer has {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Dimension {
                op: "item",
                reason: format!("expected one element, shape is {:?}", self.shape),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Contiguous slice of the outermost axis: `self[index]`.
    pub fn outer(&self, index: usize) -> Result<Tensor<T>> {
        let (&outer, inner_shape) = self.shape.split_first().ok_or(Error::Dimension {
            op: "outer",
            reason: "scalar tensor has no outer axis".into(),
        })?;
        if index >= outer {
            return Err(Error::Dimension {
                op: "outer",
                reason: format!("index {index} out of range for axis of size {outer}"),
            });
        }
        let inner: usize = inner_shape.iter().product();
        Ok(Tensor {
            shape: inner_shape.to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or(Error::EmptyTensor { op: "stack" })?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &item.shape));
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::EmptyTensor { op: "mean" });
        }
        Ok(self.sum() / T::from_usize(self.data.len()).unwrap())
    }

    /// Sum over the listed axes; the reduced axes are dropped from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let plan = ReducePlan::new(&self.shape, axes)?;
        let mut out = vec![T::zero(); plan.out_numel()];
        for (i, &v) in self.data.iter().enumerate() {
            out[plan.out_index(i)] += v;
        }
        Ok(Tensor {
            shape: plan.out_shape.clone(),
            data: out,
        })
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        if self.data.is_empty() {
            return Err(Error::EmptyTensor { op: "mean" });
        }
        let plan = ReducePlan::new(&self.shape, axes)?;
        let count = T::from_usize(plan.reduced_count).unwrap();
        Ok(self.sum_axes(axes)?.map(|v| v / count))
    }

    /// Maximum value and the row-major index of its first occurrence.
    pub fn max_with_index(&self) -> Result<(T, usize)> {
        max_with_index(&self.data).ok_or(Error::EmptyTensor {
            op: "max_with_index",
        })
    }
}

/// First-occurrence argmax over a slice. NaNs never win.
pub fn max_with_index<T: Float>(values: &[T]) -> Option<(T, usize)> {
    let mut best: Option<(T, usize)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((b, _)) if !(v > b) => {}
            _ if v.is_nan() => {}
            _ => best = Some((v, i)),
        }
    }
    best.or_else(|| values.first().map(|&v| (v, 0)))
}

/// Index bookkeeping for reductions over an arbitrary axis subset.
#[derive(Clone, Debug)]
pub(crate) struct ReducePlan {
    in_shape: Vec<usize>,
    keep: Vec<bool>,
    pub out_shape: Vec<usize>,
    out_strides: Vec<usize>,
    pub reduced_count: usize,
}

impl ReducePlan {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let mut keep = vec![true; shape.len()];
        for &a in axes {
            if a >= shape.len() || !keep[a] {
                return Err(Error::Dimension {
                    op: "reduce",
                    reason: format!("invalid or repeated axis {a} for shape {shape:?}"),
                });
            }
            keep[a] = false;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&keep)
            .filter_map(|(&d, &k)| k.then_some(d))
            .collect();
        // Stride of each input axis inside the output buffer (0 for reduced axes).
        let mut out_strides = vec![0; shape.len()];
        let mut stride = 1;
        for axis in (0..shape.len()).rev() {
            if keep[axis] {
                out_strides[axis] = stride;
                stride *= shape[axis];
            }
        }
        let reduced_count = shape
            .iter()
            .zip(&keep)
            .filter_map(|(&d, &k)| (!k).then_some(d))
            .product();
        Ok(Self {
            in_shape: shape.to_vec(),
            keep,
            out_shape,
            out_strides,
            reduced_count,
        })
    }

    pub fn out_numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn out_index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for axis in (0..self.in_shape.len()).rev() {
            let d = self.in_shape[axis];
            let coord = flat % d;
            flat /= d;
            if self.keep[axis] {
                out += coord * self.out_strides[axis];
            }
        }
        out
    }
}
