use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` so that element
/// `(o, i, j)` lives at `(o * extent + i) * inner + j`.
pub(crate) fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::ShapeMismatch {
                op: "index",
                lhs: self.shape.clone(),
                rhs: index.to_vec(),
            });
        }
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "index",
                    index: i,
                    limit: n,
                });
            }
            off = off * n + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Converts to another scalar precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// `(x - mean) / (std + eps)` along `axis`, with population standard deviation.
    pub fn standardize(&self, axis: usize, eps: T) -> Result<Self> {
        Ok(standardize_with_stats(self, axis, eps)?.0)
    }
}

/// Standardizes along `axis` and also returns the centered values and the
/// per-lane standard deviations (laid out as `[outer * inner]`).
pub(crate) fn standardize_with_stats<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (outer, n, inner) = axis_layout("standardize", x.shape(), axis)?;
    if n == 0 {
        return Err(Error::invalid("standardize", "zero-extent axis"));
    }
    if eps < T::zero() {
        return Err(Error::invalid("standardize", "eps must be non-negative"));
    }
    let nf = T::from_usize(n).unwrap();
    let mut centered = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut sigmas = vec![T::zero(); outer * inner];
    let data = x.data();
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let mean = (0..n).map(|i| data[at(i)]).sum::<T>() / nf;
            let var = (0..n)
                .map(|i| {
                    let d = data[at(i)] - mean;
                    d * d
                })
                .sum::<T>()
                / nf;
            let sigma = var.sqrt();
            sigmas[o * inner + j] = sigma;
            let denom = sigma + eps;
            for i in 0..n {
                let d = data[at(i)] - mean;
                centered[at(i)] = d;
                // A constant lane has d == 0 exactly; keep it at zero even when eps == 0.
                out[at(i)] = if d == T::zero() { T::zero() } else { d / denom };
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((Tensor::new(shape.clone(), out)?, centered, sigmas))
}
