use std::fmt;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Error, Result};

/// Dense row-major n-dimensional array.
///
/// The buffer is reference counted; cloning a tensor is cheap and writes go
/// through copy-on-write.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
}

pub fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {dims:?}")));
        }
        if numel(&dims) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {} values, got {}", numel(&dims), data.len()),
            ));
        }
        Ok(Self {
            dims,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose shape has already been validated by the caller.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&dims), data.len());
        Self {
            dims,
            data: Arc::new(data),
        }
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        let n = numel(&dims);
        Self::from_parts(dims, vec![value; n])
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let dims = dims.into();
        let data = (0..numel(&dims)).map(f).collect();
        Self::from_parts(dims, data)
    }

    pub fn from_f64(dims: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| T::from_f64(v)).collect())
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

    /// Mutable access, cloning the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.dims)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        let mut stride = 1;
        for (i, &d) in index.iter().zip(&self.dims).rev() {
            debug_assert!(*i < d);
            off += i * stride;
            stride *= d;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Same buffer viewed with different dims.
    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if numel(&dims) != self.numel() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.dims, dims),
            ));
        }
        Ok(Self {
            dims,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite when dims differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of dims and every value.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", std::any::type_name::<T>(), self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<f32>::from_fn([2, 3, 4], |i| i as f32);
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.offset(&[0, 1, 0]), 4);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        let t = Tensor::<f32>::zeros([2, 3]);
        assert!(t.reshape([4, 2]).is_err());
        assert_eq!(t.reshape([3, 2]).unwrap().dims(), &[3, 2]);
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::<f32>::zeros([4]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }
}
