use std::fmt;

use super::Scalar;
use crate::error::{shape_err, Error, Result};

/// Dense row-major array with a fixed shape.
#[derive(Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Array<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Array{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Array{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Invalid("array shape must have at least one dimension".into()));
    }
    if let Some(i) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Invalid(format!("dimension {i} of shape {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Array<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(shape_err(
                "array",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Array { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Array { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Array { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(value: T) -> Self {
        Array { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
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

    /// The single value of a one-element array.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Array { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn into_shape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Array<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Rows of a 2-D (or leading-axis) view, each of `len / dim(0)` values.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    /// Stack equally-shaped arrays along a new leading axis.
    pub fn stack(items: &[&Array<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero arrays".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(items.len() * first.len());
        for (i, a) in items.iter().enumerate() {
            if a.shape != first.shape {
                return Err(shape_err(
                    "stack",
                    format!("item {i} has shape {:?}, expected {:?}", a.shape, first.shape),
                ));
            }
            data.extend_from_slice(&a.data);
        }
        Array::new(&shape, data)
    }
}
