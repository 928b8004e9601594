use crate::error::{GraphError, Result};
use crate::scalar::Real;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(GraphError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Interprets the tensor as `N x C x H x W`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(GraphError::InvalidShape {
                op: "dims4",
                shape: self.shape.clone(),
                reason: "expected a 4-D NCHW tensor".into(),
            }),
        }
    }

    /// First element; meant for `[1]`-shaped results.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }

    /// Slice of one batch item of an NCHW tensor as a new `1 x C x H x W` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let (bn, c, h, w) = self.dims4()?;
        if n >= bn {
            return Err(GraphError::InvalidShape {
                op: "batch_item",
                shape: self.shape.clone(),
                reason: format!("index {n} out of range"),
            });
        }
        let plane = c * h * w;
        Ok(Self { shape: vec![1, c, h, w], data: self.data[n * plane..(n + 1) * plane].to_vec() })
    }

    /// Stacks equally shaped `1 x C x H x W` tensors along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| GraphError::InvalidShape {
            op: "stack_batch",
            shape: vec![],
            reason: "no tensors to stack".into(),
        })?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            let (n, ..) = t.dims4()?;
            if t.shape[1..] != first.shape[1..] {
                return Err(GraphError::ShapeMismatch {
                    op: "stack_batch",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            debug_assert!(n >= 1);
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (c * h * w);
        Ok(Self { shape: vec![n, c, h, w], data })
    }
}
