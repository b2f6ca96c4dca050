use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// Values are immutable once an op has produced them; the graph owns the
/// tensors it records and hands out copies.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| S::of(StandardNormal.sample(rng)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let dist = Uniform::new(-bound, bound);
        let data = (0..n).map(|_| S::of(dist.sample(rng))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
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

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    /// Euclidean norm accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Items `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or(TensorError::InvalidShape {
            op: "slice_outer",
            msg: "rank-0 tensor has no leading axis".into(),
        })?;
        if start > end || end > lead {
            return Err(TensorError::InvalidShape {
                op: "slice_outer",
                msg: format!("range {start}..{end} outside leading dim {lead}"),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Gathers the given indices along the leading axis.
    pub fn select_outer(&self, indices: &[usize]) -> Result<Self> {
        let lead = self.shape.first().copied().unwrap_or(0);
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= lead {
                return Err(TensorError::InvalidShape {
                    op: "select_outer",
                    msg: format!("index {i} outside leading dim {lead}"),
                });
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Stacks tensors of identical shape `[1, ...]` or `[k, ...]` along the leading axis.
    pub fn concat_outer(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat_outer",
            msg: "no parts".into(),
        })?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_outer",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self { shape, data })
    }

    pub fn clamp(&self, lo: S, hi: S) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }
}
