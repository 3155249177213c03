//! Dense row-major tensors plus the image/latent newtypes.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidConfig(alloc::format!(
                "tensor of shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        debug_assert_eq!(self.shape.len(), 4);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a - *b).abs())
                .fold(T::zero(), T::max),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Converts element type, e.g. `f32` training weights to `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Slices out samples `[start, start + count)` along the leading axis.
    pub fn narrow_batch(&self, start: usize, count: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor {
            shape,
            data: self.data[start * per..(start + count) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the leading axis.
    pub fn cat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(&first.shape, &p.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }
}

/// Batch of images `(N, C, H, W)`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T>(Tensor<T>);

impl<T: Real> ImageBatch<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(Error::InvalidConfig(alloc::format!(
                "image batch must be rank 4, got shape {:?}",
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::NonFinite {
                what: "image batch entry".into(),
            });
        }
        Ok(ImageBatch(tensor))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.shape()[0]
    }

    /// Checks the `(C, H, W)` part of the shape.
    pub fn expect_image_shape(&self, channels: usize, size: usize) -> Result<()> {
        let (_, c, h, w) = self.0.dims4();
        if (c, h, w) != (channels, size, size) {
            let mut expected = self.0.shape().to_vec();
            expected[1..].copy_from_slice(&[channels, size, size]);
            return Err(Error::shape(&expected, self.0.shape()));
        }
        Ok(())
    }
}

impl<T> Deref for ImageBatch<T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Encoder output `(N, C_latent, H / stride, W / stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T>(pub(crate) Tensor<T>);

impl<T: Real> LatentCode<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(Error::InvalidConfig(alloc::format!(
                "latent code must be rank 4, got shape {:?}",
                tensor.shape()
            )));
        }
        Ok(LatentCode(tensor))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

impl<T> Deref for LatentCode<T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        &self.0
    }
}

/// A domain id together with its one-hot encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainLabel {
    id: usize,
    n_domains: usize,
}

impl DomainLabel {
    pub fn new(id: usize, n_domains: usize) -> Result<Self> {
        if id >= n_domains {
            return Err(Error::InvalidLabel {
                label: id,
                n_domains,
            });
        }
        Ok(DomainLabel { id, n_domains })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn one_hot<T: Real>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.n_domains];
        v[self.id] = T::one();
        v
    }
}
