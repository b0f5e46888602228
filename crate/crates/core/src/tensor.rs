use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense channel-major buffer of shape (channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuf<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> TensorBuf<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            shape: [channels, height, width],
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values cannot have shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape[0], self.shape[1], self.shape[2])
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> TensorBuf<U> {
        TensorBuf {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T> TensorBuf<T> {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    /// Number of spatial positions per channel.
    pub fn plane(&self) -> usize {
        self.shape[1] * self.shape[2]
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> &T {
        &self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        let i = (c * self.shape[1] + y) * self.shape[2] + x;
        &mut self.data[i]
    }
}
