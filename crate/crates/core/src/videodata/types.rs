use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense displacement field in pixels, stored as a `[2, H, W]` tensor with
/// `u` (horizontal) in channel 0 and `v` (vertical) in channel 1.
///
/// A flow is defined on the grid of the frame it is used to reconstruct:
/// sampling the source frame at `p + flow(p)` aligns it with that grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    field: Tensor<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            field: Tensor::zeros(&[2, height, width]),
        }
    }

    pub fn constant(height: usize, width: usize, u: T, v: T) -> Self {
        let n = height * width;
        let mut data = vec![u; 2 * n];
        data[n..].iter_mut().for_each(|x| *x = v);
        Self {
            field: Tensor::from_vec(&[2, height, width], data).unwrap(),
        }
    }

    pub fn from_uv(height: usize, width: usize, u: Vec<T>, v: Vec<T>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::shape(format!(
                "flow planes must hold {height}x{width} values"
            )));
        }
        let mut data = u;
        data.extend(v);
        let field = Tensor::from_vec(&[2, height, width], data)?;
        Self::from_tensor(field)
    }

    pub fn from_tensor(field: Tensor<T>) -> Result<Self> {
        if field.shape().len() != 3 || field.shape()[0] != 2 {
            return Err(Error::shape(format!(
                "flow tensor must be [2,H,W], got {:?}",
                field.shape()
            )));
        }
        if !field.all_finite() {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self { field })
    }

    pub fn height(&self) -> usize {
        self.field.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.field.shape()[2]
    }

    pub fn u(&self) -> &[T] {
        self.field.channel(0)
    }

    pub fn v(&self) -> &[T] {
        self.field.channel(1)
    }

    pub fn at(&self, y: usize, x: usize) -> (T, T) {
        let i = y * self.width() + x;
        (self.u()[i], self.v()[i])
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.field
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.field
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            field: self.field.cast(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            field: self.field.scale(c),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.field.data().iter().all(|v| v.is_zero())
    }
}

/// Binary traceability map: 1 = traceable, 0 = occluded or motion boundary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl OcclusionMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Builds a mask from arbitrary bytes; non-zero entries become 1.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, traceable: bool) {
        self.data[y * self.width + x] = u8::from(traceable);
    }

    pub fn count_traceable(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Pixel-wise conjunction.
    pub fn and(&self, other: &Self) -> Self {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a & b)
                .collect(),
        }
    }

    /// The mask broadcast over `channels` planes as a 0/1 tensor.
    pub fn to_tensor<T: Scalar>(&self, channels: usize) -> Tensor<T> {
        let plane = self.height * self.width;
        Tensor::from_fn(&[channels, self.height, self.width], |i| {
            if self.data[i % plane] != 0 {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}
