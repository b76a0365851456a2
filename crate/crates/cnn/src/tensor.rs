use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{CnnError, Result};

/// Element type of tensors and parameters: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + NumAssign + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}

pub(crate) fn lit<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

/// Dense `(batch, channels, height, width)` array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<F> {
    shape: [usize; 4],
    data: Vec<F>,
}

impl<F: Scalar> Tensor4<F> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(CnnError::Shape(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(CnnError::Shape(format!(
                "{} values do not fill {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> F {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `height * width` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[F] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [F] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Samples `indices` stacked into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(CnnError::Shape(format!(
                    "sample {i} out of range for batch {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Self::from_vec(
            [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        )
    }

    pub fn cast<G: Scalar>(&self) -> Tensor4<G> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| G::from(*v).expect("finite cast"))
                .collect(),
        }
    }
}
