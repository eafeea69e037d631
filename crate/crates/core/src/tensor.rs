use crate::error::Result;
use crate::matrix::Matrix;
use crate::scalar::Real;
use crate::tensorstore::{matrix_dims, DType, TensorRecord};

/// Decoded tensor values in analysis precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_record(rec: &TensorRecord) -> Self {
        Self {
            shape: rec.shape().to_vec(),
            data: rec.values(),
        }
    }

    pub fn to_record(&self, name: &str, dtype: DType) -> Result<TensorRecord> {
        TensorRecord::from_values(name, dtype, self.shape.clone(), &self.data)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Matrix view (rank-1 becomes a column).
    pub fn to_matrix(&self, name: &str) -> Result<Matrix<T>> {
        let (r, c) = matrix_dims(name, &self.shape)?;
        Ok(Matrix::from_vec(r, c, self.data.clone()))
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }
}
