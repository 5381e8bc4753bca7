//! Small bridges between [`Tensor`] and `nalgebra` matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::tensor::Tensor;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Row-major `[r, c]` tensor to a matrix.
pub fn to_matrix(t: &Tensor) -> Matrix {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn from_matrix(m: &Matrix) -> Tensor {
    let data: Vec<f64> = m.transpose().as_slice().to_vec();
    Tensor::from_parts(vec![m.nrows(), m.ncols()], data)
}

pub fn vector_tensor(v: &Vector) -> Result<Tensor> {
    Tensor::vector(v.as_slice().to_vec())
}

/// `(m + mᵀ) / 2`
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Tiles `v` into an `[n, len]` tensor.
pub fn repeat_rows(v: &Vector, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * v.len());
    for _ in 0..n {
        data.extend_from_slice(v.as_slice());
    }
    Tensor::from_parts(vec![n, v.len()], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_matrix_round_trip() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let m = to_matrix(&t);
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(from_matrix(&m), t);
    }
}
