use crate::error::{Error, Result};
use crate::tensor_io::Tensor;

/// Row-major `[rows, cols, dim]` feature grid held at double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        FeatureMap {
            rows,
            cols,
            dim,
            data: vec![0.0; rows * cols * dim],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [rows, cols, dim] => Ok(FeatureMap {
                rows,
                cols,
                dim,
                data: t.to_f64_vec(),
            }),
            ref d => Err(Error::Shape(format!("feature tensor must be [H, W, d], got {d:?}"))),
        }
    }

    pub fn to_tensor_f32(&self) -> Tensor {
        let data = self.data.iter().map(|&x| x as f32).collect();
        Tensor::from_f32(vec![self.rows, self.cols, self.dim], data).expect("consistent shape")
    }

    pub fn to_tensor_f64(&self) -> Tensor {
        Tensor::from_f64(vec![self.rows, self.cols, self.dim], self.data.clone()).expect("consistent shape")
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.data[index * d..(index + 1) * d]
    }
}
