//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Values are `f64` throughout. A [`Graph`] records operations over
//! [`Var`] handles; parameters live in a [`ParamStore`] and are referenced
//! from the graph without copying, so large embedding tables are cheap to
//! use in many small graphs.

mod graph;
mod gradcheck;
mod params;

pub use gradcheck::{
    check_graph_gradients, finite_diff_check, sample_coordinates, Coordinate, GradCheckEntry,
    GradCheckReport,
};
pub use graph::{Dims, Graph, Var};
pub use params::{Gradients, Param, ParamId, ParamStore};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// A dense tensor of rank 0, 1 or 2 stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            bail!(Dimension, "rank {} tensors are not supported", shape.len());
        }
        if shape.contains(&0) {
            bail!(Dimension, "shape {:?} has a zero extent", shape);
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            bail!(
                Dimension,
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized tensor");
        Self { shape: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Shape viewed as a matrix: scalars are 1×1 and vectors a single row.
    pub fn dims(&self) -> Dims {
        match self.shape.as_slice() {
            [] => Dims::new(1, 1),
            [n] => Dims::new(1, *n),
            [r, c] => Dims::new(*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let d = self.dims();
        self.data[row * d.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.dims().cols;
        &self.data[row * c..(row + 1) * c]
    }
}


/// Rotary rotation of one row in place.
pub(crate) fn rotate_in_place(row: &mut [f64], position: usize, base: f64) {
    graph::rotate(row, position, base, false);
}
