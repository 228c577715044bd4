//! Dense row-major `f64` arrays with up to four axes (batch, channel, height, width).

use crate::error::{shape_err, DiffError, Result};

/// A dense array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return shape_err("Grid::new", format!("rank must be 1..=4, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return shape_err(
                "Grid::new",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 4, "rank must be 1..=4");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a grid by evaluating `f` at each flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 4, "rank must be 1..=4");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        }
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

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Returns `(n, c, h, w)` for a rank-4 grid.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(DiffError::Shape {
                op: "dims4",
                detail: format!("expected NCHW grid, got {:?}", self.shape),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Grid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies sample `n` of an NCHW grid into a new `1×C×H×W` grid.
    pub fn sample(&self, n: usize) -> Result<Grid> {
        let (bn, c, h, w) = self.dims4()?;
        if n >= bn {
            return shape_err("sample", format!("index {n} out of batch {bn}"));
        }
        let per = c * h * w;
        Grid::new(vec![1, c, h, w], self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Stacks equally shaped `1×C×H×W` grids along the batch axis.
    pub fn stack(items: &[Grid]) -> Result<Grid> {
        let first = match items.first() {
            Some(f) => f,
            None => return shape_err("stack", "no grids to stack"),
        };
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for g in items {
            if g.shape != [1, c, h, w] {
                return shape_err(
                    "stack",
                    format!("expected [1, {c}, {h}, {w}], got {:?}", g.shape),
                );
            }
            data.extend_from_slice(&g.data);
        }
        Grid::new(vec![items.len(), c, h, w], data)
    }
}
