//! Dense row-major tensor of `f64` values.
//!
//! This is deliberately minimal: a shape, a flat buffer, and the seeded
//! initializers the model needs. All differentiable structure lives on the
//! tape ([`crate::tape`]); a `Tensor` is plain storage and is what parameter
//! registries, datasets, and checkpoints hold.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` holds exactly `product(shape)` values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = numel_of(&shape);
        if expected != data.len() {
            return Err(Error::ShapeNumel {
                op: "Tensor::new",
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform on `[lo, hi)`, drawn in flat index order.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = numel_of(&shape);
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    /// Glorot-style uniform init on `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
    ///
    /// For matrices the fans are the two axes. For higher-rank tables the last
    /// axis is the fan-out and everything before it the fan-in, so a
    /// `(steps, nodes, dim)` table is treated as `steps * nodes` rows of
    /// `dim`-wide features.
    pub fn glorot_uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let ndim = shape.len();
        let (fan_in, fan_out) = match ndim {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => (shape[..ndim - 1].iter().product(), shape[ndim - 1]),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(shape, -bound, bound, rng)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }
}

/// Number of elements a shape addresses. The empty shape is a scalar (one element).
pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Broadcast two shapes under right-aligned rules: missing axes count as 1,
/// and a size-1 axis stretches to match the other side.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                left: a.to_vec(),
                right: b.to_vec(),
            });
        };
    }
    Ok(out)
}
